#include "bonetrack/autodiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>

namespace bonetrack::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

constexpr double kLogFloor = 1e-12;

void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorKind::Shape, what);
}

template <typename T>
void require_rank(const Tape<T>& tape, Var v, std::size_t rank, const char* op) {
  require(tape.shape(v).size() == rank, std::string(op) + ": expected rank " +
                                            std::to_string(rank) + ", got " +
                                            shape_str(tape.shape(v)));
}

// col[(c * K + k), i] = x[c, i + k - pad], zero outside.
template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t len, std::size_t k_size, T* col) {
  const auto pad = static_cast<std::ptrdiff_t>(k_size / 2);
  const auto l = static_cast<std::ptrdiff_t>(len);
  for (std::size_t c = 0; c < cin; ++c) {
    const T* xr = x + c * len;
    for (std::size_t k = 0; k < k_size; ++k) {
      T* row = col + (c * k_size + k) * len;
      const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - pad;
      // Offsets of a short signal can reach past both ends.
      const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-off, 0, l);
      const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(l - off, lo, l);
      std::fill(row, row + lo, T(0));
      std::copy(xr + lo + off, xr + hi + off, row + lo);
      std::fill(row + hi, row + l, T(0));
    }
  }
}

// Per-thread im2col buffers reused across calls; fresh multi-megabyte
// allocations page-fault on every convolution.
template <typename T>
T* scratch(std::size_t slot, std::size_t n) {
  thread_local std::array<std::vector<T>, 3> bufs;
  auto& b = bufs[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  require(axis < shape.size(), "axis " + std::to_string(axis) + " out of range for " +
                                   shape_str(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}


template <typename T>
void logistic_inplace(T* v, std::size_t n) {
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> a(v, static_cast<Eigen::Index>(n));
  a = a.logistic();
}

struct NoEpilogue {
  template <typename M>
  void operator()(M&) const {}
};

// Shapes are checked by the caller. `epilogue` runs on each [Cout, L] output
// block right after its bias is added, while the block is still in cache.
template <typename T, typename Epilogue>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                       Epilogue epilogue) {
  const std::size_t batch = x.shape[0], cin = x.shape[1], len = x.shape[2];
  const std::size_t cout = w.shape[0], k_size = w.shape[2];
  const std::size_t ck = cin * k_size;
  Tensor<T> out({batch, cout, len});
  ConstMatMap<T> wm(w.data.data(), cout, ck);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(b.data.data(), cout);
  T* col = k_size == 1 ? nullptr : scratch<T>(0, ck * len);
  for (std::size_t n = 0; n < batch; ++n) {
    const T* xn = x.data.data() + n * cin * len;
    if (col != nullptr) im2col(xn, cin, len, k_size, col);
    ConstMatMap<T> cm(col != nullptr ? col : xn, ck, len);
    MatMap<T> om(out.data.data() + n * cout * len, cout, len);
    om.noalias() = wm * cm;
    om.colwise() += bias;
    epilogue(om);
  }
  return out;
}

template <typename T>
void check_conv(const Tape<T>& tape, Var x, Var w, Var b) {
  require_rank(tape, x, 3, "conv1d");
  require_rank(tape, w, 3, "conv1d");
  require_rank(tape, b, 1, "conv1d");
  const auto& xs = tape.shape(x);
  const auto& ws = tape.shape(w);
  require(ws[1] == xs[1], "conv1d: weight expects " + std::to_string(ws[1]) +
                              " input channels, input has " + std::to_string(xs[1]));
  require(ws[2] % 2 == 1, "conv1d: kernel size must be odd");
  require(tape.shape(b)[0] == ws[0], "conv1d: bias size mismatch");
  require(xs[2] > 0, "conv1d: empty input");
}

}  // namespace

template <typename T>
Var conv1d(Tape<T>& tape, Var x, Var w, Var b) {
  check_conv(tape, x, w, b);
  const auto& xs = tape.shape(x);
  const auto& ws = tape.shape(w);
  const std::size_t batch = xs[0], cin = xs[1], len = xs[2];
  const std::size_t cout = ws[0], k_size = ws[2];
  const std::size_t ck = cin * k_size;
  Tensor<T> out = conv_forward(tape.value(x), tape.value(w), tape.value(b), NoEpilogue{});
  const bool needs = tape.requires_grad(x) || tape.requires_grad(w) || tape.requires_grad(b);
  return tape.record(std::move(out), needs, [=](Tape<T>& t, Var self) {
    const auto& gy = t.grad_view(self);
    const bool gx_on = t.requires_grad(x);
    const bool gw_on = t.requires_grad(w);
    if (gx_on || gw_on) {
      const auto& xv = t.value(x).data;
      T* colb = gw_on ? scratch<T>(1, ck * len) : nullptr;
      // dx is the correlation of dy with the channel-transposed, flipped kernel:
      // dx[c, j] = sum_{o,k'} w[o, c, K-1-k'] dy[o, j + k' - pad].
      const std::size_t ok = cout * k_size;
      std::vector<T> wflip(gx_on ? cin * ok : 0);
      T* gcol = gx_on ? scratch<T>(2, ok * len) : nullptr;
      if (gx_on) {
        const auto& wv = t.value(w).data;
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t k = 0; k < k_size; ++k)
              wflip[c * ok + o * k_size + (k_size - 1 - k)] = wv[(o * cin + c) * k_size + k];
      }
      for (std::size_t n = 0; n < batch; ++n) {
        ConstMatMap<T> gym(gy.data() + n * cout * len, cout, len);
        if (gw_on) {
          im2col(xv.data() + n * cin * len, cin, len, k_size, colb);
          ConstMatMap<T> cm(colb, ck, len);
          MatMap<T> gwm(t.grad(w).data(), cout, ck);
          gwm.noalias() += gym * cm.transpose();
        }
        if (gx_on) {
          im2col(gy.data() + n * cout * len, cout, len, k_size, gcol);
          ConstMatMap<T> gcm(gcol, ok, len);
          ConstMatMap<T> wfm(wflip.data(), cin, ok);
          MatMap<T> gxm(t.grad(x).data() + n * cin * len, cin, len);
          gxm.noalias() += wfm * gcm;
        }
      }
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = 0.0;
        for (std::size_t n = 0; n < batch; ++n) {
          const T* row = gy.data() + (n * cout + o) * len;
          for (std::size_t i = 0; i < len; ++i) acc += row[i];
        }
        gb[o] += static_cast<T>(acc);
      }
    }
  });
}

template <typename T>
Var conv1d_leaky(Tape<T>& tape, Var x, Var w, Var b, T slope) {
  if (tape.recording()) return leaky_relu(tape, conv1d(tape, x, w, b), slope);
  check_conv(tape, x, w, b);
  auto act = [slope](auto& m) { m = (m.array() < T(0)).select(m.array() * slope, m.array()); };
  return tape.record(conv_forward(tape.value(x), tape.value(w), tape.value(b), act), false, {});
}

template <typename T>
MaxPoolResult maxpool1d(Tape<T>& tape, Var x) {
  const auto& xs = tape.shape(x);
  require(!xs.empty() && numel(xs) > 0, "maxpool1d: empty input");
  const std::size_t len = xs.back();
  const std::size_t rows = numel(xs) / len;
  const std::size_t out_len = (len + 1) / 2;
  Shape os = xs;
  os.back() = out_len;
  Tensor<T> out(os);
  std::vector<std::uint32_t> argmax(out.size());
  const auto& xv = tape.value(x).data;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * len;
    for (std::size_t j = 0; j < out_len; ++j) {
      const std::size_t i0 = 2 * j;
      const std::size_t i1 = std::min(2 * j + 1, len - 1);
      const std::size_t pick = xr[i1] > xr[i0] ? i1 : i0;
      out.data[r * out_len + j] = xr[pick];
      argmax[r * out_len + j] = static_cast<std::uint32_t>(r * len + pick);
    }
  }
  const bool needs = tape.requires_grad(x);
  Var v = tape.record(std::move(out), needs, [x, argmax](Tape<T>& t, Var self) {
    const auto& gy = t.grad_view(self);
    auto& gx = t.grad(x);
    for (std::size_t k = 0; k < gy.size(); ++k) gx[argmax[k]] += gy[k];
  });
  return {v, std::move(argmax)};
}

template <typename T>
Var upsample1d(Tape<T>& tape, Var x, std::size_t factor) {
  if (factor < 1) fail(ErrorKind::Config, "upsample1d: factor must be >= 1");
  const auto& xs = tape.shape(x);
  require(!xs.empty(), "upsample1d: scalar input");
  const std::size_t len = xs.back();
  const std::size_t rows = numel(xs) / std::max<std::size_t>(len, 1);
  Shape os = xs;
  os.back() = len * factor;
  Tensor<T> out(os);
  const auto& xv = tape.value(x).data;
  T* o = out.data.data();
  if (factor == 2) {
    for (std::size_t k = 0; k < rows * len; ++k) o[2 * k] = o[2 * k + 1] = xv[k];
  } else {
    for (std::size_t k = 0; k < rows * len; ++k) std::fill_n(o + k * factor, factor, xv[k]);
  }
  return tape.record(std::move(out), tape.requires_grad(x),
                     [x, rows, len, factor](Tape<T>& t, Var self) {
                       const auto& gy = t.grad_view(self);
                       auto& gx = t.grad(x);
                       for (std::size_t k = 0; k < rows * len; ++k) {
                         T acc = 0;
                         for (std::size_t f = 0; f < factor; ++f) acc += gy[k * factor + f];
                         gx[k] += acc;
                       }
                     });
}

template <typename T>
Var dense(Tape<T>& tape, Var x, Var w, Var b) {
  require_rank(tape, x, 2, "dense");
  require_rank(tape, w, 2, "dense");
  require_rank(tape, b, 1, "dense");
  const std::size_t batch = tape.shape(x)[0], fin = tape.shape(x)[1];
  const std::size_t fout = tape.shape(w)[0];
  require(tape.shape(w)[1] == fin, "dense: weight expects " + std::to_string(tape.shape(w)[1]) +
                                       " features, input has " + std::to_string(fin));
  require(tape.shape(b)[0] == fout, "dense: bias size mismatch");
  Tensor<T> out({batch, fout});
  {
    ConstMatMap<T> xm(tape.value(x).data.data(), batch, fin);
    ConstMatMap<T> wm(tape.value(w).data.data(), fout, fin);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(tape.value(b).data.data(), fout);
    MatMap<T> om(out.data.data(), batch, fout);
    om.noalias() = xm * wm.transpose();
    om.rowwise() += bias;
  }
  const bool needs = tape.requires_grad(x) || tape.requires_grad(w) || tape.requires_grad(b);
  return tape.record(std::move(out), needs, [=](Tape<T>& t, Var self) {
    ConstMatMap<T> gym(t.grad_view(self).data(), batch, fout);
    if (t.requires_grad(w)) {
      ConstMatMap<T> xm(t.value(x).data.data(), batch, fin);
      MatMap<T> gw(t.grad(w).data(), fout, fin);
      gw.noalias() += gym.transpose() * xm;
    }
    if (t.requires_grad(x)) {
      ConstMatMap<T> wm(t.value(w).data.data(), fout, fin);
      MatMap<T> gx(t.grad(x).data(), batch, fin);
      gx.noalias() += gym * wm;
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t o = 0; o < fout; ++o) {
        double acc = 0.0;
        for (std::size_t n = 0; n < batch; ++n) acc += gym(n, o);
        gb[o] += static_cast<T>(acc);
      }
    }
  });
}

template <typename T>
Var leaky_relu(Tape<T>& tape, Var x, T slope) {
  Tensor<T> out = tape.value(x);
  for (auto& v : out.data) v = v < T(0) ? v * slope : v;
  return tape.record(std::move(out), tape.requires_grad(x), [x, slope](Tape<T>& t, Var self) {
    const auto& gy = t.grad_view(self);
    const auto& xv = t.value(x).data;
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += xv[i] < T(0) ? slope * gy[i] : gy[i];
  });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  Tensor<T> out = tape.value(x);
  logistic_inplace(out.data.data(), out.size());
  return tape.record(std::move(out), tape.requires_grad(x), [x](Tape<T>& t, Var self) {
    const auto& gy = t.grad_view(self);
    const auto& y = t.value(self).data;
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var softmax(Tape<T>& tape, Var x, std::size_t axis) {
  const AxisSplit s = split_at(tape.shape(x), axis);
  Tensor<T> out = tape.value(x);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      T* base = out.data.data() + o * s.n * s.inner + i;
      T mx = base[0];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, base[k * s.inner]);
      double sum = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        base[k * s.inner] = std::exp(base[k * s.inner] - mx);
        sum += base[k * s.inner];
      }
      for (std::size_t k = 0; k < s.n; ++k)
        base[k * s.inner] = static_cast<T>(base[k * s.inner] / sum);
    }
  }
  return tape.record(std::move(out), tape.requires_grad(x), [x, s](Tape<T>& t, Var self) {
    const auto& gy = t.grad_view(self);
    const auto& y = t.value(self).data;
    auto& gx = t.grad(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.n; ++k)
          dot += static_cast<double>(gy[base + k * s.inner]) * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t j = base + k * s.inner;
          gx[j] += static_cast<T>(y[j] * (gy[j] - dot));
        }
      }
    }
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  require(tape.shape(a) == tape.shape(b), "add: shape mismatch " + shape_str(tape.shape(a)) +
                                              " vs " + shape_str(tape.shape(b)));
  Tensor<T> out = tape.value(a);
  const auto& bv = tape.value(b).data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
  const bool needs = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(std::move(out), needs, [a, b](Tape<T>& t, Var self) {
    const auto& gy = t.grad_view(self);
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto& g = t.grad(v);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  require(tape.shape(a) == tape.shape(b), "mul: shape mismatch " + shape_str(tape.shape(a)) +
                                              " vs " + shape_str(tape.shape(b)));
  Tensor<T> out = tape.value(a);
  const auto& bv = tape.value(b).data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv[i];
  const bool needs = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(std::move(out), needs, [a, b](Tape<T>& t, Var self) {
    const auto& gy = t.grad_view(self);
    if (t.requires_grad(a)) {
      const auto& bv = t.value(b).data;
      auto& g = t.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      const auto& av = t.value(a).data;
      auto& g = t.grad(b);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * av[i];
    }
  });
}

template <typename T>
Var concat(Tape<T>& tape, std::span<const Var> xs, std::size_t axis) {
  require(!xs.empty(), "concat: no inputs");
  Shape os = tape.shape(xs[0]);
  require(axis < os.size(), "concat: axis out of range");
  os[axis] = 0;
  std::vector<std::size_t> widths;
  for (Var v : xs) {
    const auto& s = tape.shape(v);
    require(s.size() == os.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis)
        require(s[d] == tape.shape(xs[0])[d], "concat: shapes " + shape_str(s) + " and " +
                                                  shape_str(tape.shape(xs[0])) + " differ off-axis");
    os[axis] += s[axis];
  }
  const AxisSplit s = split_at(os, axis);
  for (Var v : xs) widths.push_back(tape.shape(v)[axis] * s.inner);
  Tensor<T> out(os);
  const std::size_t row = s.n * s.inner;
  bool needs = false;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& xv = tape.value(xs[k]).data;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(xv.data() + o * widths[k], widths[k], out.data.data() + o * row + offset);
    offset += widths[k];
    needs = needs || tape.requires_grad(xs[k]);
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  return tape.record(std::move(out), needs,
                     [inputs, widths, s, row](Tape<T>& t, Var self) {
                       const auto& gy = t.grad_view(self);
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < inputs.size(); ++k) {
                         if (t.requires_grad(inputs[k])) {
                           auto& g = t.grad(inputs[k]);
                           for (std::size_t o = 0; o < s.outer; ++o) {
                             const T* src = gy.data() + o * row + off;
                             T* dst = g.data() + o * widths[k];
                             for (std::size_t i = 0; i < widths[k]; ++i) dst[i] += src[i];
                           }
                         }
                         off += widths[k];
                       }
                     });
}

template <typename T>
Var crop(Tape<T>& tape, Var x, std::size_t start, std::size_t len, std::size_t axis) {
  const AxisSplit s = split_at(tape.shape(x), axis);
  require(start + len <= s.n, "crop: window [" + std::to_string(start) + ", " +
                                  std::to_string(start + len) + ") exceeds axis length " +
                                  std::to_string(s.n));
  Shape os = tape.shape(x);
  os[axis] = len;
  Tensor<T> out(os);
  const auto& xv = tape.value(x).data;
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.data() + (o * s.n + start) * s.inner, len * s.inner,
                out.data.data() + o * len * s.inner);
  return tape.record(std::move(out), tape.requires_grad(x),
                     [x, s, start, len](Tape<T>& t, Var self) {
                       const auto& gy = t.grad_view(self);
                       auto& gx = t.grad(x);
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         const T* src = gy.data() + o * len * s.inner;
                         T* dst = gx.data() + (o * s.n + start) * s.inner;
                         for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                       }
                     });
}

template <typename T>
Var crop_rows(Tape<T>& tape, Var x, std::span<const std::size_t> starts, std::size_t len) {
  require_rank(tape, x, 3, "crop_rows");
  const std::size_t batch = tape.shape(x)[0], ch = tape.shape(x)[1], full = tape.shape(x)[2];
  require(starts.size() == batch, "crop_rows: one start per batch item required");
  for (std::size_t st : starts)
    require(st + len <= full, "crop_rows: window exceeds signal length");
  Tensor<T> out({batch, ch, len});
  const auto& xv = tape.value(x).data;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c)
      std::copy_n(xv.data() + (n * ch + c) * full + starts[n], len,
                  out.data.data() + (n * ch + c) * len);
  std::vector<std::size_t> st(starts.begin(), starts.end());
  return tape.record(std::move(out), tape.requires_grad(x),
                     [x, st, batch, ch, full, len](Tape<T>& t, Var self) {
                       const auto& gy = t.grad_view(self);
                       auto& gx = t.grad(x);
                       for (std::size_t n = 0; n < batch; ++n)
                         for (std::size_t c = 0; c < ch; ++c) {
                           const T* src = gy.data() + (n * ch + c) * len;
                           T* dst = gx.data() + (n * ch + c) * full + st[n];
                           for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                         }
                     });
}

template <typename T>
Var bin_mean_pool(Tape<T>& tape, Var x, std::size_t bins) {
  require_rank(tape, x, 3, "bin_mean_pool");
  const std::size_t batch = tape.shape(x)[0], ch = tape.shape(x)[1], len = tape.shape(x)[2];
  require(bins > 0 && bins <= len, "bin_mean_pool: need 0 < bins <= length");
  auto lo = [len, bins](std::size_t j) { return j * len / bins; };
  Tensor<T> out({batch, ch * bins});
  const auto& xv = tape.value(x).data;
  for (std::size_t r = 0; r < batch * ch; ++r)
    for (std::size_t j = 0; j < bins; ++j) {
      double acc = 0.0;
      for (std::size_t i = lo(j); i < lo(j + 1); ++i) acc += xv[r * len + i];
      out.data[r * bins + j] = static_cast<T>(acc / static_cast<double>(lo(j + 1) - lo(j)));
    }
  return tape.record(std::move(out), tape.requires_grad(x),
                     [x, batch, ch, len, bins, lo](Tape<T>& t, Var self) {
                       const auto& gy = t.grad_view(self);
                       auto& gx = t.grad(x);
                       for (std::size_t r = 0; r < batch * ch; ++r)
                         for (std::size_t j = 0; j < bins; ++j) {
                           const T g = gy[r * bins + j] / static_cast<T>(lo(j + 1) - lo(j));
                           for (std::size_t i = lo(j); i < lo(j + 1); ++i) gx[r * len + i] += g;
                         }
                     });
}

template <typename T>
Var attention_gate(Tape<T>& tape, Var enc, Var gate_src, Var w_enc, Var b_enc, Var w_gate,
                   Var b_gate) {
  if (!tape.recording() && tape.shape(w_enc).size() == 3 && tape.shape(w_enc)[2] == 1 &&
      tape.shape(w_gate).size() == 3 && tape.shape(w_gate)[2] == 1) {
    check_conv(tape, enc, w_enc, b_enc);
    check_conv(tape, gate_src, w_gate, b_gate);
    const auto& es = tape.shape(enc);
    require(tape.shape(w_enc)[0] == es[1], "attention_gate: gate channels must match the skip");
    require(tape.shape(w_gate)[0] == es[1] && tape.shape(gate_src)[0] == es[0] &&
                tape.shape(gate_src)[2] == es[2],
            "attention_gate: gate shape " + shape_str(tape.shape(gate_src)) +
                " does not fit skip " + shape_str(es));
    const Tensor<T>& ev = tape.value(enc);
    Tensor<T> out = conv_forward(ev, tape.value(w_enc), tape.value(b_enc), NoEpilogue{});
    const Tensor<T> g = conv_forward(tape.value(gate_src), tape.value(w_gate), tape.value(b_gate),
                                     NoEpilogue{});
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += g.data[i];
    logistic_inplace(out.data.data(), out.size());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = ev.data[i] * out.data[i];
    return tape.record(std::move(out), false, {});
  }
  const Var a = conv1d(tape, enc, w_enc, b_enc);
  const Var g = conv1d(tape, gate_src, w_gate, b_gate);
  const Var sum = add(tape, a, g);
  tape.release(a);
  tape.release(g);
  const Var alpha = sigmoid(tape, sum);
  tape.release(sum);
  const Var out = mul(tape, enc, alpha);
  tape.release(alpha);
  return out;
}

template <typename T>
Var dice_loss(Tape<T>& tape, Var pred, const Tensor<T>& truth, double eps) {
  const auto& ps = tape.shape(pred);
  require(ps == truth.shape, "dice_loss: prediction " + shape_str(ps) + " vs truth " +
                                 shape_str(truth.shape));
  require(!ps.empty() && ps[0] > 0, "dice_loss: empty batch");
  const std::size_t batch = ps[0];
  const std::size_t per = numel(ps) / batch;
  const auto& p = tape.value(pred).data;
  std::vector<double> inter(batch), denom(batch);
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    double pt = 0.0, sp = 0.0, st = 0.0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      pt += static_cast<double>(p[i]) * truth.data[i];
      sp += p[i];
      st += truth.data[i];
    }
    inter[n] = 2.0 * pt + eps;
    denom[n] = sp + st + eps;
    total += 1.0 - inter[n] / denom[n];
  }
  Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(batch)));
  return tape.record(std::move(out), tape.requires_grad(pred),
                     [pred, truth, inter, denom, batch, per](Tape<T>& t, Var self) {
                       const double gy = t.grad_view(self)[0] / static_cast<double>(batch);
                       auto& gp = t.grad(pred);
                       for (std::size_t n = 0; n < batch; ++n) {
                         const double d2 = denom[n] * denom[n];
                         for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
                           const double dl = -(2.0 * truth.data[i] * denom[n] - inter[n]) / d2;
                           gp[i] += static_cast<T>(gy * dl);
                         }
                       }
                     });
}

template <typename T>
Var bce_loss(Tape<T>& tape, Var pred, const Tensor<T>& truth) {
  require(tape.shape(pred) == truth.shape, "bce_loss: prediction " +
                                               shape_str(tape.shape(pred)) + " vs truth " +
                                               shape_str(truth.shape));
  const auto& p = tape.value(pred).data;
  const std::size_t n = p.size();
  require(n > 0, "bce_loss: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = truth.data[i];
    total -= t * std::log(std::max<double>(p[i], kLogFloor)) +
             (1.0 - t) * std::log(std::max<double>(1.0 - p[i], kLogFloor));
  }
  Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(n)));
  return tape.record(std::move(out), tape.requires_grad(pred), [pred, truth, n](Tape<T>& t, Var self) {
    const double gy = t.grad_view(self)[0] / static_cast<double>(n);
    const auto& pv = t.value(pred).data;
    auto& gp = t.grad(pred);
    for (std::size_t i = 0; i < n; ++i) {
      const double pi = pv[i];
      const double ti = truth.data[i];
      double d = 0.0;
      if (pi > kLogFloor) d -= ti / pi;
      if (1.0 - pi > kLogFloor) d += (1.0 - ti) / (1.0 - pi);
      gp[i] += static_cast<T>(gy * d);
    }
  });
}

template <typename T>
Var nll_loss(Tape<T>& tape, Var probs, std::span<const std::size_t> labels) {
  require_rank(tape, probs, 2, "nll_loss");
  const std::size_t batch = tape.shape(probs)[0], classes = tape.shape(probs)[1];
  require(labels.size() == batch, "nll_loss: one label per batch item required");
  const auto& p = tape.value(probs).data;
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    require(labels[n] < classes, "nll_loss: label out of range");
    total -= std::log(std::max<double>(p[n * classes + labels[n]], kLogFloor));
  }
  Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(batch)));
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return tape.record(std::move(out), tape.requires_grad(probs),
                     [probs, lab, batch, classes](Tape<T>& t, Var self) {
                       const double gy = t.grad_view(self)[0] / static_cast<double>(batch);
                       const auto& pv = t.value(probs).data;
                       auto& gp = t.grad(probs);
                       for (std::size_t n = 0; n < batch; ++n) {
                         const std::size_t j = n * classes + lab[n];
                         if (pv[j] > kLogFloor) gp[j] += static_cast<T>(-gy / pv[j]);
                       }
                     });
}

template <typename T>
Var sum_all(Tape<T>& tape, std::span<const Var> scalars) {
  double total = 0.0;
  bool needs = false;
  for (Var v : scalars) {
    require(tape.value(v).size() == 1, "sum_all: inputs must be scalars");
    total += tape.value(v).data[0];
    needs = needs || tape.requires_grad(v);
  }
  std::vector<Var> inputs(scalars.begin(), scalars.end());
  return tape.record(Tensor<T>({1}, static_cast<T>(total)), needs,
                     [inputs](Tape<T>& t, Var self) {
                       const T gy = t.grad_view(self)[0];
                       for (Var v : inputs)
                         if (t.requires_grad(v)) t.grad(v)[0] += gy;
                     });
}

#define BONETRACK_INSTANTIATE_OPS(T)                                                          \
  template Var conv1d<T>(Tape<T>&, Var, Var, Var);                                            \
  template Var conv1d_leaky<T>(Tape<T>&, Var, Var, Var, T);                                   \
  template MaxPoolResult maxpool1d<T>(Tape<T>&, Var);                                         \
  template Var upsample1d<T>(Tape<T>&, Var, std::size_t);                                     \
  template Var dense<T>(Tape<T>&, Var, Var, Var);                                             \
  template Var leaky_relu<T>(Tape<T>&, Var, T);                                               \
  template Var sigmoid<T>(Tape<T>&, Var);                                                     \
  template Var softmax<T>(Tape<T>&, Var, std::size_t);                                        \
  template Var add<T>(Tape<T>&, Var, Var);                                                    \
  template Var mul<T>(Tape<T>&, Var, Var);                                                    \
  template Var concat<T>(Tape<T>&, std::span<const Var>, std::size_t);                        \
  template Var crop<T>(Tape<T>&, Var, std::size_t, std::size_t, std::size_t);                 \
  template Var crop_rows<T>(Tape<T>&, Var, std::span<const std::size_t>, std::size_t);        \
  template Var bin_mean_pool<T>(Tape<T>&, Var, std::size_t);                                  \
  template Var attention_gate<T>(Tape<T>&, Var, Var, Var, Var, Var, Var);                     \
  template Var dice_loss<T>(Tape<T>&, Var, const Tensor<T>&, double);                         \
  template Var bce_loss<T>(Tape<T>&, Var, const Tensor<T>&);                                  \
  template Var nll_loss<T>(Tape<T>&, Var, std::span<const std::size_t>);                      \
  template Var sum_all<T>(Tape<T>&, std::span<const Var>);

BONETRACK_INSTANTIATE_OPS(float)
BONETRACK_INSTANTIATE_OPS(double)

}  // namespace bonetrack::ad
