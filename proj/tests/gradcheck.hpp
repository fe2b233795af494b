// Central finite-difference checking for the 64-bit tape.
#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "bonetrack/autodiff/ops.hpp"

namespace bttest {

using bonetrack::ad::Parameter;
using bonetrack::ad::Shape;
using bonetrack::ad::Tape;
using bonetrack::ad::Tensor;
using bonetrack::ad::Var;

using GraphFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline Parameter<double> random_param(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                                      double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(shape);
  for (auto& v : t.data) v = u(rng);
  return Parameter<double>("p", std::move(t));
}

// Projects the output onto a fixed random direction r, so L = sum(out * r),
// and returns the worst relative error ||g_analytic - g_numeric|| / max(norms)
// over all inputs.
inline double gradcheck(const GraphFn& f, std::vector<Parameter<double>>& inputs, std::mt19937_64& rng,
                        double h = 1e-6) {
  std::vector<double> r;
  {
    Tape<double> tape(true);
    std::vector<Var> vs;
    for (auto& p : inputs) vs.push_back(tape.parameter(p));
    const Var out = f(tape, vs);
    std::normal_distribution<double> n(0.0, 1.0);
    r.resize(tape.value(out).size());
    for (auto& v : r) v = n(rng);
    for (auto& p : inputs) p.zero_grad();
    tape.backward(out, r);
  }
  auto loss = [&] {
    Tape<double> tape(false);
    std::vector<Var> vs;
    for (auto& p : inputs) vs.push_back(tape.constant(p.value));
    const auto& y = tape.value(f(tape, vs)).data;
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };
  double worst = 0.0;
  for (auto& p : inputs) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value.data[i];
      p.value.data[i] = keep + h;
      const double up = loss();
      p.value.data[i] = keep - h;
      const double down = loss();
      p.value.data[i] = keep;
      const double num = (up - down) / (2.0 * h);
      diff += (p.grad[i] - num) * (p.grad[i] - num);
      na += p.grad[i] * p.grad[i];
      nn += num * num;
    }
    const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-10});
    worst = std::max(worst, std::sqrt(diff) / scale);
  }
  return worst;
}

inline Tensor<double> random_mask(const Shape& shape, std::mt19937_64& rng, double p_one = 0.3) {
  std::bernoulli_distribution b(p_one);
  Tensor<double> t(shape);
  for (auto& v : t.data) v = b(rng) ? 1.0 : 0.0;
  return t;
}

// One trial of the named operation on random small shapes; returns the
// relative gradient error.
inline double op_trial(const std::string& op, std::mt19937_64& rng) {
  using namespace bonetrack::ad;
  std::uniform_int_distribution<std::size_t> small(1, 3), len(3, 9);
  const std::size_t B = small(rng), C = small(rng), L = len(rng);
  std::vector<Parameter<double>> in;
  GraphFn f;
  if (op == "conv1d") {
    const std::size_t Co = small(rng), K = std::uniform_int_distribution<int>(0, 2)(rng) * 2 + 1;
    in = {random_param({B, C, L}, rng), random_param({Co, C, K}, rng), random_param({Co}, rng)};
    f = [](Tape<double>& t, const std::vector<Var>& v) { return conv1d(t, v[0], v[1], v[2]); };
  } else if (op == "maxpool") {
    in = {random_param({B, C, L}, rng)};
    f = [](Tape<double>& t, const std::vector<Var>& v) { return maxpool1d(t, v[0]).out; };
  } else if (op == "upsample") {
    in = {random_param({B, C, L}, rng)};
    f = [](Tape<double>& t, const std::vector<Var>& v) { return upsample1d(t, v[0]); };
  } else if (op == "dense") {
    const std::size_t F = len(rng), Fo = small(rng) + 1;
    in = {random_param({B, F}, rng), random_param({Fo, F}, rng), random_param({Fo}, rng)};
    f = [](Tape<double>& t, const std::vector<Var>& v) { return dense(t, v[0], v[1], v[2]); };
  } else if (op == "leaky_relu") {
    in = {random_param({B, C, L}, rng)};
    f = [](Tape<double>& t, const std::vector<Var>& v) { return leaky_relu(t, v[0], 0.1); };
  } else if (op == "sigmoid") {
    in = {random_param({B, C, L}, rng, -4.0, 4.0)};
    f = [](Tape<double>& t, const std::vector<Var>& v) { return sigmoid(t, v[0]); };
  } else if (op == "softmax") {
    const std::size_t axis = std::uniform_int_distribution<std::size_t>(0, 2)(rng);
    in = {random_param({B, C + 1, L}, rng, -3.0, 3.0)};
    f = [axis](Tape<double>& t, const std::vector<Var>& v) { return softmax(t, v[0], axis); };
  } else if (op == "dice_loss") {
    in = {random_param({B, 1, L}, rng, 0.01, 0.99)};
    auto mask = random_mask({B, 1, L}, rng);
    // An all-empty mask leaves only the eps-sized gradient, which central
    // differences cannot resolve; give every item at least one positive.
    for (std::size_t n = 0; n < B; ++n)
      mask.data[n * L + std::uniform_int_distribution<std::size_t>(0, L - 1)(rng)] = 1.0;
    f = [mask](Tape<double>& t, const std::vector<Var>& v) { return dice_loss(t, v[0], mask, 1e-6); };
  } else if (op == "ce_loss") {
    in = {random_param({B, 1, L}, rng, 0.01, 0.99)};
    auto mask = random_mask({B, 1, L}, rng);
    f = [mask](Tape<double>& t, const std::vector<Var>& v) { return bce_loss(t, v[0], mask); };
  } else if (op == "cls_loss") {
    in = {random_param({B, C + 1}, rng, 0.05, 1.0)};
    std::vector<std::size_t> labels(B);
    for (auto& l : labels) l = std::uniform_int_distribution<std::size_t>(0, C)(rng);
    f = [labels](Tape<double>& t, const std::vector<Var>& v) { return nll_loss(t, v[0], labels); };
  } else if (op == "attention_gate") {
    const std::size_t Cg = small(rng);
    in = {random_param({B, C, L}, rng), random_param({B, Cg, L}, rng), random_param({C, C, 1}, rng),
          random_param({C}, rng),       random_param({C, Cg, 1}, rng), random_param({C}, rng)};
    f = [](Tape<double>& t, const std::vector<Var>& v) {
      return attention_gate(t, v[0], v[1], v[2], v[3], v[4], v[5]);
    };
  } else {
    throw std::invalid_argument("unknown op " + op);
  }
  return gradcheck(f, in, rng);
}

inline const std::vector<std::string>& checked_ops() {
  static const std::vector<std::string> ops{"conv1d",  "maxpool",   "upsample", "dense",
                                            "leaky_relu", "sigmoid", "softmax",  "dice_loss",
                                            "ce_loss", "cls_loss",  "attention_gate"};
  return ops;
}

}  // namespace bttest
