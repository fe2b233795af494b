#include "bonetrack/network.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

namespace bonetrack {

using ad::Var;

namespace {

constexpr double kLeakySlope = 0.1;
// Initial foreground prior of the segmentation heads.
constexpr double kPeakPrior = 0.01;
// Gaussian components further than this many std from a sample are ignored.
constexpr double kGaussianReach = 8.0;

std::size_t round_half_even(double v) { return static_cast<std::size_t>(std::nearbyint(v)); }

}  // namespace

void UNetConfig::validate() const {
  if (depth != kUNetDepth) fail(ErrorKind::Config, "U-Net depth must be 5");
  if (kernel_size % 2 == 0) fail(ErrorKind::Config, "kernel size must be odd");
  for (auto c : channels)
    if (c == 0) fail(ErrorKind::Config, "channel counts must be positive");
  const std::size_t stride = std::size_t{1} << (depth - 1);
  if (input_len == 0 || input_len % stride != 0)
    fail(ErrorKind::Config, "input_len " + std::to_string(input_len) + " is not divisible by " +
                                std::to_string(stride));
}

void SbpConfig::validate(std::size_t input_len) const {
  const std::size_t stride = std::size_t{1} << (kUNetDepth - 1);
  if (window_w == 0 || window_w % stride != 0)
    fail(ErrorKind::Config, "window_w " + std::to_string(window_w) + " is not divisible by " +
                                std::to_string(stride));
  if (window_w > input_len) fail(ErrorKind::Config, "window_w exceeds the input length");
  if (candidate_factor != 3) fail(ErrorKind::Config, "candidate region must be 3 windows wide");
  if (gaussian_std != 1.0) fail(ErrorKind::Config, "mixture components have unit std");
}

ModelConfig ModelConfig::for_signal(Area area, std::size_t signal_len) {
  if (signal_len == 0) fail(ErrorKind::Config, "signal_len must be positive");
  ModelConfig cfg;
  cfg.area = area;
  cfg.signal_len = signal_len;
  const std::size_t stride = std::size_t{1} << (kUNetDepth - 1);
  cfg.unet.input_len = (signal_len + stride - 1) / stride * stride;
  const double blocks = static_cast<double>(signal_len) / 13.0 / static_cast<double>(stride);
  cfg.sbp.window_w = std::max<std::size_t>(1, round_half_even(blocks)) * stride;
  cfg.sbp.window_w = std::min(cfg.sbp.window_w, cfg.unet.input_len);
  return cfg;
}

void ModelConfig::validate() const {
  unet.validate();
  sbp.validate(unet.input_len);
  if (signal_len == 0 || signal_len > unet.input_len)
    fail(ErrorKind::Config, "signal_len must be in (0, input_len]");
  if (classifier_bins == 0 || classifier_bins > unet.input_len >> (kUNetDepth - 1))
    fail(ErrorKind::Config, "classifier_bins out of range");
  for (auto h : classifier_hidden)
    if (h == 0) fail(ErrorKind::Config, "classifier hidden sizes must be positive");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["area"] = to_string(area);
  j["signal_len"] = signal_len;
  j["unet"] = {{"depth", unet.depth},
               {"channels", unet.channels},
               {"kernel_size", unet.kernel_size},
               {"input_len", unet.input_len}};
  j["sbp"] = {{"window_w", sbp.window_w},
              {"candidate_factor", sbp.candidate_factor},
              {"gaussian_std", sbp.gaussian_std}};
  j["classifier"] = {{"hidden", classifier_hidden}, {"bins", classifier_bins}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig cfg;
  try {
    const auto j = nlohmann::json::parse(text);
    cfg.area = parse_area(j.at("area").get<std::string>());
    cfg.signal_len = j.at("signal_len").get<std::size_t>();
    const auto& u = j.at("unet");
    cfg.unet.depth = u.at("depth").get<std::size_t>();
    cfg.unet.channels = u.at("channels").get<std::array<std::size_t, kUNetDepth>>();
    cfg.unet.kernel_size = u.at("kernel_size").get<std::size_t>();
    cfg.unet.input_len = u.at("input_len").get<std::size_t>();
    const auto& s = j.at("sbp");
    cfg.sbp.window_w = s.at("window_w").get<std::size_t>();
    cfg.sbp.candidate_factor = s.at("candidate_factor").get<std::size_t>();
    cfg.sbp.gaussian_std = s.at("gaussian_std").get<double>();
    const auto& c = j.at("classifier");
    cfg.classifier_hidden = c.at("hidden").get<std::array<std::size_t, 2>>();
    cfg.classifier_bins = c.at("bins").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("bad model configuration record: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

RegionProposal sbp_propose(std::span<const double> peak_prob, const SbpConfig& cfg, Rng* rng) {
  const std::size_t n = peak_prob.size();
  if (n == 0) fail(ErrorKind::Shape, "sbp_propose: empty probability sequence");
  if (cfg.window_w == 0 || cfg.window_w > n)
    fail(ErrorKind::Config, "sbp_propose: window width must be in (0, signal length]");

  RegionProposal prop;
  prop.width = cfg.window_w;
  const auto top = std::max_element(peak_prob.begin(), peak_prob.end());
  const std::size_t peak_at = static_cast<std::size_t>(top - peak_prob.begin());

  const std::size_t cand_w = std::min(cfg.candidate_width(), n);
  const std::size_t half_c = cand_w / 2;
  prop.candidate_start = std::min(peak_at > half_c ? peak_at - half_c : 0, n - cand_w);

  double mass = 0.0;
  for (std::size_t i = 0; i < cand_w; ++i) mass += std::max(0.0, peak_prob[prop.candidate_start + i]);

  std::size_t center = n / 2;
  if (!(mass > 0.0)) {
    prop.fallback = true;
  } else {
    // S(j) = sum_i p_i N(j; i, std), evaluated on candidate indices and renormalized.
    const auto reach = static_cast<std::ptrdiff_t>(std::ceil(kGaussianReach * cfg.gaussian_std));
    const double inv_two_var = 1.0 / (2.0 * cfg.gaussian_std * cfg.gaussian_std);
    const auto cw = static_cast<std::ptrdiff_t>(cand_w);
    prop.distribution.assign(cand_w, 0.0);
    for (std::ptrdiff_t i = 0; i < cw; ++i) {
      const double p = std::max(0.0, peak_prob[prop.candidate_start + static_cast<std::size_t>(i)]);
      if (p == 0.0) continue;
      for (std::ptrdiff_t j = std::max<std::ptrdiff_t>(0, i - reach);
           j < std::min(cw, i + reach + 1); ++j) {
        const double d = static_cast<double>(j - i);
        prop.distribution[static_cast<std::size_t>(j)] += p * std::exp(-d * d * inv_two_var);
      }
    }
    double total = 0.0;
    for (double v : prop.distribution) total += v;
    for (double& v : prop.distribution) v /= total;

    std::size_t local = 0;
    if (cfg.mode == SbpMode::Stochastic) {
      if (rng == nullptr) fail(ErrorKind::Config, "stochastic SBP needs a random stream");
      const double u = std::uniform_real_distribution<double>(0.0, 1.0)(*rng);
      double cum = 0.0;
      local = cand_w - 1;
      for (std::size_t j = 0; j < cand_w; ++j) {
        cum += prop.distribution[j];
        if (u < cum) {
          local = j;
          break;
        }
      }
    } else {
      local = static_cast<std::size_t>(
          std::max_element(prop.distribution.begin(), prop.distribution.end()) -
          prop.distribution.begin());
    }
    center = prop.candidate_start + local;
  }
  prop.center = center;
  const std::size_t half_w = cfg.window_w / 2;
  prop.start = std::min(center > half_w ? center - half_w : 0, n - cfg.window_w);
  return prop;
}

template <typename T>
CascadedModel<T>::CascadedModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng = substream(init_seed, "init");
  coarse_ = build_unet("coarse", false, rng);
  refined_ = build_unet("refined", true, rng);
  const std::size_t feat = cfg_.unet.channels[kUNetDepth - 1] * cfg_.classifier_bins;
  classifier_[0] = add_dense("classifier.fc0", cfg_.classifier_hidden[0], feat, rng);
  classifier_[1] = add_dense("classifier.fc1", cfg_.classifier_hidden[1], cfg_.classifier_hidden[0], rng);
  classifier_[2] = add_dense("classifier.fc2", cfg_.num_regions(), cfg_.classifier_hidden[1], rng);
}

template <typename T>
typename CascadedModel<T>::ConvSlot CascadedModel<T>::add_conv(const std::string& name,
                                                               std::size_t cout, std::size_t cin,
                                                               std::size_t k, Rng& rng) {
  const double fan_in = static_cast<double>(cin * k);
  const double std_dev = std::sqrt(2.0 / ((1.0 + kLeakySlope * kLeakySlope) * fan_in));
  std::normal_distribution<double> dist(0.0, std_dev);
  ad::Tensor<T> w({cout, cin, k});
  for (auto& v : w.data) v = static_cast<T>(dist(rng));
  ConvSlot s;
  s.w = params_.size();
  params_.emplace_back(name + ".w", std::move(w));
  s.b = params_.size();
  params_.emplace_back(name + ".b", ad::Tensor<T>({cout}));
  return s;
}

template <typename T>
typename CascadedModel<T>::ConvSlot CascadedModel<T>::add_dense(const std::string& name,
                                                                std::size_t fout, std::size_t fin,
                                                                Rng& rng) {
  const double std_dev =
      std::sqrt(2.0 / ((1.0 + kLeakySlope * kLeakySlope) * static_cast<double>(fin)));
  std::normal_distribution<double> dist(0.0, std_dev);
  ad::Tensor<T> w({fout, fin});
  for (auto& v : w.data) v = static_cast<T>(dist(rng));
  ConvSlot s;
  s.w = params_.size();
  params_.emplace_back(name + ".w", std::move(w));
  s.b = params_.size();
  params_.emplace_back(name + ".b", ad::Tensor<T>({fout}));
  return s;
}

template <typename T>
typename CascadedModel<T>::UNetSlots CascadedModel<T>::build_unet(const std::string& prefix,
                                                                  bool refined, Rng& rng) {
  const auto& ch = cfg_.unet.channels;
  const std::size_t k = cfg_.unet.kernel_size;
  UNetSlots s;
  for (std::size_t l = 0; l < kUNetDepth; ++l) {
    std::size_t cin = l == 0 ? 1 : ch[l - 1];
    if (refined) cin += ch[l];  // concatenated crop of the coarse decoder
    const std::string p = prefix + ".enc" + std::to_string(l);
    s.enc1[l] = add_conv(p + ".conv1", ch[l], cin, k, rng);
    s.enc2[l] = add_conv(p + ".conv2", ch[l], ch[l], k, rng);
  }
  for (std::size_t l = kUNetDepth - 1; l-- > 0;) {
    const std::string p = prefix + ".dec" + std::to_string(l);
    s.att_enc[l] = add_conv(p + ".att_enc", ch[l], ch[l], 1, rng);
    s.att_gate[l] = add_conv(p + ".att_gate", ch[l], ch[l + 1], 1, rng);
    s.dec1[l] = add_conv(p + ".conv1", ch[l], ch[l] + ch[l + 1], k, rng);
    s.dec2[l] = add_conv(p + ".conv2", ch[l], ch[l], k, rng);
  }
  s.head = add_conv(prefix + ".head", 2, ch[0], 1, rng);
  // Start from a background-dominated prior: logit(peak) - logit(bg) = log(pi / (1 - pi)).
  params_[s.head.b].value.data[1] = static_cast<T>(std::log(kPeakPrior / (1.0 - kPeakPrior)));
  return s;
}

template <typename T>
std::vector<ad::Parameter<T>*> CascadedModel<T>::parameters() {
  std::vector<ad::Parameter<T>*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

template <typename T>
std::vector<const ad::Parameter<T>*> CascadedModel<T>::parameters() const {
  std::vector<const ad::Parameter<T>*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

template <typename T>
std::size_t CascadedModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
typename CascadedModel<T>::Bindings CascadedModel<T>::bind(Tape& tape) {
  Bindings b;
  b.vars.reserve(params_.size());
  for (auto& p : params_) b.vars.push_back(tape.recording() ? tape.parameter(p) : tape.reference(p.value));
  return b;
}

template <typename T>
typename CascadedModel<T>::Bindings CascadedModel<T>::bind(Tape& tape) const {
  if (tape.recording())
    fail(ErrorKind::Config, "a const model can only be bound to a non-recording tape");
  Bindings b;
  b.vars.reserve(params_.size());
  for (const auto& p : params_) b.vars.push_back(tape.reference(p.value));
  return b;
}

template <typename T>
Var CascadedModel<T>::conv(Tape& tape, const Bindings& b, ConvSlot s, Var x) const {
  return ad::conv1d(tape, x, b.vars[s.w], b.vars[s.b]);
}

template <typename T>
Var CascadedModel<T>::unet_forward(Tape& tape, const Bindings& b, const UNetSlots& s, Var x,
                                   std::span<const Var> cropped,
                                   std::array<Var, kUNetDepth>* decoder) const {
  const T slope = static_cast<T>(kLeakySlope);
  // Intermediates are released as soon as they are consumed; this only takes
  // effect on non-recording tapes and keeps the inference working set small.
  auto conv_act = [&](ConvSlot slot, Var in) {
    return ad::conv1d_leaky(tape, in, b.vars[slot.w], b.vars[slot.b], slope);
  };
  std::array<Var, kUNetDepth> enc;
  for (std::size_t l = 0; l < kUNetDepth; ++l) {
    Var in = l > 0 ? ad::maxpool1d(tape, enc[l - 1]).out : x;
    if (!cropped.empty()) {
      const std::array<Var, 2> parts{in, cropped[l]};
      const Var joined = ad::concat<T>(tape, parts, 1);
      if (l > 0) tape.release(in);
      in = joined;
    }
    const Var h = conv_act(s.enc1[l], in);
    if (in.id != x.id) tape.release(in);
    enc[l] = conv_act(s.enc2[l], h);
    tape.release(h);
  }
  std::array<Var, kUNetDepth> dec;
  dec[kUNetDepth - 1] = enc[kUNetDepth - 1];
  for (std::size_t l = kUNetDepth - 1; l-- > 0;) {
    const Var up = ad::upsample1d(tape, dec[l + 1], 2);
    if (decoder == nullptr) tape.release(dec[l + 1]);
    const Var gated = ad::attention_gate(tape, enc[l], up, b.vars[s.att_enc[l].w],
                                         b.vars[s.att_enc[l].b], b.vars[s.att_gate[l].w],
                                         b.vars[s.att_gate[l].b]);
    tape.release(enc[l]);
    const std::array<Var, 2> parts{gated, up};
    const Var joined = ad::concat<T>(tape, parts, 1);
    tape.release(gated);
    tape.release(up);
    const Var h = conv_act(s.dec1[l], joined);
    tape.release(joined);
    dec[l] = conv_act(s.dec2[l], h);
    tape.release(h);
  }
  if (decoder != nullptr) *decoder = dec;
  const Var logits = conv(tape, b, s.head, dec[0]);
  if (decoder == nullptr) tape.release(dec[0]);
  const Var probs = ad::softmax(tape, logits, 1);
  tape.release(logits);
  const Var peak = ad::crop(tape, probs, 1, 1, 1);
  tape.release(probs);
  return peak;
}

template <typename T>
typename CascadedModel<T>::CoarseOutput CascadedModel<T>::coarse_forward(Tape& tape,
                                                                         const Bindings& b,
                                                                         Var x) const {
  const auto& xs = tape.shape(x);
  if (xs.size() != 3 || xs[1] != 1 || xs[2] != cfg_.unet.input_len)
    fail(ErrorKind::Shape, "coarse_forward: expected [B, 1, " +
                               std::to_string(cfg_.unet.input_len) + "], got " +
                               ad::shape_str(xs));
  CoarseOutput out;
  out.peak_prob = unet_forward(tape, b, coarse_, x, {}, &out.decoder);
  out.bottleneck = out.decoder[kUNetDepth - 1];
  return out;
}

template <typename T>
Var CascadedModel<T>::classify(Tape& tape, const Bindings& b, Var bottleneck) const {
  const auto& bs = tape.shape(bottleneck);
  if (bs.size() != 3 || bs[1] != cfg_.unet.channels[kUNetDepth - 1])
    fail(ErrorKind::Shape, "classify: unexpected bottleneck shape " + ad::shape_str(bs));
  const T slope = static_cast<T>(kLeakySlope);
  Var h = ad::bin_mean_pool(tape, bottleneck, cfg_.classifier_bins);
  h = ad::leaky_relu(tape, ad::dense(tape, h, b.vars[classifier_[0].w], b.vars[classifier_[0].b]), slope);
  h = ad::leaky_relu(tape, ad::dense(tape, h, b.vars[classifier_[1].w], b.vars[classifier_[1].b]), slope);
  h = ad::dense(tape, h, b.vars[classifier_[2].w], b.vars[classifier_[2].b]);
  return ad::softmax(tape, h, 1);
}

template <typename T>
Var CascadedModel<T>::refined_forward(Tape& tape, const Bindings& b, Var x_window,
                                      std::span<const Var> cropped) const {
  const auto& xs = tape.shape(x_window);
  const std::size_t w = cfg_.sbp.window_w;
  if (xs.size() != 3 || xs[1] != 1 || xs[2] != w)
    fail(ErrorKind::Shape, "refined_forward: expected [B, 1, " + std::to_string(w) + "], got " +
                               ad::shape_str(xs));
  if (cropped.size() != kUNetDepth)
    fail(ErrorKind::Shape, "refined_forward: one cropped feature per layer required");
  for (std::size_t l = 0; l < kUNetDepth; ++l) {
    const auto& cs = tape.shape(cropped[l]);
    if (cs.size() != 3 || cs[0] != xs[0] || cs[1] != cfg_.unet.channels[l] || cs[2] != (w >> l))
      fail(ErrorKind::Shape, "refined_forward: cropped feature " + std::to_string(l) +
                                 " has shape " + ad::shape_str(cs));
  }
  return unet_forward(tape, b, refined_, x_window, cropped, nullptr);
}

template <typename T>
ad::Checkpoint CascadedModel<T>::to_checkpoint() const {
  ad::Checkpoint ckpt;
  ckpt.config_record = cfg_.to_json();
  for (const auto& p : params_) {
    ad::NamedArray a;
    a.name = p.name;
    a.shape = p.value.shape;
    a.values.assign(p.value.data.begin(), p.value.data.end());
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

template <typename T>
CascadedModel<T> CascadedModel<T>::from_checkpoint(const ad::Checkpoint& ckpt) {
  CascadedModel<T> model(ModelConfig::from_json(ckpt.config_record), 0);
  if (ckpt.arrays.size() != model.params_.size())
    fail(ErrorKind::Io, "checkpoint holds " + std::to_string(ckpt.arrays.size()) +
                            " arrays, model expects " + std::to_string(model.params_.size()));
  for (auto& p : model.params_) {
    const auto& a = ckpt.find(p.name);
    if (a.shape != p.value.shape)
      fail(ErrorKind::Shape, "checkpoint array '" + p.name + "' has shape " +
                                 ad::shape_str(a.shape) + ", expected " +
                                 ad::shape_str(p.value.shape));
    std::transform(a.values.begin(), a.values.end(), p.value.data.begin(),
                   [](float v) { return static_cast<T>(v); });
  }
  return model;
}

template class CascadedModel<float>;
template class CascadedModel<double>;

template <typename T>
ad::Var region_crop(ad::Tape<T>& tape, ad::Var decoder_feature, std::span<const std::size_t> starts,
                    std::size_t window_w, std::size_t layer) {
  const std::size_t stride = std::size_t{1} << (kUNetDepth - 1);
  if (window_w % stride != 0)
    fail(ErrorKind::Config, "window_w " + std::to_string(window_w) + " is not divisible by " +
                                std::to_string(stride));
  if (layer >= kUNetDepth) fail(ErrorKind::Config, "region_crop: layer out of range");
  std::vector<std::size_t> scaled(starts.size());
  for (std::size_t i = 0; i < starts.size(); ++i) scaled[i] = starts[i] >> layer;
  return ad::crop_rows(tape, decoder_feature, scaled, window_w >> layer);
}

template ad::Var region_crop<float>(ad::Tape<float>&, ad::Var, std::span<const std::size_t>,
                                    std::size_t, std::size_t);
template ad::Var region_crop<double>(ad::Tape<double>&, ad::Var, std::span<const std::size_t>,
                                     std::size_t, std::size_t);

template <typename T>
ad::Tensor<T> make_input_batch(std::span<const AModeFrame* const> frames, std::size_t input_len) {
  ad::Tensor<T> x({frames.size(), 1, input_len});
  for (std::size_t n = 0; n < frames.size(); ++n) {
    const auto& v = frames[n]->normalized;
    if (v.size() > input_len)
      fail(ErrorKind::Shape, "frame of " + std::to_string(v.size()) +
                                 " samples exceeds model input length " +
                                 std::to_string(input_len));
    std::transform(v.begin(), v.end(), x.data.begin() + static_cast<std::ptrdiff_t>(n * input_len),
                   [](float s) { return static_cast<T>(s); });
  }
  return x;
}

template ad::Tensor<float> make_input_batch<float>(std::span<const AModeFrame* const>, std::size_t);
template ad::Tensor<double> make_input_batch<double>(std::span<const AModeFrame* const>,
                                                     std::size_t);

}  // namespace bonetrack
