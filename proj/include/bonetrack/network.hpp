#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bonetrack/autodiff/checkpoint.hpp"
#include "bonetrack/autodiff/ops.hpp"
#include "bonetrack/rng.hpp"
#include "bonetrack/signal.hpp"

namespace bonetrack {

inline constexpr std::size_t kUNetDepth = 5;

struct UNetConfig {
  std::size_t depth = kUNetDepth;
  std::array<std::size_t, kUNetDepth> channels{16, 32, 64, 128, 256};
  std::size_t kernel_size = 5;
  std::size_t input_len = 2048;

  void validate() const;
};

enum class SbpMode { Stochastic, Deterministic };

struct SbpConfig {
  std::size_t window_w = 160;
  std::size_t candidate_factor = 3;
  double gaussian_std = 1.0;
  SbpMode mode = SbpMode::Deterministic;

  std::size_t candidate_width() const noexcept { return candidate_factor * window_w; }
  void validate(std::size_t input_len) const;
};

/// Everything needed to rebuild a model; serialized into checkpoints.
struct ModelConfig {
  Area area = Area::Femur;
  std::size_t signal_len = 2048;  // frame length; input_len is this rounded up to 2^(depth-1)
  UNetConfig unet;
  SbpConfig sbp;
  std::array<std::size_t, 2> classifier_hidden{256, 64};
  std::size_t classifier_bins = 8;

  std::size_t num_regions() const noexcept { return region_count(area); }

  /// Defaults for a frame length: input padded to a multiple of 16, refined
  /// window of signal_len / 13 rounded to a multiple of 16 (512 at 6760).
  static ModelConfig for_signal(Area area, std::size_t signal_len);

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

struct RegionProposal {
  std::size_t start = 0;
  std::size_t width = 0;
  std::size_t center = 0;
  std::size_t candidate_start = 0;
  std::vector<double> distribution;  // over [candidate_start, candidate_start + size)
  bool fallback = false;             // all-zero probabilities, centred on the signal
};

/// Proposes the refined window from per-sample peak probabilities: a
/// candidate region 3x the window wide around the most probable sample, a
/// mixture of unit Gaussians weighted by the probabilities inside it, and one
/// window centre either drawn from the mixture (stochastic) or taken at its
/// mode (deterministic). `rng` is only used in stochastic mode.
RegionProposal sbp_propose(std::span<const double> peak_prob, const SbpConfig& cfg, Rng* rng);

template <typename T>
RegionProposal sbp_propose(std::span<const T> peak_prob, const SbpConfig& cfg, Rng* rng) {
  std::vector<double> p(peak_prob.begin(), peak_prob.end());
  return sbp_propose(std::span<const double>(p), cfg, rng);
}

/// Parameters of the cascaded network.
template <typename T>
class CascadedModel {
 public:
  using Tape = ad::Tape<T>;
  using Var = ad::Var;

  struct Bindings {
    std::vector<Var> vars;
  };

  struct CoarseOutput {
    Var peak_prob;                           // [B, 1, input_len]
    Var bottleneck;                          // [B, C4, input_len / 16]
    std::array<Var, kUNetDepth> decoder;     // decoder features per layer; [4] is the bottleneck
  };

  CascadedModel(ModelConfig cfg, std::uint64_t init_seed);

  const ModelConfig& config() const noexcept { return cfg_; }
  std::vector<ad::Parameter<T>*> parameters();
  std::vector<const ad::Parameter<T>*> parameters() const;
  std::size_t parameter_count() const;

  /// Registers every parameter on the tape. The const overload is for tapes
  /// that do not record (weights are copied as constants).
  Bindings bind(Tape& tape);
  Bindings bind(Tape& tape) const;

  CoarseOutput coarse_forward(Tape& tape, const Bindings& b, Var x) const;
  /// Region probabilities [B, num_regions].
  Var classify(Tape& tape, const Bindings& b, Var bottleneck) const;
  /// Peak probability over the window [B, 1, window_w].
  Var refined_forward(Tape& tape, const Bindings& b, Var x_window,
                      std::span<const Var> cropped) const;

  ad::Checkpoint to_checkpoint() const;
  static CascadedModel from_checkpoint(const ad::Checkpoint& ckpt);

 private:
  struct ConvSlot {
    std::size_t w = 0, b = 0;
  };
  struct UNetSlots {
    std::array<ConvSlot, kUNetDepth> enc1, enc2;
    std::array<ConvSlot, kUNetDepth - 1> dec1, dec2, att_enc, att_gate;
    ConvSlot head;
  };

  ConvSlot add_conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
                    Rng& rng);
  ConvSlot add_dense(const std::string& name, std::size_t fout, std::size_t fin, Rng& rng);
  UNetSlots build_unet(const std::string& prefix, bool refined, Rng& rng);

  Var conv(Tape& tape, const Bindings& b, ConvSlot s, Var x) const;
  Var unet_forward(Tape& tape, const Bindings& b, const UNetSlots& s, Var x,
                   std::span<const Var> cropped, std::array<Var, kUNetDepth>* decoder) const;

  ModelConfig cfg_;
  std::vector<ad::Parameter<T>> params_;
  UNetSlots coarse_{};
  UNetSlots refined_{};
  std::array<ConvSlot, 3> classifier_{};
};

extern template class CascadedModel<float>;
extern template class CascadedModel<double>;

/// Cuts layer `layer` of the coarse decoder to the proposal window,
/// downsampled by 2^layer: [start >> layer, (start + window_w) >> layer).
template <typename T>
ad::Var region_crop(ad::Tape<T>& tape, ad::Var decoder_feature, std::span<const std::size_t> starts,
                    std::size_t window_w, std::size_t layer);

/// Stacks normalized frames into [B, 1, input_len], zero-padding the tail.
template <typename T>
ad::Tensor<T> make_input_batch(std::span<const AModeFrame* const> frames, std::size_t input_len);

}  // namespace bonetrack
