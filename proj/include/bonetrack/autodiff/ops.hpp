#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bonetrack/autodiff/tape.hpp"

namespace bonetrack::ad {

// Differentiable operations. All of them record onto the tape of their
// inputs; shape errors throw Error{Shape}.

/// Cross-correlation with zero "same" padding and stride 1.
/// x [B, Cin, L], w [Cout, Cin, K] (K odd), b [Cout] -> [B, Cout, L].
template <typename T>
Var conv1d(Tape<T>& tape, Var x, Var w, Var b);

/// leaky_relu(conv1d(x, w, b), slope). On a non-recording tape the two are
/// fused into one pass with no intermediate node.
template <typename T>
Var conv1d_leaky(Tape<T>& tape, Var x, Var w, Var b, T slope);

struct MaxPoolResult {
  Var out;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

/// Window-2 max pooling along the last axis. Odd lengths are padded by
/// replicating the last sample. Ties go to the lower index.
template <typename T>
MaxPoolResult maxpool1d(Tape<T>& tape, Var x);

/// Nearest-neighbour upsampling along the last axis.
template <typename T>
Var upsample1d(Tape<T>& tape, Var x, std::size_t factor = 2);

/// x [B, F], w [F', F], b [F'] -> [B, F'].
template <typename T>
Var dense(Tape<T>& tape, Var x, Var w, Var b);

template <typename T>
Var leaky_relu(Tape<T>& tape, Var x, T slope = T(0.1));

template <typename T>
Var sigmoid(Tape<T>& tape, Var x);

template <typename T>
Var softmax(Tape<T>& tape, Var x, std::size_t axis);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

/// Elementwise product of equal shapes.
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);

template <typename T>
Var concat(Tape<T>& tape, std::span<const Var> xs, std::size_t axis);

template <typename T>
Var crop(Tape<T>& tape, Var x, std::size_t start, std::size_t len, std::size_t axis);

/// Crops the last axis of a [B, C, L] tensor with a separate start per batch item.
template <typename T>
Var crop_rows(Tape<T>& tape, Var x, std::span<const std::size_t> starts, std::size_t len);

/// Mean over `bins` contiguous chunks of the last axis, flattened:
/// [B, C, L] -> [B, C * bins]. Chunk j covers [j L / bins, (j + 1) L / bins).
template <typename T>
Var bin_mean_pool(Tape<T>& tape, Var x, std::size_t bins);

/// Attention-gated skip connection: enc * sigmoid(conv1x1(enc) + conv1x1(gate_src)).
/// Fused into a single node on a non-recording tape when both kernels are 1 wide.
template <typename T>
Var attention_gate(Tape<T>& tape, Var enc, Var gate_src, Var w_enc, Var b_enc, Var w_gate,
                   Var b_gate);

// Losses. Inputs are probabilities laid out [B, ...]; each returns a scalar
// averaged over the batch.

/// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps), per batch item.
template <typename T>
Var dice_loss(Tape<T>& tape, Var pred, const Tensor<T>& truth, double eps);

/// Binary cross-entropy of foreground probability against a {0,1} mask,
/// mean over all positions. log is floored at 1e-12.
template <typename T>
Var bce_loss(Tape<T>& tape, Var pred, const Tensor<T>& truth);

/// Categorical cross-entropy of probabilities [B, X] against class indices.
template <typename T>
Var nll_loss(Tape<T>& tape, Var probs, std::span<const std::size_t> labels);

template <typename T>
Var sum_all(Tape<T>& tape, std::span<const Var> scalars);

}  // namespace bonetrack::ad
