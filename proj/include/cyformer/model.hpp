#pragma once

// Cyclic-attention encoder-decoder for battery state-of-health prediction.
//
// Input is a window of n_in discharge cycles, each resampled to l_sample
// points of c channels: [batch x n_in x l_sample x c]. The encoder embeds
// every point to d_encoder, adds a 2D sinusoidal position code (cycle,
// sample) and runs layers of
//
//   row-wise attention    (over the samples of one cycle, weights shared by cycles)
//   column-wise attention (over cycles at one sample index, weights shared by samples)
//   3-layer MLP
//
// each followed by a residual add and layer norm. An output head then flattens
// each cycle's l_sample x d_encoder block into one d_decoder feature. The
// decoder starts from n_out learned queries plus a 1D position code and runs
// self-attention, cross-attention onto the cycle features and an MLP, again
// with residual + norm. A scalar head maps each query to one SoH value.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cyformer/tensor.hpp"

namespace cyformer {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kQueryInitStd = 0.02;

struct ModelConfig {
  std::size_t c = 5;         // channels: Cm, Vm, Cl, Vl, T
  std::size_t l_sample = 32; // samples per cycle
  std::size_t n_in = 16;     // input window, cycles
  std::size_t n_out = 1;     // prediction horizon, cycles
  std::size_t d_encoder = 16;
  std::size_t d_decoder = 16;
  std::size_t n_enc_layers = 4;
  std::size_t n_dec_layers = 4;
  std::size_t n_heads = 8;
  // MLP hidden width of each stack; 0 means 4 * width of that stack.
  std::size_t mlp_hidden = 0;
  bool enable_row_attn = true;
  bool enable_col_attn = true;
  Activation activation = Activation::relu;

  std::size_t encoder_hidden() const { return mlp_hidden ? mlp_hidden : 4 * d_encoder; }
  std::size_t decoder_hidden() const { return mlp_hidden ? mlp_hidden : 4 * d_decoder; }

  // Throws ConfigError on zero counts, head counts that do not divide the
  // widths, or odd widths (the sinusoidal codes need even widths).
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string activation_name(Activation act);
Activation parse_activation(const std::string& name);

template <typename T>
struct LinearParams {
  Tensor<T> w; // [in x out]
  Tensor<T> b; // [out]
};

template <typename T>
struct NormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct AttentionParams {
  LinearParams<T> q, k, v, o;
  std::size_t n_heads = 1;
};

template <typename T>
struct MlpParams {
  LinearParams<T> fc1, fc2, fc3;
};

// Disabled attention blocks (ablation) are absent together with their norm.
template <typename T>
struct EncoderLayerParams {
  std::optional<AttentionParams<T>> row_attn;
  std::optional<NormParams<T>> row_norm;
  std::optional<AttentionParams<T>> col_attn;
  std::optional<NormParams<T>> col_norm;
  MlpParams<T> mlp;
  NormParams<T> mlp_norm;
};

template <typename T>
struct DecoderLayerParams {
  AttentionParams<T> self_attn;
  NormParams<T> self_norm;
  AttentionParams<T> cross_attn;
  NormParams<T> cross_norm;
  MlpParams<T> mlp;
  NormParams<T> mlp_norm;
};

// Post-softmax weights of one attention call, [batch x heads x L x M].
template <typename T>
struct AttentionTrace {
  Tensor<T> weights;
};

// ---- positional codes ------------------------------------------------------

// entry 2i = sin(pos / 10000^(2i/d)), entry 2i+1 = cos(same); d must be even.
template <typename T>
Tensor<T> pe_1d(std::size_t pos, std::size_t d);

// pe_1d(cycle, d) + pe_1d(sample, d)
template <typename T>
Tensor<T> pe_2d(std::size_t cycle, std::size_t sample, std::size_t d);

// [n_in x l_sample x d] table of pe_2d codes.
template <typename T>
Tensor<T> pe_2d_table(std::size_t n_in, std::size_t l_sample, std::size_t d);

// [n x d] table of pe_1d codes for positions 0..n-1.
template <typename T>
Tensor<T> pe_1d_table(std::size_t n, std::size_t d);

// ---- blocks ----------------------------------------------------------------

// Multi-head scaled dot-product attention with input and output projections.
// `seq` is [L x d] or [N x L x d]; `kv` (same rank, [.. x M x d]) defaults to
// `seq`. Scores are scaled by 1/sqrt(d) over the full width, not per head.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& seq, const AttentionParams<T>& params,
                               const Tensor<T>* kv = nullptr, AttentionTrace<T>* trace = nullptr);

// x is [n_in x l x d] or [B x n_in x l x d]. Each cycle (row) is one
// sequence: y = layer_norm(row + attention(row)).
template <typename T>
Tensor<T> row_wise_attention(const Tensor<T>& x, const AttentionParams<T>& attn,
                             const NormParams<T>& norm, AttentionTrace<T>* trace = nullptr);
template <typename T>
Tensor<T> row_wise_attention(const Tensor<T>& x, const EncoderLayerParams<T>& layer);

// Same as row_wise_attention with each sample index (column) as the sequence.
template <typename T>
Tensor<T> column_wise_attention(const Tensor<T>& x, const AttentionParams<T>& attn,
                                const NormParams<T>& norm, AttentionTrace<T>* trace = nullptr);
template <typename T>
Tensor<T> column_wise_attention(const Tensor<T>& x, const EncoderLayerParams<T>& layer);

// fc1 -> act -> fc2 -> act -> fc3
template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const MlpParams<T>& mlp, Activation act);

template <typename T>
Tensor<T> encoder_layer_forward(const Tensor<T>& x, const EncoderLayerParams<T>& layer,
                                Activation act);

// [.. x n_in x l x d_enc] -> [.. x n_in x d_dec] with one affine map over the
// flattened (sample, channel) block of each cycle.
template <typename T>
Tensor<T> encoder_output_head(const Tensor<T>& x, const LinearParams<T>& head);

// q is [n_out x d] or [B x n_out x d]; feats is [n_in x d] or [B x n_in x d].
// No causal mask: all queries see each other.
template <typename T>
Tensor<T> decoder_layer_forward(const Tensor<T>& q, const Tensor<T>& feats,
                                const DecoderLayerParams<T>& layer, Activation act,
                                AttentionTrace<T>* cross_trace = nullptr);

// ---- model -----------------------------------------------------------------

template <typename T>
class CyFormer {
public:
  // Xavier-uniform weights, zero biases, unit/zero norms, N(0, 0.02^2) queries.
  CyFormer(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // [B x n_in x l_sample x c] -> [B x n_out]; raw, unclamped outputs.
  Tensor<T> forward(const Tensor<T>& input) const;

  // Stable order; names are unique dotted paths.
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::size_t num_scalars() const;
  void zero_grads();

  const LinearParams<T>& embed() const { return embed_; }
  const std::vector<EncoderLayerParams<T>>& encoder_layers() const { return encoder_; }
  const LinearParams<T>& enc_head() const { return enc_head_; }
  const Tensor<T>& queries() const { return queries_; }
  const std::vector<DecoderLayerParams<T>>& decoder_layers() const { return decoder_; }
  const LinearParams<T>& out_head() const { return out_head_; }

  // Deep copy with independent parameter storage.
  CyFormer clone() const;

private:
  CyFormer() = default;
  void register_all();

  ModelConfig config_;
  LinearParams<T> embed_;
  std::vector<EncoderLayerParams<T>> encoder_;
  LinearParams<T> enc_head_;
  Tensor<T> queries_;
  std::vector<DecoderLayerParams<T>> decoder_;
  LinearParams<T> out_head_;
  Tensor<T> enc_pe_;
  Tensor<T> dec_pe_;
  std::vector<Parameter<T>> params_;
};

// ---- accounting ------------------------------------------------------------

// Learnable scalars, including biases, norm gains/biases and queries.
std::size_t count_params(const ModelConfig& config);

// Per-layer share of row / column attention (projections plus their norm).
std::size_t attention_block_params(std::size_t d);

// Multiply-adds of every matmul and linear map in one batch-1 forward pass,
// times two. Bias adds, softmax, norms and activations are not counted.
std::uint64_t count_flops(const ModelConfig& config);

// Smaller encoder depth and/or l_sample for retraining. Throws ContractError
// when a value is zero or exceeds the original.
ModelConfig prune(const ModelConfig& config, std::optional<std::size_t> depth,
                  std::optional<std::size_t> l_sample);

} // namespace cyformer
