#include "cyformer/model.hpp"

#include <cmath>
#include <random>

#include "cyformer/errors.hpp"

namespace cyformer {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model.") + name + " must be >= 1");
  };
  positive(c, "c");
  positive(l_sample, "l_sample");
  positive(n_in, "n_in");
  positive(n_out, "n_out");
  positive(d_encoder, "d_encoder");
  positive(d_decoder, "d_decoder");
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dec_layers, "n_dec_layers");
  positive(n_heads, "n_heads");
  if (d_encoder % n_heads != 0 || d_decoder % n_heads != 0)
    throw ConfigError("model.n_heads (" + std::to_string(n_heads) +
                      ") must divide d_encoder and d_decoder");
  if (d_encoder % 2 != 0 || d_decoder % 2 != 0)
    throw ConfigError("model.d_encoder and model.d_decoder must be even for sinusoidal codes");
}

std::string activation_name(Activation act) { return act == Activation::relu ? "relu" : "gelu"; }

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + name + "' (expected relu or gelu)");
}

// ---- positional codes ------------------------------------------------------

template <typename T>
Tensor<T> pe_1d(std::size_t pos, std::size_t d) {
  if (d == 0 || d % 2 != 0)
    throw ConfigError("positional code width must be even and positive, got " + std::to_string(d));
  std::vector<T> v(d);
  for (std::size_t i = 0; 2 * i < d; ++i) {
    const double angle =
        static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / d);
    v[2 * i] = static_cast<T>(std::sin(angle));
    v[2 * i + 1] = static_cast<T>(std::cos(angle));
  }
  return Tensor<T>::from({d}, std::move(v));
}

template <typename T>
Tensor<T> pe_2d(std::size_t cycle, std::size_t sample, std::size_t d) {
  auto a = pe_1d<T>(cycle, d);
  auto b = pe_1d<T>(sample, d);
  for (std::size_t i = 0; i < d; ++i) a.data()[i] += b.data()[i];
  return a;
}

template <typename T>
Tensor<T> pe_2d_table(std::size_t n_in, std::size_t l_sample, std::size_t d) {
  auto table = Tensor<T>::zeros({n_in, l_sample, d});
  auto out = table.data();
  for (std::size_t i = 0; i < n_in; ++i)
    for (std::size_t j = 0; j < l_sample; ++j) {
      auto code = pe_2d<T>(i, j, d);
      std::copy(code.data().begin(), code.data().end(), out.begin() + (i * l_sample + j) * d);
    }
  return table;
}

template <typename T>
Tensor<T> pe_1d_table(std::size_t n, std::size_t d) {
  auto table = Tensor<T>::zeros({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    auto code = pe_1d<T>(i, d);
    std::copy(code.data().begin(), code.data().end(), table.data().begin() + i * d);
  }
  return table;
}

// ---- blocks ----------------------------------------------------------------

namespace {

// [N x L x d] -> [N*h x L x d/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t n = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (heads == 1) return x;
  auto t = reshape(x, {n, l, heads, d / heads});
  t = permute(t, {0, 2, 1, 3});
  return reshape(t, {n * heads, l, d / heads});
}

// [N*h x L x dh] -> [N x L x h*dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t n, std::size_t heads) {
  const std::size_t l = x.dim(1), dh = x.dim(2);
  if (heads == 1) return x;
  auto t = reshape(x, {n, heads, l, dh});
  t = permute(t, {0, 2, 1, 3});
  return reshape(t, {n, l, heads * dh});
}

template <typename T>
T eps() {
  return static_cast<T>(kLayerNormEps);
}

// Lifts [n_in x l x d] to [1 x n_in x l x d]; reports whether it did.
template <typename T>
std::pair<Tensor<T>, bool> as_batched(const Tensor<T>& x, std::size_t rank, const char* what) {
  if (x.rank() == rank) return {x, false};
  if (x.rank() + 1 == rank) {
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    return {reshape(x, s), true};
  }
  throw DimensionError(std::string(what) + ": unexpected input shape " + shape_str(x.shape()));
}

template <typename T>
Tensor<T> unbatch(const Tensor<T>& x, bool lifted) {
  if (!lifted) return x;
  Shape s(x.shape().begin() + 1, x.shape().end());
  return reshape(x, s);
}

} // namespace

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& seq, const AttentionParams<T>& params,
                               const Tensor<T>* kv, AttentionTrace<T>* trace) {
  auto [x, lifted] = as_batched(seq, 3, "multi_head_attention");
  Tensor<T> src = x;
  if (kv != nullptr) {
    auto [k_src, kv_lifted] = as_batched(*kv, 3, "multi_head_attention");
    if (kv_lifted != lifted || k_src.dim(0) != x.dim(0) || k_src.dim(2) != x.dim(2))
      throw DimensionError("multi_head_attention: keys/values " + shape_str(kv->shape()) +
                           " incompatible with queries " + shape_str(seq.shape()));
    src = k_src;
  }
  const std::size_t n = x.dim(0), d = x.dim(2);
  const std::size_t heads = params.n_heads;
  if (heads == 0 || d % heads != 0)
    throw DimensionError("multi_head_attention: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(heads) + " heads");

  auto q = split_heads(linear(x, params.q.w, params.q.b), heads);
  auto k = split_heads(linear(src, params.k.w, params.k.b), heads);
  auto v = split_heads(linear(src, params.v.w, params.v.b), heads);

  auto scores = scale(bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  auto weights = softmax_lastdim(scores);
  if (trace != nullptr)
    trace->weights = reshape(weights, {n, heads, x.dim(1), src.dim(1)});
  auto ctx = merge_heads(bmm(weights, v), n, heads);
  return unbatch(linear(ctx, params.o.w, params.o.b), lifted);
}

template <typename T>
Tensor<T> row_wise_attention(const Tensor<T>& x, const AttentionParams<T>& attn,
                             const NormParams<T>& norm, AttentionTrace<T>* trace) {
  auto [xb, lifted] = as_batched(x, 4, "row_wise_attention");
  const std::size_t b = xb.dim(0), rows = xb.dim(1), cols = xb.dim(2), d = xb.dim(3);
  auto seqs = reshape(xb, {b * rows, cols, d});
  auto attended = reshape(multi_head_attention<T>(seqs, attn, nullptr, trace), {b, rows, cols, d});
  return unbatch(layer_norm(add(xb, attended), norm.gain, norm.bias, eps<T>()), lifted);
}

template <typename T>
Tensor<T> row_wise_attention(const Tensor<T>& x, const EncoderLayerParams<T>& layer) {
  if (!layer.row_attn) throw ContractError("row-wise attention is disabled in this layer");
  return row_wise_attention(x, *layer.row_attn, *layer.row_norm);
}

template <typename T>
Tensor<T> column_wise_attention(const Tensor<T>& x, const AttentionParams<T>& attn,
                                const NormParams<T>& norm, AttentionTrace<T>* trace) {
  auto [xb, lifted] = as_batched(x, 4, "column_wise_attention");
  const std::size_t b = xb.dim(0), rows = xb.dim(1), cols = xb.dim(2), d = xb.dim(3);
  auto seqs = reshape(permute(xb, {0, 2, 1, 3}), {b * cols, rows, d});
  auto attended = multi_head_attention<T>(seqs, attn, nullptr, trace);
  attended = permute(reshape(attended, {b, cols, rows, d}), {0, 2, 1, 3});
  return unbatch(layer_norm(add(xb, attended), norm.gain, norm.bias, eps<T>()), lifted);
}

template <typename T>
Tensor<T> column_wise_attention(const Tensor<T>& x, const EncoderLayerParams<T>& layer) {
  if (!layer.col_attn) throw ContractError("column-wise attention is disabled in this layer");
  return column_wise_attention(x, *layer.col_attn, *layer.col_norm);
}

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const MlpParams<T>& mlp, Activation act) {
  auto h = activate(linear(x, mlp.fc1.w, mlp.fc1.b), act);
  h = activate(linear(h, mlp.fc2.w, mlp.fc2.b), act);
  return linear(h, mlp.fc3.w, mlp.fc3.b);
}

template <typename T>
Tensor<T> encoder_layer_forward(const Tensor<T>& x, const EncoderLayerParams<T>& layer,
                                Activation act) {
  Tensor<T> y = x;
  if (layer.row_attn) y = row_wise_attention(y, *layer.row_attn, *layer.row_norm);
  if (layer.col_attn) y = column_wise_attention(y, *layer.col_attn, *layer.col_norm);
  return layer_norm(add(y, mlp_forward(y, layer.mlp, act)), layer.mlp_norm.gain,
                    layer.mlp_norm.bias, eps<T>());
}

template <typename T>
Tensor<T> encoder_output_head(const Tensor<T>& x, const LinearParams<T>& head) {
  if (x.rank() < 3)
    throw DimensionError("encoder_output_head: expected [.. x n_in x l x d], got " +
                         shape_str(x.shape()));
  Shape flat(x.shape().begin(), x.shape().end() - 2);
  flat.push_back(x.dim(x.rank() - 2) * x.dim(x.rank() - 1));
  return linear(reshape(x, flat), head.w, head.b);
}

template <typename T>
Tensor<T> decoder_layer_forward(const Tensor<T>& q, const Tensor<T>& feats,
                                const DecoderLayerParams<T>& layer, Activation act,
                                AttentionTrace<T>* cross_trace) {
  auto y = layer_norm(add(q, multi_head_attention(q, layer.self_attn)), layer.self_norm.gain,
                      layer.self_norm.bias, eps<T>());
  y = layer_norm(add(y, multi_head_attention(y, layer.cross_attn, &feats, cross_trace)),
                 layer.cross_norm.gain, layer.cross_norm.bias, eps<T>());
  return layer_norm(add(y, mlp_forward(y, layer.mlp, act)), layer.mlp_norm.gain,
                    layer.mlp_norm.bias, eps<T>());
}

// ---- model -----------------------------------------------------------------

namespace {

template <typename T>
class Initializer {
public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  LinearParams<T> linear(std::size_t in, std::size_t out) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-a, a);
    std::vector<T> w(in * out);
    for (auto& v : w) v = static_cast<T>(dist(rng_));
    return {Tensor<T>::from({in, out}, std::move(w), true), Tensor<T>::zeros({out}, true)};
  }

  NormParams<T> norm(std::size_t d) {
    return {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)};
  }

  AttentionParams<T> attention(std::size_t d, std::size_t heads) {
    AttentionParams<T> p;
    p.q = linear(d, d);
    p.k = linear(d, d);
    p.v = linear(d, d);
    p.o = linear(d, d);
    p.n_heads = heads;
    return p;
  }

  MlpParams<T> mlp(std::size_t d, std::size_t hidden) {
    return {linear(d, hidden), linear(hidden, hidden), linear(hidden, d)};
  }

  Tensor<T> normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
  }

private:
  std::mt19937_64 rng_;
};

template <typename T, typename F>
void visit_linear(const std::string& prefix, LinearParams<T>& p, F& f) {
  f(prefix + ".w", p.w);
  f(prefix + ".b", p.b);
}

template <typename T, typename F>
void visit_norm(const std::string& prefix, NormParams<T>& p, F& f) {
  f(prefix + ".gain", p.gain);
  f(prefix + ".bias", p.bias);
}

template <typename T, typename F>
void visit_attention(const std::string& prefix, AttentionParams<T>& p, F& f) {
  f(prefix + ".w_q", p.q.w);
  f(prefix + ".b_q", p.q.b);
  f(prefix + ".w_k", p.k.w);
  f(prefix + ".b_k", p.k.b);
  f(prefix + ".w_v", p.v.w);
  f(prefix + ".b_v", p.v.b);
  f(prefix + ".w_o", p.o.w);
  f(prefix + ".b_o", p.o.b);
}

template <typename T, typename F>
void visit_mlp(const std::string& prefix, MlpParams<T>& p, F& f) {
  visit_linear(prefix + ".fc1", p.fc1, f);
  visit_linear(prefix + ".fc2", p.fc2, f);
  visit_linear(prefix + ".fc3", p.fc3, f);
}

template <typename T, typename F>
void visit_model(LinearParams<T>& embed, std::vector<EncoderLayerParams<T>>& encoder,
                 LinearParams<T>& enc_head, Tensor<T>& queries,
                 std::vector<DecoderLayerParams<T>>& decoder, LinearParams<T>& out_head, F&& f) {
  visit_linear("embed", embed, f);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const std::string p = "encoder." + std::to_string(i);
    auto& layer = encoder[i];
    if (layer.row_attn) {
      visit_attention(p + ".row_attn", *layer.row_attn, f);
      visit_norm(p + ".row_norm", *layer.row_norm, f);
    }
    if (layer.col_attn) {
      visit_attention(p + ".col_attn", *layer.col_attn, f);
      visit_norm(p + ".col_norm", *layer.col_norm, f);
    }
    visit_mlp(p + ".mlp", layer.mlp, f);
    visit_norm(p + ".mlp_norm", layer.mlp_norm, f);
  }
  visit_linear("enc_head", enc_head, f);
  f(std::string("queries"), queries);
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i);
    auto& layer = decoder[i];
    visit_attention(p + ".self_attn", layer.self_attn, f);
    visit_norm(p + ".self_norm", layer.self_norm, f);
    visit_attention(p + ".cross_attn", layer.cross_attn, f);
    visit_norm(p + ".cross_norm", layer.cross_norm, f);
    visit_mlp(p + ".mlp", layer.mlp, f);
    visit_norm(p + ".mlp_norm", layer.mlp_norm, f);
  }
  visit_linear("out_head", out_head, f);
}

} // namespace

template <typename T>
CyFormer<T>::CyFormer(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const auto& cfg = config_;
  Initializer<T> init(seed);

  embed_ = init.linear(cfg.c, cfg.d_encoder);
  for (std::size_t i = 0; i < cfg.n_enc_layers; ++i) {
    EncoderLayerParams<T> layer;
    if (cfg.enable_row_attn) {
      layer.row_attn = init.attention(cfg.d_encoder, cfg.n_heads);
      layer.row_norm = init.norm(cfg.d_encoder);
    }
    if (cfg.enable_col_attn) {
      layer.col_attn = init.attention(cfg.d_encoder, cfg.n_heads);
      layer.col_norm = init.norm(cfg.d_encoder);
    }
    layer.mlp = init.mlp(cfg.d_encoder, cfg.encoder_hidden());
    layer.mlp_norm = init.norm(cfg.d_encoder);
    encoder_.push_back(std::move(layer));
  }
  enc_head_ = init.linear(cfg.l_sample * cfg.d_encoder, cfg.d_decoder);
  queries_ = init.normal({cfg.n_out, cfg.d_decoder}, kQueryInitStd);
  for (std::size_t i = 0; i < cfg.n_dec_layers; ++i) {
    DecoderLayerParams<T> layer;
    layer.self_attn = init.attention(cfg.d_decoder, cfg.n_heads);
    layer.self_norm = init.norm(cfg.d_decoder);
    layer.cross_attn = init.attention(cfg.d_decoder, cfg.n_heads);
    layer.cross_norm = init.norm(cfg.d_decoder);
    layer.mlp = init.mlp(cfg.d_decoder, cfg.decoder_hidden());
    layer.mlp_norm = init.norm(cfg.d_decoder);
    decoder_.push_back(std::move(layer));
  }
  out_head_ = init.linear(cfg.d_decoder, 1);

  enc_pe_ = pe_2d_table<T>(cfg.n_in, cfg.l_sample, cfg.d_encoder);
  dec_pe_ = pe_1d_table<T>(cfg.n_out, cfg.d_decoder);
  register_all();
}

template <typename T>
void CyFormer<T>::register_all() {
  params_.clear();
  visit_model(embed_, encoder_, enc_head_, queries_, decoder_, out_head_,
              [this](const std::string& name, Tensor<T>& t) { params_.push_back({name, t}); });
}

template <typename T>
CyFormer<T> CyFormer<T>::clone() const {
  CyFormer copy = *this;
  visit_model(copy.embed_, copy.encoder_, copy.enc_head_, copy.queries_, copy.decoder_,
              copy.out_head_, [](const std::string&, Tensor<T>& t) {
                t = t.clone();
                t.set_requires_grad(true);
              });
  copy.register_all();
  return copy;
}

template <typename T>
std::size_t CyFormer<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename T>
void CyFormer<T>::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Tensor<T> CyFormer<T>::forward(const Tensor<T>& input) const {
  const auto& cfg = config_;
  if (input.rank() != 4 || input.dim(1) != cfg.n_in || input.dim(2) != cfg.l_sample ||
      input.dim(3) != cfg.c)
    throw DimensionError("model input must be [B x " + std::to_string(cfg.n_in) + " x " +
                         std::to_string(cfg.l_sample) + " x " + std::to_string(cfg.c) +
                         "], got " + shape_str(input.shape()));
  const std::size_t batch = input.dim(0);

  auto x = add_broadcast(linear(input, embed_.w, embed_.b), enc_pe_);
  for (const auto& layer : encoder_) x = encoder_layer_forward(x, layer, cfg.activation);
  auto feats = encoder_output_head(x, enc_head_);

  auto q = expand(add(queries_, dec_pe_), batch);
  for (const auto& layer : decoder_) q = decoder_layer_forward(q, feats, layer, cfg.activation);
  return reshape(linear(q, out_head_.w, out_head_.b), {batch, cfg.n_out});
}

// ---- accounting ------------------------------------------------------------

namespace {
std::size_t linear_params(std::size_t in, std::size_t out) { return in * out + out; }
std::size_t mlp_params(std::size_t d, std::size_t h) {
  return linear_params(d, h) + linear_params(h, h) + linear_params(h, d);
}
} // namespace

std::size_t attention_block_params(std::size_t d) { return 4 * linear_params(d, d) + 2 * d; }

std::size_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t de = cfg.d_encoder, dd = cfg.d_decoder;
  std::size_t enc_layer = mlp_params(de, cfg.encoder_hidden()) + 2 * de;
  if (cfg.enable_row_attn) enc_layer += attention_block_params(de);
  if (cfg.enable_col_attn) enc_layer += attention_block_params(de);
  const std::size_t dec_layer = 2 * attention_block_params(dd) +
                                mlp_params(dd, cfg.decoder_hidden()) + 2 * dd;
  return linear_params(cfg.c, de) + cfg.n_enc_layers * enc_layer +
         linear_params(cfg.l_sample * de, dd) + cfg.n_out * dd + cfg.n_dec_layers * dec_layer +
         linear_params(dd, 1);
}

std::uint64_t count_flops(const ModelConfig& cfg) {
  cfg.validate();
  using u64 = std::uint64_t;
  const u64 n_in = cfg.n_in, l = cfg.l_sample, c = cfg.c, n_out = cfg.n_out;
  const u64 de = cfg.d_encoder, dd = cfg.d_decoder;
  const u64 he = cfg.encoder_hidden(), hd = cfg.decoder_hidden();
  const u64 tokens = n_in * l;

  u64 macs = tokens * c * de; // embedding
  u64 enc_layer = tokens * (de * he + he * he + he * de);
  // Q K^T and A V: sequences * L * L * d each
  if (cfg.enable_row_attn) enc_layer += 4 * tokens * de * de + 2 * n_in * l * l * de;
  if (cfg.enable_col_attn) enc_layer += 4 * tokens * de * de + 2 * l * n_in * n_in * de;
  macs += cfg.n_enc_layers * enc_layer;
  macs += n_in * (l * de) * dd; // output head

  u64 dec_layer = 4 * n_out * dd * dd + 2 * n_out * n_out * dd;           // self
  dec_layer += 2 * n_out * dd * dd + 2 * n_in * dd * dd + 2 * n_out * n_in * dd; // cross
  dec_layer += n_out * (dd * hd + hd * hd + hd * dd);
  macs += cfg.n_dec_layers * dec_layer;
  macs += n_out * dd; // scalar head
  return 2 * macs;
}

ModelConfig prune(const ModelConfig& config, std::optional<std::size_t> depth,
                  std::optional<std::size_t> l_sample) {
  ModelConfig out = config;
  if (depth) {
    if (*depth == 0 || *depth > config.n_enc_layers)
      throw ContractError("pruned depth " + std::to_string(*depth) + " must be in [1, " +
                          std::to_string(config.n_enc_layers) + "]");
    out.n_enc_layers = *depth;
  }
  if (l_sample) {
    if (*l_sample == 0 || *l_sample > config.l_sample)
      throw ContractError("pruned l_sample " + std::to_string(*l_sample) + " must be in [1, " +
                          std::to_string(config.l_sample) + "]");
    out.l_sample = *l_sample;
  }
  return out;
}

#define CYFORMER_INSTANTIATE(T)                                                                \
  template Tensor<T> pe_1d<T>(std::size_t, std::size_t);                                       \
  template Tensor<T> pe_2d<T>(std::size_t, std::size_t, std::size_t);                          \
  template Tensor<T> pe_2d_table<T>(std::size_t, std::size_t, std::size_t);                    \
  template Tensor<T> pe_1d_table<T>(std::size_t, std::size_t);                                 \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const AttentionParams<T>&,         \
                                          const Tensor<T>*, AttentionTrace<T>*);               \
  template Tensor<T> row_wise_attention(const Tensor<T>&, const AttentionParams<T>&,           \
                                        const NormParams<T>&, AttentionTrace<T>*);             \
  template Tensor<T> row_wise_attention(const Tensor<T>&, const EncoderLayerParams<T>&);       \
  template Tensor<T> column_wise_attention(const Tensor<T>&, const AttentionParams<T>&,        \
                                           const NormParams<T>&, AttentionTrace<T>*);          \
  template Tensor<T> column_wise_attention(const Tensor<T>&, const EncoderLayerParams<T>&);    \
  template Tensor<T> mlp_forward(const Tensor<T>&, const MlpParams<T>&, Activation);           \
  template Tensor<T> encoder_layer_forward(const Tensor<T>&, const EncoderLayerParams<T>&,     \
                                           Activation);                                        \
  template Tensor<T> encoder_output_head(const Tensor<T>&, const LinearParams<T>&);            \
  template Tensor<T> decoder_layer_forward(const Tensor<T>&, const Tensor<T>&,                 \
                                           const DecoderLayerParams<T>&, Activation,           \
                                           AttentionTrace<T>*);                                \
  template class CyFormer<T>;

CYFORMER_INSTANTIATE(float)
CYFORMER_INSTANTIATE(double)

#undef CYFORMER_INSTANTIATE

} // namespace cyformer
