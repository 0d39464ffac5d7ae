#include "cyformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cyformer/errors.hpp"

namespace cyformer {

using nlohmann::json;

json model_config_to_json(const ModelConfig& c) {
  return json{{"c", c.c},
              {"l_sample", c.l_sample},
              {"n_in", c.n_in},
              {"n_out", c.n_out},
              {"d_encoder", c.d_encoder},
              {"d_decoder", c.d_decoder},
              {"n_enc_layers", c.n_enc_layers},
              {"n_dec_layers", c.n_dec_layers},
              {"n_heads", c.n_heads},
              {"mlp_hidden", c.mlp_hidden},
              {"enable_row_attn", c.enable_row_attn},
              {"enable_col_attn", c.enable_col_attn},
              {"activation", activation_name(c.activation)}};
}

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  static const std::set<std::string> known = {
      "c",           "l_sample",     "n_in",         "n_out",   "d_encoder",
      "d_decoder",   "n_enc_layers", "n_dec_layers", "n_heads", "mlp_hidden",
      "enable_row_attn", "enable_col_attn", "activation"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown model config key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("c", c.c);
    get("l_sample", c.l_sample);
    get("n_in", c.n_in);
    get("n_out", c.n_out);
    get("d_encoder", c.d_encoder);
    get("d_decoder", c.d_decoder);
    get("n_enc_layers", c.n_enc_layers);
    get("n_dec_layers", c.n_dec_layers);
    get("n_heads", c.n_heads);
    get("mlp_hidden", c.mlp_hidden);
    get("enable_row_attn", c.enable_row_attn);
    get("enable_col_attn", c.enable_col_attn);
    if (j.contains("activation")) c.activation = parse_activation(j.at("activation"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model config value: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

constexpr char kMagic[8] = {'C', 'Y', 'F', 'M', 'C', 'K', 'P', 'T'};

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename T>
void put_scalar(std::string& out, T value) {
  if constexpr (sizeof(T) == 4)
    put_le(out, std::bit_cast<std::uint32_t>(value));
  else
    put_le(out, std::bit_cast<std::uint64_t>(value));
}

class Reader {
public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  template <typename T>
  T scalar() {
    if constexpr (sizeof(T) == 4)
      return std::bit_cast<T>(le<std::uint32_t>());
    else
      return std::bit_cast<T>(le<std::uint64_t>());
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

} // namespace

template <typename T>
std::string serialize_checkpoint(const CyFormer<T>& model, const json& extra) {
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, sizeof(T));
  json meta{{"format_version", kCheckpointVersion},
            {"model", model_config_to_json(model.config())},
            {"extra", extra.is_null() ? json::object() : extra}};
  const std::string text = meta.dump(2);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  const auto& params = model.parameters();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put_le<std::uint64_t>(out, d);
    for (auto v : p.tensor.data()) put_scalar(out, v);
  }
  return out;
}

template <typename T>
LoadedCheckpoint<T> deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
    throw DataError("not a checkpoint file (bad magic)");
  const auto version = in.le<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto width = in.le<std::uint32_t>();
  if (width != sizeof(T))
    throw DataError("checkpoint stores " + std::to_string(8 * width) + "-bit scalars, expected " +
                    std::to_string(8 * sizeof(T)));
  const auto meta_len = in.le<std::uint64_t>();
  json meta;
  try {
    meta = json::parse(in.str(meta_len));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  CyFormer<T> model(model_config_from_json(meta.at("model")), 0);

  std::map<std::string, Tensor<T>> by_name;
  for (const auto& p : model.parameters()) by_name.emplace(p.name, p.tensor);

  const auto count = in.le<std::uint32_t>();
  if (count != by_name.size())
    throw DataError("checkpoint has " + std::to_string(count) + " parameters, model expects " +
                    std::to_string(by_name.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = in.str(in.le<std::uint32_t>());
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint parameter '" + name + "' is unknown");
    Shape shape(in.le<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(in.le<std::uint64_t>());
    Tensor<T> t = it->second;
    if (shape != t.shape())
      throw DataError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                      ", model expects " + shape_str(t.shape()));
    for (auto& v : t.data()) v = in.scalar<T>();
  }
  if (!in.done()) throw DataError("trailing bytes after checkpoint parameters");
  return {std::move(model), meta.value("extra", json::object())};
}

template <typename T>
void save_checkpoint(const std::string& path, const CyFormer<T>& model, const json& extra) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint '" + path + "'");
  const auto bytes = serialize_checkpoint(model, extra);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint '" + path + "'");
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint<T>(ss.str());
}

template std::string serialize_checkpoint(const CyFormer<float>&, const json&);
template std::string serialize_checkpoint(const CyFormer<double>&, const json&);
template LoadedCheckpoint<float> deserialize_checkpoint<float>(const std::string&);
template LoadedCheckpoint<double> deserialize_checkpoint<double>(const std::string&);
template void save_checkpoint(const std::string&, const CyFormer<float>&, const json&);
template void save_checkpoint(const std::string&, const CyFormer<double>&, const json&);
template LoadedCheckpoint<float> load_checkpoint<float>(const std::string&);
template LoadedCheckpoint<double> load_checkpoint<double>(const std::string&);

} // namespace cyformer
