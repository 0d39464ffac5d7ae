#include "cyformer/battery.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <spdlog/spdlog.h>

#include "cyformer/errors.hpp"

namespace cyformer {

using nlohmann::json;

std::vector<double> BatteryHistory::soh() const {
  std::vector<double> out;
  out.reserve(cycles.size());
  for (const auto& c : cycles)
    out.push_back(c.labeled() ? compute_soh(c.capacity_ah, rated_capacity_ah)
                              : std::numeric_limits<double>::quiet_NaN());
  return out;
}

double compute_soh(double capacity_ah, double rated_capacity_ah) {
  if (!(capacity_ah > 0) || !(rated_capacity_ah > 0))
    throw ContractError("SoH needs positive capacity and rated capacity, got " +
                        std::to_string(capacity_ah) + " / " + std::to_string(rated_capacity_ah));
  return capacity_ah / rated_capacity_ah;
}

// ---- CSV -------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

[[noreturn]] void fail(const std::string& source, std::size_t line, const std::string& what) {
  throw DataError(source + ":" + std::to_string(line) + ": " + what);
}

double parse_number(std::string_view field, const std::string& source, std::size_t line,
                    const char* column) {
  double v = 0;
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, v);
  if (ec != std::errc{} || ptr != end || !std::isfinite(v))
    fail(source, line, std::string("column ") + column + ": '" + std::string(field) +
                           "' is not a finite number");
  return v;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

} // namespace

BatteryHistory parse_canonical_csv(std::istream& in, const std::string& source,
                                   const LoadOptions& options) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) fail(source, 1, "empty file, expected header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && std::memcmp(line.data(), "\xEF\xBB\xBF", 3) == 0) line.erase(0, 3);
  if (line != kCanonicalHeader)
    fail(source, 1, std::string("header must be '") + kCanonicalHeader + "'");

  BatteryHistory h;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 10)
      fail(source, line_no, "expected 10 columns, found " + std::to_string(f.size()));

    const std::string id(f[0]);
    const double rated = parse_number(f[1], source, line_no, "rated_capacity_ah");
    const double cycle_d = parse_number(f[2], source, line_no, "cycle");
    double capacity = std::numeric_limits<double>::quiet_NaN();
    if (!f[3].empty() || options.require_capacity)
      capacity = parse_number(f[3], source, line_no, "capacity_ah");
    Sample s;
    s.time_s = parse_number(f[4], source, line_no, "time_s");
    s.vm = parse_number(f[5], source, line_no, "vm_v");
    s.cm = parse_number(f[6], source, line_no, "cm_a");
    s.vl = parse_number(f[7], source, line_no, "vl_v");
    s.cl = parse_number(f[8], source, line_no, "cl_a");
    s.temp = parse_number(f[9], source, line_no, "temp_c");

    if (id.empty()) fail(source, line_no, "empty battery_id");
    if (h.cycles.empty() && h.battery_id.empty()) {
      h.battery_id = id;
      h.rated_capacity_ah = rated;
      if (!(rated > 0)) fail(source, line_no, "rated_capacity_ah must be positive");
    }
    if (id != h.battery_id)
      fail(source, line_no, "battery_id '" + id + "' differs from '" + h.battery_id + "'");
    if (rated != h.rated_capacity_ah)
      fail(source, line_no, "rated_capacity_ah changes within the file");
    if (cycle_d != std::floor(cycle_d) || cycle_d < 1)
      fail(source, line_no, "cycle must be a positive integer");
    const int cycle = static_cast<int>(cycle_d);
    if (capacity == capacity && !(capacity > 0))
      fail(source, line_no, "capacity_ah must be positive");

    if (h.cycles.empty() || cycle != h.cycles.back().cycle_index) {
      const int expected = h.cycles.empty() ? 1 : h.cycles.back().cycle_index + 1;
      if (cycle != expected)
        fail(source, line_no,
             "cycle " + std::to_string(cycle) + " out of order, expected " +
                 std::to_string(expected));
      if (!h.cycles.empty() && h.cycles.back().samples.size() < 2)
        fail(source, line_no,
             "cycle " + std::to_string(expected - 1) + " has fewer than 2 samples");
      CycleRecord rec;
      rec.cycle_index = cycle;
      rec.capacity_ah = capacity;
      h.cycles.push_back(std::move(rec));
    } else {
      const double prev = h.cycles.back().capacity_ah;
      const bool same = (prev == capacity) || (prev != prev && capacity != capacity);
      if (!same) fail(source, line_no, "capacity_ah changes within cycle " + std::to_string(cycle));
      if (!(s.time_s > h.cycles.back().samples.back().time_s))
        fail(source, line_no,
             "time_s not strictly increasing within cycle " + std::to_string(cycle));
    }
    h.cycles.back().samples.push_back(s);
  }
  if (h.cycles.empty()) fail(source, line_no, "no cycles");
  if (h.cycles.back().samples.size() < 2)
    fail(source, line_no,
         "cycle " + std::to_string(h.cycles.back().cycle_index) + " has fewer than 2 samples");
  for (const auto& c : h.cycles) {
    if (!c.labeled()) continue;
    const double s = compute_soh(c.capacity_ah, h.rated_capacity_ah);
    if (!(s > 0 && s < 1.2))
      throw DataError(source + ": cycle " + std::to_string(c.cycle_index) + " has SoH " +
                      std::to_string(s) + " outside (0, 1.2)");
  }
  return h;
}

BatteryHistory load_canonical_csv(const std::string& path, const LoadOptions& options) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open '" + path + "'");
  return parse_canonical_csv(f, path, options);
}

void write_canonical_csv(const std::string& path, const BatteryHistory& h) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path + "'");
  f << kCanonicalHeader << '\n';
  const std::string rated = format_number(h.rated_capacity_ah);
  for (const auto& c : h.cycles) {
    const std::string cap = c.labeled() ? format_number(c.capacity_ah) : std::string();
    for (const auto& s : c.samples) {
      f << h.battery_id << ',' << rated << ',' << c.cycle_index << ',' << cap << ','
        << format_number(s.time_s) << ',' << format_number(s.vm) << ',' << format_number(s.cm)
        << ',' << format_number(s.vl) << ',' << format_number(s.cl) << ','
        << format_number(s.temp) << '\n';
    }
  }
  if (!f) throw DataError("failed writing '" + path + "'");
}

// ---- resampling / normalization --------------------------------------------

Tensor<double> resample_cycle(const CycleRecord& record, std::size_t l_sample) {
  const auto& s = record.samples;
  if (l_sample < 2) throw ContractError("resample_cycle needs l_sample >= 2");
  if (s.size() < 2) throw ContractError("resample_cycle needs at least 2 samples");
  const double t0 = s.front().time_s;
  const double t1 = s.back().time_s;
  auto out = Tensor<double>::zeros({l_sample, kNumChannels});
  auto o = out.data();
  std::size_t seg = 0; // s[seg].time <= tau < s[seg+1].time
  for (std::size_t k = 0; k < l_sample; ++k) {
    std::array<double, kNumChannels> v;
    if (k + 1 == l_sample) {
      v = s.back().channels();
    } else {
      const double tau = t0 + (t1 - t0) * static_cast<double>(k) / static_cast<double>(l_sample - 1);
      while (seg + 2 < s.size() && s[seg + 1].time_s <= tau) ++seg;
      const double ta = s[seg].time_s, tb = s[seg + 1].time_s;
      const double frac = (tau - ta) / (tb - ta);
      const auto a = s[seg].channels();
      const auto b = s[seg + 1].channels();
      for (std::size_t ch = 0; ch < kNumChannels; ++ch) v[ch] = a[ch] + (b[ch] - a[ch]) * frac;
    }
    std::copy(v.begin(), v.end(), o.begin() + k * kNumChannels);
  }
  return out;
}

std::string NormalizationStats::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](double v) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (auto b : bytes) h = (h ^ b) * 0x100000001b3ULL;
  };
  for (auto v : mean) mix(v);
  for (auto v : stddev) mix(v);
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

json NormalizationStats::to_json() const {
  return json{{"mean", mean}, {"std", stddev}, {"fingerprint", fingerprint()}};
}

NormalizationStats NormalizationStats::from_json(const json& j) {
  NormalizationStats s;
  try {
    s.mean = j.at("mean").get<std::array<double, kNumChannels>>();
    s.stddev = j.at("std").get<std::array<double, kNumChannels>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("bad normalization stats: ") + e.what());
  }
  return s;
}

NormalizationStats fit_normalizer(const std::vector<Tensor<double>>& cycles) {
  static const char* names[kNumChannels] = {"Cm", "Vm", "Cl", "Vl", "T"};
  std::array<double, kNumChannels> sum{}, count{};
  for (const auto& c : cycles) {
    auto d = c.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      sum[i % kNumChannels] += d[i];
      count[i % kNumChannels] += 1;
    }
  }
  NormalizationStats st;
  for (std::size_t ch = 0; ch < kNumChannels; ++ch) {
    if (count[ch] < 2) throw ConfigError("normalizer needs at least 2 samples per channel");
    st.mean[ch] = sum[ch] / count[ch];
  }
  std::array<double, kNumChannels> sq{};
  for (const auto& c : cycles) {
    auto d = c.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double dv = d[i] - st.mean[i % kNumChannels];
      sq[i % kNumChannels] += dv * dv;
    }
  }
  for (std::size_t ch = 0; ch < kNumChannels; ++ch) {
    st.stddev[ch] = std::sqrt(sq[ch] / count[ch]);
    if (!(st.stddev[ch] > 1e-12 * std::max(1.0, std::abs(st.mean[ch]))))
      throw ConfigError(std::string("channel ") + names[ch] +
                        " has zero variance across the source pool; remove it from the input");
  }
  return st;
}

NormalizationStats fit_normalizer(const std::vector<BatteryHistory>& source, std::size_t l_sample) {
  std::vector<Tensor<double>> cycles;
  for (const auto& h : source)
    for (const auto& c : h.cycles) cycles.push_back(resample_cycle(c, l_sample));
  return fit_normalizer(cycles);
}

Tensor<double> apply_normalizer(const Tensor<double>& x, const NormalizationStats& st) {
  if (x.shape().back() != kNumChannels)
    throw DimensionError("normalizer expects trailing dim " + std::to_string(kNumChannels) +
                         ", got " + shape_str(x.shape()));
  auto out = x.clone();
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    d[i] = (d[i] - st.mean[i % kNumChannels]) / st.stddev[i % kNumChannels];
  return out;
}

Tensor<double> invert_normalizer(const Tensor<double>& x, const NormalizationStats& st) {
  if (x.shape().back() != kNumChannels)
    throw DimensionError("normalizer expects trailing dim " + std::to_string(kNumChannels) +
                         ", got " + shape_str(x.shape()));
  auto out = x.clone();
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    d[i] = d[i] * st.stddev[i % kNumChannels] + st.mean[i % kNumChannels];
  return out;
}

// ---- windows / split -------------------------------------------------------

PreparedBattery prepare_battery(const BatteryHistory& history, std::size_t l_sample,
                                const NormalizationStats& stats) {
  PreparedBattery p;
  p.battery_id = history.battery_id;
  p.l_sample = l_sample;
  p.soh = history.soh();
  p.stats_fingerprint = stats.fingerprint();
  p.cycles.reserve(history.size() * l_sample * kNumChannels);
  for (const auto& c : history.cycles) {
    auto norm = apply_normalizer(resample_cycle(c, l_sample), stats);
    for (auto v : norm.data()) p.cycles.push_back(static_cast<float>(v));
  }
  return p;
}

std::vector<WindowedExample> make_windows(const PreparedBattery& b, std::size_t n_in,
                                          std::size_t n_out, std::size_t first_t,
                                          std::size_t last_t) {
  std::vector<WindowedExample> out;
  const std::size_t total = b.size();
  if (n_in == 0 || n_out == 0) throw ContractError("make_windows needs n_in, n_out >= 1");
  if (total < n_in + n_out) return out;
  first_t = std::max(first_t, n_in);
  last_t = std::min(last_t, total - n_out);
  const std::size_t cycle_len = b.l_sample * kNumChannels;
  for (std::size_t t = first_t; t <= last_t; ++t) {
    WindowedExample ex;
    ex.battery_id = b.battery_id;
    ex.stats_fingerprint = b.stats_fingerprint;
    ex.source_cycle = static_cast<int>(t);
    const auto begin = b.cycles.begin() + static_cast<std::ptrdiff_t>((t - n_in) * cycle_len);
    ex.input.assign(begin, begin + static_cast<std::ptrdiff_t>(n_in * cycle_len));
    for (std::size_t j = 0; j < n_out; ++j) {
      ex.target.push_back(b.soh[t + j]); // cycle t+1+j, 0-based index t+j
      ex.target_cycles.push_back(static_cast<int>(t + 1 + j));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<WindowedExample> make_windows(const PreparedBattery& b, std::size_t n_in,
                                          std::size_t n_out) {
  if (b.size() < n_in + n_out) {
    spdlog::warn("battery {}: {} cycles is shorter than n_in + n_out = {}; no windows",
                 b.battery_id, b.size(), n_in + n_out);
    return {};
  }
  return make_windows(b, n_in, n_out, n_in, b.size() - n_out);
}

std::vector<WindowedExample> make_windows(const BatteryHistory& history, std::size_t n_in,
                                          std::size_t n_out, const NormalizationStats& stats,
                                          std::size_t l_sample) {
  return make_windows(prepare_battery(history, l_sample, stats), n_in, n_out);
}

TargetSplit split_target(std::size_t total, double fraction, std::size_t n_in,
                         std::size_t n_out) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ContractError("finetune_fraction must be in (0, 1), got " + std::to_string(fraction));
  TargetSplit s;
  s.total_cycles = total;
  // Small epsilon so that e.g. 0.7 * 100 does not floor to 69.
  s.finetune_cycles = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(total) + 1e-9));
  const std::size_t minimum = n_in + n_out;
  if (s.finetune_cycles < minimum) {
    if (minimum + n_out > total)
      throw ConfigError("target battery has " + std::to_string(total) +
                        " cycles; the fine-tune segment needs at least n_in + n_out = " +
                        std::to_string(minimum) + " cycles plus " + std::to_string(n_out) +
                        " hidden cycle(s)");
    spdlog::warn("fine-tune segment of {} cycles ({}% of {}) is below n_in + n_out = {}; "
                 "promoting it to {}",
                 s.finetune_cycles, fraction * 100.0, total, minimum, minimum);
    s.finetune_cycles = minimum;
    s.promoted = true;
  }
  if (s.finetune_cycles + n_out > total)
    throw ConfigError("finetune_fraction " + std::to_string(fraction) +
                      " leaves no hidden cycles to evaluate");
  s.hidden_cycles = total - s.finetune_cycles;
  return s;
}

std::vector<WindowedExample> finetune_windows(const PreparedBattery& b, const TargetSplit& s,
                                              std::size_t n_in, std::size_t n_out) {
  if (s.finetune_cycles < n_in + n_out) return {};
  return make_windows(b, n_in, n_out, n_in, s.finetune_cycles - n_out);
}

std::vector<WindowedExample> hidden_windows(const PreparedBattery& b, const TargetSplit& s,
                                            std::size_t n_in, std::size_t n_out) {
  return make_windows(b, n_in, n_out, std::max(s.finetune_cycles, n_in), b.size());
}

} // namespace cyformer
