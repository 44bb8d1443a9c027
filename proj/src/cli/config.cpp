#include <cmath>
#include <set>

#include "qsdp/cli.hpp"
#include "qsdp/errors.hpp"

namespace qsdp::cli {
namespace {

using nlohmann::json;

std::string escape_pointer(const std::string& key) {
  std::string out;
  for (char c : key) {
    if (c == '~') out += "~0";
    else if (c == '/') out += "~1";
    else out += c;
  }
  return out;
}

// Field reader over one JSON object: tracks which keys were consumed so that
// finish() can reject the rest.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where(), "expected an object");
  }

  std::string child(const std::string& key) const { return path_ + "/" + escape_pointer(key); }
  std::string where() const { return path_.empty() ? "/" : path_; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& get(const std::string& key) {
    if (!has(key)) throw ConfigError(child(key), "required field is missing");
    return j_.at(key);
  }

  double number(const std::string& key, std::optional<double> fallback = std::nullopt) {
    if (!has(key)) {
      if (fallback) return *fallback;
      throw ConfigError(child(key), "required field is missing");
    }
    return as_number(j_.at(key), child(key));
  }
  std::uint64_t integer(const std::string& key, std::optional<std::uint64_t> fallback = std::nullopt) {
    if (!has(key)) {
      if (fallback) return *fallback;
      throw ConfigError(child(key), "required field is missing");
    }
    return as_integer(j_.at(key), child(key));
  }
  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(child(key), "expected true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key, std::optional<std::string> fallback = std::nullopt) {
    if (!has(key)) {
      if (fallback) return *fallback;
      throw ConfigError(child(key), "required field is missing");
    }
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(child(key), "expected a string");
    return v.get<std::string>();
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(child(key), "unknown field");
    }
  }

  static double as_number(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(path, "expected a finite number");
    return x;
  }
  static std::uint64_t as_integer(const json& v, const std::string& path) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) {
      if (v.get<std::int64_t>() < 0) throw ConfigError(path, "expected a non-negative integer");
      return static_cast<std::uint64_t>(v.get<std::int64_t>());
    }
    if (v.is_number_float()) {
      const double x = v.get<double>();
      if (x >= 0 && x == std::floor(x) && x < 1.8e19) return static_cast<std::uint64_t>(x);
    }
    throw ConfigError(path, "expected a non-negative integer");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check_kind(Fields& f, Command expected) {
  if (!f.has("kind")) return;
  const std::string kind = f.string("kind");
  if (kind != to_string(expected)) {
    throw ConfigError(f.child("kind"), "config is for '" + kind + "', not '" + to_string(expected) + "'");
  }
}

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, what);
}

std::vector<double> number_list(Fields& f, const std::string& key, std::optional<std::vector<double>> fallback = std::nullopt) {
  if (!f.has(key)) {
    if (fallback) return *fallback;
    throw ConfigError(f.child(key), "required field is missing");
  }
  const json& v = f.get(key);
  require(v.is_array(), f.child(key), "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(Fields::as_number(v[i], f.child(key) + "/" + std::to_string(i)));
  }
  return out;
}

std::vector<unsigned> bit_width_list(Fields& f, const std::string& key, std::vector<unsigned> fallback,
                                     unsigned lo, bool allow_32) {
  if (!f.has(key)) return fallback;
  const json& v = f.get(key);
  require(v.is_array() && !v.empty(), f.child(key), "expected a non-empty array of bit widths");
  std::vector<unsigned> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::string path = f.child(key) + "/" + std::to_string(i);
    const auto b = Fields::as_integer(v[i], path);
    require((b >= lo && b <= 16) || (allow_32 && b == 32), path,
            "bit width must be in [" + std::to_string(lo) + ", 16]" + (allow_32 ? " or 32" : ""));
    out.push_back(static_cast<unsigned>(b));
  }
  return out;
}

// Either an explicit list or {"first": s, "count": n} for s, s+1, ..., s+n-1.
std::vector<std::uint64_t> seed_list(Fields& f, const std::string& key, std::vector<std::uint64_t> fallback) {
  if (!f.has(key)) return fallback;
  const json& v = f.get(key);
  const std::string path = f.child(key);
  std::vector<std::uint64_t> out;
  if (v.is_array()) {
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(Fields::as_integer(v[i], path + "/" + std::to_string(i)));
  } else if (v.is_object()) {
    Fields r(v, path);
    const auto first = r.integer("first", 0);
    const auto count = r.integer("count");
    r.finish();
    for (std::uint64_t i = 0; i < count; ++i) out.push_back(first + i);
  } else {
    throw ConfigError(path, "expected an array of seeds or {\"first\", \"count\"}");
  }
  require(!out.empty(), path, "need at least one seed");
  require(std::set<std::uint64_t>(out.begin(), out.end()).size() == out.size(), path, "seeds must be distinct");
  return out;
}

opt::Vector vector_field(Fields& f, const std::string& key) {
  const auto v = number_list(f, key);
  require(!v.empty(), f.child(key), "expected a non-empty array");
  return Eigen::Map<const opt::Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<sim::LayerSpec> layer_list(Fields& f) {
  const json& v = f.get("layers");
  const std::string path = f.child("layers");
  require(v.is_array() && !v.empty(), path, "expected a non-empty array of layers");
  std::vector<sim::LayerSpec> layers;
  for (std::size_t i = 0; i < v.size(); ++i) {
    Fields l(v[i], path + "/" + std::to_string(i));
    sim::LayerSpec spec;
    spec.name = l.string("name", "layer" + std::to_string(i));
    const std::string kind = l.string("kind");
    if (kind == "dense") {
      spec.kind = sim::LayerKind::dense;
      spec.in = l.integer("in");
      spec.out = l.integer("out");
    } else if (kind == "bias" || kind == "norm") {
      spec.kind = kind == "bias" ? sim::LayerKind::bias : sim::LayerKind::norm;
      spec.in = spec.out = l.integer("size");
    } else {
      throw ConfigError(l.child("kind"), "expected dense, bias or norm");
    }
    spec.relu_after = l.boolean("relu", false);
    l.finish();
    require(spec.in > 0 && spec.out > 0, l.where(), "layer widths must be positive");
    if (i > 0) {
      require(layers.back().out == spec.in, l.where(),
              "input width " + std::to_string(spec.in) + " does not match previous output " +
                  std::to_string(layers.back().out));
    }
    layers.push_back(spec);
  }
  return layers;
}

quant::Scheme scheme_field(Fields& f, const std::string& key, quant::Scheme fallback,
                           std::initializer_list<quant::Scheme> allowed) {
  if (!f.has(key)) return fallback;
  const std::string name = f.string(key);
  const auto s = quant::scheme_from_string(name);
  bool ok = false;
  for (quant::Scheme a : allowed) ok = ok || (s && *s == a);
  require(ok, f.child(key), "unsupported scheme '" + name + "'");
  return *s;
}

std::size_t positive(Fields& f, const std::string& key, std::uint64_t fallback) {
  const auto v = f.integer(key, fallback);
  require(v > 0, f.child(key), "must be positive");
  return static_cast<std::size_t>(v);
}

}  // namespace

const char* to_string(Command c) {
  switch (c) {
    case Command::quant_stats: return "quant-stats";
    case Command::converge: return "converge";
    case Command::train_sim: return "train-sim";
    case Command::bandwidth_sweep: return "bandwidth-sweep";
    case Command::learn_levels: return "learn-levels";
  }
  return "?";
}

std::optional<Command> command_from_string(std::string_view name) {
  for (Command c : {Command::quant_stats, Command::converge, Command::train_sim,
                    Command::bandwidth_sweep, Command::learn_levels}) {
    if (name == to_string(c)) return c;
  }
  return std::nullopt;
}

QuantStatsConfig parse_quant_stats(const json& j) {
  Fields f(j, "");
  check_kind(f, Command::quant_stats);
  QuantStatsConfig c;
  c.dimension = positive(f, "dimension", c.dimension);
  c.value_low = f.number("value_low", c.value_low);
  c.value_high = f.number("value_high", c.value_high);
  require(c.value_low < c.value_high, f.child("value_high"), "must exceed value_low");
  c.resolutions = number_list(f, "resolutions", c.resolutions);
  require(!c.resolutions.empty(), f.child("resolutions"), "need at least one resolution");
  for (std::size_t i = 0; i < c.resolutions.size(); ++i) {
    require(c.resolutions[i] > 0, f.child("resolutions") + "/" + std::to_string(i), "resolution must be positive");
  }
  if (f.has("quantizers")) {
    const json& q = f.get("quantizers");
    require(q.is_array() && !q.empty(), f.child("quantizers"), "expected a non-empty array");
    c.quantizers.clear();
    for (std::size_t i = 0; i < q.size(); ++i) {
      const std::string path = f.child("quantizers") + "/" + std::to_string(i);
      require(q[i].is_string(), path, "expected \"shift\" or \"flip\"");
      const auto s = quant::scheme_from_string(q[i].get<std::string>());
      require(s && (*s == quant::Scheme::shift || *s == quant::Scheme::flip), path, "expected \"shift\" or \"flip\"");
      c.quantizers.push_back(*s);
    }
  }
  c.samples = static_cast<std::size_t>(f.integer("samples", c.samples));
  require(c.samples >= 2, f.child("samples"), "need at least 2 samples");
  c.seed = f.integer("seed", c.seed);
  c.mean_sigmas = f.number("mean_sigmas", c.mean_sigmas);
  c.variance_rel_tol = f.number("variance_rel_tol", c.variance_rel_tol);
  c.sparsity_sigmas = f.number("sparsity_sigmas", c.sparsity_sigmas);
  require(c.mean_sigmas > 0, f.child("mean_sigmas"), "must be positive");
  require(c.variance_rel_tol > 0, f.child("variance_rel_tol"), "must be positive");
  require(c.sparsity_sigmas >= 0, f.child("sparsity_sigmas"), "must be non-negative");
  f.finish();
  return c;
}

ConvergeConfig parse_converge(const json& j) {
  Fields f(j, "");
  check_kind(f, Command::converge);
  ConvergeConfig c;
  {
    Fields p(f.get("problem"), f.child("problem"));
    const bool has_diag = p.has("hessian_diagonal");
    const bool has_full = p.has("hessian");
    require(has_diag != has_full, p.where(), "give exactly one of hessian_diagonal or hessian");
    if (has_diag) {
      const opt::Vector d = vector_field(p, "hessian_diagonal");
      c.hessian = d.asDiagonal();
    } else {
      const json& h = p.get("hessian");
      const std::string path = p.child("hessian");
      require(h.is_array() && !h.empty(), path, "expected a square array of rows");
      const auto n = h.size();
      c.hessian.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
      for (std::size_t r = 0; r < n; ++r) {
        require(h[r].is_array() && h[r].size() == n, path + "/" + std::to_string(r), "row length must equal the row count");
        for (std::size_t k = 0; k < n; ++k) {
          c.hessian(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) =
              Fields::as_number(h[r][k], path + "/" + std::to_string(r) + "/" + std::to_string(k));
        }
      }
    }
    c.linear = vector_field(p, "linear");
    require(c.linear.size() == c.hessian.rows(), p.child("linear"), "length must match the hessian");
    c.noise_sigma = p.number("noise_sigma", 0.0);
    require(c.noise_sigma >= 0, p.child("noise_sigma"), "must be non-negative");
    p.finish();
    try {
      (void)opt::quadratic_problem(c.hessian, c.linear, c.noise_sigma);
    } catch (const InvalidArgument& e) {
      throw ConfigError(p.child(has_diag ? "hessian_diagonal" : "hessian"), e.what());
    }
  }
  c.epsilon = f.number("epsilon");
  require(c.epsilon > 0, f.child("epsilon"), "must be positive");
  c.coarse_resolution = f.number("coarse_resolution");
  require(c.coarse_resolution > 0, f.child("coarse_resolution"), "must be positive");
  c.x0 = vector_field(f, "x0");
  require(c.x0.size() == c.linear.size(), f.child("x0"), "length must match the problem dimension");
  c.seeds = seed_list(f, "seeds", {1});
  c.benchmark_samples = positive(f, "benchmark_samples", c.benchmark_samples);
  c.benchmark_seed = f.integer("benchmark_seed", c.benchmark_seed);
  const std::string oracle = f.string("oracle", "automatic");
  if (oracle == "automatic") c.oracle = opt::OracleMode::automatic;
  else if (oracle == "exhaustive") c.oracle = opt::OracleMode::exhaustive;
  else if (oracle == "separable") c.oracle = opt::OracleMode::separable;
  else throw ConfigError(f.child("oracle"), "expected automatic, exhaustive or separable");
  if (c.oracle == opt::OracleMode::separable && !c.hessian.isDiagonal()) {
    throw ConfigError(f.child("oracle"), "separable oracle needs a diagonal hessian");
  }
  c.trace = f.boolean("trace", c.trace);
  if (f.has("gradient_quantizer")) {
    Fields g(f.get("gradient_quantizer"), f.child("gradient_quantizer"));
    ConvergeConfig::GradientQuantization q;
    q.bit_width = static_cast<unsigned>(g.integer("bit_width", q.bit_width));
    require(q.bit_width >= 1 && q.bit_width <= 16, g.child("bit_width"), "must be in [1, 16]");
    q.bucket_size = positive(g, "bucket_size", q.bucket_size);
    q.variance_points = positive(g, "variance_points", q.variance_points);
    q.variance_repetitions = positive(g, "variance_repetitions", q.variance_repetitions);
    g.finish();
    c.gradient_quantizer = q;
  }
  f.finish();
  return c;
}

TrainSimConfig parse_train_sim(const json& j) {
  Fields f(j, "");
  check_kind(f, Command::train_sim);
  TrainSimConfig c;
  c.layers = layer_list(f);
  c.sim.workers = positive(f, "P", 1);
  c.sim.bucket_size = positive(f, "bucket_size", c.sim.bucket_size);
  const bool quantize = f.boolean("quantize", true);
  if (f.has("bit_widths")) {
    Fields b(f.get("bit_widths"), f.child("bit_widths"));
    for (const char* key : {"weights", "gradients"}) {
      const auto w = b.integer(key, 8);
      require((w >= 1 && w <= 16) || w == 32, b.child(key), "bit width must be in [1, 16] or 32");
      (std::string(key) == "weights" ? c.sim.weights : c.sim.gradients).bit_width = static_cast<unsigned>(w);
    }
    b.finish();
  }
  if (f.has("schemes")) {
    Fields s(f.get("schemes"), f.child("schemes"));
    c.sim.weights.scheme = scheme_field(s, "weights", c.sim.weights.scheme,
                                        {quant::Scheme::shift, quant::Scheme::uniform_stochastic, quant::Scheme::nearest});
    c.sim.gradients.scheme = scheme_field(s, "gradients", c.sim.gradients.scheme,
                                          {quant::Scheme::shift, quant::Scheme::uniform_stochastic, quant::Scheme::nearest});
    s.finish();
  }
  // 32 bits means the f32 baseline.
  c.sim.weights.enabled = quantize && c.sim.weights.bit_width != 32;
  c.sim.gradients.enabled = quantize && c.sim.gradients.bit_width != 32;
  c.sim.learning_rate = f.number("learning_rate", c.sim.learning_rate);
  require(c.sim.learning_rate > 0, f.child("learning_rate"), "must be positive");
  c.sim.batch_size = positive(f, "batch_size", c.sim.batch_size);
  require(c.sim.batch_size >= c.sim.workers, f.child("batch_size"), "must be at least P");
  c.sim.target_noise = f.number("target_noise", c.sim.target_noise);
  require(c.sim.target_noise >= 0, f.child("target_noise"), "must be non-negative");
  c.seeds = seed_list(f, "seeds", {1});
  c.steps = positive(f, "steps", c.steps);
  c.network.bandwidth_bps = f.number("bandwidth_bps", c.network.bandwidth_bps);
  require(c.network.bandwidth_bps > 0, f.child("bandwidth_bps"), "must be positive");
  c.network.latency_s = f.number("latency_s", 0.0);
  require(c.network.latency_s >= 0, f.child("latency_s"), "must be non-negative");
  c.network.compute_time_s = f.number("compute_time_s", 0.0);
  require(c.network.compute_time_s >= 0, f.child("compute_time_s"), "must be non-negative");
  c.check_reference = f.boolean("check_reference", false);
  f.finish();
  return c;
}

BandwidthSweepConfig parse_bandwidth_sweep(const json& j) {
  Fields f(j, "");
  check_kind(f, Command::bandwidth_sweep);
  BandwidthSweepConfig c;
  c.layers = layer_list(f);
  c.workers = positive(f, "P", c.workers);
  c.bucket_size = positive(f, "bucket_size", c.bucket_size);
  c.bandwidths_bps = number_list(f, "bandwidths_bps", c.bandwidths_bps);
  require(!c.bandwidths_bps.empty(), f.child("bandwidths_bps"), "need at least one bandwidth");
  for (std::size_t i = 0; i < c.bandwidths_bps.size(); ++i) {
    require(c.bandwidths_bps[i] > 0, f.child("bandwidths_bps") + "/" + std::to_string(i), "must be positive");
  }
  c.weight_bit_widths = bit_width_list(f, "weight_bit_widths", c.weight_bit_widths, 1, true);
  c.gradient_bit_widths = bit_width_list(f, "gradient_bit_widths", c.gradient_bit_widths, 1, true);
  c.latency_s = f.number("latency_s", c.latency_s);
  require(c.latency_s >= 0, f.child("latency_s"), "must be non-negative");
  c.compute_time_s = f.number("compute_time_s", c.compute_time_s);
  require(c.compute_time_s >= 0, f.child("compute_time_s"), "must be non-negative");
  f.finish();
  return c;
}

LearnLevelsConfig parse_learn_levels(const json& j) {
  Fields f(j, "");
  check_kind(f, Command::learn_levels);
  LearnLevelsConfig c;
  const std::string dist = f.string("distribution", "gaussian");
  if (dist == "gaussian") c.distribution = LearnLevelsConfig::Distribution::gaussian;
  else if (dist == "uniform") c.distribution = LearnLevelsConfig::Distribution::uniform;
  else throw ConfigError(f.child("distribution"), "expected gaussian or uniform");
  c.samples = positive(f, "samples", c.samples);
  c.bit_widths = bit_width_list(f, "bit_widths", c.bit_widths, 0, false);
  c.learning_rate = f.number("learning_rate", c.learning_rate);
  require(c.learning_rate > 0 && c.learning_rate <= 1, f.child("learning_rate"), "must be in (0, 1]");
  c.bucket_size = positive(f, "bucket_size", c.bucket_size);
  c.seeds = seed_list(f, "seeds", c.seeds);
  f.finish();
  return c;
}

}  // namespace qsdp::cli
