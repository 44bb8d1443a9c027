#include "qsdp/sharded_sim.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <thread>

#include "qsdp/errors.hpp"
#include "qsdp/random.hpp"
#include "qsdp/wire_codec.hpp"

namespace qsdp::sim {
namespace {

// Seed-schedule tags.
constexpr std::uint64_t kInitTag = 1;
constexpr std::uint64_t kDataTag = 2;
constexpr std::uint64_t kWeightTag = 3;
constexpr std::uint64_t kGradTag = 4;

bool is_exempt(const LayerSpec& layer) { return layer.kind != LayerKind::dense; }

// How a layer's weights or gradients travel: quantized for dense layers with
// quantization enabled, f32 otherwise.
quant::BucketedOptions transport_options(const LayerSpec& layer, const QuantConfig& q,
                                         std::size_t bucket_size) {
  quant::BucketedOptions opts;
  opts.bucket.bucket_size = bucket_size;
  if (is_exempt(layer) || !q.enabled) {
    opts.scheme = quant::Scheme::full_precision;
    opts.bit_width = 32;
  } else {
    opts.scheme = q.scheme;
    opts.bit_width = q.bit_width;
  }
  return opts;
}

std::vector<quant::QuantizedBlock> encode_blocks(std::span<const double> values,
                                                 const quant::BucketedOptions& opts,
                                                 std::uint64_t seed) {
  Rng rng(seed);
  return quant::bucketed_quantize(values, opts, rng);
}

std::uint64_t weight_seed(std::uint64_t seed, std::uint64_t step, std::size_t layer,
                          std::size_t owner) {
  return derive_seed(seed, {kWeightTag, step, layer, owner});
}

std::uint64_t grad_seed(std::uint64_t seed, std::uint64_t step, std::size_t layer,
                        std::size_t source, std::size_t destination) {
  return derive_seed(seed, {kGradTag, step, layer, source, destination});
}

std::vector<double> widen(std::span<const float> v) { return {v.begin(), v.end()}; }

// ---------------------------------------------------------------------------
// Layer math shared by the simulation and the reference trainer.

struct LayerCache {
  Activations input;
  std::vector<std::uint8_t> relu_mask;  // 1 where the output was kept
};

Activations layer_forward(const LayerSpec& layer, std::span<const double> w, const Activations& x,
                          LayerCache* cache) {
  if (x.width != layer.in) {
    throw InvalidArgument("layer " + layer.name + ": input width " + std::to_string(x.width) +
                          " does not match " + std::to_string(layer.in));
  }
  if (w.size() != layer.parameter_count()) {
    throw InvalidArgument("layer " + layer.name + ": gathered " + std::to_string(w.size()) +
                          " parameters, expected " + std::to_string(layer.parameter_count()));
  }
  Activations y{x.rows, layer.out, std::vector<double>(x.rows * layer.out)};
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double* xr = &x.data[r * x.width];
    double* yr = &y.data[r * y.width];
    switch (layer.kind) {
      case LayerKind::dense:
        for (std::size_t o = 0; o < layer.out; ++o) {
          double acc = 0.0;
          const double* wo = &w[o * layer.in];
          for (std::size_t i = 0; i < layer.in; ++i) acc += wo[i] * xr[i];
          yr[o] = acc;
        }
        break;
      case LayerKind::bias:
        for (std::size_t o = 0; o < layer.out; ++o) yr[o] = xr[o] + w[o];
        break;
      case LayerKind::norm:
        for (std::size_t o = 0; o < layer.out; ++o) yr[o] = xr[o] * w[o];
        break;
    }
  }
  if (cache != nullptr) {
    cache->input = x;
    cache->relu_mask.clear();
  }
  if (layer.relu_after) {
    if (cache != nullptr) cache->relu_mask.resize(y.data.size());
    for (std::size_t i = 0; i < y.data.size(); ++i) {
      const bool keep = y.data[i] > 0.0;
      if (!keep) y.data[i] = 0.0;
      if (cache != nullptr) cache->relu_mask[i] = keep;
    }
  }
  return y;
}

// Returns dL/dinput; writes dL/dw into grad.
Activations layer_backward(const LayerSpec& layer, std::span<const double> w,
                           const LayerCache& cache, Activations dy, std::vector<double>& grad) {
  if (layer.relu_after) {
    for (std::size_t i = 0; i < dy.data.size(); ++i) {
      if (!cache.relu_mask[i]) dy.data[i] = 0.0;
    }
  }
  const Activations& x = cache.input;
  grad.assign(layer.parameter_count(), 0.0);
  Activations dx{x.rows, layer.in, std::vector<double>(x.rows * layer.in, 0.0)};
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double* xr = &x.data[r * x.width];
    const double* gr = &dy.data[r * dy.width];
    double* dxr = &dx.data[r * dx.width];
    switch (layer.kind) {
      case LayerKind::dense:
        for (std::size_t o = 0; o < layer.out; ++o) {
          const double* wo = &w[o * layer.in];
          double* go = &grad[o * layer.in];
          for (std::size_t i = 0; i < layer.in; ++i) {
            go[i] += gr[o] * xr[i];
            dxr[i] += wo[i] * gr[o];
          }
        }
        break;
      case LayerKind::bias:
        for (std::size_t o = 0; o < layer.out; ++o) {
          grad[o] += gr[o];
          dxr[o] = gr[o];
        }
        break;
      case LayerKind::norm:
        for (std::size_t o = 0; o < layer.out; ++o) {
          grad[o] += gr[o] * xr[o];
          dxr[o] = gr[o] * w[o];
        }
        break;
    }
  }
  return dx;
}

// 0.5 * mean over rows of ||y - t||^2, and its gradient.
double mse_loss(const Activations& y, std::span<const double> t, Activations* dy) {
  double loss = 0.0;
  const double inv_rows = 1.0 / static_cast<double>(y.rows);
  if (dy != nullptr) *dy = Activations{y.rows, y.width, std::vector<double>(y.data.size())};
  for (std::size_t i = 0; i < y.data.size(); ++i) {
    const double e = y.data[i] - t[i];
    loss += e * e;
    if (dy != nullptr) dy->data[i] = e * inv_rows;
  }
  return 0.5 * loss * inv_rows;
}

// ---------------------------------------------------------------------------
// Initial parameters and data, identical for the simulation and the reference.

std::vector<Tensor> initial_parameters(const std::vector<LayerSpec>& layers, std::uint64_t seed) {
  std::vector<Tensor> params;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerSpec& layer = layers[l];
    Tensor w(layer.parameter_count());
    switch (layer.kind) {
      case LayerKind::dense: {
        Rng rng = make_rng(seed, {kInitTag, l});
        std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(layer.in)));
        for (float& v : w) v = static_cast<float>(normal(rng));
        break;
      }
      case LayerKind::bias: std::fill(w.begin(), w.end(), 0.0f); break;
      case LayerKind::norm: std::fill(w.begin(), w.end(), 1.0f); break;
    }
    params.push_back(std::move(w));
  }
  return params;
}

struct Dataset {
  std::vector<double> inputs;   // batch x in
  std::vector<double> targets;  // batch x out
};

// Inputs ~ N(0, 1); targets from a random linear teacher plus noise.
Dataset make_dataset(const std::vector<LayerSpec>& layers, const SimConfig& config) {
  const std::size_t in = layers.front().in;
  const std::size_t out = layers.back().out;
  Rng rng = make_rng(config.seed, {kDataTag});
  std::normal_distribution<double> normal;
  Dataset d;
  d.inputs.resize(config.batch_size * in);
  for (double& x : d.inputs) x = static_cast<float>(normal(rng));
  std::vector<double> teacher(out * in);
  for (double& t : teacher) t = normal(rng) / std::sqrt(static_cast<double>(in));
  d.targets.resize(config.batch_size * out);
  for (std::size_t r = 0; r < config.batch_size; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += teacher[o * in + i] * d.inputs[r * in + i];
      d.targets[r * out + o] = acc + config.target_noise * normal(rng);
    }
  }
  return d;
}

std::vector<ShardRange> split(std::size_t n, std::size_t parts) {
  std::vector<ShardRange> out(parts);
  const std::size_t base = n / parts;
  for (std::size_t p = 0; p < parts; ++p) {
    out[p].begin = p * base;
    out[p].end = p + 1 == parts ? n : (p + 1) * base;
  }
  return out;
}

Activations slice_rows(std::span<const double> data, std::size_t width, ShardRange rows) {
  return {rows.size(), width,
          std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(rows.begin * width),
                              data.begin() + static_cast<std::ptrdiff_t>(rows.end * width))};
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& body) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  const std::size_t t = std::min<std::size_t>(threads, n);
  std::vector<std::exception_ptr> errors(t);
  {
    std::vector<std::jthread> pool;
    for (std::size_t k = 0; k < t; ++k) {
      pool.emplace_back([&, k] {
        try {
          for (std::size_t i = k; i < n; i += t) body(i);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void require_finite_loss(double loss) {
  if (!std::isfinite(loss)) throw NumericalError("training loss is not finite");
}

template <class T>
void require_finite(const std::vector<T>& v, const char* what, const std::string& layer) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericalError(std::string(what) + " of layer " + layer + " is not finite at index " + std::to_string(i));
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::bias: return "bias";
    case LayerKind::norm: return "norm";
  }
  return "?";
}

const char* to_string(Collective c) {
  switch (c) {
    case Collective::allgather_forward: return "allgather_forward";
    case Collective::allgather_backward: return "allgather_backward";
    case Collective::reducescatter: return "reducescatter";
  }
  return "?";
}

std::size_t LayerSpec::parameter_count() const noexcept {
  return kind == LayerKind::dense ? in * out : out;
}

void validate_layers(const std::vector<LayerSpec>& layers) {
  if (layers.empty()) throw InvalidArgument("model has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerSpec& layer = layers[l];
    const std::string where = "layer " + std::to_string(l) + " (" + layer.name + ")";
    if (layer.in == 0 || layer.out == 0) throw InvalidArgument(where + ": zero width");
    if (layer.kind != LayerKind::dense && layer.in != layer.out) {
      throw InvalidArgument(where + ": bias and norm layers need in == out");
    }
    if (l > 0 && layers[l - 1].out != layer.in) {
      throw InvalidArgument(where + ": input width does not match previous layer output");
    }
  }
}

std::vector<LayerSpec> two_layer_mlp(std::size_t in, std::size_t hidden, std::size_t out) {
  return {
      {"fc1", LayerKind::dense, in, hidden, false},
      {"fc1.bias", LayerKind::bias, hidden, hidden, true},
      {"fc2", LayerKind::dense, hidden, out, false},
      {"fc2.bias", LayerKind::bias, out, out, false},
  };
}

ShardedModel shard_parameters(const std::vector<LayerSpec>& layers, std::size_t workers) {
  if (workers == 0) throw InvalidArgument("need at least one worker");
  validate_layers(layers);
  ShardedModel m;
  m.layers = layers;
  m.workers = workers;
  for (const LayerSpec& layer : layers) {
    const std::size_t d = layer.parameter_count();
    if (d < workers) {
      m.warnings.push_back("layer " + layer.name + " has " + std::to_string(d) +
                           " parameters for " + std::to_string(workers) +
                           " workers; it is held by the last worker only");
    }
    m.partition.push_back(split(d, workers));
  }
  return m;
}

void SimConfig::validate() const {
  if (workers == 0) throw InvalidArgument("workers must be >= 1");
  if (bucket_size == 0) throw InvalidArgument("bucket_size must be >= 1");
  if (batch_size < workers) throw InvalidArgument("batch_size must be >= workers");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("learning_rate must be positive");
  }
  if (!(target_noise >= 0.0)) throw InvalidArgument("target_noise must be >= 0");
  for (const QuantConfig* q : {&weights, &gradients}) {
    if (!q->enabled) continue;
    if (q->scheme == quant::Scheme::full_precision) continue;
    if (q->bit_width < 1 || q->bit_width > 16) throw InvalidArgument("bit_width must be in [1, 16]");
    if (q->scheme == quant::Scheme::levels) throw InvalidArgument("levels scheme needs a table");
  }
}

std::uint64_t shard_message_bits(std::size_t length, std::size_t bucket_size, unsigned bit_width) {
  if (length == 0) return 0;
  std::uint64_t bits = 8 * wire::kHeaderBytes;
  for (std::size_t start = 0; start < length; start += bucket_size) {
    const std::uint64_t n = std::min(bucket_size, length - start);
    bits += 8 * wire::kBlockMetadataBytes + 8 * ((n * bit_width + 7) / 8);
  }
  return bits;
}

StepLedger plan_step_traffic(const std::vector<LayerSpec>& layers, std::size_t workers,
                             const QuantConfig& weights, const QuantConfig& gradients,
                             std::size_t bucket_size) {
  const ShardedModel model = shard_parameters(layers, workers);
  StepLedger ledger;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto wopt = transport_options(layers[l], weights, bucket_size);
    const auto gopt = transport_options(layers[l], gradients, bucket_size);
    LayerTraffic t;
    t.allgather_events = 2;
    t.reducescatter_events = 1;
    for (const ShardRange& s : model.partition[l]) {
      const std::uint64_t peers = workers - 1;
      t.allgather_bits += 2 * peers * shard_message_bits(s.size(), bucket_size, wopt.bit_width);
      t.reducescatter_bits += peers * shard_message_bits(s.size(), bucket_size, gopt.bit_width);
    }
    ledger.allgather_bits += t.allgather_bits;
    ledger.reducescatter_bits += t.reducescatter_bits;
    ledger.layers.push_back(t);
  }
  ledger.collective_count = workers > 1 ? 3 * layers.size() : 0;
  return ledger;
}

void NetworkModel::validate() const {
  if (!(bandwidth_bps > 0.0)) throw InvalidArgument("bandwidth must be positive");
  if (!(latency_s >= 0.0)) throw InvalidArgument("latency must be >= 0");
  if (!(compute_time_s >= 0.0)) throw InvalidArgument("compute time must be >= 0");
}

double simulate_step_time(const StepLedger& ledger, const NetworkModel& network) {
  network.validate();
  const double transport =
      std::isinf(network.bandwidth_bps) ? 0.0 : static_cast<double>(ledger.total_bits()) / network.bandwidth_bps;
  return network.compute_time_s + transport +
         network.latency_s * static_cast<double>(ledger.collective_count);
}

void write_ledger_csv(std::ostream& os, const std::vector<StepLedger>& ledger,
                      const NetworkModel& network) {
  os << "step,allgather_bits,reducescatter_bits,step_time_s\n";
  for (const StepLedger& s : ledger) {
    os << s.step << ',' << s.allgather_bits << ',' << s.reducescatter_bits << ','
       << simulate_step_time(s, network) << '\n';
  }
}

// ---------------------------------------------------------------------------

struct ShardedSimulation::Impl {
  ShardedModel model;
  SimConfig config;
  std::vector<std::vector<Tensor>> shards;  // [worker][layer]
  std::vector<Activations> inputs;          // [worker]
  std::vector<std::vector<double>> targets; // [worker]
  std::uint64_t step = 0;

  // Per-step state.
  StepLedger* ledger = nullptr;
  std::vector<std::vector<LayerCache>> caches;  // [worker][layer]

  Impl(std::vector<LayerSpec> layers, SimConfig cfg)
      : model(shard_parameters(layers, cfg.workers)), config(cfg) {
    config.validate();
    const auto params = initial_parameters(model.layers, config.seed);
    shards.assign(config.workers, {});
    for (std::size_t p = 0; p < config.workers; ++p) {
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const ShardRange s = model.partition[l][p];
        shards[p].emplace_back(params[l].begin() + static_cast<std::ptrdiff_t>(s.begin),
                               params[l].begin() + static_cast<std::ptrdiff_t>(s.end));
      }
    }
    load_dataset(make_dataset(model.layers, config));
  }

  void load_dataset(const Dataset& d) {
    const auto rows = split(config.batch_size, config.workers);
    inputs.clear();
    targets.clear();
    for (const ShardRange& r : rows) {
      inputs.push_back(slice_rows(d.inputs, model.layers.front().in, r));
      const std::size_t out = model.layers.back().out;
      targets.emplace_back(d.targets.begin() + static_cast<std::ptrdiff_t>(r.begin * out),
                           d.targets.begin() + static_cast<std::ptrdiff_t>(r.end * out));
    }
  }

  void record(std::size_t layer, Collective c, std::size_t src, std::size_t dst, unsigned bits_per_code,
              std::uint64_t bytes) {
    if (ledger == nullptr || src == dst) return;
    LayerTraffic& t = ledger->layers[layer];
    if (c == Collective::reducescatter) {
      t.reducescatter_bits += 8 * bytes;
      ledger->reducescatter_bits += 8 * bytes;
    } else {
      t.allgather_bits += 8 * bytes;
      ledger->allgather_bits += 8 * bytes;
    }
    if (config.record_transfers) ledger->transfers.push_back({layer, c, src, dst, bits_per_code, bytes});
  }

  // Every worker quantizes and encodes its own shard; each peer decodes it.
  // All peers receive the same bytes, so the decode is done once per message.
  std::vector<double> allgather(std::size_t layer, Collective phase) {
    const LayerSpec& spec = model.layers[layer];
    const auto opts = transport_options(spec, config.weights, config.bucket_size);
    std::vector<double> full;
    full.reserve(spec.parameter_count());
    for (std::size_t src = 0; src < config.workers; ++src) {
      const Tensor& mine = shards[src][layer];
      if (mine.empty()) continue;
      const auto blocks = encode_blocks(widen(mine), opts, weight_seed(config.seed, step, layer, src));
      const auto bytes = wire::encode(blocks, static_cast<std::uint32_t>(config.bucket_size));
      for (std::size_t dst = 0; dst < config.workers; ++dst) {
        record(layer, phase, src, dst, opts.bit_width, bytes.size());
      }
      const auto values = quant::bucketed_dequantize(wire::decode(bytes), opts.scheme);
      full.insert(full.end(), values.begin(), values.end());
    }
    if (full.size() != spec.parameter_count()) {
      throw InvalidArgument("layer " + spec.name + ": gathered shards do not match layer size");
    }
    if (ledger != nullptr) ++ledger->layers[layer].allgather_events;
    return full;
  }

  // grads[p] is worker p's full-layer gradient. Each worker sends the slice
  // owned by q to q; q averages the dequantized slices in worker order.
  void reducescatter_and_update(std::size_t layer, const std::vector<std::vector<double>>& grads) {
    const LayerSpec& spec = model.layers[layer];
    const auto opts = transport_options(spec, config.gradients, config.bucket_size);
    const double inv_p = 1.0 / static_cast<double>(config.workers);
    for (std::size_t dst = 0; dst < config.workers; ++dst) {
      const ShardRange s = model.partition[layer][dst];
      if (s.size() == 0) continue;
      std::vector<double> sum(s.size(), 0.0);
      for (std::size_t src = 0; src < config.workers; ++src) {
        const std::span<const double> slice(grads[src].data() + s.begin, s.size());
        const auto blocks = encode_blocks(slice, opts, grad_seed(config.seed, step, layer, src, dst));
        const auto bytes = wire::encode(blocks, static_cast<std::uint32_t>(config.bucket_size));
        record(layer, Collective::reducescatter, src, dst, opts.bit_width, bytes.size());
        const auto values = quant::bucketed_dequantize(wire::decode(bytes), opts.scheme);
        for (std::size_t i = 0; i < s.size(); ++i) sum[i] += values[i];
      }
      Tensor& w = shards[dst][layer];
      for (std::size_t i = 0; i < s.size(); ++i) {
        w[i] = static_cast<float>(static_cast<double>(w[i]) - config.learning_rate * (sum[i] * inv_p));
      }
      require_finite(w, "updated weights", spec.name);
    }
    if (ledger != nullptr) ++ledger->layers[layer].reducescatter_events;
  }

  StepLedger train_step() {
    const std::size_t n_layers = model.layers.size();
    const std::size_t P = config.workers;
    StepLedger out;
    out.step = step;
    out.layers.assign(n_layers, {});
    ledger = &out;
    caches.assign(P, std::vector<LayerCache>(n_layers));

    std::vector<Activations> acts = inputs;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const auto w = allgather(l, Collective::allgather_forward);
      parallel_for(P, config.threads, [&](std::size_t p) {
        acts[p] = layer_forward(model.layers[l], w, acts[p], &caches[p][l]);
      });
    }
    std::vector<Activations> dys(P);
    std::vector<double> losses(P);
    for (std::size_t p = 0; p < P; ++p) losses[p] = mse_loss(acts[p], targets[p], &dys[p]);
    double loss = 0.0;
    for (double x : losses) loss += x;
    out.loss = loss / static_cast<double>(P);
    require_finite_loss(out.loss);

    std::vector<std::vector<double>> grads(P);
    for (std::size_t l = n_layers; l-- > 0;) {
      const auto w = allgather(l, Collective::allgather_backward);
      parallel_for(P, config.threads, [&](std::size_t p) {
        dys[p] = layer_backward(model.layers[l], w, caches[p][l], std::move(dys[p]), grads[p]);
      });
      for (const auto& g : grads) require_finite(g, "gradient", model.layers[l].name);
      reducescatter_and_update(l, grads);
    }
    out.collective_count = P > 1 ? 3 * n_layers : 0;
    ledger = nullptr;
    caches.clear();
    ++step;
    return out;
  }
};

ShardedSimulation::ShardedSimulation(std::vector<LayerSpec> layers, SimConfig config)
    : impl_(std::make_unique<Impl>(std::move(layers), config)) {}
ShardedSimulation::~ShardedSimulation() = default;
ShardedSimulation::ShardedSimulation(ShardedSimulation&&) noexcept = default;
ShardedSimulation& ShardedSimulation::operator=(ShardedSimulation&&) noexcept = default;

StepLedger ShardedSimulation::train_step() { return impl_->train_step(); }

Activations ShardedSimulation::forward_layer(std::size_t worker, std::size_t layer,
                                             const Activations& input) {
  if (worker >= impl_->config.workers || layer >= impl_->model.layers.size()) {
    throw InvalidArgument("worker or layer index out of range");
  }
  const auto w = impl_->allgather(layer, Collective::allgather_forward);
  return layer_forward(impl_->model.layers[layer], w, input, nullptr);
}

const ShardedModel& ShardedSimulation::model() const noexcept { return impl_->model; }
const SimConfig& ShardedSimulation::config() const noexcept { return impl_->config; }
std::uint64_t ShardedSimulation::steps_done() const noexcept { return impl_->step; }

const Tensor& ShardedSimulation::shard(std::size_t worker, std::size_t layer) const {
  return impl_->shards.at(worker).at(layer);
}

Tensor ShardedSimulation::assembled(std::size_t layer) const {
  Tensor full;
  for (const auto& per_worker : impl_->shards) {
    const Tensor& s = per_worker.at(layer);
    full.insert(full.end(), s.begin(), s.end());
  }
  return full;
}

const Activations& ShardedSimulation::input_batch(std::size_t worker) const {
  return impl_->inputs.at(worker);
}

void ShardedSimulation::set_parameters(std::size_t layer, const Tensor& full) {
  if (layer >= impl_->model.layers.size() ||
      full.size() != impl_->model.layers[layer].parameter_count()) {
    throw InvalidArgument("set_parameters: wrong layer or size");
  }
  for (std::size_t p = 0; p < impl_->config.workers; ++p) {
    const ShardRange s = impl_->model.partition[layer][p];
    impl_->shards[p][layer].assign(full.begin() + static_cast<std::ptrdiff_t>(s.begin),
                                   full.begin() + static_cast<std::ptrdiff_t>(s.end));
  }
}

void ShardedSimulation::set_targets(const std::vector<double>& targets) {
  if (targets.size() != impl_->config.batch_size * impl_->model.layers.back().out) {
    throw InvalidArgument("set_targets: wrong size");
  }
  const auto rows = split(impl_->config.batch_size, impl_->config.workers);
  const std::size_t out = impl_->model.layers.back().out;
  for (std::size_t p = 0; p < rows.size(); ++p) {
    impl_->targets[p].assign(targets.begin() + static_cast<std::ptrdiff_t>(rows[p].begin * out),
                             targets.begin() + static_cast<std::ptrdiff_t>(rows[p].end * out));
  }
}

// ---------------------------------------------------------------------------

struct ReferenceTrainer::Impl {
  std::vector<LayerSpec> layers;
  SimConfig config;
  std::vector<std::vector<ShardRange>> partition;
  std::vector<Tensor> params;
  Dataset data;
  std::uint64_t step = 0;

  Impl(std::vector<LayerSpec> l, SimConfig cfg) : layers(std::move(l)), config(cfg) {
    config.validate();
    partition = shard_parameters(layers, config.workers).partition;
    params = initial_parameters(layers, config.seed);
    data = make_dataset(layers, config);
  }

  // Quantize-dequantize each shard range of the full tensor in place of the gather.
  std::vector<double> quantized_weights(std::size_t l) const {
    const auto opts = transport_options(layers[l], config.weights, config.bucket_size);
    std::vector<double> w;
    for (std::size_t p = 0; p < config.workers; ++p) {
      const ShardRange s = partition[l][p];
      if (s.size() == 0) continue;
      const auto slice = widen(std::span<const float>(params[l].data() + s.begin, s.size()));
      const auto blocks = encode_blocks(slice, opts, weight_seed(config.seed, step, l, p));
      const auto values = quant::bucketed_dequantize(blocks, opts.scheme);
      w.insert(w.end(), values.begin(), values.end());
    }
    return w;
  }

  double train_step() {
    const std::size_t n = layers.size();
    const std::size_t P = config.workers;
    std::vector<std::vector<double>> weights(n);
    for (std::size_t l = 0; l < n; ++l) weights[l] = quantized_weights(l);

    const auto rows = split(config.batch_size, P);
    const std::size_t out = layers.back().out;
    std::vector<std::vector<std::vector<double>>> grads(n, std::vector<std::vector<double>>(P));
    double loss = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      std::vector<LayerCache> caches(n);
      Activations x = slice_rows(data.inputs, layers.front().in, rows[p]);
      for (std::size_t l = 0; l < n; ++l) x = layer_forward(layers[l], weights[l], x, &caches[l]);
      const std::span<const double> t(data.targets.data() + rows[p].begin * out, rows[p].size() * out);
      Activations dy;
      loss += mse_loss(x, t, &dy);
      for (std::size_t l = n; l-- > 0;) dy = layer_backward(layers[l], weights[l], caches[l], std::move(dy), grads[l][p]);
    }
    loss /= static_cast<double>(P);
    require_finite_loss(loss);
    for (std::size_t l = 0; l < n; ++l) {
      for (const auto& g : grads[l]) require_finite(g, "gradient", layers[l].name);
    }

    const double inv_p = 1.0 / static_cast<double>(P);
    for (std::size_t l = 0; l < n; ++l) {
      const auto opts = transport_options(layers[l], config.gradients, config.bucket_size);
      for (std::size_t q = 0; q < P; ++q) {
        const ShardRange s = partition[l][q];
        if (s.size() == 0) continue;
        std::vector<double> sum(s.size(), 0.0);
        for (std::size_t p = 0; p < P; ++p) {
          const std::span<const double> slice(grads[l][p].data() + s.begin, s.size());
          const auto values = quant::bucketed_dequantize(
              encode_blocks(slice, opts, grad_seed(config.seed, step, l, p, q)), opts.scheme);
          for (std::size_t i = 0; i < s.size(); ++i) sum[i] += values[i];
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
          float& w = params[l][s.begin + i];
          w = static_cast<float>(static_cast<double>(w) - config.learning_rate * (sum[i] * inv_p));
        }
      }
      require_finite(params[l], "updated weights", layers[l].name);
    }
    ++step;
    return loss;
  }
};

ReferenceTrainer::ReferenceTrainer(std::vector<LayerSpec> layers, SimConfig config)
    : impl_(std::make_unique<Impl>(std::move(layers), config)) {}
ReferenceTrainer::~ReferenceTrainer() = default;
ReferenceTrainer::ReferenceTrainer(ReferenceTrainer&&) noexcept = default;
ReferenceTrainer& ReferenceTrainer::operator=(ReferenceTrainer&&) noexcept = default;

double ReferenceTrainer::train_step() { return impl_->train_step(); }
const Tensor& ReferenceTrainer::parameters(std::size_t layer) const { return impl_->params.at(layer); }

}  // namespace qsdp::sim
