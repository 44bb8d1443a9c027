#pragma once

// Deterministic P-worker simulation of quantized fully-sharded training.
//
// Every layer's parameters are split into P contiguous shards. Per step and
// per layer, workers AllGather the (quantized) weight shards twice, once for
// the forward and once for the backward pass, and ReduceScatter the
// (quantized) gradients once. All transfers go through the wire codec and the
// ledger counts the encoded bytes of every message that crosses a worker
// boundary.
//
// Model: a chain of dense (y = x W^T), bias (y = x + b) and norm (y = x * g)
// layers with optional ReLU, trained with plain SGD on a fixed synthetic
// regression batch under the loss ||y - t||^2 / (2 B). Parameters are f32,
// arithmetic is double.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "qsdp/quantizers.hpp"

namespace qsdp::sim {

enum class LayerKind { dense, bias, norm };

const char* to_string(LayerKind kind);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::dense;
  std::size_t in = 0;   // input width
  std::size_t out = 0;  // output width; equals `in` for bias and norm
  bool relu_after = false;

  std::size_t parameter_count() const noexcept;
};

/// Throws InvalidArgument on empty models, zero widths, bias/norm layers with
/// in != out, or consecutive layers whose widths do not chain.
void validate_layers(const std::vector<LayerSpec>& layers);

/// dense in->hidden, bias (ReLU), dense hidden->out, bias.
std::vector<LayerSpec> two_layer_mlp(std::size_t in, std::size_t hidden, std::size_t out);

struct ShardRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
};

struct ShardedModel {
  std::vector<LayerSpec> layers;
  std::size_t workers = 1;
  std::vector<std::vector<ShardRange>> partition;  // [layer][worker]
  std::vector<std::string> warnings;
};

/// Worker p owns [p * floor(d/P), (p+1) * floor(d/P)) and the last worker also
/// takes the remainder. A layer with fewer parameters than workers therefore
/// lives entirely on the last worker; a warning is recorded for it.
ShardedModel shard_parameters(const std::vector<LayerSpec>& layers, std::size_t workers);

// ---------------------------------------------------------------------------

struct QuantConfig {
  bool enabled = true;
  unsigned bit_width = 8;
  quant::Scheme scheme = quant::Scheme::shift;
};

struct SimConfig {
  std::size_t workers = 1;
  QuantConfig weights{true, 8, quant::Scheme::shift};
  QuantConfig gradients{true, 8, quant::Scheme::uniform_stochastic};
  std::size_t bucket_size = 1024;
  double learning_rate = 0.05;
  std::size_t batch_size = 32;  // global batch, split contiguously across workers
  double target_noise = 0.01;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool record_transfers = false;

  void validate() const;
};

enum class Collective { allgather_forward, allgather_backward, reducescatter };

const char* to_string(Collective c);

struct TransferRecord {
  std::size_t layer = 0;
  Collective collective = Collective::allgather_forward;
  std::size_t source = 0;
  std::size_t destination = 0;
  unsigned bit_width = 0;
  std::uint64_t bytes = 0;
};

struct LayerTraffic {
  std::uint64_t allgather_bits = 0;
  std::uint64_t reducescatter_bits = 0;
  unsigned allgather_events = 0;
  unsigned reducescatter_events = 0;
};

/// Traffic of one training step. Bits count only transfers between distinct
/// workers.
struct StepLedger {
  std::uint64_t step = 0;
  double loss = 0.0;
  std::uint64_t allgather_bits = 0;
  std::uint64_t reducescatter_bits = 0;
  std::uint64_t collective_count = 0;
  std::vector<LayerTraffic> layers;
  std::vector<TransferRecord> transfers;  // empty unless SimConfig::record_transfers

  std::uint64_t total_bits() const noexcept { return allgather_bits + reducescatter_bits; }
};

/// Closed-form traffic of one step (no training): wire sizes of every shard
/// message given the model, P and quantization settings.
StepLedger plan_step_traffic(const std::vector<LayerSpec>& layers, std::size_t workers,
                             const QuantConfig& weights, const QuantConfig& gradients,
                             std::size_t bucket_size);

/// Bits of the wire message for `length` values bucketed at `bucket_size`
/// with `bit_width`-bit codes. 0 for an empty shard (nothing is sent).
std::uint64_t shard_message_bits(std::size_t length, std::size_t bucket_size, unsigned bit_width);

struct NetworkModel {
  double bandwidth_bps = 100e9;
  double latency_s = 0.0;
  double compute_time_s = 0.0;

  void validate() const;
};

/// compute_time + total_bits / bandwidth + latency * collective_count.
double simulate_step_time(const StepLedger& ledger, const NetworkModel& network);

// ---------------------------------------------------------------------------

using Tensor = std::vector<float>;

/// Activations of a batch, row-major [rows x width].
struct Activations {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<double> data;
};

class ShardedSimulation {
 public:
  ShardedSimulation(std::vector<LayerSpec> layers, SimConfig config);
  ~ShardedSimulation();
  ShardedSimulation(ShardedSimulation&&) noexcept;
  ShardedSimulation& operator=(ShardedSimulation&&) noexcept;

  /// Full forward and backward pass over all layers, then the shard updates.
  StepLedger train_step();

  /// AllGather of `layer` (quantized unless exempt or disabled) followed by
  /// the layer's forward computation on `worker`'s batch slice.
  Activations forward_layer(std::size_t worker, std::size_t layer, const Activations& input);

  const ShardedModel& model() const noexcept;
  const SimConfig& config() const noexcept;
  std::uint64_t steps_done() const noexcept;
  /// Shard currently held by `worker` for `layer`.
  const Tensor& shard(std::size_t worker, std::size_t layer) const;
  /// Concatenation of all workers' shards.
  Tensor assembled(std::size_t layer) const;
  /// Worker's slice of the global input batch.
  const Activations& input_batch(std::size_t worker) const;
  /// Overwrites the parameters of `layer` (shards are re-cut from `full`).
  void set_parameters(std::size_t layer, const Tensor& full);
  /// Overwrites the regression targets (global batch, row-major).
  void set_targets(const std::vector<double>& targets);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Single-process trainer running the same iteration over unsharded tensors
/// with the same seed schedule and data split, without the wire codec.
class ReferenceTrainer {
 public:
  ReferenceTrainer(std::vector<LayerSpec> layers, SimConfig config);
  ~ReferenceTrainer();
  ReferenceTrainer(ReferenceTrainer&&) noexcept;
  ReferenceTrainer& operator=(ReferenceTrainer&&) noexcept;

  /// Returns the mean per-worker loss before the update.
  double train_step();
  const Tensor& parameters(std::size_t layer) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// step,allgather_bits,reducescatter_bits,step_time_s
void write_ledger_csv(std::ostream& os, const std::vector<StepLedger>& ledger,
                      const NetworkModel& network);

}  // namespace qsdp::sim
