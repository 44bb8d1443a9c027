#pragma once

// Experiment configs and the commands of the `qsdp` tool. Each command reads a
// JSON config, validates all of it, runs, and returns its CSV text; the tool
// writes the file only after the whole command succeeded.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "qsdp/optimizer.hpp"
#include "qsdp/quantizers.hpp"
#include "qsdp/sharded_sim.hpp"

namespace qsdp::cli {

enum class Command { quant_stats, converge, train_sim, bandwidth_sweep, learn_levels };

const char* to_string(Command c);
std::optional<Command> command_from_string(std::string_view name);

struct QuantStatsConfig {
  std::size_t dimension = 100;
  double value_low = -3.0;
  double value_high = 3.0;
  std::vector<double> resolutions{0.1, 0.5, 1.0};
  std::vector<quant::Scheme> quantizers{quant::Scheme::shift, quant::Scheme::flip};
  std::size_t samples = 1'000'000;
  std::uint64_t seed = 1;
  double mean_sigmas = 4.0;
  double variance_rel_tol = 0.01;
  double sparsity_sigmas = 3.0;
};

struct ConvergeConfig {
  opt::Matrix hessian;
  opt::Vector linear;
  double noise_sigma = 0.0;
  double epsilon = 0.05;
  double coarse_resolution = 0.25;
  opt::Vector x0;
  std::vector<std::uint64_t> seeds;
  std::size_t benchmark_samples = 100'000;
  std::uint64_t benchmark_seed = 0;
  opt::OracleMode oracle = opt::OracleMode::automatic;
  bool trace = true;
  struct GradientQuantization {
    unsigned bit_width = 4;
    std::size_t bucket_size = 1024;
    std::size_t variance_points = 64;
    std::size_t variance_repetitions = 200;
  };
  std::optional<GradientQuantization> gradient_quantizer;
};

struct TrainSimConfig {
  std::vector<sim::LayerSpec> layers;
  sim::SimConfig sim;  // seed is overwritten per entry of `seeds`
  std::vector<std::uint64_t> seeds;
  std::size_t steps = 100;
  sim::NetworkModel network;
  bool check_reference = false;
};

struct BandwidthSweepConfig {
  std::vector<sim::LayerSpec> layers;
  std::size_t workers = 8;
  std::size_t bucket_size = 1024;
  std::vector<double> bandwidths_bps{10e9, 50e9, 100e9};
  std::vector<unsigned> weight_bit_widths{32, 8};
  std::vector<unsigned> gradient_bit_widths{32, 8};
  double latency_s = 0.0;
  double compute_time_s = 0.0;
};

struct LearnLevelsConfig {
  enum class Distribution { gaussian, uniform };
  Distribution distribution = Distribution::gaussian;
  std::size_t samples = 100'000;
  std::vector<unsigned> bit_widths{2, 3, 4, 5};
  double learning_rate = 0.01;
  std::size_t bucket_size = 1024;
  std::vector<std::uint64_t> seeds{1};
};

// Parsers validate everything and throw ConfigError with a JSON-pointer path.
// Unknown fields are rejected. An optional top-level "kind" must name the command.
QuantStatsConfig parse_quant_stats(const nlohmann::json& j);
ConvergeConfig parse_converge(const nlohmann::json& j);
TrainSimConfig parse_train_sim(const nlohmann::json& j);
BandwidthSweepConfig parse_bandwidth_sweep(const nlohmann::json& j);
LearnLevelsConfig parse_learn_levels(const nlohmann::json& j);

struct RunContext {
  unsigned threads = 1;
};

std::string run_quant_stats(const QuantStatsConfig& c, const RunContext& ctx);
std::string run_converge(const ConvergeConfig& c, const RunContext& ctx);
std::string run_train_sim(const TrainSimConfig& c, const RunContext& ctx);
std::string run_bandwidth_sweep(const BandwidthSweepConfig& c, const RunContext& ctx);
std::string run_learn_levels(const LearnLevelsConfig& c, const RunContext& ctx);

/// Parses `config` for `command` and runs it; returns the CSV body.
std::string run_command(Command command, const nlohmann::json& config, const RunContext& ctx);

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitNumericalError = 3;

/// Entry point of the `qsdp` executable.
int tool_main(int argc, char** argv);

}  // namespace qsdp::cli
