#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <thread>

#include "qsdp/cli.hpp"
#include "qsdp/errors.hpp"
#include "qsdp/random.hpp"
#include "qsdp/wire_codec.hpp"

namespace qsdp::cli {
namespace {

// Runs body(i) for i in [0, n) on up to `threads` threads; results are
// written by index, so output order never depends on scheduling.
void for_each_index(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& body) {
  const std::size_t t = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
  if (t == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
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

std::ostringstream csv_stream() {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  return os;
}

double frac(double y) { return y - std::floor(y); }

struct QuantCase {
  quant::Scheme scheme;
  double resolution;
  double max_mean_z = 0.0;
  double variance = 0.0;
  double code_variance = 0.0;  // E||Q(v) - r - v||^2
  double variance_expected = 0.0;
  double nnz_mean = 0.0;
  double nnz_se = 0.0;
  double nnz_bound = 0.0;
};

void run_quant_case(QuantCase& c, const std::vector<double>& v, std::size_t samples, Rng& rng) {
  const std::size_t n = v.size();
  const double delta = c.resolution;
  std::vector<double> err_sum(n, 0.0), err_sq(n, 0.0);
  double var_sum = 0.0, code_sum = 0.0;
  double nnz_sum = 0.0, nnz_sq = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    quant::QuantizedBlock block = c.scheme == quant::Scheme::shift ? quant::qshift_quantize(v, delta, rng)
                                                                    : quant::qflip_quantize(v, delta, rng);
    const auto q = quant::dequantize(block, c.scheme);
    double sq = 0.0, code_sq = 0.0;
    double nnz = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = q[i] - v[i];
      err_sum[i] += e;
      err_sq[i] += e * e;
      sq += e * e;
      code_sq += (e - block.shift) * (e - block.shift);
      // Nonzero lattice index: q is not the lattice point at the origin.
      nnz += std::abs(q[i] - block.shift) > 0.5 * delta ? 1.0 : 0.0;
    }
    var_sum += sq;
    code_sum += code_sq;
    nnz_sum += nnz;
    nnz_sq += nnz * nnz;
  }
  const double N = static_cast<double>(samples);
  for (std::size_t i = 0; i < n; ++i) {
    const double mean = err_sum[i] / N;
    const double var = std::max(0.0, (err_sq[i] - N * mean * mean) / (N - 1));
    const double se = std::sqrt(var / N);
    const double z = se > 0 ? std::abs(mean) / se : (mean == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
    c.max_mean_z = std::max(c.max_mean_z, z);
  }
  c.variance = var_sum / N;
  c.code_variance = code_sum / N;
  c.nnz_mean = nnz_sum / N;
  c.nnz_se = std::sqrt(std::max(0.0, (nnz_sq - N * c.nnz_mean * c.nnz_mean) / (N - 1)) / N);
  double expected = 0.0, l1 = 0.0;
  for (double x : v) {
    const double f = frac(x / delta);
    expected += delta * delta * f * (1 - f);
    l1 += std::abs(x);
  }
  c.variance_expected = expected;
  c.nnz_bound = l1 / delta;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string run_quant_stats(const QuantStatsConfig& cfg, const RunContext& ctx) {
  Rng data_rng = make_rng(cfg.seed, {0});
  std::vector<double> v(cfg.dimension);
  for (double& x : v) x = cfg.value_low + (cfg.value_high - cfg.value_low) * uniform01(data_rng);

  std::vector<QuantCase> cases;
  for (quant::Scheme s : cfg.quantizers) {
    for (double d : cfg.resolutions) cases.push_back({s, d});
  }
  for_each_index(cases.size(), ctx.threads, [&](std::size_t i) {
    Rng rng = make_rng(cfg.seed, {1, i});
    run_quant_case(cases[i], v, cfg.samples, rng);
  });

  auto os = csv_stream();
  os << "quantizer,resolution,dimension,samples,max_mean_z,variance,code_variance,variance_expected,variance_rel_err,"
        "nnz_mean,nnz_se,nnz_bound,mean_pass,variance_pass,sparsity_pass\n";
  for (const QuantCase& c : cases) {
    const double rel = c.variance_expected > 0 ? std::abs(c.variance - c.variance_expected) / c.variance_expected
                                               : std::abs(c.variance);
    const bool mean_ok = c.max_mean_z <= cfg.mean_sigmas;
    const bool var_ok = rel <= cfg.variance_rel_tol;
    const bool sparse_ok = c.nnz_mean <= c.nnz_bound + cfg.sparsity_sigmas * c.nnz_se;
    os << quant::to_string(c.scheme) << ',' << c.resolution << ',' << cfg.dimension << ',' << cfg.samples << ','
       << c.max_mean_z << ',' << c.variance << ',' << c.code_variance << ',' << c.variance_expected << ',' << rel << ',' << c.nnz_mean << ','
       << c.nnz_se << ',' << c.nnz_bound << ',' << mean_ok << ',' << var_ok << ',' << sparse_ok << '\n';
  }
  return os.str();
}

std::string run_converge(const ConvergeConfig& cfg, const RunContext& ctx) {
  const opt::ProblemSpec problem = opt::quadratic_problem(cfg.hessian, cfg.linear, cfg.noise_sigma);
  Rng bench_rng = make_rng(cfg.benchmark_seed, {0});
  const opt::Estimate bench =
      opt::benchmark_expectation(problem, cfg.coarse_resolution, cfg.benchmark_samples, bench_rng, cfg.oracle);
  const double initial_gap = problem.objective(cfg.x0) - bench.mean;

  std::optional<opt::GradientQuantizer> gq;
  opt::RunPlan plan;
  std::uint64_t message_bits = 0;
  if (cfg.gradient_quantizer) {
    gq.emplace();
    gq->bit_width = cfg.gradient_quantizer->bit_width;
    gq->bucket.bucket_size = cfg.gradient_quantizer->bucket_size;
    Rng var_rng = make_rng(cfg.benchmark_seed, {1});
    const auto samples = opt::path_gradient_samples(problem, cfg.x0, cfg.gradient_quantizer->variance_points, var_rng);
    const auto budget =
        opt::gradient_quantizer_variance_budget(*gq, samples, cfg.gradient_quantizer->variance_repetitions, var_rng);
    plan = opt::make_plan(problem, cfg.epsilon, cfg.coarse_resolution, initial_gap, budget.empirical, gq->bit_width);
    message_bits = sim::shard_message_bits(problem.dimension, gq->bucket.bucket_size, gq->bit_width);
  } else {
    plan = opt::make_plan(problem, cfg.epsilon, cfg.coarse_resolution, initial_gap);
  }

  opt::RunOptions options;
  options.record_trace = cfg.trace;
  options.gradient_quantizer = gq ? &*gq : nullptr;
  options.threads = ctx.threads;
  const opt::RunSummary summary = opt::run(problem, plan, cfg.x0, cfg.seeds, bench.mean, options);

  const std::uint64_t T = plan.iteration_count;
  bool bits_ok = true;
  auto os = csv_stream();
  os << "record,seed,step,f,gap,quant_error_norm,grad_norm,benchmark,std_error,eta,fine_resolution,"
        "iterations,gradient_bits,pass\n";
  for (const opt::SeedResult& s : summary.seeds) {
    for (const opt::TraceRow& r : s.trace) {
      os << "trace," << s.seed << ',' << r.step << ',' << r.objective << ',' << r.gap << ','
         << r.quant_error_norm << ',' << r.grad_norm << ",,,,,,,\n";
    }
  }
  for (const opt::SeedResult& s : summary.seeds) {
    const bool ok = s.lattice_ok && (!gq || s.gradient_bits == T * message_bits);
    bits_ok = bits_ok && ok;
    os << "final," << s.seed << ',' << T << ',' << s.final_objective << ',' << s.final_objective - bench.mean
       << ",,," << bench.mean << ",," << plan.eta << ',' << plan.fine_resolution << ',' << T << ','
       << s.gradient_bits << ',' << ok << '\n';
  }
  const double combined = std::hypot(summary.stderr_final, bench.std_error);
  const bool pass = bits_ok && summary.mean_gap <= cfg.epsilon + 2 * combined;
  os << "summary,," << T << ',' << summary.mean_final << ',' << summary.mean_gap << ",,," << bench.mean << ','
     << combined << ',' << plan.eta << ',' << plan.fine_resolution << ',' << T << ','
     << (gq ? T * message_bits : 0) << ',' << pass << '\n';
  return os.str();
}

std::string run_train_sim(const TrainSimConfig& cfg, const RunContext& ctx) {
  struct SeedRows {
    std::vector<sim::StepLedger> ledger;
    std::vector<int> match;  // -1 when not checked
  };
  std::vector<SeedRows> rows(cfg.seeds.size());
  for_each_index(cfg.seeds.size(), ctx.threads, [&](std::size_t i) {
    sim::SimConfig sc = cfg.sim;
    sc.seed = cfg.seeds[i];
    sim::ShardedSimulation simulation(cfg.layers, sc);
    std::optional<sim::ReferenceTrainer> reference;
    if (cfg.check_reference) reference.emplace(cfg.layers, sc);
    for (std::size_t t = 0; t < cfg.steps; ++t) {
      rows[i].ledger.push_back(simulation.train_step());
      int match = -1;
      if (reference) {
        const double ref_loss = reference->train_step();
        match = ref_loss == rows[i].ledger.back().loss;
        for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
          match = match && simulation.assembled(l) == reference->parameters(l);
        }
      }
      rows[i].match.push_back(match);
    }
  });

  auto os = csv_stream();
  os << "seed,step,loss,allgather_bits,reducescatter_bits,step_time_s,reference_match\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t t = 0; t < rows[i].ledger.size(); ++t) {
      const sim::StepLedger& s = rows[i].ledger[t];
      os << cfg.seeds[i] << ',' << s.step << ',' << s.loss << ',' << s.allgather_bits << ','
         << s.reducescatter_bits << ',' << sim::simulate_step_time(s, cfg.network) << ',';
      if (rows[i].match[t] >= 0) os << rows[i].match[t];
      os << '\n';
    }
  }
  return os.str();
}

std::string run_bandwidth_sweep(const BandwidthSweepConfig& cfg, const RunContext&) {
  auto os = csv_stream();
  os << "weight_bits,gradient_bits,bandwidth_bps,allgather_bits,reducescatter_bits,step_time_s\n";
  for (unsigned wb : cfg.weight_bit_widths) {
    for (unsigned gb : cfg.gradient_bit_widths) {
      const sim::QuantConfig w{wb != 32, wb, quant::Scheme::shift};
      const sim::QuantConfig g{gb != 32, gb, quant::Scheme::uniform_stochastic};
      const sim::StepLedger ledger = sim::plan_step_traffic(cfg.layers, cfg.workers, w, g, cfg.bucket_size);
      for (double bw : cfg.bandwidths_bps) {
        const sim::NetworkModel net{bw, cfg.latency_s, cfg.compute_time_s};
        os << wb << ',' << gb << ',' << bw << ',' << ledger.allgather_bits << ',' << ledger.reducescatter_bits << ','
           << sim::simulate_step_time(ledger, net) << '\n';
      }
    }
  }
  return os.str();
}

std::string run_learn_levels(const LearnLevelsConfig& cfg, const RunContext& ctx) {
  struct Row {
    double uniform_error = 0.0;
    double learned_error = 0.0;
    bool insufficient = false;
  };
  const std::size_t nb = cfg.bit_widths.size();
  std::vector<Row> rows(cfg.seeds.size() * nb);
  for_each_index(cfg.seeds.size(), ctx.threads, [&](std::size_t i) {
    Rng rng = make_rng(cfg.seeds[i]);
    std::vector<double> data(cfg.samples);
    if (cfg.distribution == LearnLevelsConfig::Distribution::gaussian) {
      std::normal_distribution<double> normal;
      for (double& x : data) x = normal(rng);
    } else {
      for (double& x : data) x = uniform01(rng);
    }
    const quant::BucketSpec bucket{cfg.bucket_size};
    for (std::size_t k = 0; k < nb; ++k) {
      const auto uniform = quant::LevelTable::uniform(cfg.bit_widths[k]);
      const auto learned = quant::learn_levels(data, uniform, cfg.learning_rate, bucket);
      rows[i * nb + k] = {quant::relative_level_error(data, uniform, bucket),
                          quant::relative_level_error(data, learned.table, bucket), learned.insufficient_data};
    }
  });

  auto os = csv_stream();
  os << "seed,bit_width,samples,uniform_error,learned_error,relative_improvement,insufficient_data\n";
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    for (std::size_t k = 0; k < nb; ++k) {
      const Row& r = rows[i * nb + k];
      const double improvement = r.uniform_error > 0 ? 1.0 - r.learned_error / r.uniform_error : 0.0;
      os << cfg.seeds[i] << ',' << cfg.bit_widths[k] << ',' << cfg.samples << ',' << r.uniform_error << ','
         << r.learned_error << ',' << improvement << ',' << r.insufficient << '\n';
    }
  }
  return os.str();
}

std::string run_command(Command command, const nlohmann::json& config, const RunContext& ctx) {
  switch (command) {
    case Command::quant_stats: return run_quant_stats(parse_quant_stats(config), ctx);
    case Command::converge: return run_converge(parse_converge(config), ctx);
    case Command::train_sim: return run_train_sim(parse_train_sim(config), ctx);
    case Command::bandwidth_sweep: return run_bandwidth_sweep(parse_bandwidth_sweep(config), ctx);
    case Command::learn_levels: return run_learn_levels(parse_learn_levels(config), ctx);
  }
  throw InvalidArgument("unknown command");
}

}  // namespace qsdp::cli
