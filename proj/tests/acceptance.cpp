// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Every tolerance and runtime limit is pinned
// below.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "qsdp/cli.hpp"
#include "qsdp/optimizer.hpp"
#include "qsdp/quantizers.hpp"
#include "qsdp/random.hpp"
#include "qsdp/sharded_sim.hpp"
#include "qsdp/wire_codec.hpp"
#include "test_support.hpp"

namespace {

using namespace qsdp;
using qsdp::testing::frac;
using qsdp::testing::RunningStats;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

unsigned worker_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  const unsigned t = static_cast<unsigned>(std::min<std::size_t>(worker_threads(), n));
  std::vector<std::jthread> pool;
  for (unsigned k = 0; k < t; ++k) {
    pool.emplace_back([&, k] {
      for (std::size_t i = k; i < n; i += t) body(i);
    });
  }
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

// ---------------------------------------------------------------------------
// 1. Mean, variance and sparsity identities of the shift and coin-flip
//    quantizers on v in R^100, N = 10^6.

constexpr double kC1MeanSigmas = 4.0;
constexpr double kC1VarianceRelTol = 0.01;
constexpr double kC1SparsitySigmas = 3.0;

Outcome criterion1() {
  cli::QuantStatsConfig cfg;
  cfg.dimension = 100;
  cfg.samples = 1'000'000;
  cfg.resolutions = {0.1, 0.5, 1.0};
  cfg.quantizers = {quant::Scheme::shift, quant::Scheme::flip};
  cfg.mean_sigmas = kC1MeanSigmas;
  cfg.variance_rel_tol = kC1VarianceRelTol;
  cfg.sparsity_sigmas = kC1SparsitySigmas;
  std::stringstream csv(cli::run_quant_stats(cfg, {worker_threads()}));
  std::string line;
  std::getline(csv, line);
  const auto header = split(line);
  auto col = [&](const char* name) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  bool pass = true;
  std::string detail;
  while (std::getline(csv, line)) {
    const auto r = split(line);
    const bool ok = r[col("mean_pass")] == "1" && r[col("variance_pass")] == "1" && r[col("sparsity_pass")] == "1";
    pass = pass && ok;
    const double delta = std::stod(r[col("resolution")]);
    detail += fmt("%s d=%g z=%.2f var=%.4g want=%.4g (d^2/12 sum=%.4g) nnz=%.1f<=%.1f; ", r[col("quantizer")].c_str(), delta,
                  std::stod(r[col("max_mean_z")]), std::stod(r[col("variance")]), std::stod(r[col("variance_expected")]),
                  100 * delta * delta / 12, std::stod(r[col("nnz_mean")]), std::stod(r[col("nnz_bound")]));
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 2. {y}(1 - {y}) <= k {y/k}(1 - {y/k}) on 10^5 random (y, k).

constexpr double kC2Slack = 1e-12;

Outcome criterion2() {
  Rng rng = make_rng(2);
  double worst = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < 100'000; ++i) {
    const double y = (uniform01(rng) - 0.5) * 2000.0;
    const int k = 1 + static_cast<int>(rng() % 64);
    const double lhs = frac(y) * (1 - frac(y));
    const double rhs = k * frac(y / k) * (1 - frac(y / k));
    worst = std::max(worst, lhs - rhs);
  }
  return {worst <= kC2Slack, fmt("max(lhs - rhs) = %.3g over 1e5 pairs", worst)};
}

// ---------------------------------------------------------------------------
// 3. E||Q_delta(x) - x||^2 <= (delta/delta*) E||Q_delta*(x) - x||^2 on 10^3
//    random x in R^32, ratios {2,4,8,16}, 10^4 shifts per estimate.

constexpr double kC3Sigmas = 3.0;

Outcome criterion3() {
  constexpr std::size_t kVectors = 1000, kDim = 32, kShifts = 10'000;
  constexpr int kRatios[] = {2, 4, 8, 16};
  constexpr double kCoarse = 1.0;
  std::vector<double> worst(kVectors, -std::numeric_limits<double>::infinity());
  std::vector<int> violations(kVectors, 0);
  parallel_for(kVectors, [&](std::size_t v) {
    Rng rng = make_rng(3, {v});
    std::normal_distribution<double> normal(0.0, 2.0);
    std::vector<double> x(kDim);
    for (double& xi : x) xi = normal(rng);
    for (int ratio : kRatios) {
      const double fine = kCoarse / ratio;
      RunningStats lhs, rhs;
      for (std::size_t s = 0; s < kShifts; ++s) {
        const quant::GridSpec f{fine, quant::sample_shift(fine, rng)};
        const quant::GridSpec c{kCoarse, quant::sample_shift(kCoarse, rng)};
        double el = 0.0, er = 0.0;
        for (double xi : x) {
          const double a = quant::qshift_scalar(xi, f) - xi;
          const double b = quant::qshift_scalar(xi, c) - xi;
          el += a * a;
          er += b * b;
        }
        lhs.add(el);
        rhs.add(er * fine / kCoarse);
      }
      const double se = std::hypot(lhs.std_error(), rhs.std_error());
      const double margin = (lhs.mean() - rhs.mean()) / se;
      worst[v] = std::max(worst[v], margin);
      if (margin > kC3Sigmas) ++violations[v];
    }
  });
  const int bad = std::accumulate(violations.begin(), violations.end(), 0);
  const double w = *std::max_element(worst.begin(), worst.end());
  return {bad == 0, fmt("%d of 4000 cases above 3 SE; largest (lhs - rhs)/SE = %.2f", bad, w)};
}

// ---------------------------------------------------------------------------
// 4. Identity quadratic, n = 4, sigma = 0, delta* = 0.5, eta = 1,
//    delta = 1/32: per-step contraction of the mean gap.

constexpr double kC4Slack = 0.05;

Outcome criterion4() {
  const opt::Vector b = (opt::Vector(4) << 0.3, -0.7, 1.1, 0.05).finished();
  const auto problem = opt::quadratic_problem(opt::Matrix::Identity(4, 4), b, 0.0);
  Rng brng = make_rng(4, {0});
  const auto bench = opt::benchmark_expectation(problem, 0.5, 100'000, brng, opt::OracleMode::separable);
  opt::RunPlan plan;
  plan.eta = 1.0;
  plan.coarse_resolution = 0.5;
  plan.fine_resolution = 1.0 / 32;
  plan.grid_ratio = 16;
  plan.iteration_count = 20;
  plan.epsilon = 0.0;
  const opt::Vector x0 = (opt::Vector(4) << 4.0, -3.0, 5.0, 2.0).finished();
  std::vector<std::uint64_t> seeds(200);
  std::iota(seeds.begin(), seeds.end(), 1);
  opt::RunOptions opts;
  opts.threads = worker_threads();
  const auto run = opt::run(problem, plan, x0, seeds, bench.mean, opts);
  const double bound = 1.0 - problem.alpha / (2 * problem.beta) + kC4Slack;
  double worst = -std::numeric_limits<double>::infinity();
  std::size_t measured = 0;
  for (std::size_t t = 0; t + 1 < run.mean_objective_by_step.size(); ++t) {
    const double g0 = run.mean_objective_by_step[t] - bench.mean;
    const double g1 = run.mean_objective_by_step[t + 1] - bench.mean;
    if (g0 <= 0) break;  // already at or below the benchmark
    worst = std::max(worst, g1 / g0);
    ++measured;
  }
  return {measured > 0 && worst <= bound,
          fmt("max gap ratio %.4g over %zu steps (bound %.2f); gap0 %.4g, final gap %.4g", worst, measured, bound,
              run.mean_objective_by_step.front() - bench.mean, run.mean_gap)};
}

// ---------------------------------------------------------------------------
// 5 and 6. End-to-end convergence on A = diag(1,1,2,4), without and with
//    quantized gradients.

constexpr double kC56Sigmas = 2.0;

struct ConvergenceSetup {
  opt::ProblemSpec problem;
  opt::Estimate bench;
  opt::Vector x0;
  std::vector<std::uint64_t> seeds;
  double epsilon = 0.05;
  double coarse = 0.25;
};

ConvergenceSetup convergence_setup() {
  ConvergenceSetup s;
  opt::Matrix a = opt::Vector((opt::Vector(4) << 1, 1, 2, 4).finished()).asDiagonal();
  s.problem = opt::quadratic_problem(a, (opt::Vector(4) << 1, -1, 0.5, 2).finished(), 0.2);
  Rng rng = make_rng(5, {0});
  s.bench = opt::benchmark_expectation(s.problem, s.coarse, 100'000, rng, opt::OracleMode::separable);
  s.x0 = (opt::Vector(4) << 2, 2, 2, 2).finished();
  s.seeds.resize(200);
  std::iota(s.seeds.begin(), s.seeds.end(), 1000);
  return s;
}

Outcome criterion5() {
  const auto s = convergence_setup();
  const auto plan = opt::make_plan(s.problem, s.epsilon, s.coarse, s.problem.objective(s.x0) - s.bench.mean);
  opt::RunOptions opts;
  opts.threads = worker_threads();
  const auto run = opt::run(s.problem, plan, s.x0, s.seeds, s.bench.mean, opts);
  const double se = std::hypot(run.stderr_final, s.bench.std_error);
  const double limit = s.epsilon + kC56Sigmas * se;
  bool lattice = true;
  for (const auto& r : run.seeds) lattice = lattice && r.lattice_ok;
  return {run.mean_gap <= limit && lattice,
          fmt("eta=%.4g delta=1/%llu T=%llu mean gap %.4g <= %.4g (bench %.5g +- %.2g)", plan.eta,
              static_cast<unsigned long long>(std::llround(plan.coarse_resolution / plan.fine_resolution)),
              static_cast<unsigned long long>(plan.iteration_count), run.mean_gap, limit, s.bench.mean, s.bench.std_error)};
}

Outcome criterion6() {
  const auto s = convergence_setup();
  opt::GradientQuantizer q;
  q.bit_width = 4;
  q.bucket.bucket_size = 1024;
  q.scheme = quant::Scheme::uniform_stochastic;
  Rng rng = make_rng(6, {0});
  const auto samples = opt::path_gradient_samples(s.problem, s.x0, 64, rng);
  const auto budget = opt::gradient_quantizer_variance_budget(q, samples, 200, rng);
  const double gap0 = s.problem.objective(s.x0) - s.bench.mean;
  const auto plan = opt::make_plan(s.problem, s.epsilon, s.coarse, gap0, budget.empirical, q.bit_width);
  opt::RunOptions opts;
  opts.threads = worker_threads();
  opts.gradient_quantizer = &q;
  const auto run = opt::run(s.problem, plan, s.x0, s.seeds, s.bench.mean, opts);
  const double se = std::hypot(run.stderr_final, s.bench.std_error);
  const double limit = s.epsilon + kC56Sigmas * se;
  const std::uint64_t message = sim::shard_message_bits(4, q.bucket.bucket_size, q.bit_width);
  bool bits_exact = true, lattice = true;
  for (const auto& r : run.seeds) {
    bits_exact = bits_exact && r.gradient_bits == plan.iteration_count * message;
    lattice = lattice && r.lattice_ok;
  }
  return {run.mean_gap <= limit && bits_exact && lattice,
          fmt("sigma_grad^2=%.4g eta=%.4g T=%llu mean gap %.4g <= %.4g; bits per seed %llu = T x %llu: %s",
              budget.empirical, plan.eta, static_cast<unsigned long long>(plan.iteration_count), run.mean_gap, limit,
              static_cast<unsigned long long>(run.seeds.front().gradient_bits),
              static_cast<unsigned long long>(message), bits_exact ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 7 and 8. Sharded MLP.

std::vector<sim::LayerSpec> acceptance_mlp() {
  return {{"fc1", sim::LayerKind::dense, 64, 64, false},
          {"fc1.bias", sim::LayerKind::bias, 64, 64, true},
          {"fc2", sim::LayerKind::dense, 64, 10, false},
          {"fc2.bias", sim::LayerKind::bias, 10, 10, false}};
}

sim::SimConfig acceptance_sim(std::size_t workers) {
  sim::SimConfig c;
  c.workers = workers;
  c.weights = {true, 8, quant::Scheme::shift};
  c.gradients = {true, 8, quant::Scheme::uniform_stochastic};
  c.bucket_size = 1024;
  c.batch_size = 32;
  c.seed = 7;
  return c;
}

Outcome criterion7() {
  const auto layers = acceptance_mlp();
  bool pass = true;
  std::string detail;
  for (std::size_t workers : {1u, 2u, 4u}) {
    sim::ShardedSimulation sharded(layers, acceptance_sim(workers));
    sim::ReferenceTrainer reference(layers, acceptance_sim(workers));
    std::size_t mismatched_steps = 0;
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 100; ++step) {
      const auto ledger = sharded.train_step();
      const double loss = reference.train_step();
      bool same = ledger.loss == loss;
      for (std::size_t l = 0; l < layers.size(); ++l) same = same && sharded.assembled(l) == reference.parameters(l);
      if (!same) ++mismatched_steps;
      if (step == 0) first = loss;
      last = loss;
    }
    pass = pass && mismatched_steps == 0;
    detail += fmt("P=%zu: %zu/100 steps differ, loss %.4g -> %.4g; ", workers, mismatched_steps, first, last);
  }
  return {pass, detail};
}

Outcome criterion8() {
  const auto layers = acceptance_mlp();
  bool pass = true;
  std::string detail;
  for (std::size_t workers : {1u, 2u, 4u}) {
    auto cfg = acceptance_sim(workers);
    cfg.record_transfers = true;
    sim::ShardedSimulation s(layers, cfg);
    const auto plan = sim::plan_step_traffic(layers, workers, cfg.weights, cfg.gradients, cfg.bucket_size);
    std::uint64_t compressed_bias = 0, bit_mismatch = 0, event_mismatch = 0;
    for (int step = 0; step < 5; ++step) {
      const auto ledger = s.train_step();
      std::uint64_t ag = 0, rs = 0;
      for (const auto& t : ledger.transfers) {
        (t.collective == sim::Collective::reducescatter ? rs : ag) += 8 * t.bytes;
        if (layers[t.layer].kind != sim::LayerKind::dense && t.bit_width < 32) ++compressed_bias;
      }
      if (ag != ledger.allgather_bits || rs != ledger.reducescatter_bits) ++bit_mismatch;
      if (ledger.allgather_bits != plan.allgather_bits || ledger.reducescatter_bits != plan.reducescatter_bits) ++bit_mismatch;
      for (const auto& l : ledger.layers) {
        if (l.allgather_events != 2 || l.reducescatter_events != 1) ++event_mismatch;
      }
      if (workers == 1 && ledger.total_bits() != 0) ++bit_mismatch;
    }
    pass = pass && compressed_bias == 0 && bit_mismatch == 0 && event_mismatch == 0;
    detail += fmt("P=%zu: bits/step %llu, %llu mismatches, %llu compressed bias transfers, %llu event errors; ", workers,
                  static_cast<unsigned long long>(plan.total_bits()), static_cast<unsigned long long>(bit_mismatch),
                  static_cast<unsigned long long>(compressed_bias), static_cast<unsigned long long>(event_mismatch));
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 9. Step-time trends from the time model.

constexpr double kC9SpreadRatio = 0.25;

Outcome criterion9() {
  const auto layers = sim::two_layer_mlp(1024, 4096, 1024);
  constexpr std::size_t kWorkers = 8;
  const double bandwidths[] = {10e9, 50e9, 100e9};
  const sim::QuantConfig full{false, 32, quant::Scheme::shift};
  const sim::QuantConfig w8{true, 8, quant::Scheme::shift};
  const sim::QuantConfig g8{true, 8, quant::Scheme::uniform_stochastic};
  auto spread = [&](const sim::QuantConfig& w, const sim::QuantConfig& g) {
    const auto ledger = sim::plan_step_traffic(layers, kWorkers, w, g, 1024);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double bw : bandwidths) {
      const double t = sim::simulate_step_time(ledger, {bw, 1e-5, 0.05});
      lo = std::min(lo, t);
      hi = std::max(hi, t);
    }
    return hi - lo;
  };
  const double s8 = spread(w8, g8), s32 = spread(full, full);
  const bool a = s8 / s32 < kC9SpreadRatio;

  const sim::NetworkModel net{10e9, 1e-5, 0.05};
  const double weights_only = sim::simulate_step_time(sim::plan_step_traffic(layers, kWorkers, w8, full, 1024), net);
  const double grads_only = sim::simulate_step_time(sim::plan_step_traffic(layers, kWorkers, full, g8, 1024), net);
  const bool b = weights_only < grads_only;
  return {a && b, fmt("(a) spread ratio %.4f < %.2f: %s; (b) weights-only %.5g s < gradients-only %.5g s: %s", s8 / s32,
                      kC9SpreadRatio, a ? "yes" : "no", weights_only, grads_only, b ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 10. Learned 4-bit levels on 10^5 standard Gaussian samples.

constexpr double kC10Improvement = 0.05;

Outcome criterion10() {
  Rng rng = make_rng(10);
  std::normal_distribution<double> normal;
  std::vector<double> data(100'000);
  for (double& x : data) x = normal(rng);
  const quant::BucketSpec bucket{1024};
  const auto uniform = quant::LevelTable::uniform(4);
  const auto learned = quant::learn_levels(data, uniform, 0.01, bucket);
  const double eu = quant::relative_level_error(data, uniform, bucket);
  const double el = quant::relative_level_error(data, learned.table, bucket);
  return {!learned.insufficient_data && el <= (1 - kC10Improvement) * eu,
          fmt("uniform %.5f, learned %.5f, improvement %.1f%%", eu, el, 100 * (1 - el / eu))};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  Outcome (*run)();
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {1, "quantizer identities", 30, criterion1},
      {2, "fractional inequality", 1, criterion2},
      {3, "grid-ratio bound", 60, criterion3},
      {4, "deterministic contraction", 10, criterion4},
      {5, "quantized SGD convergence", 120, criterion5},
      {6, "convergence with quantized gradients", 180, criterion6},
      {7, "sharded equivalence", 60, criterion7},
      {8, "ledger exactness and exemptions", 60, criterion8},
      {9, "step-time trends", 10, criterion9},
      {10, "learned levels", 10, criterion10},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s criterion %d (%s): %s [%.2f s, limit %.0f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.limit_s, in_time ? "" : ", exceeded");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
