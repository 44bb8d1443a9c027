#include "qsdp/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <ostream>
#include <string>
#include <thread>

#include "qsdp/errors.hpp"
#include "qsdp/wire_codec.hpp"

namespace qsdp::opt {
namespace {

// Formula values that are integers in exact arithmetic (10 * ln(e), 16 * 1^2)
// must not be bumped up by a trailing ulp.
std::uint64_t guarded_ceil(double x) {
  return static_cast<std::uint64_t>(std::ceil(x * (1.0 - 1e-12)));
}

void require_finite(const Vector& v, const char* what) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericalError(std::string(what) + ": non-finite value at index " + std::to_string(i));
    }
  }
}

double round_half_even(double x) { return std::nearbyint(x); }

}  // namespace

void ProblemSpec::validate() const {
  if (dimension == 0) throw InvalidArgument("problem dimension must be positive");
  if (!objective || !gradient) throw InvalidArgument("problem needs objective and gradient");
  if (!(alpha > 0.0)) throw InvalidArgument("alpha must be positive");
  if (!(beta >= alpha)) throw InvalidArgument("beta must be >= alpha");
  if (!(noise_sigma >= 0.0)) throw InvalidArgument("noise_sigma must be non-negative");
}

bool ProblemSpec::is_diagonal_quadratic() const {
  if (!hessian || !linear) return false;
  const Matrix& a = *hessian;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (i != j && a(i, j) != 0.0) return false;
    }
  }
  return true;
}

Vector ProblemSpec::stochastic_gradient(const Vector& x, Rng& rng) const {
  Vector g = gradient(x);
  if (noise_sigma > 0.0) {
    std::normal_distribution<double> normal(0.0, noise_sigma / std::sqrt(static_cast<double>(dimension)));
    for (Eigen::Index i = 0; i < g.size(); ++i) g[i] += normal(rng);
  }
  return g;
}

ProblemSpec quadratic_problem(const Matrix& a, const Vector& b, double sigma) {
  if (a.rows() == 0 || a.rows() != a.cols()) throw InvalidArgument("A must be square and non-empty");
  if (b.size() != a.rows()) throw InvalidArgument("b must match the dimension of A");
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-12 * a.cwiseAbs().maxCoeff()) {
    throw InvalidArgument("A must be symmetric");
  }
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) throw InvalidArgument("A is not positive definite (Cholesky failed)");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a, Eigen::EigenvaluesOnly);
  if (!(sigma >= 0.0)) throw InvalidArgument("sigma must be non-negative");

  ProblemSpec p;
  p.dimension = static_cast<std::size_t>(a.rows());
  p.hessian = a;
  p.linear = b;
  p.objective = [a, b](const Vector& x) { return 0.5 * x.dot(a * x) - b.dot(x); };
  p.gradient = [a, b](const Vector& x) -> Vector { return a * x - b; };
  p.alpha = eig.eigenvalues().minCoeff();
  p.beta = eig.eigenvalues().maxCoeff();
  if (!(p.alpha > 0.0)) throw InvalidArgument("A is not positive definite");
  p.noise_sigma = sigma;
  p.minimizer = llt.solve(b);
  p.optimal_value = p.objective(*p.minimizer);
  return p;
}

// ---------------------------------------------------------------------------

double derive_eta(double epsilon, double alpha, double sigma_sq_total) {
  if (!(epsilon > 0.0)) throw InvalidArgument("epsilon must be positive");
  if (!(alpha > 0.0)) throw InvalidArgument("alpha must be positive");
  if (!(sigma_sq_total >= 0.0)) throw InvalidArgument("variance must be non-negative");
  if (sigma_sq_total == 0.0) return 1.0;
  return std::min(0.3 * epsilon * alpha / sigma_sq_total, 1.0);
}

std::uint64_t condition_factor(double alpha, double beta) {
  const double kappa = beta / alpha;
  return guarded_ceil(16.0 * kappa * kappa);
}

GridDerivation derive_grid(double eta, double alpha, double beta, double delta_star) {
  if (!(eta > 0.0 && eta <= 1.0)) throw InvalidArgument("eta must be in (0, 1]");
  if (!(alpha > 0.0 && alpha <= beta)) throw InvalidArgument("need 0 < alpha <= beta");
  if (!(delta_star > 0.0)) throw InvalidArgument("delta_star must be positive");
  const double ideal = static_cast<double>(condition_factor(alpha, beta)) / eta;
  const double nearest = std::round(ideal);
  const std::uint64_t ratio = std::abs(ideal - nearest) <= 1e-9 * ideal
                                  ? static_cast<std::uint64_t>(nearest)
                                  : static_cast<std::uint64_t>(std::ceil(ideal));
  return {delta_star / static_cast<double>(ratio), ratio};
}

std::uint64_t derive_T(double eta, double alpha, double beta, double initial_gap, double epsilon) {
  if (!(eta > 0.0 && eta <= 1.0)) throw InvalidArgument("eta must be in (0, 1]");
  if (!(alpha > 0.0 && alpha <= beta)) throw InvalidArgument("need 0 < alpha <= beta");
  if (!(epsilon > 0.0)) throw InvalidArgument("epsilon must be positive");
  if (initial_gap <= epsilon) return 0;
  return guarded_ceil((10.0 / eta) * (beta / alpha) * std::log(initial_gap / epsilon));
}

void RunPlan::validate() const {
  if (!(eta > 0.0 && eta <= 1.0)) throw InvalidArgument("plan eta must be in (0, 1]");
  if (!(fine_resolution > 0.0) || !(coarse_resolution > 0.0)) {
    throw InvalidArgument("plan resolutions must be positive");
  }
  if (grid_ratio == 0) throw InvalidArgument("plan grid ratio must be positive");
}

RunPlan make_plan(const ProblemSpec& problem, double epsilon, double delta_star,
                  double initial_gap, std::optional<double> gradient_variance,
                  std::optional<unsigned> gradient_bit_width) {
  problem.validate();
  RunPlan plan;
  plan.epsilon = epsilon;
  plan.coarse_resolution = delta_star;
  plan.gradient_variance = gradient_variance;
  plan.gradient_bit_width = gradient_bit_width;
  const double sigma_sq = problem.noise_sigma * problem.noise_sigma + gradient_variance.value_or(0.0);
  plan.eta = derive_eta(epsilon, problem.alpha, sigma_sq);
  const GridDerivation grid = derive_grid(plan.eta, problem.alpha, problem.beta, delta_star);
  plan.fine_resolution = grid.fine_resolution;
  plan.grid_ratio = grid.ratio;
  plan.iteration_count = derive_T(plan.eta, problem.alpha, problem.beta, initial_gap, epsilon);
  return plan;
}

// ---------------------------------------------------------------------------

GradientQuantizer::Result GradientQuantizer::apply(const Vector& g, Rng& rng) const {
  quant::BucketedOptions opts;
  opts.bucket = bucket;
  opts.bit_width = bit_width;
  opts.scheme = scheme;
  Result r;
  r.blocks = quant::bucketed_quantize(std::span<const double>(g.data(), static_cast<std::size_t>(g.size())),
                                      opts, rng);
  const auto values = quant::bucketed_dequantize(r.blocks, scheme);
  r.value = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
  return r;
}

StepResult qsdp_step(const Vector& x, const ProblemSpec& problem, const RunPlan& plan, Rng& rng,
                     const StepOptions& options) {
  require_finite(x, "qsdp_step: iterate");
  StepResult out;
  Vector g = problem.stochastic_gradient(x, rng);
  require_finite(g, "qsdp_step: gradient");
  if (options.gradient_quantizer != nullptr) {
    // The quantized gradient goes through the wire format, as it would between workers.
    const auto q = options.gradient_quantizer->apply(g, rng);
    const auto bytes = wire::encode(q.blocks, static_cast<std::uint32_t>(options.gradient_quantizer->bucket.bucket_size));
    out.gradient_bits = 8 * static_cast<std::uint64_t>(bytes.size());
    const auto received = quant::bucketed_dequantize(wire::decode(bytes), options.gradient_quantizer->scheme);
    g = Eigen::Map<const Vector>(received.data(), static_cast<Eigen::Index>(received.size()));
  }
  out.grad_norm = g.norm();

  const Vector y = x - plan.step_size(problem.beta) * g;
  const double delta = plan.fine_resolution;
  out.shift = options.forced_shift ? *options.forced_shift : quant::sample_shift(delta, rng);
  const quant::GridSpec grid{delta, out.shift};
  out.x.resize(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) out.x[i] = quant::qshift_scalar(y[i], grid);
  out.quant_error_norm = (out.x - y).norm();
  return out;
}

bool on_lattice(const Vector& x, double resolution, double shift, double rel_tol) {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double k = round_half_even((x[i] - shift) / resolution);
    const double snapped = k * resolution + shift;
    if (std::abs(x[i] - snapped) > rel_tol * std::max(std::abs(x[i]), resolution)) return false;
  }
  return true;
}

namespace {

SeedResult run_seed(const ProblemSpec& problem, const RunPlan& plan, const Vector& x0,
                    std::uint64_t seed, double benchmark, const RunOptions& options) {
  SeedResult res;
  res.seed = seed;
  Rng rng = make_rng(seed);
  Vector x = x0;
  double f = problem.objective(x);
  res.objectives.reserve(plan.iteration_count + 1);
  res.objectives.push_back(f);
  if (options.record_trace) res.trace.push_back({0, f, f - benchmark, 0.0, 0.0});
  StepOptions step_opts;
  step_opts.gradient_quantizer = options.gradient_quantizer;
  for (std::uint64_t t = 1; t <= plan.iteration_count; ++t) {
    StepResult s = qsdp_step(x, problem, plan, rng, step_opts);
    res.gradient_bits += s.gradient_bits;
    if (!on_lattice(s.x, plan.fine_resolution, s.shift)) res.lattice_ok = false;
    x = std::move(s.x);
    f = problem.objective(x);
    if (!std::isfinite(f)) throw NumericalError("objective became non-finite at step " + std::to_string(t));
    res.objectives.push_back(f);
    if (options.record_trace) res.trace.push_back({t, f, f - benchmark, s.quant_error_norm, s.grad_norm});
  }
  res.final_objective = f;
  return res;
}

}  // namespace

RunSummary run(const ProblemSpec& problem, const RunPlan& plan, const Vector& x0,
               std::span<const std::uint64_t> seeds, double benchmark, const RunOptions& options) {
  problem.validate();
  plan.validate();
  if (static_cast<std::size_t>(x0.size()) != problem.dimension) {
    throw InvalidArgument("x0 dimension does not match the problem");
  }
  RunSummary summary;
  summary.benchmark = benchmark;
  summary.seeds.resize(seeds.size());

  const unsigned threads = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(seeds.size())));
  if (threads <= 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      summary.seeds[i] = run_seed(problem, plan, x0, seeds[i], benchmark, options);
    }
  } else {
    std::vector<std::exception_ptr> errors(threads);
    {
      std::vector<std::jthread> pool;
      for (unsigned w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t i = w; i < seeds.size(); i += threads) {
              summary.seeds[i] = run_seed(problem, plan, x0, seeds[i], benchmark, options);
            }
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  const auto n = static_cast<double>(seeds.size());
  if (seeds.empty()) return summary;
  double sum = 0.0;
  for (const auto& s : summary.seeds) sum += s.final_objective;
  summary.mean_final = sum / n;
  double ss = 0.0;
  for (const auto& s : summary.seeds) ss += (s.final_objective - summary.mean_final) * (s.final_objective - summary.mean_final);
  summary.stddev_final = seeds.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  summary.stderr_final = summary.stddev_final / std::sqrt(n);
  summary.mean_gap = summary.mean_final - benchmark;

  summary.mean_objective_by_step.assign(plan.iteration_count + 1, 0.0);
  for (const auto& s : summary.seeds) {
    for (std::size_t t = 0; t < s.objectives.size(); ++t) summary.mean_objective_by_step[t] += s.objectives[t] / n;
  }
  return summary;
}

void write_trace_csv(std::ostream& os, const SeedResult& seed) {
  os.precision(17);
  for (const auto& r : seed.trace) {
    os << seed.seed << ',' << r.step << ',' << r.objective << ',' << r.gap << ',' << r.quant_error_norm
       << ',' << r.grad_norm << '\n';
  }
}

// ---------------------------------------------------------------------------

namespace {

LatticeMinimum separable_min(const ProblemSpec& problem, double delta_star, double shift) {
  const Matrix& a = *problem.hessian;
  const Vector& b = *problem.linear;
  LatticeMinimum out;
  out.point.resize(b.size());
  // Each coordinate is a convex parabola: the nearest lattice point to its vertex wins.
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    const double vertex = b[i] / a(i, i);
    out.point[i] = delta_star * round_half_even((vertex - shift) / delta_star) + shift;
  }
  out.value = problem.objective(out.point);
  out.points_examined = static_cast<std::uint64_t>(b.size());
  return out;
}

LatticeMinimum exhaustive_min(const ProblemSpec& problem, double delta_star, double shift,
                              std::optional<double> search_radius) {
  if (!problem.minimizer) throw InvalidArgument("exhaustive oracle needs the unconstrained minimizer");
  const Vector& center = *problem.minimizer;
  const double f_star = problem.optimal_value.value_or(problem.objective(center));
  const auto n = center.size();

  Vector rounded(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    rounded[i] = delta_star * round_half_even((center[i] - shift) / delta_star) + shift;
  }
  // Any lattice minimizer x has f(x) <= f(rounded), so ||x - x*|| <= sqrt(2 (f(rounded) - f*) / alpha).
  const double pl_bound = std::sqrt(std::max(0.0, 2.0 * (problem.objective(rounded) - f_star) / problem.alpha));
  const double radius = search_radius.value_or(2.0 * pl_bound);

  std::vector<std::int64_t> lo(n), hi(n);
  double count = 1.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto nearest = static_cast<std::int64_t>(round_half_even((center[i] - shift) / delta_star));
    lo[i] = std::min(nearest, static_cast<std::int64_t>(std::ceil((center[i] - radius - shift) / delta_star)));
    hi[i] = std::max(nearest, static_cast<std::int64_t>(std::floor((center[i] + radius - shift) / delta_star)));
    count *= static_cast<double>(hi[i] - lo[i] + 1);
  }
  if (count > 1e8) {
    throw NumericalError("lattice enumeration would visit about " + std::to_string(count) +
                         " points (limit 1e8)");
  }

  LatticeMinimum best;
  best.value = std::numeric_limits<double>::infinity();
  std::vector<std::int64_t> k = lo;
  Vector x(n);
  while (true) {
    for (Eigen::Index i = 0; i < n; ++i) x[i] = delta_star * static_cast<double>(k[i]) + shift;
    const double v = problem.objective(x);
    ++best.points_examined;
    if (v < best.value) {
      best.value = v;
      best.point = x;
    }
    Eigen::Index d = 0;
    while (d < n && ++k[d] > hi[d]) {
      k[d] = lo[d];
      ++d;
    }
    if (d == n) break;
  }
  return best;
}

}  // namespace

LatticeMinimum brute_force_lattice_min(const ProblemSpec& problem, double delta_star, double shift,
                                       std::optional<double> search_radius, OracleMode mode) {
  problem.validate();
  if (!(delta_star > 0.0)) throw InvalidArgument("delta_star must be positive");
  if (mode == OracleMode::automatic) {
    mode = problem.is_diagonal_quadratic() ? OracleMode::separable : OracleMode::exhaustive;
  }
  if (mode == OracleMode::separable) {
    if (!problem.is_diagonal_quadratic()) throw InvalidArgument("separable oracle needs a diagonal quadratic");
    return separable_min(problem, delta_star, shift);
  }
  return exhaustive_min(problem, delta_star, shift, search_radius);
}

Estimate benchmark_expectation(const ProblemSpec& problem, double delta_star,
                               std::size_t num_r_samples, Rng& rng, OracleMode mode) {
  if (num_r_samples < 2) throw InvalidArgument("benchmark needs at least two shift samples");
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < num_r_samples; ++i) {
    const double r = quant::sample_shift(delta_star, rng);
    const double v = brute_force_lattice_min(problem, delta_star, r, std::nullopt, mode).value;
    sum += v;
    sum_sq += v * v;
  }
  const auto n = static_cast<double>(num_r_samples);
  const double mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1));
  return {mean, std::sqrt(var / n)};
}

// ---------------------------------------------------------------------------

VarianceBudget gradient_quantizer_variance_budget(const GradientQuantizer& quantizer,
                                                  std::span<const Vector> sample_gradients,
                                                  std::size_t repetitions, Rng& rng) {
  if (sample_gradients.empty()) throw InvalidArgument("variance budget needs sample gradients");
  if (repetitions == 0) throw InvalidArgument("variance budget needs repetitions >= 1");
  VarianceBudget out;
  for (const Vector& g : sample_gradients) {
    double mse = 0.0;
    std::vector<quant::QuantizedBlock> blocks;
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      auto q = quantizer.apply(g, rng);
      mse += (q.value - g).squaredNorm();
      if (rep == 0) blocks = std::move(q.blocks);
    }
    mse /= static_cast<double>(repetitions);

    // Coin-flip rounding on lo + step * Z has per-coordinate variance
    // step^2 {y}(1 - {y}) <= step * (g_i - lo).
    double bound = 0.0;
    Eigen::Index offset = 0;
    for (const auto& b : blocks) {
      const double step = b.step();
      for (std::size_t i = 0; i < b.length(); ++i) bound += step * std::abs(g[offset + static_cast<Eigen::Index>(i)] - b.scale_lo);
      offset += static_cast<Eigen::Index>(b.length());
    }

    out.per_sample.push_back(mse);
    out.per_sample_bound.push_back(bound);
    out.empirical = std::max(out.empirical, mse);
    out.analytic_bound = std::max(out.analytic_bound, bound);
    out.empirical_mean += mse / static_cast<double>(sample_gradients.size());
  }
  return out;
}

std::vector<Vector> path_gradient_samples(const ProblemSpec& problem, const Vector& x0,
                                          std::size_t count, Rng& rng) {
  if (!problem.minimizer) throw InvalidArgument("path_gradient_samples needs a known minimizer");
  if (count == 0) throw InvalidArgument("path_gradient_samples needs count >= 1");
  const Vector& xs = *problem.minimizer;
  std::vector<Vector> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double s = count == 1 ? 1.0 : static_cast<double>(i) / static_cast<double>(count - 1);
    out.push_back(problem.stochastic_gradient(xs + s * (x0 - xs), rng));
  }
  return out;
}

}  // namespace qsdp::opt
