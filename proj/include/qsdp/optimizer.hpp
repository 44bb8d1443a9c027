#pragma once

// SGD with lattice-quantized iterates:
//
//     x_{t+1} = Q_delta(x_t - (eta / beta) * Qg(g(x_t)))
//
// where Q_delta is the random-shift quantizer on delta * Z^n + r * 1 and Qg an
// optional unbiased gradient quantizer. Hyperparameters (eta, delta, T) come
// from derive_eta / derive_grid / derive_T; the comparator for convergence is
// E_r f(x*_{r, delta*}), the expected best value on the coarser lattice,
// computed by brute_force_lattice_min / benchmark_expectation.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "qsdp/quantizers.hpp"
#include "qsdp/random.hpp"

namespace qsdp::opt {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Smooth, PL objective with a noisy gradient oracle.
struct ProblemSpec {
  std::size_t dimension = 0;
  std::function<double(const Vector&)> objective;
  std::function<Vector(const Vector&)> gradient;
  double alpha = 1.0;        // PL constant
  double beta = 1.0;         // smoothness
  double noise_sigma = 0.0;  // E||noise||^2 <= sigma^2
  std::optional<Vector> minimizer;
  std::optional<double> optimal_value;
  // Populated by quadratic_problem: f(x) = x'Ax/2 - b'x.
  std::optional<Matrix> hessian;
  std::optional<Vector> linear;

  /// Throws InvalidArgument unless beta >= alpha > 0 and sigma >= 0.
  void validate() const;
  bool is_diagonal_quadratic() const;

  /// grad f(x) + isotropic Gaussian noise with E||noise||^2 = sigma^2.
  Vector stochastic_gradient(const Vector& x, Rng& rng) const;
};

/// f(x) = x'Ax/2 - b'x. Throws InvalidArgument when A is not symmetric
/// positive definite.
ProblemSpec quadratic_problem(const Matrix& a, const Vector& b, double sigma);

// ---------------------------------------------------------------------------
// Hyperparameters

/// min(0.3 * epsilon * alpha / sigma_sq_total, 1); 1 when sigma_sq_total == 0.
double derive_eta(double epsilon, double alpha, double sigma_sq_total);

/// ceil(16 (beta/alpha)^2).
std::uint64_t condition_factor(double alpha, double beta);

struct GridDerivation {
  double fine_resolution = 0.0;
  std::uint64_t ratio = 0;  // coarse / fine, always integral
};

/// delta = eta * delta_star / ceil(16 (beta/alpha)^2), rounded down so that
/// delta_star / delta is an integer.
GridDerivation derive_grid(double eta, double alpha, double beta, double delta_star);

/// ceil((10 / eta) (beta / alpha) ln(initial_gap / epsilon)); 0 if gap <= epsilon.
std::uint64_t derive_T(double eta, double alpha, double beta, double initial_gap, double epsilon);

struct RunPlan {
  double eta = 1.0;
  double coarse_resolution = 1.0;
  double fine_resolution = 1.0;
  std::uint64_t grid_ratio = 1;
  std::uint64_t iteration_count = 0;
  double epsilon = 0.0;
  std::optional<unsigned> gradient_bit_width;
  std::optional<double> gradient_variance;  // sigma_grad^2

  double step_size(double beta) const { return eta / beta; }
  void validate() const;
};

/// Derives the full plan for `problem`. initial_gap = f(x0) - E f(x*_{r,delta*}).
/// gradient_variance, when set, enters eta through sigma^2 + sigma_grad^2.
RunPlan make_plan(const ProblemSpec& problem, double epsilon, double delta_star,
                  double initial_gap, std::optional<double> gradient_variance = std::nullopt,
                  std::optional<unsigned> gradient_bit_width = std::nullopt);

// ---------------------------------------------------------------------------
// Iteration

/// Unbiased gradient quantizer: bucketed min-max stochastic rounding.
struct GradientQuantizer {
  unsigned bit_width = 4;
  quant::BucketSpec bucket;
  quant::Scheme scheme = quant::Scheme::uniform_stochastic;

  struct Result {
    Vector value;
    std::vector<quant::QuantizedBlock> blocks;
  };
  Result apply(const Vector& g, Rng& rng) const;
};

struct StepOptions {
  std::optional<double> forced_shift;  // fixes r instead of sampling it
  const GradientQuantizer* gradient_quantizer = nullptr;
};

struct StepResult {
  Vector x;
  double shift = 0.0;
  double quant_error_norm = 0.0;  // ||Q(y) - y||
  double grad_norm = 0.0;         // norm of the gradient used in the step
  std::uint64_t gradient_bits = 0;
};

/// One quantized SGD step. Throws NumericalError on a non-finite gradient.
StepResult qsdp_step(const Vector& x, const ProblemSpec& problem, const RunPlan& plan, Rng& rng,
                     const StepOptions& options = {});

/// True when every coordinate of x lies on resolution * Z + shift within a
/// relative tolerance.
bool on_lattice(const Vector& x, double resolution, double shift, double rel_tol = 1e-9);

struct TraceRow {
  std::uint64_t step = 0;
  double objective = 0.0;
  double gap = 0.0;  // objective - benchmark
  double quant_error_norm = 0.0;
  double grad_norm = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  double final_objective = 0.0;
  std::uint64_t gradient_bits = 0;
  std::vector<double> objectives;  // f(x_t) for t = 0..T
  std::vector<TraceRow> trace;     // empty unless RunOptions::record_trace
  bool lattice_ok = true;       // every post-quantization iterate on its lattice
};

struct RunOptions {
  bool record_trace = false;
  const GradientQuantizer* gradient_quantizer = nullptr;
  unsigned threads = 1;
};

struct RunSummary {
  std::vector<SeedResult> seeds;
  double benchmark = 0.0;
  double mean_final = 0.0;
  double stddev_final = 0.0;
  double stderr_final = 0.0;
  double mean_gap = 0.0;
  // Mean objective across seeds after each step (index 0 is x0).
  std::vector<double> mean_objective_by_step;
};

/// Runs plan.iteration_count steps from x0 for each seed. Seeds are
/// independent; the result does not depend on `threads`.
RunSummary run(const ProblemSpec& problem, const RunPlan& plan, const Vector& x0,
               std::span<const std::uint64_t> seeds, double benchmark,
               const RunOptions& options = {});

/// step,f,gap,quant_error_norm,grad_norm rows for one seed.
void write_trace_csv(std::ostream& os, const SeedResult& seed);

// ---------------------------------------------------------------------------
// Lattice-minimizer oracle

enum class OracleMode { automatic, exhaustive, separable };

struct LatticeMinimum {
  Vector point;
  double value = 0.0;
  std::uint64_t points_examined = 0;
};

/// Minimizer of f over delta_star * Z^n + shift * 1. Separable mode (diagonal
/// quadratics) is exact coordinate-wise; exhaustive mode enumerates the box of
/// half-width search_radius around x* (default: twice the PL distance bound of
/// the coordinate-wise rounding of x*). Throws NumericalError if the box holds
/// more than 1e8 points.
LatticeMinimum brute_force_lattice_min(const ProblemSpec& problem, double delta_star, double shift,
                                       std::optional<double> search_radius = std::nullopt,
                                       OracleMode mode = OracleMode::automatic);

struct Estimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo estimate of E_r f(x*_{r, delta_star}) with r ~ Unif[-delta*/2, delta*/2).
Estimate benchmark_expectation(const ProblemSpec& problem, double delta_star,
                               std::size_t num_r_samples, Rng& rng,
                               OracleMode mode = OracleMode::automatic);

// ---------------------------------------------------------------------------
// Gradient quantizer variance

struct VarianceBudget {
  double empirical = 0.0;       // max over samples of the Monte-Carlo E||Q(g) - g||^2
  double empirical_mean = 0.0;  // mean over samples
  double analytic_bound = 0.0;  // max over samples of sum_buckets step * ||g_b - lo_b||_1
  std::vector<double> per_sample;
  std::vector<double> per_sample_bound;
};

/// Estimates sigma_grad^2 for a bucketed gradient quantizer from sample
/// gradients, `repetitions` quantizations each.
VarianceBudget gradient_quantizer_variance_budget(const GradientQuantizer& quantizer,
                                                  std::span<const Vector> sample_gradients,
                                                  std::size_t repetitions, Rng& rng);

/// Stochastic gradients at x* + s (x0 - x*) for `count` evenly spaced s in
/// [0, 1], i.e. along the segment a run from x0 is expected to travel.
/// Requires problem.minimizer.
std::vector<Vector> path_gradient_samples(const ProblemSpec& problem, const Vector& x0,
                                          std::size_t count, Rng& rng);

}  // namespace qsdp::opt
