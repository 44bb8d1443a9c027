#pragma once

// Stochastic quantizers for weights and gradients.
//
// Every quantized tensor segment is a QuantizedBlock: a vector of unsigned
// codes on the affine lattice
//
//     value(k) = scale_lo + k * step + shift,   step = (scale_hi - scale_lo) / (2^b - 1)
//
// The unbucketed lattice quantizers (qshift / qflip) place scale_lo on the
// smallest used lattice point so that `step` equals the requested resolution.
// The bucketed quantizers min-max normalize each bucket, so `step` is the
// bucket range divided into 2^b - 1 intervals. Full-precision blocks carry the
// f32 bit pattern of each value in a 32-bit code.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "qsdp/random.hpp"

namespace qsdp::quant {

/// Lattice resolution and shift: the set resolution * Z + shift.
struct GridSpec {
  double resolution = 1.0;
  double shift = 0.0;

  /// Throws InvalidArgument unless resolution > 0 and -res/2 <= shift < res/2.
  void validate() const;
};

enum class Normalization { min_max };

struct BucketSpec {
  std::size_t bucket_size = 1024;
  Normalization normalization = Normalization::min_max;

  void validate() const;
};

enum class Scheme {
  shift,               // random shift + nearest rounding, one shift per block
  flip,                // independent coin-flip rounding per coordinate
  uniform_stochastic,  // unbiased rounding on the uniform 2^b grid of [0, 1]
  nearest,             // deterministic nearest rounding
  levels,              // nearest (or stochastic) rounding onto a LevelTable
  full_precision,      // f32 passthrough, bit_width 32
};

const char* to_string(Scheme s);
std::optional<Scheme> scheme_from_string(std::string_view name);

struct QuantizedBlock {
  std::vector<std::uint32_t> codes;
  double shift = 0.0;
  double scale_lo = 0.0;
  double scale_hi = 0.0;
  unsigned bit_width = 1;

  std::size_t length() const noexcept { return codes.size(); }
  std::uint64_t max_code() const noexcept { return (std::uint64_t{1} << bit_width) - 1; }
  /// Lattice pitch; zero for a degenerate block.
  double step() const noexcept;

  /// Throws InvalidArgument when a block invariant is broken.
  void validate() const;

  bool operator==(const QuantizedBlock&) const = default;
};

/// Strictly increasing quantization levels inside the normalized range [0, 1].
class LevelTable {
 public:
  LevelTable() = default;
  /// Throws InvalidArgument if `levels` is not strictly increasing or its size
  /// is not a power of two.
  explicit LevelTable(std::vector<double> levels);

  /// 2^bit_width equally spaced levels covering [0, 1]; bit_width 0 gives {0.5}.
  static LevelTable uniform(unsigned bit_width);

  std::span<const double> levels() const noexcept { return levels_; }
  std::size_t size() const noexcept { return levels_.size(); }
  double operator[](std::size_t i) const { return levels_[i]; }
  unsigned bit_width() const noexcept;
  /// Index of the nearest level; ties go to the lower level.
  std::size_t closest(double value) const noexcept { return closest_in(levels_, value); }
  static std::size_t closest_in(std::span<const double> sorted_levels, double value) noexcept;

  bool operator==(const LevelTable&) const = default;

 private:
  std::vector<double> levels_;
};

// ---------------------------------------------------------------------------
// Lattice quantizers

/// resolution * round_half_even((x - shift) / resolution) + shift.
double qshift_scalar(double x, const GridSpec& grid);

/// Signed lattice indices k with value = k * resolution + shift.
std::vector<std::int64_t> lattice_round(std::span<const double> v, const GridSpec& grid);

/// Draws r ~ Unif[-resolution/2, resolution/2).
double sample_shift(double resolution, Rng& rng);

/// Random-shift quantization: one r for the whole vector, nearest rounding.
QuantizedBlock qshift_quantize(std::span<const double> v, double resolution, Rng& rng);
/// Same as qshift_quantize with the shift fixed by the caller.
QuantizedBlock qshift_quantize(std::span<const double> v, const GridSpec& grid);

/// Coin-flip quantization onto resolution * Z; shift is 0.
QuantizedBlock qflip_quantize(std::span<const double> v, double resolution, Rng& rng);

/// Decodes any block. `table` is required for Scheme::levels. Throws
/// InvalidArgument on a code >= 2^bit_width.
std::vector<double> dequantize(const QuantizedBlock& block, Scheme mode,
                               const LevelTable* table = nullptr);

// ---------------------------------------------------------------------------
// Normalized-range quantizers (inputs in [0, 1])

/// Unbiased stochastic rounding onto {k / (2^b - 1)}. Throws InvalidArgument
/// for entries outside [0, 1] or bit_width outside [1, 16].
std::vector<std::uint32_t> uniform_stochastic_quantize(std::span<const double> v,
                                                       unsigned bit_width, Rng& rng);

/// Nearest level (deterministic) or unbiased choice between the bracketing
/// levels (stochastic). Values outside the table's span are clamped.
std::vector<std::uint32_t> quantize_with_levels(std::span<const double> v, const LevelTable& table,
                                                bool stochastic, Rng& rng);

// ---------------------------------------------------------------------------
// Bucketing

struct BucketedOptions {
  BucketSpec bucket;
  unsigned bit_width = 8;
  Scheme scheme = Scheme::uniform_stochastic;
  const LevelTable* levels = nullptr;  // Scheme::levels only
  bool stochastic_levels = false;
};

/// Splits v into consecutive buckets, min-max normalizes each and quantizes it
/// on a 2^bit_width grid with an independent draw per bucket.
std::vector<QuantizedBlock> bucketed_quantize(std::span<const double> v,
                                              const BucketedOptions& options, Rng& rng);

/// Concatenated decode of a bucketed_quantize result.
std::vector<double> bucketed_dequantize(std::span<const QuantizedBlock> blocks, Scheme mode,
                                        const LevelTable* table = nullptr);

/// Maps each bucket of v to [0, 1] with its own min-max; constant buckets map to 0.
std::vector<double> normalize_bucketwise(std::span<const double> v, const BucketSpec& bucket);

// ---------------------------------------------------------------------------
// Learned levels

struct LearnedLevels {
  LevelTable table;
  // Set when the input had fewer distinct values than levels; `table` is then
  // the initial table unchanged.
  bool insufficient_data = false;
};

/// One in-order pass of level SGD: each value pulls its closest level toward
/// itself by learning_rate * (level - value). Values are bucket-normalized
/// first. The table is sorted once at the end if the pass reordered it.
LearnedLevels learn_levels(std::span<const double> values, const LevelTable& initial,
                           double learning_rate = 0.01, const BucketSpec& bucket = {});

/// ||deq(Q(v)) - v||_2 / ||v||_2 with bucketed nearest-level quantization.
double relative_level_error(std::span<const double> values, const LevelTable& table,
                            const BucketSpec& bucket = {});

}  // namespace qsdp::quant
