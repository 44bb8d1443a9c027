#include "qsdp/quantizers.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include "qsdp/errors.hpp"

namespace qsdp::quant {
namespace {

// std::nearbyint honours the default FE_TONEAREST mode: ties go to even.
inline double round_half_even(double x) { return std::nearbyint(x); }

void require_finite(std::span<const double> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      std::ostringstream os;
      os << what << ": non-finite input at index " << i << " (" << v[i] << ")";
      throw InvalidArgument(os.str());
    }
  }
}

void require_bit_width(unsigned bit_width) {
  if (bit_width < 1 || bit_width > 16) {
    throw InvalidArgument("bit_width must be in [1, 16], got " + std::to_string(bit_width));
  }
}

unsigned bits_for(std::uint64_t max_value) {
  return std::max(1u, static_cast<unsigned>(std::bit_width(max_value)));
}

// Packs signed lattice indices into a block whose lattice pitch is `resolution`.
QuantizedBlock pack_lattice(std::span<const std::int64_t> indices, double resolution, double shift) {
  const auto [lo_it, hi_it] = std::minmax_element(indices.begin(), indices.end());
  const std::int64_t k_min = *lo_it;
  const auto span = static_cast<std::uint64_t>(*hi_it - k_min);
  const unsigned bits = bits_for(span);
  if (bits > 32) throw InvalidArgument("lattice range needs more than 32 bits per code");

  QuantizedBlock block;
  block.bit_width = bits;
  block.shift = shift;
  block.scale_lo = static_cast<double>(k_min) * resolution;
  block.scale_hi = block.scale_lo + resolution * static_cast<double>(block.max_code());
  block.codes.reserve(indices.size());
  for (std::int64_t k : indices) block.codes.push_back(static_cast<std::uint32_t>(k - k_min));
  return block;
}

double float_floor(double x) {
  float f = static_cast<float>(x);
  if (static_cast<double>(f) > x) f = std::nextafter(f, -std::numeric_limits<float>::infinity());
  return f;
}

double float_ceil(double x) {
  float f = static_cast<float>(x);
  if (static_cast<double>(f) < x) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return f;
}

struct Range {
  double lo;
  double hi;
  bool degenerate() const { return lo == hi; }
};

// Bucket bounds as transmitted: min rounded down and max rounded up to f32.
Range bucket_range(std::span<const double> bucket) {
  const auto [mn, mx] = std::minmax_element(bucket.begin(), bucket.end());
  Range r{float_floor(*mn), float_ceil(*mx)};
  if (!std::isfinite(r.lo) || !std::isfinite(r.hi)) {
    throw InvalidArgument("bucket range exceeds f32 metadata range");
  }
  return r;
}

double normalized(double x, const Range& r) {
  return std::clamp((x - r.lo) / (r.hi - r.lo), 0.0, 1.0);
}

std::uint32_t clamp_code(double k, std::uint64_t max_code) {
  if (k <= 0.0) return 0;
  if (k >= static_cast<double>(max_code)) return static_cast<std::uint32_t>(max_code);
  return static_cast<std::uint32_t>(k);
}

}  // namespace

void GridSpec::validate() const {
  if (!(resolution > 0.0) || !std::isfinite(resolution)) {
    throw InvalidArgument("grid resolution must be positive and finite");
  }
  if (!(shift >= -resolution / 2 && shift < resolution / 2)) {
    throw InvalidArgument("grid shift must lie in [-resolution/2, resolution/2)");
  }
}

void BucketSpec::validate() const {
  if (bucket_size < 1) throw InvalidArgument("bucket_size must be >= 1");
}

const char* to_string(Scheme s) {
  switch (s) {
    case Scheme::shift: return "shift";
    case Scheme::flip: return "flip";
    case Scheme::uniform_stochastic: return "uniform_stochastic";
    case Scheme::nearest: return "nearest";
    case Scheme::levels: return "levels";
    case Scheme::full_precision: return "full_precision";
  }
  return "?";
}

std::optional<Scheme> scheme_from_string(std::string_view name) {
  for (Scheme s : {Scheme::shift, Scheme::flip, Scheme::uniform_stochastic, Scheme::nearest,
                   Scheme::levels, Scheme::full_precision}) {
    if (name == to_string(s)) return s;
  }
  return std::nullopt;
}

double QuantizedBlock::step() const noexcept {
  if (bit_width >= 32) return 0.0;
  return (scale_hi - scale_lo) / static_cast<double>(max_code());
}

void QuantizedBlock::validate() const {
  if (bit_width < 1 || bit_width > 32) throw InvalidArgument("block bit_width must be in [1, 32]");
  if (codes.empty()) throw InvalidArgument("block must hold at least one code");
  if (!(scale_lo <= scale_hi)) throw InvalidArgument("block scale_lo must be <= scale_hi");
  const std::uint64_t limit = max_code();
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] > limit) {
      throw InvalidArgument("code " + std::to_string(codes[i]) + " at index " + std::to_string(i) +
                            " does not fit in " + std::to_string(bit_width) + " bits");
    }
  }
}

// ---------------------------------------------------------------------------

LevelTable::LevelTable(std::vector<double> levels) : levels_(std::move(levels)) {
  if (levels_.empty() || !std::has_single_bit(levels_.size())) {
    throw InvalidArgument("level count must be a power of two");
  }
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    if (!std::isfinite(levels_[i])) throw InvalidArgument("levels must be finite");
    if (i > 0 && !(levels_[i - 1] < levels_[i])) {
      throw InvalidArgument("levels must be strictly increasing");
    }
  }
}

LevelTable LevelTable::uniform(unsigned bit_width) {
  if (bit_width > 16) throw InvalidArgument("bit_width must be <= 16");
  if (bit_width == 0) return LevelTable({0.5});
  const std::size_t n = std::size_t{1} << bit_width;
  std::vector<double> levels(n);
  for (std::size_t i = 0; i < n; ++i) levels[i] = static_cast<double>(i) / static_cast<double>(n - 1);
  return LevelTable(std::move(levels));
}

unsigned LevelTable::bit_width() const noexcept {
  return static_cast<unsigned>(std::countr_zero(levels_.size()));
}

std::size_t LevelTable::closest_in(std::span<const double> levels, double value) noexcept {
  const auto it = std::lower_bound(levels.begin(), levels.end(), value);
  if (it == levels.begin()) return 0;
  if (it == levels.end()) return levels.size() - 1;
  const auto prev = std::prev(it);
  const auto idx = static_cast<std::size_t>(it - levels.begin());
  return (value - *prev) <= (*it - value) ? idx - 1 : idx;
}

// ---------------------------------------------------------------------------

double qshift_scalar(double x, const GridSpec& grid) {
  return grid.resolution * round_half_even((x - grid.shift) / grid.resolution) + grid.shift;
}

std::vector<std::int64_t> lattice_round(std::span<const double> v, const GridSpec& grid) {
  std::vector<std::int64_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<std::int64_t>(round_half_even((v[i] - grid.shift) / grid.resolution));
  }
  return out;
}

double sample_shift(double resolution, Rng& rng) {
  const double half = resolution / 2;
  const double r = -half + resolution * uniform01(rng);
  return r < half ? r : -half;
}

QuantizedBlock qshift_quantize(std::span<const double> v, const GridSpec& grid) {
  grid.validate();
  if (v.empty()) throw InvalidArgument("qshift_quantize: empty vector");
  require_finite(v, "qshift_quantize");
  return pack_lattice(lattice_round(v, grid), grid.resolution, grid.shift);
}

QuantizedBlock qshift_quantize(std::span<const double> v, double resolution, Rng& rng) {
  GridSpec{resolution, 0.0}.validate();
  if (v.empty()) throw InvalidArgument("qshift_quantize: empty vector");
  require_finite(v, "qshift_quantize");
  return qshift_quantize(v, GridSpec{resolution, sample_shift(resolution, rng)});
}

QuantizedBlock qflip_quantize(std::span<const double> v, double resolution, Rng& rng) {
  GridSpec{resolution, 0.0}.validate();
  if (v.empty()) throw InvalidArgument("qflip_quantize: empty vector");
  require_finite(v, "qflip_quantize");
  std::vector<std::int64_t> idx(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double s = v[i] / resolution;
    const double lower = std::floor(s);
    const double frac = s - lower;
    idx[i] = static_cast<std::int64_t>(lower) + (uniform01(rng) < frac ? 1 : 0);
  }
  return pack_lattice(idx, resolution, 0.0);
}

std::vector<double> dequantize(const QuantizedBlock& block, Scheme mode, const LevelTable* table) {
  std::vector<double> out(block.codes.size());
  const std::uint64_t limit = block.max_code();
  for (std::size_t i = 0; i < block.codes.size(); ++i) {
    if (block.codes[i] > limit) {
      throw InvalidArgument("corrupted code " + std::to_string(block.codes[i]) + " at index " +
                            std::to_string(i) + " for bit_width " + std::to_string(block.bit_width));
    }
  }
  switch (mode) {
    case Scheme::full_precision:
      if (block.bit_width != 32) throw InvalidArgument("full-precision blocks carry 32-bit codes");
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<float>(block.codes[i]);
      return out;
    case Scheme::levels: {
      if (table == nullptr) throw InvalidArgument("levels decode needs a LevelTable");
      if (table->size() != (std::size_t{1} << block.bit_width) && block.scale_lo != block.scale_hi) {
        throw InvalidArgument("level table size does not match block bit_width");
      }
      const double range = block.scale_hi - block.scale_lo;
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = range == 0.0 ? block.scale_lo : block.scale_lo + range * (*table)[block.codes[i]];
      }
      return out;
    }
    case Scheme::shift:
    case Scheme::flip:
    case Scheme::uniform_stochastic:
    case Scheme::nearest: {
      const double step = block.step();
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = block.scale_lo + static_cast<double>(block.codes[i]) * step + block.shift;
      }
      return out;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::uint32_t> uniform_stochastic_quantize(std::span<const double> v,
                                                       unsigned bit_width, Rng& rng) {
  require_bit_width(bit_width);
  const std::uint64_t max_code = (std::uint64_t{1} << bit_width) - 1;
  const double m = static_cast<double>(max_code);
  std::vector<std::uint32_t> codes(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = v[i];
    if (!(x >= 0.0 && x <= 1.0)) {
      throw InvalidArgument("uniform_stochastic_quantize: entry " + std::to_string(i) +
                            " outside [0, 1]");
    }
    double s = x * m;
    // k / m * m can land one ulp off k; snap so on-level inputs stay deterministic.
    const double nearest = std::nearbyint(s);
    if (std::abs(s - nearest) <= 1e-12 * m) s = nearest;
    const double lower = std::floor(s);
    if (lower >= m) {
      codes[i] = static_cast<std::uint32_t>(max_code);
      continue;
    }
    const double p_up = s - lower;
    codes[i] = static_cast<std::uint32_t>(lower) + (uniform01(rng) < p_up ? 1u : 0u);
  }
  return codes;
}

std::vector<std::uint32_t> quantize_with_levels(std::span<const double> v, const LevelTable& table,
                                                bool stochastic, Rng& rng) {
  const auto levels = table.levels();
  if (levels.empty()) throw InvalidArgument("empty level table");
  std::vector<std::uint32_t> codes(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = std::clamp(v[i], levels.front(), levels.back());
    if (!stochastic) {
      codes[i] = static_cast<std::uint32_t>(table.closest(x));
      continue;
    }
    const auto it = std::upper_bound(levels.begin(), levels.end(), x);
    const auto lower = static_cast<std::size_t>(it - levels.begin()) - 1;
    if (lower + 1 >= levels.size()) {
      codes[i] = static_cast<std::uint32_t>(levels.size() - 1);
      continue;
    }
    const double p_up = (x - levels[lower]) / (levels[lower + 1] - levels[lower]);
    codes[i] = static_cast<std::uint32_t>(lower) + (uniform01(rng) < p_up ? 1u : 0u);
  }
  return codes;
}

// ---------------------------------------------------------------------------

std::vector<QuantizedBlock> bucketed_quantize(std::span<const double> v,
                                              const BucketedOptions& options, Rng& rng) {
  options.bucket.validate();
  if (v.empty()) throw InvalidArgument("bucketed_quantize: empty vector");
  require_finite(v, "bucketed_quantize");
  const bool full = options.scheme == Scheme::full_precision;
  if (!full) require_bit_width(options.bit_width);
  if (options.scheme == Scheme::levels) {
    if (options.levels == nullptr) throw InvalidArgument("levels scheme needs a LevelTable");
    if (options.levels->size() != (std::size_t{1} << options.bit_width)) {
      throw InvalidArgument("level table size must equal 2^bit_width");
    }
  }

  const std::size_t bsize = options.bucket.bucket_size;
  std::vector<QuantizedBlock> blocks;
  blocks.reserve((v.size() + bsize - 1) / bsize);
  for (std::size_t start = 0; start < v.size(); start += bsize) {
    const auto bucket = v.subspan(start, std::min(bsize, v.size() - start));
    QuantizedBlock block;
    block.codes.resize(bucket.size());

    if (full) {
      block.bit_width = 32;
      for (std::size_t i = 0; i < bucket.size(); ++i) {
        block.codes[i] = std::bit_cast<std::uint32_t>(static_cast<float>(bucket[i]));
      }
      blocks.push_back(std::move(block));
      continue;
    }

    block.bit_width = options.bit_width;
    const Range range = bucket_range(bucket);
    block.scale_lo = range.lo;
    block.scale_hi = range.hi;
    if (range.degenerate()) {
      blocks.push_back(std::move(block));  // all-zero codes decode to scale_lo
      continue;
    }

    const std::uint64_t max_code = block.max_code();
    const double m = static_cast<double>(max_code);
    switch (options.scheme) {
      case Scheme::shift: {
        const double step = block.step();
        block.shift = static_cast<float>(sample_shift(step, rng));
        for (std::size_t i = 0; i < bucket.size(); ++i) {
          block.codes[i] = clamp_code(round_half_even((bucket[i] - range.lo - block.shift) / step), max_code);
        }
        break;
      }
      case Scheme::flip:
      case Scheme::uniform_stochastic: {
        std::vector<double> t(bucket.size());
        for (std::size_t i = 0; i < bucket.size(); ++i) t[i] = normalized(bucket[i], range);
        block.codes = uniform_stochastic_quantize(t, options.bit_width, rng);
        break;
      }
      case Scheme::nearest:
        for (std::size_t i = 0; i < bucket.size(); ++i) {
          block.codes[i] = clamp_code(round_half_even(normalized(bucket[i], range) * m), max_code);
        }
        break;
      case Scheme::levels: {
        std::vector<double> t(bucket.size());
        for (std::size_t i = 0; i < bucket.size(); ++i) t[i] = normalized(bucket[i], range);
        block.codes = quantize_with_levels(t, *options.levels, options.stochastic_levels, rng);
        break;
      }
      case Scheme::full_precision:
        break;
    }
    blocks.push_back(std::move(block));
  }
  return blocks;
}

std::vector<double> bucketed_dequantize(std::span<const QuantizedBlock> blocks, Scheme mode,
                                        const LevelTable* table) {
  std::vector<double> out;
  for (const auto& b : blocks) {
    const auto part = dequantize(b, mode, table);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<double> normalize_bucketwise(std::span<const double> v, const BucketSpec& bucket) {
  bucket.validate();
  require_finite(v, "normalize_bucketwise");
  std::vector<double> out(v.size(), 0.0);
  for (std::size_t start = 0; start < v.size(); start += bucket.bucket_size) {
    const std::size_t len = std::min(bucket.bucket_size, v.size() - start);
    const Range range = bucket_range(v.subspan(start, len));
    if (range.degenerate()) continue;
    for (std::size_t i = start; i < start + len; ++i) out[i] = normalized(v[i], range);
  }
  return out;
}

// ---------------------------------------------------------------------------

LearnedLevels learn_levels(std::span<const double> values, const LevelTable& initial,
                           double learning_rate, const BucketSpec& bucket) {
  if (values.empty()) throw InvalidArgument("learn_levels: no values");
  if (!(learning_rate > 0.0 && learning_rate <= 1.0)) {
    throw InvalidArgument("learn_levels: learning_rate must be in (0, 1]");
  }
  if (initial.size() == 0) throw InvalidArgument("learn_levels: empty initial table");

  std::vector<double> distinct(values.begin(), values.end());
  std::sort(distinct.begin(), distinct.end());
  const auto distinct_count =
      static_cast<std::size_t>(std::unique(distinct.begin(), distinct.end()) - distinct.begin());
  if (distinct_count < initial.size()) return {initial, true};

  const std::vector<double> normalized_values = normalize_bucketwise(values, bucket);
  std::vector<double> levels(initial.levels().begin(), initial.levels().end());
  bool sorted = true;
  for (double v : normalized_values) {
    std::size_t best = 0;
    if (sorted) {
      best = LevelTable::closest_in(levels, v);
    } else {
      for (std::size_t i = 1; i < levels.size(); ++i) {
        if (std::abs(levels[i] - v) < std::abs(levels[best] - v)) best = i;
      }
    }
    levels[best] -= learning_rate * (levels[best] - v);
    if ((best > 0 && levels[best - 1] >= levels[best]) ||
        (best + 1 < levels.size() && levels[best] >= levels[best + 1])) {
      sorted = false;
    }
  }
  if (!sorted) std::sort(levels.begin(), levels.end());
  return {LevelTable(std::move(levels)), false};
}

double relative_level_error(std::span<const double> values, const LevelTable& table,
                            const BucketSpec& bucket) {
  bucket.validate();
  require_finite(values, "relative_level_error");
  double err = 0.0;
  double norm = 0.0;
  for (std::size_t start = 0; start < values.size(); start += bucket.bucket_size) {
    const auto part = values.subspan(start, std::min(bucket.bucket_size, values.size() - start));
    const Range range = bucket_range(part);
    for (double x : part) {
      norm += x * x;
      if (range.degenerate()) {
        err += (x - range.lo) * (x - range.lo);
        continue;
      }
      const double q = table[table.closest(normalized(x, range))];
      const double d = range.lo + (range.hi - range.lo) * q - x;
      err += d * d;
    }
  }
  return norm > 0.0 ? std::sqrt(err / norm) : std::sqrt(err);
}

}  // namespace qsdp::quant
