#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsnet/random.hpp"
#include "dsnet/tensor.hpp"

namespace dsnet {

/// Which random transforms were applied to a sample, in application order.
struct AugmentRecord {
  double brightness = 1.0;
  bool hflip = false;
  bool vflip = false;
  int rot90 = 0;       // quarter turns counter-clockwise
  double angle = 0.0;  // degrees, arbitrary-angle mode only
};

/// Image (3, H, W) in [0, 1] with its binary mask (1, H, W).
struct Sample {
  Tensor<float> image;
  Tensor<float> mask;
  std::string id;
  std::optional<AugmentRecord> augmentation;
};

template <typename T>
struct Batch {
  Tensor<T> images;  // (N, 3, H, W)
  Tensor<T> masks;   // (N, 1, H, W)
  std::vector<std::string> ids;
};

template <typename T>
Batch<T> make_batch(std::span<const Sample> samples);

// ---------------------------------------------------------------------------
// Loading

struct LoadResult {
  std::vector<Sample> samples;
  std::vector<std::string> errors;  // one line per skipped file
};

/// Reads `root/images/*.png` paired by stem with `root/masks/<stem>.png`.
/// Images are bilinearly resized to `size` x `size`; masks are resized with
/// nearest neighbour and binarized at 0.5. Files that cannot be paired or
/// decoded are reported in `errors`; throws if no valid pair remains or a
/// directory is missing.
LoadResult load_dataset(const std::filesystem::path& root, std::int64_t size);

/// Nearest-neighbour resize of a (C, H, W) mask followed by binarization at 0.5.
Tensor<float> resize_mask_nearest(const Tensor<float>& mask, std::int64_t out_h, std::int64_t out_w);

/// Writes samples as `root/images/<id>.png` and `root/masks/<id>.png`.
void write_dataset(const std::filesystem::path& root, std::span<const Sample> samples);

/// Random ellipses with textured backgrounds and exact ground-truth masks.
std::vector<Sample> synthetic_ellipses(std::size_t count, std::int64_t size, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  /// Fractions used when `counts` is unset; must sum to 1.
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::optional<std::array<std::size_t, 3>> counts;
  std::uint64_t seed = 0;

  /// "cvc-clinicdb", "kvasir-seg" and "isic-2018" proportions.
  static SplitSpec preset(const std::string& dataset, std::uint64_t seed = 0);
  /// Partition sizes for a dataset of `total` samples.
  std::array<std::size_t, 3> sizes(std::size_t total) const;
};

struct SplitIndices {
  std::vector<std::size_t> train, valid, test;
};

/// Seeded shuffle, then consecutive train / valid / test slices.
SplitIndices make_split(std::size_t total, const SplitSpec& spec);

std::vector<Sample> gather(std::span<const Sample> samples, std::span<const std::size_t> indices);

/// One "<id> <train|valid|test>" line per sample, in dataset order.
std::string split_file_text(std::span<const Sample> samples, const SplitIndices& split);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double brightness_min = 0.8;
  double brightness_max = 1.2;
  double hflip_probability = 0.5;
  double vflip_probability = 0.5;
  bool rotate = true;
  /// Rotate by a uniform angle in [-max_angle, max_angle] degrees instead of
  /// quarter turns; image bilinear, mask nearest, zero fill.
  bool arbitrary_angle = false;
  double max_angle = 30.0;
};

/// Brightness scales the image only; flips and rotations apply jointly.
Sample augment(const Sample& sample, Rng& rng, const AugmentConfig& cfg);

Sample flip_horizontal(const Sample& s);
Sample flip_vertical(const Sample& s);
Sample rotate90(const Sample& s, int quarter_turns);
Sample rotate_angle(const Sample& s, double degrees);
Sample adjust_brightness(const Sample& s, double factor);

// ---------------------------------------------------------------------------
// Batching

/// Epoch iterator: shuffles sample order with `rng` at construction and
/// yields consecutive batches; the final short batch is kept unless
/// `drop_last`. Augmentation, when configured, draws from the same rng.
class BatchIterator {
 public:
  BatchIterator(std::span<const Sample> samples, std::size_t batch_size, Rng& rng,
                bool drop_last = false, const AugmentConfig* augment = nullptr);

  bool has_next() const { return cursor_ < end_; }
  std::size_t num_batches() const;
  /// Samples of the next batch (augmented if configured).
  std::vector<Sample> next();
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  std::span<const Sample> samples_;
  std::size_t batch_size_;
  Rng& rng_;
  const AugmentConfig* augment_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t end_ = 0;
};

}  // namespace dsnet
