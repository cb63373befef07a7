#include "dsnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include "dsnet/error.hpp"
#include "dsnet/image_io.hpp"
#include "dsnet/ops.hpp"

namespace dsnet {

namespace fs = std::filesystem;

template <typename T>
Batch<T> make_batch(std::span<const Sample> samples) {
  if (samples.empty()) throw ConfigError("make_batch: empty sample list");
  const auto& first = samples.front();
  const auto c = first.image.dim(0), h = first.image.dim(1), w = first.image.dim(2);
  const auto n = static_cast<std::int64_t>(samples.size());
  Batch<T> b;
  b.images = Tensor<T>(Shape{n, c, h, w});
  b.masks = Tensor<T>(Shape{n, 1, h, w});
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    if (s.image.shape() != first.image.shape() || s.mask.shape() != Shape{1, h, w}) {
      throw ConfigError("make_batch: sample '" + s.id + "' has shape " + shape_string(s.image.shape()) +
                        ", expected " + shape_string(first.image.shape()));
    }
    std::copy(s.image.values().begin(), s.image.values().end(), b.images.mutable_data() + i * c * h * w);
    std::copy(s.mask.values().begin(), s.mask.values().end(), b.masks.mutable_data() + i * h * w);
    b.ids.push_back(s.id);
  }
  return b;
}

template Batch<float> make_batch<float>(std::span<const Sample>);
template Batch<double> make_batch<double>(std::span<const Sample>);

// ---------------------------------------------------------------------------
// Loading

namespace {

Tensor<float> raster_to_chw(const RasterImage& r, std::int64_t channels) {
  Tensor<float> t(Shape{channels, r.height, r.width});
  auto* out = t.mutable_data();
  const auto plane = r.height * r.width;
  for (std::int64_t p = 0; p < plane; ++p) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const auto src_c = r.channels == 1 ? 0 : std::min<std::int64_t>(c, r.channels - 1);
      out[c * plane + p] = static_cast<float>(r.pixels[static_cast<std::size_t>(p * r.channels + src_c)]) / 255.0f;
    }
  }
  return t;
}

std::map<std::string, fs::path> png_files_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext != ".png") continue;
    out.emplace(entry.path().stem().string(), entry.path());
  }
  return out;
}

}  // namespace

Tensor<float> resize_mask_nearest(const Tensor<float>& mask, std::int64_t out_h, std::int64_t out_w) {
  if (mask.rank() != 3) throw ConfigError("resize_mask_nearest: expected (C, H, W) mask");
  const auto c = mask.dim(0), h = mask.dim(1), w = mask.dim(2);
  Tensor<float> out(Shape{c, out_h, out_w});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t y = 0; y < out_h; ++y) {
      const auto sy = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor((y + 0.5) * h / static_cast<double>(out_h))), h - 1);
      for (std::int64_t x = 0; x < out_w; ++x) {
        const auto sx = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor((x + 0.5) * w / static_cast<double>(out_w))), w - 1);
        const float v = mask.data()[(ch * h + sy) * w + sx];
        out.mutable_data()[(ch * out_h + y) * out_w + x] = v >= 0.5f ? 1.0f : 0.0f;
      }
    }
  }
  return out;
}

LoadResult load_dataset(const fs::path& root, std::int64_t size) {
  if (size <= 0) throw ConfigError("load_dataset: target size must be positive");
  const fs::path image_dir = root / "images", mask_dir = root / "masks";
  if (!fs::is_directory(root)) throw ConfigError("dataset root does not exist: " + root.string());
  if (!fs::is_directory(image_dir)) throw ConfigError("missing images directory: " + image_dir.string());
  if (!fs::is_directory(mask_dir)) throw ConfigError("missing masks directory: " + mask_dir.string());

  const auto images = png_files_by_stem(image_dir);
  const auto masks = png_files_by_stem(mask_dir);
  LoadResult result;
  for (const auto& [stem, mpath] : masks) {
    if (!images.count(stem)) result.errors.push_back("mask without image: " + mpath.string());
  }
  for (const auto& [stem, ipath] : images) {
    auto mit = masks.find(stem);
    if (mit == masks.end()) {
      result.errors.push_back("image without mask: " + ipath.string());
      continue;
    }
    try {
      const auto img = read_png(ipath);
      const auto msk = read_png(mit->second);
      if (img.width != msk.width || img.height != msk.height) {
        result.errors.push_back("image/mask size mismatch for '" + stem + "'");
        continue;
      }
      Sample s;
      s.id = stem;
      auto chw = raster_to_chw(img, 3).reshaped_copy({1, 3, img.height, img.width});
      auto resized = resize_bilinear(chw, size, size);
      s.image = resized.reshaped_copy({3, size, size});
      for (auto& v : s.image.mutable_values()) v = std::clamp(v, 0.0f, 1.0f);
      s.mask = resize_mask_nearest(raster_to_chw(msk, 1), size, size);
      result.samples.push_back(std::move(s));
    } catch (const FormatError& e) {
      result.errors.push_back(std::string("unreadable: ") + e.what());
    }
  }
  if (result.samples.empty()) {
    std::ostringstream os;
    os << "no valid image/mask pairs under " << root.string();
    for (const auto& e : result.errors) os << "\n  " << e;
    throw ConfigError(os.str());
  }
  return result;
}

void write_dataset(const fs::path& root, std::span<const Sample> samples) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& s : samples) {
    const auto h = s.image.dim(1), w = s.image.dim(2), plane = h * w;
    RasterImage img{w, h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(plane * 3))};
    for (std::int64_t p = 0; p < plane; ++p) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(s.image.data()[c * plane + p], 0.0f, 1.0f);
        img.pixels[static_cast<std::size_t>(p * 3 + c)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
    RasterImage msk{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(plane))};
    for (std::int64_t p = 0; p < plane; ++p) msk.pixels[static_cast<std::size_t>(p)] = s.mask.data()[p] >= 0.5f ? 255 : 0;
    write_png(root / "images" / (s.id + ".png"), img);
    write_png(root / "masks" / (s.id + ".png"), msk);
  }
}

std::vector<Sample> synthetic_ellipses(std::size_t count, std::int64_t size, std::uint64_t seed) {
  if (size < 8) throw ConfigError("synthetic_ellipses: size must be >= 8");
  Rng rng(seed);
  std::vector<Sample> out;
  const double s = static_cast<double>(size);
  for (std::size_t k = 0; k < count; ++k) {
    const double cy = rng.uniform(0.3, 0.7) * s, cx = rng.uniform(0.3, 0.7) * s;
    const double ry = rng.uniform(0.12, 0.28) * s, rx = rng.uniform(0.12, 0.28) * s;
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const std::array<double, 3> bg{rng.uniform(0.25, 0.45), rng.uniform(0.1, 0.2), rng.uniform(0.1, 0.2)};
    const std::array<double, 3> fg{rng.uniform(0.75, 0.95), rng.uniform(0.55, 0.75), rng.uniform(0.3, 0.5)};
    const double gy = rng.uniform(-0.1, 0.1), gx = rng.uniform(-0.1, 0.1);
    Sample smp;
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", k);
    smp.id = id;
    smp.image = Tensor<float>(Shape{3, size, size});
    smp.mask = Tensor<float>(Shape{1, size, size});
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::int64_t y = 0; y < size; ++y) {
      for (std::int64_t x = 0; x < size; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double u = (dx * ct + dy * st) / rx, v = (-dx * st + dy * ct) / ry;
        const bool inside = u * u + v * v <= 1.0;
        smp.mask.mutable_data()[y * size + x] = inside ? 1.0f : 0.0f;
        const double shade = gy * (y / s - 0.5) + gx * (x / s - 0.5);
        for (int c = 0; c < 3; ++c) {
          const double base = inside ? fg[c] : bg[c] + shade;
          const double noise = rng.uniform(-0.06, 0.06);
          smp.image.mutable_data()[(c * size + y) * size + x] = static_cast<float>(std::clamp(base + noise, 0.0, 1.0));
        }
      }
    }
    out.push_back(std::move(smp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

SplitSpec SplitSpec::preset(const std::string& dataset, std::uint64_t seed) {
  SplitSpec spec;
  spec.seed = seed;
  if (dataset == "cvc-clinicdb" || dataset == "kvasir-seg") {
    spec.ratios = {0.8, 0.1, 0.1};
  } else if (dataset == "isic-2018") {
    spec.ratios = {0.72, 0.18, 0.10};
  } else {
    throw ConfigError("unknown split preset '" + dataset + "' (expected cvc-clinicdb, kvasir-seg or isic-2018)");
  }
  return spec;
}

std::array<std::size_t, 3> SplitSpec::sizes(std::size_t total) const {
  if (counts) {
    const auto& c = *counts;
    const auto want = c[0] + c[1] + c[2];
    if (want > total) {
      throw ConfigError("split counts " + std::to_string(c[0]) + "/" + std::to_string(c[1]) + "/" +
                        std::to_string(c[2]) + " exceed dataset size " + std::to_string(total));
    }
    if (want != total) {
      throw ConfigError("split counts sum to " + std::to_string(want) + " but dataset has " +
                        std::to_string(total) + " samples");
    }
    return c;
  }
  const double rsum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(rsum - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  const auto n = static_cast<double>(total);
  const auto train = static_cast<std::size_t>(std::llround(n * ratios[0]));
  const auto valid = std::min(total - train, static_cast<std::size_t>(std::llround(n * ratios[1])));
  return {train, valid, total - train - valid};
}

SplitIndices make_split(std::size_t total, const SplitSpec& spec) {
  const auto sz = spec.sizes(total);
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order.begin(), order.end());
  SplitIndices out;
  out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(sz[0]));
  out.valid.assign(order.begin() + static_cast<std::ptrdiff_t>(sz[0]),
                   order.begin() + static_cast<std::ptrdiff_t>(sz[0] + sz[1]));
  out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(sz[0] + sz[1]), order.end());
  return out;
}

std::vector<Sample> gather(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    if (i >= samples.size()) throw ConfigError("gather: index out of range");
    out.push_back(samples[i]);
  }
  return out;
}

std::string split_file_text(std::span<const Sample> samples, const SplitIndices& split) {
  std::vector<const char*> label(samples.size(), nullptr);
  for (auto i : split.train) label.at(i) = "train";
  for (auto i : split.valid) label.at(i) = "valid";
  for (auto i : split.test) label.at(i) = "test";
  std::ostringstream os;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (label[i]) os << samples[i].id << ' ' << label[i] << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

// Applies a pixel-coordinate remap to every channel of a (C, H, W) tensor.
template <typename F>
Tensor<float> remap(const Tensor<float>& t, std::int64_t out_h, std::int64_t out_w, F src_of) {
  const auto c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor<float> out(Shape{c, out_h, out_w});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < out_h; ++y)
      for (std::int64_t x = 0; x < out_w; ++x) {
        const auto [sy, sx] = src_of(y, x);
        out.mutable_data()[(ch * out_h + y) * out_w + x] = t.data()[(ch * h + sy) * w + sx];
      }
  return out;
}

Tensor<float> flip_h(const Tensor<float>& t) {
  const auto w = t.dim(2);
  return remap(t, t.dim(1), w, [w](std::int64_t y, std::int64_t x) { return std::pair{y, w - 1 - x}; });
}

Tensor<float> flip_v(const Tensor<float>& t) {
  const auto h = t.dim(1);
  return remap(t, h, t.dim(2), [h](std::int64_t y, std::int64_t x) { return std::pair{h - 1 - y, x}; });
}

// One counter-clockwise quarter turn: out (W, H), out[i][j] = in[j][W-1-i].
Tensor<float> rot_ccw(const Tensor<float>& t) {
  const auto h = t.dim(1), w = t.dim(2);
  return remap(t, w, h, [w](std::int64_t i, std::int64_t j) { return std::pair{j, w - 1 - i}; });
}

Tensor<float> rotate_plane(const Tensor<float>& t, double degrees, bool nearest) {
  const auto c = t.dim(0), h = t.dim(1), w = t.dim(2);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  Tensor<float> out(Shape{c, h, w});
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      // Inverse rotation maps each output pixel back into the source.
      const double dy = y - cy, dx = x - cx;
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const float* src = t.data() + ch * h * w;
        float v = 0.0f;
        if (nearest) {
          const auto iy = static_cast<std::int64_t>(std::lround(sy)), ix = static_cast<std::int64_t>(std::lround(sx));
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) v = src[iy * w + ix];
        } else {
          const auto y0 = static_cast<std::int64_t>(std::floor(sy)), x0 = static_cast<std::int64_t>(std::floor(sx));
          const double fy = sy - y0, fx = sx - x0;
          auto px = [&](std::int64_t yy, std::int64_t xx) -> double {
            return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? src[yy * w + xx] : 0.0;
          };
          v = static_cast<float>((1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                                 fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1)));
        }
        out.mutable_data()[(ch * h + y) * w + x] = v;
      }
    }
  }
  return out;
}

}  // namespace

Sample flip_horizontal(const Sample& s) {
  Sample o = s;
  o.image = flip_h(s.image);
  o.mask = flip_h(s.mask);
  return o;
}

Sample flip_vertical(const Sample& s) {
  Sample o = s;
  o.image = flip_v(s.image);
  o.mask = flip_v(s.mask);
  return o;
}

Sample rotate90(const Sample& s, int quarter_turns) {
  Sample o = s;
  const int k = ((quarter_turns % 4) + 4) % 4;
  for (int i = 0; i < k; ++i) {
    o.image = rot_ccw(o.image);
    o.mask = rot_ccw(o.mask);
  }
  if (k == 0) {
    o.image = s.image.clone();
    o.mask = s.mask.clone();
  }
  return o;
}

Sample rotate_angle(const Sample& s, double degrees) {
  Sample o = s;
  o.image = rotate_plane(s.image, degrees, false);
  o.mask = rotate_plane(s.mask, degrees, true);
  return o;
}

Sample adjust_brightness(const Sample& s, double factor) {
  Sample o = s;
  o.image = s.image.clone();
  for (auto& v : o.image.mutable_values()) v = std::clamp(static_cast<float>(v * factor), 0.0f, 1.0f);
  return o;
}

Sample augment(const Sample& sample, Rng& rng, const AugmentConfig& cfg) {
  AugmentRecord rec;
  rec.brightness = rng.uniform(cfg.brightness_min, cfg.brightness_max);
  rec.hflip = rng.bernoulli(cfg.hflip_probability);
  rec.vflip = rng.bernoulli(cfg.vflip_probability);
  if (cfg.rotate) {
    if (cfg.arbitrary_angle) rec.angle = rng.uniform(-cfg.max_angle, cfg.max_angle);
    else rec.rot90 = static_cast<int>(rng.below(4));
  }
  Sample out = adjust_brightness(sample, rec.brightness);
  if (rec.hflip) out = flip_horizontal(out);
  if (rec.vflip) out = flip_vertical(out);
  if (rec.rot90) out = rotate90(out, rec.rot90);
  if (rec.angle != 0.0) out = rotate_angle(out, rec.angle);
  out.augmentation = rec;
  return out;
}

// ---------------------------------------------------------------------------
// Batching

BatchIterator::BatchIterator(std::span<const Sample> samples, std::size_t batch_size, Rng& rng,
                             bool drop_last, const AugmentConfig* augment)
    : samples_(samples), batch_size_(batch_size), rng_(rng), augment_(augment) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (samples.empty()) throw ConfigError("cannot batch an empty dataset");
  order_.resize(samples.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  rng_.shuffle(order_.begin(), order_.end());
  end_ = drop_last ? (samples.size() / batch_size) * batch_size : samples.size();
}

std::size_t BatchIterator::num_batches() const {
  return (end_ + batch_size_ - 1) / batch_size_;
}

std::vector<Sample> BatchIterator::next() {
  if (!has_next()) throw ConfigError("BatchIterator exhausted");
  const auto stop = std::min(cursor_ + batch_size_, end_);
  std::vector<Sample> out;
  for (auto i = cursor_; i < stop; ++i) {
    const auto& s = samples_[order_[i]];
    out.push_back(augment_ ? dsnet::augment(s, rng_, *augment_) : s);
  }
  cursor_ = stop;
  return out;
}

}  // namespace dsnet
