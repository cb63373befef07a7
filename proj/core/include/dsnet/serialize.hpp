#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "dsnet/tensor.hpp"

namespace dsnet {

// Binary tensor container, little-endian throughout.
//
//   tensor record : "DSTN" | dtype u8 (1 = f32, 2 = f64) | rank u64 |
//                   extents u64[rank] | raw values
//   archive       : "DSNA" | version u32 | entry count u64 | entries...
//   entry         : name length u64 | UTF-8 name | kind u8 (0 tensor, 1 text) |
//                   tensor record, or text length u64 | bytes

enum class DType : std::uint8_t { kFloat32 = 1, kFloat64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kFloat32; }
template <>
constexpr DType dtype_of<double>() { return DType::kFloat64; }

std::size_t dtype_size(DType d);

/// A decoded tensor record with its original dtype and raw value bytes.
struct StoredTensor {
  DType dtype = DType::kFloat32;
  Shape shape;
  std::vector<std::byte> bytes;

  std::int64_t numel() const { return shape_numel(shape); }
  template <typename T>
  static StoredTensor from(const Tensor<T>& t);
  /// Converts to Tensor<T>; exact when the dtypes match.
  template <typename T>
  Tensor<T> to_tensor() const;
};

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);
/// Reads one tensor record; throws FormatError on bad magic or truncation.
StoredTensor read_tensor_record(std::istream& is);

/// Ordered name -> tensor/text container used for weight manifests and
/// checkpoints. Decoding is all-or-nothing.
class Archive {
 public:
  static constexpr std::uint32_t kVersion = 1;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    put_stored(name, StoredTensor::from(t));
  }
  void put_stored(const std::string& name, StoredTensor t);
  void put_text(const std::string& name, std::string text);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  bool is_text(const std::string& name) const;
  const StoredTensor& tensor(const std::string& name) const;
  const std::string& text(const std::string& name) const;
  /// Names in insertion order.
  const std::vector<std::string>& names() const { return order_; }

  void write(std::ostream& os) const;
  void save(const std::filesystem::path& path) const;
  static Archive read(std::istream& is);
  static Archive load(const std::filesystem::path& path);

 private:
  struct Entry {
    bool is_text = false;
    StoredTensor tensor;
    std::string text;
  };
  Entry& slot(const std::string& name);

  std::vector<std::string> order_;
  std::map<std::string, Entry> index_;
};

}  // namespace dsnet
