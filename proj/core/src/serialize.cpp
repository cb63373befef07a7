#include "dsnet/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "dsnet/error.hpp"

namespace dsnet {

static_assert(std::endian::native == std::endian::little,
              "tensor container encoding assumes a little-endian host");

namespace {

constexpr char kTensorMagic[4] = {'D', 'S', 'T', 'N'};
constexpr char kArchiveMagic[4] = {'D', 'S', 'N', 'A'};
// Guards against absurd allocations when reading corrupt headers.
constexpr std::uint64_t kMaxRank = 16;
constexpr std::uint64_t kMaxNameLength = 1 << 16;

void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

void read_exact(std::istream& is, void* dst, std::size_t n, const char* what) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw FormatError(std::string("truncated tensor container while reading ") + what);
  }
}

std::uint64_t read_u64(std::istream& is, const char* what) {
  std::uint64_t v;
  read_exact(is, &v, 8, what);
  return v;
}

std::uint32_t read_u32(std::istream& is, const char* what) {
  std::uint32_t v;
  read_exact(is, &v, 4, what);
  return v;
}

void write_record(std::ostream& os, const StoredTensor& t) {
  os.write(kTensorMagic, 4);
  const auto code = static_cast<std::uint8_t>(t.dtype);
  os.write(reinterpret_cast<const char*>(&code), 1);
  write_u64(os, t.shape.size());
  for (auto e : t.shape) write_u64(os, static_cast<std::uint64_t>(e));
  os.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
}

}  // namespace

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kFloat32: return 4;
    case DType::kFloat64: return 8;
  }
  throw FormatError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

template <typename T>
StoredTensor StoredTensor::from(const Tensor<T>& t) {
  StoredTensor s;
  s.dtype = dtype_of<T>();
  s.shape = t.shape();
  s.bytes.resize(static_cast<std::size_t>(t.numel()) * sizeof(T));
  if (!s.bytes.empty()) std::memcpy(s.bytes.data(), t.data(), s.bytes.size());
  return s;
}

template <typename T>
Tensor<T> StoredTensor::to_tensor() const {
  const auto n = static_cast<std::size_t>(numel());
  std::vector<T> values(n);
  if (dtype == dtype_of<T>()) {
    if (n) std::memcpy(values.data(), bytes.data(), n * sizeof(T));
  } else if (dtype == DType::kFloat32) {
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, bytes.data() + i * 4, 4);
      values[i] = static_cast<T>(f);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      double d;
      std::memcpy(&d, bytes.data() + i * 8, 8);
      values[i] = static_cast<T>(d);
    }
  }
  return Tensor<T>(shape, std::move(values));
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  write_record(os, StoredTensor::from(t));
}

StoredTensor read_tensor_record(std::istream& is) {
  char magic[4];
  read_exact(is, magic, 4, "tensor magic");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor record magic");
  std::uint8_t code;
  read_exact(is, &code, 1, "dtype");
  StoredTensor t;
  t.dtype = static_cast<DType>(code);
  const auto width = dtype_size(t.dtype);
  const auto rank = read_u64(is, "rank");
  if (rank > kMaxRank) throw FormatError("implausible tensor rank " + std::to_string(rank));
  std::uint64_t n = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    const auto e = read_u64(is, "extent");
    if (e > (std::uint64_t{1} << 40)) throw FormatError("implausible tensor extent");
    t.shape.push_back(static_cast<std::int64_t>(e));
    n *= e;
  }
  if (n > (std::uint64_t{1} << 34)) throw FormatError("implausible tensor size");
  t.bytes.resize(static_cast<std::size_t>(n * width));
  read_exact(is, t.bytes.data(), t.bytes.size(), "tensor values");
  return t;
}

Archive::Entry& Archive::slot(const std::string& name) {
  auto [it, inserted] = index_.try_emplace(name);
  if (inserted) order_.push_back(name);
  return it->second;
}

void Archive::put_stored(const std::string& name, StoredTensor t) {
  auto& e = slot(name);
  e.is_text = false;
  e.tensor = std::move(t);
  e.text.clear();
}

void Archive::put_text(const std::string& name, std::string text) {
  auto& e = slot(name);
  e.is_text = true;
  e.text = std::move(text);
  e.tensor = {};
}

bool Archive::is_text(const std::string& name) const {
  auto it = index_.find(name);
  return it != index_.end() && it->second.is_text;
}

const StoredTensor& Archive::tensor(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end() || it->second.is_text) throw FormatError("archive has no tensor named '" + name + "'");
  return it->second.tensor;
}

const std::string& Archive::text(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end() || !it->second.is_text) throw FormatError("archive has no text entry named '" + name + "'");
  return it->second.text;
}

void Archive::write(std::ostream& os) const {
  os.write(kArchiveMagic, 4);
  write_u32(os, kVersion);
  write_u64(os, order_.size());
  for (const auto& name : order_) {
    const auto& e = index_.at(name);
    write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const std::uint8_t kind = e.is_text ? 1 : 0;
    os.write(reinterpret_cast<const char*>(&kind), 1);
    if (e.is_text) {
      write_u64(os, e.text.size());
      os.write(e.text.data(), static_cast<std::streamsize>(e.text.size()));
    } else {
      write_record(os, e.tensor);
    }
  }
}

void Archive::save(const std::filesystem::path& path) const {
  // Write to a sibling temp file first so a crash never leaves a torn archive.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + tmp.string() + " for writing");
    write(os);
    if (!os) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive Archive::read(std::istream& is) {
  char magic[4];
  read_exact(is, magic, 4, "archive magic");
  if (std::memcmp(magic, kArchiveMagic, 4) != 0) throw FormatError("bad archive magic");
  const auto version = read_u32(is, "archive version");
  if (version != kVersion) {
    throw FormatError("unsupported archive version " + std::to_string(version));
  }
  const auto count = read_u64(is, "entry count");
  Archive a;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = read_u64(is, "name length");
    if (len > kMaxNameLength) throw FormatError("implausible entry name length");
    std::string name(len, '\0');
    read_exact(is, name.data(), len, "entry name");
    std::uint8_t kind;
    read_exact(is, &kind, 1, "entry kind");
    if (a.contains(name)) throw FormatError("duplicate archive entry '" + name + "'");
    if (kind == 1) {
      const auto tlen = read_u64(is, "text length");
      if (tlen > (std::uint64_t{1} << 30)) throw FormatError("implausible text length");
      std::string text(tlen, '\0');
      read_exact(is, text.data(), tlen, "text entry");
      a.put_text(name, std::move(text));
    } else if (kind == 0) {
      a.put_stored(name, read_tensor_record(is));
    } else {
      throw FormatError("unknown entry kind " + std::to_string(kind));
    }
  }
  return a;
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read(is);
}

template StoredTensor StoredTensor::from<float>(const Tensor<float>&);
template StoredTensor StoredTensor::from<double>(const Tensor<double>&);
template Tensor<float> StoredTensor::to_tensor<float>() const;
template Tensor<double> StoredTensor::to_tensor<double>() const;
template void write_tensor<float>(std::ostream&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const Tensor<double>&);

}  // namespace dsnet
