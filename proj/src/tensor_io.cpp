#include "tokenflow/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <vector>

namespace tokenflow {

static_assert(std::endian::native == std::endian::little, "blob IO assumes a little-endian host");

const char* format_error_name(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::kBadMagic: return "bad magic";
    case FormatErrorKind::kVersionMismatch: return "version mismatch";
    case FormatErrorKind::kTruncated: return "truncated";
    case FormatErrorKind::kCountMismatch: return "count mismatch";
    case FormatErrorKind::kOffsetCorrupt: return "offset corrupt";
    case FormatErrorKind::kMalformed: return "malformed";
  }
  return "unknown";
}

namespace {

constexpr std::array<char, 4> kMagic{'T', 'N', 'S', 'R'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (in.gcount() != std::streamsize(sizeof(T))) {
    throw FormatError(FormatErrorKind::kTruncated, "tensor blob ended inside header");
  }
  return value;
}

void write_header(std::ostream& out, const Shape& shape, StorageType storage) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kTensorBlobVersion);
  put<std::uint32_t>(out, std::uint32_t(shape.size()));
  for (Index d : shape) put<std::uint64_t>(out, std::uint64_t(d));
  put<std::uint32_t>(out, std::uint32_t(storage));
}

}  // namespace

std::uint64_t tensor_blob_size(const Shape& shape, StorageType storage) {
  const std::uint64_t elem = storage == StorageType::kFloat32 ? 4 : 8;
  return 4 + 4 + 4 + 8 * shape.size() + 4 + elem * std::uint64_t(shape_numel(shape));
}

void write_tensor(std::ostream& out, const Tensor& t, StorageType storage) {
  write_header(out, t.shape(), storage);
  if (storage == StorageType::kFloat64) {
    out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.numel() * sizeof(double)));
  } else {
    const Eigen::VectorXf narrow = t.values().cast<float>();
    out.write(reinterpret_cast<const char*>(narrow.data()), std::streamsize(narrow.size() * sizeof(float)));
  }
}

void write_tensor(std::ostream& out, const TensorF& t) {
  write_header(out, t.shape(), StorageType::kFloat32);
  out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.numel() * sizeof(float)));
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4) throw FormatError(FormatErrorKind::kTruncated, "tensor blob missing magic");
  if (magic != kMagic) throw FormatError(FormatErrorKind::kBadMagic, "expected TNSR");
  const auto version = get<std::uint32_t>(in);
  if (version != kTensorBlobVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch, "tensor blob version " + std::to_string(version));
  }
  const auto rank = get<std::uint32_t>(in);
  if (rank > 16) throw FormatError(FormatErrorKind::kMalformed, "rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    const auto v = get<std::uint64_t>(in);
    if (v > (std::uint64_t{1} << 40)) throw FormatError(FormatErrorKind::kMalformed, "dimension too large");
    d = Index(v);
  }
  const auto dtype = get<std::uint32_t>(in);
  const Index n = shape_numel(shape);
  Tensor t(shape);
  if (dtype == std::uint32_t(StorageType::kFloat64)) {
    in.read(reinterpret_cast<char*>(t.data()), std::streamsize(n * sizeof(double)));
    if (in.gcount() != std::streamsize(n * sizeof(double))) {
      throw FormatError(FormatErrorKind::kTruncated, "tensor payload short");
    }
  } else if (dtype == std::uint32_t(StorageType::kFloat32)) {
    Eigen::VectorXf narrow(n);
    in.read(reinterpret_cast<char*>(narrow.data()), std::streamsize(n * sizeof(float)));
    if (in.gcount() != std::streamsize(n * sizeof(float))) {
      throw FormatError(FormatErrorKind::kTruncated, "tensor payload short");
    }
    t.values() = narrow.cast<double>();
  } else {
    throw FormatError(FormatErrorKind::kMalformed, "unknown dtype " + std::to_string(dtype));
  }
  return t;
}

}  // namespace tokenflow
