#pragma once

#include "tokenflow/tensor.hpp"

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace tokenflow {

enum class FormatErrorKind { kBadMagic, kVersionMismatch, kTruncated, kCountMismatch, kOffsetCorrupt, kMalformed };

const char* format_error_name(FormatErrorKind kind);

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(format_error_name(kind)) + ": " + what), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

// Blob layout, little-endian:
//   "TNSR" | u32 version | u32 rank | u64 dims[rank] | u32 dtype (1=f32, 2=f64) | payload
inline constexpr std::uint32_t kTensorBlobVersion = 1;

enum class StorageType : std::uint32_t { kFloat32 = 1, kFloat64 = 2 };

void write_tensor(std::ostream& out, const Tensor& t, StorageType storage = StorageType::kFloat64);
void write_tensor(std::ostream& out, const TensorF& t);

/// Reads one blob; f32 payloads are widened to double.
Tensor read_tensor(std::istream& in);

/// Size in bytes of the blob write_tensor would produce.
std::uint64_t tensor_blob_size(const Shape& shape, StorageType storage);

}  // namespace tokenflow
