#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>

#include "tsflow/tensor.hpp"

// Tensor container record:
//   u32 little-endian header length | UTF-8 JSON header {"shape":[...],"dtype":"f32"|"f64"}
//   | raw little-endian payload (numel * sizeof(dtype) bytes)
namespace tsflow {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename Real>
void write_tensor(std::ostream& os, const Tensor<Real>& t);

/// Reads one record; a payload stored in the other float width is converted.
template <typename Real>
Tensor<Real> read_tensor(std::istream& is);

/// Reads exactly n bytes or throws FormatError naming expected and actual counts.
void read_exact(std::istream& is, char* dst, std::size_t n, const std::string& what);
void write_u32(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32(std::istream& is, const std::string& what);

/// Length-prefixed (u32) UTF-8 JSON text block.
void write_json_block(std::ostream& os, const std::string& json);
std::string read_json_block(std::istream& is, const std::string& what);

}  // namespace tsflow
