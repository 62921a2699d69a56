#include "tsflow/serialize.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <json.hpp>
#include <ostream>

namespace tsflow {

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

namespace {
constexpr std::uint32_t kMaxHeader = 1u << 30;

template <typename Real>
constexpr const char* dtype_name() {
    return sizeof(Real) == 4 ? "f32" : "f64";
}
}  // namespace

void read_exact(std::istream& is, char* dst, std::size_t n, const std::string& what) {
    is.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(is.gcount());
    if (got != n)
        throw FormatError("truncated " + what + ": expected " + std::to_string(n) + " bytes, got " + std::to_string(got));
}

void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    os.write(b, 4);
}

std::uint32_t read_u32(std::istream& is, const std::string& what) {
    char b[4];
    read_exact(is, b, 4, what);
    std::uint32_t v;
    std::memcpy(&v, b, 4);
    return v;
}

void write_json_block(std::ostream& os, const std::string& json) {
    write_u32(os, static_cast<std::uint32_t>(json.size()));
    os.write(json.data(), static_cast<std::streamsize>(json.size()));
}

std::string read_json_block(std::istream& is, const std::string& what) {
    const auto len = read_u32(is, what + " length");
    if (len > kMaxHeader) throw FormatError(what + " length " + std::to_string(len) + " is implausible");
    std::string s(len, '\0');
    read_exact(is, s.data(), len, what);
    return s;
}

template <typename Real>
void write_tensor(std::ostream& os, const Tensor<Real>& t) {
    nlohmann::json h;
    h["shape"] = t.shape();
    h["dtype"] = dtype_name<Real>();
    write_json_block(os, h.dump());
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(Real)));
    if (!os) throw FormatError("failed writing tensor payload");
}

template <typename Real>
Tensor<Real> read_tensor(std::istream& is) {
    const std::string text = read_json_block(is, "tensor header");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("tensor header is not valid JSON: ") + e.what());
    }
    if (!h.contains("shape") || !h.contains("dtype")) throw FormatError("tensor header missing shape/dtype");
    const auto shape = h["shape"].get<Shape>();
    const auto dtype = h["dtype"].get<std::string>();
    const std::size_t n = numel(shape);
    if (dtype == "f32") {
        std::vector<float> buf(n);
        read_exact(is, reinterpret_cast<char*>(buf.data()), n * 4, "tensor payload");
        return Tensor<Real>(shape, std::vector<Real>(buf.begin(), buf.end()));
    }
    if (dtype == "f64") {
        std::vector<double> buf(n);
        read_exact(is, reinterpret_cast<char*>(buf.data()), n * 8, "tensor payload");
        return Tensor<Real>(shape, std::vector<Real>(buf.begin(), buf.end()));
    }
    throw FormatError("unknown tensor dtype '" + dtype + "'");
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);

}  // namespace tsflow
