#include "sconv/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <fmt/format.h>

namespace sconv {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::state: return "state";
    case ErrorKind::data: return "data";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::metric: return "metric";
    case ErrorKind::generation: return "generation";
  }
  return "unknown";
}

std::string shape_str(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ","));
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* where) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t[i])) {
      fail(ErrorKind::numeric,
           fmt::format("{}: non-finite value {} at flat index {}", where,
                       static_cast<double>(t[i]), i));
    }
  }
}

template <typename T>
void check_shape(const Tensor<T>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    fail(ErrorKind::dimension, fmt::format("{}: expected shape {}, got {}", what,
                                           shape_str(expected),
                                           shape_str(t.shape())));
  }
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(b, a.shape(), "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max<T>(m, std::abs(a[i] - b[i]));
  }
  return m;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "SCT1 serialization assumes a little-endian host");

template <typename T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t) {
  std::vector<std::uint8_t> out;
  out.reserve(6 + 4 * t.rank() + sizeof(T) * t.numel());
  out.insert(out.end(), {'S', 'C', 'T', '1'});
  out.push_back(dtype_code<T>());
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) {
    auto v = static_cast<std::uint32_t>(d);
    auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + 4);
  }
  auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
  out.insert(out.end(), p, p + sizeof(T) * t.numel());
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor_bytes(const Tensor<float>& t) { return encode(t); }
std::vector<std::uint8_t> encode_tensor_bytes(const Tensor<double>& t) { return encode(t); }

template <typename T>
void save_tensor(const Tensor<T>& t, const std::filesystem::path& path) {
  if (t.rank() > 255) fail(ErrorKind::dimension, "tensor rank exceeds 255");
  auto bytes = encode(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot open for writing: " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) fail(ErrorKind::io, "write failed: " + path.string());
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open tensor file: " + path.string());
  char magic[4];
  std::uint8_t dtype = 0, rank = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&dtype), 1);
  is.read(reinterpret_cast<char*>(&rank), 1);
  if (!is || std::memcmp(magic, "SCT1", 4) != 0 || dtype > 1) {
    fail(ErrorKind::io, "not an SCT1 tensor file: " + path.string());
  }
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    d = v;
  }
  const std::size_t n = shape_numel(shape);
  std::vector<T> data(n);
  if (dtype == 0) {
    std::vector<float> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    std::copy(raw.begin(), raw.end(), data.begin());
  } else {
    std::vector<double> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    std::copy(raw.begin(), raw.end(), data.begin());
  }
  if (!is) fail(ErrorKind::io, "truncated tensor file: " + path.string());
  return Tensor<T>(std::move(shape), std::move(data));
}

#define SCONV_INSTANTIATE(T)                                                  \
  template void check_finite<T>(const Tensor<T>&, const char*);               \
  template void check_shape<T>(const Tensor<T>&, const Shape&, const char*);  \
  template T max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);             \
  template void save_tensor<T>(const Tensor<T>&, const std::filesystem::path&); \
  template Tensor<T> load_tensor<T>(const std::filesystem::path&);

SCONV_INSTANTIATE(float)
SCONV_INSTANTIATE(double)
#undef SCONV_INSTANTIATE

template void check_shape<std::int32_t>(const Tensor<std::int32_t>&, const Shape&, const char*);

}  // namespace sconv
