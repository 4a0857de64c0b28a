#pragma once

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "speckle/core.hpp"

namespace speckle::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

enum class Dtype : std::uint8_t { kF32 = 4, kF64 = 8 };

inline std::string_view to_string(Dtype d) { return d == Dtype::kF32 ? "f32" : "f64"; }

inline Dtype parse_dtype(std::string_view s) {
  if (s == "f32") return Dtype::kF32;
  if (s == "f64") return Dtype::kF64;
  fail(ErrorCode::kInvalidArgument, "unknown precision '" + std::string(s) + "' (expected f32 or f64)");
}

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// FNV-1a over raw bytes; used for provenance ids, not integrity.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t matrix_hash(const TransmissionMatrix& a) {
  std::uint64_t h = fnv1a(a.columns().data(), sizeof(double) * a.columns().size());
  const int dims[4] = {a.pixels(), a.channels(), a.roi_shape().height, a.roi_shape().width};
  return fnv1a(dims, sizeof dims, h);
}

class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }

  void put_values(const double* v, std::size_t n, Dtype dtype) {
    for (std::size_t i = 0; i < n; ++i) {
      if (dtype == Dtype::kF32)
        put(static_cast<float>(v[i]));
      else
        put(v[i]);
    }
  }

  void put_crc() { put(crc32(buf_.data(), buf_.size())); }

  const std::vector<std::uint8_t>& bytes() const { return buf_; }

  std::vector<std::uint8_t> take() && { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::kIo, "write failed for " + path.string());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::string get_string() { return get_bytes(get<std::uint32_t>()); }

  void get_values(double* out, std::size_t n, Dtype dtype) {
    for (std::size_t i = 0; i < n; ++i) out[i] = dtype == Dtype::kF32 ? static_cast<double>(get<float>()) : get<double>();
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    // Running off the end means the file was cut short; the trailing CRC
    // cannot match in that case, so report it as an integrity failure.
    require(pos_ + n <= buf_.size(), ErrorCode::kCrcMismatch, what_ + " is truncated");
  }

  const std::vector<std::uint8_t>& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

// Verifies the trailing CRC32 over everything before it.
inline void verify_crc(const std::vector<std::uint8_t>& buf, const std::string& what) {
  require(buf.size() >= 4, ErrorCode::kCrcMismatch, what + " is truncated");
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
  require(crc32(buf.data(), buf.size() - 4) == stored, ErrorCode::kCrcMismatch, what);
}

inline void check_magic(ByteReader& r, std::string_view magic, const std::string& what) {
  require(r.remaining() >= magic.size(), ErrorCode::kBadMagic, what + " is too short for a header");
  const auto got = r.get_bytes(magic.size());
  require(got == magic, ErrorCode::kBadMagic, what + ": expected '" + std::string(magic) + "'");
}

inline Dtype read_dtype(ByteReader& r, const std::string& what) {
  const auto tag = r.get<std::uint8_t>();
  require(tag == static_cast<std::uint8_t>(Dtype::kF32) || tag == static_cast<std::uint8_t>(Dtype::kF64),
          ErrorCode::kParse, what + ": unknown dtype tag " + std::to_string(tag));
  return static_cast<Dtype>(tag);
}

// Upper bound on any payload we agree to allocate (16 GiB).
inline constexpr std::uint64_t kMaxPayloadBytes = std::uint64_t{1} << 34;

// ---- SPKT: transmission matrix -------------------------------------------
//
//   "SPKT" | u16 version | u32 X | u32 Y | u32 h | u32 w | u8 dtype |
//   X*Y values, column-major | u32 CRC32 of all preceding bytes

inline constexpr std::uint16_t kSpktVersion = 1;

inline std::vector<std::uint8_t> encode_matrix(const TransmissionMatrix& a, Dtype dtype = Dtype::kF64) {
  ByteWriter w;
  w.put_bytes("SPKT");
  w.put(kSpktVersion);
  w.put(static_cast<std::uint32_t>(a.pixels()));
  w.put(static_cast<std::uint32_t>(a.channels()));
  w.put(static_cast<std::uint32_t>(a.roi_shape().height));
  w.put(static_cast<std::uint32_t>(a.roi_shape().width));
  w.put(static_cast<std::uint8_t>(dtype));
  w.put_values(a.columns().data(), static_cast<std::size_t>(a.columns().size()), dtype);
  w.put_crc();
  return std::move(w).take();
}

inline void export_matrix(const TransmissionMatrix& a, const std::filesystem::path& path, Dtype dtype = Dtype::kF64) {
  write_file(path, encode_matrix(a, dtype));
}

inline TransmissionMatrix decode_matrix(const std::vector<std::uint8_t>& buf, const std::string& what = "SPKT") {
  ByteReader r(buf, what);
  check_magic(r, "SPKT", what);
  const auto version = r.get<std::uint16_t>();
  require(version == kSpktVersion, ErrorCode::kUnsupportedVersion, what + ": version " + std::to_string(version));
  const std::uint64_t x = r.get<std::uint32_t>();
  const std::uint64_t y = r.get<std::uint32_t>();
  const std::uint64_t h = r.get<std::uint32_t>();
  const std::uint64_t wd = r.get<std::uint32_t>();
  const Dtype dtype = read_dtype(r, what);
  require(x > 0 && y > 0 && h > 0 && wd > 0 && h * wd == x, ErrorCode::kDimensionOverflow,
          what + ": inconsistent dims X=" + std::to_string(x) + " h*w=" + std::to_string(h * wd));
  require(x <= std::numeric_limits<int>::max() && y <= std::numeric_limits<int>::max() &&
              x * y * static_cast<std::uint8_t>(dtype) <= kMaxPayloadBytes,
          ErrorCode::kDimensionOverflow, what + ": payload of " + std::to_string(x) + "x" + std::to_string(y));
  verify_crc(buf, what);
  Eigen::MatrixXd cols(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(y));
  r.get_values(cols.data(), x * y, dtype);
  r.get<std::uint32_t>();  // crc, already verified
  require(r.remaining() == 0, ErrorCode::kParse, what + ": trailing bytes");
  return TransmissionMatrix(std::move(cols), RoiShape{static_cast<int>(h), static_cast<int>(wd)});
}

inline TransmissionMatrix import_matrix(const std::filesystem::path& path) {
  return decode_matrix(read_file(path), path.string());
}

// ---- PGM (P5, 16-bit) and CSV exports -----------------------------------

inline void export_pgm(const SpeckleImage& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path.string());
  out << "P5\n" << img.width() << " " << img.height() << "\n65535\n";
  const double peak = img.pixels().size() ? img.pixels().maxCoeff() : 0.0;
  const double scale = peak > 0.0 ? 65535.0 / peak : 0.0;
  for (int i = 0; i < img.size(); ++i) {
    const auto v = static_cast<std::uint16_t>(std::lround(img.pixels()[i] * scale));
    const char be[2] = {static_cast<char>(v >> 8), static_cast<char>(v & 0xff)};
    out.write(be, 2);
  }
  require(static_cast<bool>(out), ErrorCode::kIo, "write failed for " + path.string());
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void export_spectrum_csv(const Spectrum& s, const std::vector<std::string>& labels,
                                const std::filesystem::path& path) {
  require(static_cast<int>(labels.size()) == s.size(), ErrorCode::kDimensionMismatch,
          std::to_string(labels.size()) + " labels for spectrum of length " + std::to_string(s.size()));
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path.string());
  out << "index,wavelength_label,intensity\n";
  for (int j = 0; j < s.size(); ++j) out << j << "," << labels[j] << "," << format_double(s[j]) << "\n";
}

// ---- key=value manifests --------------------------------------------------

class Manifest {
 public:
  template <typename T>
  void set(const std::string& key, const T& value) {
    std::ostringstream os;
    if constexpr (std::is_floating_point_v<T>)
      os << std::setprecision(17) << value;
    else
      os << value;
    entries_[key] = os.str();
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  const std::string& get(const std::string& key) const {
    const auto it = entries_.find(key);
    require(it != entries_.end(), ErrorCode::kParse, "manifest is missing key '" + key + "'");
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
  }

  long long get_int(const std::string& key) const {
    try {
      return std::stoll(get(key));
    } catch (const std::logic_error&) {
      fail(ErrorCode::kParse, "manifest key '" + key + "' is not an integer");
    }
  }

  double get_double(const std::string& key) const {
    try {
      return std::stod(get(key));
    } catch (const std::logic_error&) {
      fail(ErrorCode::kParse, "manifest key '" + key + "' is not a number");
    }
  }

  const std::map<std::string, std::string>& entries() const { return entries_; }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path.string());
    for (const auto& [k, v] : entries_) out << k << "=" << v << "\n";
  }

  static Manifest read(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path.string());
    Manifest m;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, ErrorCode::kParse,
              path.string() + ":" + std::to_string(lineno) + ": expected key=value");
      m.entries_[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return m;
  }

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace speckle::io
