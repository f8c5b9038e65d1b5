#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <future>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace wattsel {

inline constexpr const char* kToolVersion = "0.1.0";

/// Base error for everything the library throws.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad run configuration (missing files, out-of-range parameters). CLI exit 2.
struct config_error : error {
  using error::error;
};

/// Malformed model/dataset content (schema, shape, range). CLI exit 3.
struct data_error : error {
  using error::error;
};

// ---------------------------------------------------------------------------
// Fixed-point helpers for the 8-bit / 22-bit datapath.

inline constexpr int kAccBits = 22;
inline constexpr std::int32_t kAccMax = (std::int32_t{1} << (kAccBits - 1)) - 1;
inline constexpr std::int32_t kAccMin = -(std::int32_t{1} << (kAccBits - 1));

/// Saturating add into the 22-bit accumulator range. Bumps `overflows`
/// when the clamp fires.
inline std::int32_t sat_acc_add(std::int32_t acc, std::int32_t term,
                                std::uint64_t* overflows = nullptr) {
  std::int64_t s = std::int64_t{acc} + term;
  if (s > kAccMax) {
    if (overflows) ++*overflows;
    return kAccMax;
  }
  if (s < kAccMin) {
    if (overflows) ++*overflows;
    return kAccMin;
  }
  return static_cast<std::int32_t>(s);
}

/// Two's-complement bit pattern of `v` truncated to `bits`.
inline constexpr std::uint32_t to_pattern(std::int32_t v, int bits) {
  return static_cast<std::uint32_t>(v) & ((bits >= 32) ? 0xFFFFFFFFu : ((1u << bits) - 1u));
}

inline std::int32_t round_half_away(double x) {
  return static_cast<std::int32_t>(x >= 0.0 ? std::floor(x + 0.5) : std::ceil(x - 0.5));
}

inline std::int8_t clamp_i8(std::int32_t v) {
  return static_cast<std::int8_t>(std::clamp(v, -128, 127));
}

/// Requantize an accumulator value to int8: round half away from zero, clamp.
inline std::int8_t requantize(std::int32_t acc, double scale) {
  return clamp_i8(round_half_away(static_cast<double>(acc) * scale));
}

// ---------------------------------------------------------------------------
// Deterministic RNG plumbing. std::mt19937_64 output is pinned by the
// standard; the distribution helpers below avoid the unpinned std
// distributions so streams are reproducible everywhere.

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  std::uint64_t h = splitmix64(seed ^ 0xA5A5A5A55A5A5A5Aull);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return splitmix64(h ^ c);
}

struct Rng {
  explicit Rng(std::uint64_t seed) : gen(seed) {}
  std::mt19937_64 gen;

  std::uint64_t next() { return gen(); }
  /// Uniform in [0, n). Modulo bias is negligible for n << 2^64.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen() % n); }
  /// Uniform in [0, 1) with 53-bit resolution.
  double real() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }
  /// Uniform integer in [lo, hi].
  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(gen() % static_cast<std::uint64_t>(hi - lo + 1));
  }
};

// ---------------------------------------------------------------------------
// FNV-1a fingerprinting.

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  char buf[17];
  static const char* digits = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = digits[v & 0xF];
    v >>= 4;
  }
  buf[16] = '\0';
  return std::string(buf, 16);
}

// ---------------------------------------------------------------------------
// Base64 (standard alphabet, padded) for raw weight blobs.

inline std::string base64_encode(const std::int8_t* data, std::size_t n) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  const auto* p = reinterpret_cast<const unsigned char*>(data);
  std::size_t i = 0;
  for (; i + 3 <= n; i += 3) {
    std::uint32_t v = (p[i] << 16) | (p[i + 1] << 8) | p[i + 2];
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += tbl[v & 63];
  }
  if (i + 1 == n) {
    std::uint32_t v = p[i] << 16;
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == n) {
    std::uint32_t v = (p[i] << 16) | (p[i + 1] << 8);
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::vector<std::int8_t> base64_decode(std::string_view s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    if (c == '=') return -1;
    throw data_error("base64: invalid character");
  };
  std::vector<std::int8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i + 4 <= s.size(); i += 4) {
    int a = val(s[i]), b = val(s[i + 1]), c = val(s[i + 2]), d = val(s[i + 3]);
    if (a < 0 || b < 0) throw data_error("base64: bad padding");
    std::uint32_t v = (static_cast<std::uint32_t>(a) << 18) | (static_cast<std::uint32_t>(b) << 12);
    out.push_back(static_cast<std::int8_t>((v >> 16) & 0xFF));
    if (c >= 0) {
      v |= static_cast<std::uint32_t>(c) << 6;
      out.push_back(static_cast<std::int8_t>((v >> 8) & 0xFF));
    }
    if (d >= 0) {
      if (c < 0) throw data_error("base64: bad padding");
      v |= static_cast<std::uint32_t>(d);
      out.push_back(static_cast<std::int8_t>(v & 0xFF));
    }
  }
  if (s.size() % 4 != 0) throw data_error("base64: truncated input");
  return out;
}

// ---------------------------------------------------------------------------
// Small parallel-for. Results must be written to disjoint slots so the
// outcome is independent of scheduling.

inline int effective_threads(int requested) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (requested <= 0) return static_cast<int>(hw);
  return std::min<int>(requested, static_cast<int>(hw) * 4);
}

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  threads = effective_threads(threads);
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads) - 1);
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Formatting helpers shared by the CSV/JSON writers. Shortest round-trip
// representation keeps outputs byte-stable.

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// RFC-4180 field quoting.
inline std::string csv_field(std::string_view s) {
  bool needs = s.find_first_of(",\"\r\n") != std::string_view::npos;
  if (!needs) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

struct CsvWriter {
  std::ostringstream os;
  bool at_line_start = true;

  CsvWriter& field(std::string_view s) {
    if (!at_line_start) os << ',';
    os << csv_field(s);
    at_line_start = false;
    return *this;
  }
  CsvWriter& field(double v) { return field(format_double(v)); }
  CsvWriter& field(std::int64_t v) { return field(std::to_string(v)); }
  CsvWriter& field(int v) { return field(std::int64_t{v}); }
  CsvWriter& endrow() {
    os << "\r\n";
    at_line_start = true;
    return *this;
  }
  std::string str() const { return os.str(); }
};

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw error("cannot open for writing: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw error("short write: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw error("cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace wattsel
