#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, file helpers.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace clusterlm {

// Error categories map 1:1 to CLI exit codes (validation=2, runtime=3,
// integrity=4).
enum class ErrorKind { validation, runtime, integrity };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_validation(const std::string& msg) {
  throw Error(ErrorKind::validation, msg);
}
[[noreturn]] inline void fail_runtime(const std::string& msg) {
  throw Error(ErrorKind::runtime, msg);
}
[[noreturn]] inline void fail_integrity(const std::string& msg) {
  throw Error(ErrorKind::integrity, msg);
}

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// derived samplers below avoid std::*_distribution, whose mapping is
// implementation-defined and would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n). Multiply-shift mapping; bias is O(n / 2^64).
  std::size_t next_below(std::size_t n) {
    if (n == 0) fail_validation("Rng::next_below: n must be positive");
    unsigned __int128 wide = static_cast<unsigned __int128>(next_u64());
    return static_cast<std::size_t>((wide * n) >> 64);
  }

  // Uniform double in [0, 1) with 53 random bits.
  double next_real01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_real01();
  }

  // Box-Muller; second draw cached.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = next_real01();
    double u2 = next_real01();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = next_below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stable per-stream seed derivation (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_runtime("cannot open file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Atomic replace: write to a sibling temp file, then rename over the target.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail_runtime("cannot write file: " + tmp.string());
    out << content;
    if (!out.flush()) fail_runtime("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace clusterlm
