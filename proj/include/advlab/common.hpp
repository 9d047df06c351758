#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace advlab {

using VecF = Eigen::VectorXf;
using VecD = Eigen::VectorXd;
using MatF = Eigen::MatrixXf;
using MatD = Eigen::MatrixXd;
using GridI = Eigen::MatrixXi;
using GridB = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// Probabilities entering any log are clamped to [kLogEps, 1 - kLogEps].
inline constexpr double kLogEps = 1e-12;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct SerializationError : Error {
  using Error::Error;
};
struct DegenerateGradientError : Error {
  using Error::Error;
};
struct UnsupportedModeError : Error {
  using Error::Error;
};
struct PreconditionError : Error {
  using Error::Error;
};
struct RangeError : Error {
  using Error::Error;
};
struct InvariantError : Error {
  using Error::Error;
};

struct ConvergenceError : Error {
  ConvergenceError(const std::string& what, double accuracy)
      : Error(what), final_accuracy(accuracy) {}
  double final_accuracy;
};

struct ShortfallError : Error {
  ShortfallError(const std::string& what, int count)
      : Error(what), found(count) {}
  int found;
};

struct StageError : Error {
  StageError(const std::string& stage_name, const std::string& what)
      : Error("stage '" + stage_name + "': " + what), stage(stage_name) {}
  std::string stage;
};

/// Deterministic random source. Draws are produced by hand from the raw
/// mt19937_64 stream so that sequences do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal();

  /// Uniform integer in [0, n), n >= 1.
  int uniform_int(int n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<size_t>(i)],
                v[static_cast<size_t>(uniform_int(i + 1))]);
    }
  }

  /// Derives a child seed from a parent seed and a stream tag.
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint32_t crc32_bytes(const void* data, std::size_t size);
std::uint32_t crc32_str(const std::string& s);

/// Runs fn(i) for i in [0, n). Each index must be independent; results are
/// expected to be written into index-addressed slots so the outcome does not
/// depend on scheduling. threads <= 1 runs inline.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

int effective_threads(int configured);

}  // namespace advlab
