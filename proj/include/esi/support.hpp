#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace esi {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

enum class Errc {
  NonpositiveEta,
  EmptyModel,
  InvalidModel,
  InvalidScale,
  InvalidArgument,
  DomainViolation,
  IncomparableModels,
  UncertifiedInput,
  EtaOutOfRange,
  WrongShape,
  NegativeA,
  InfiniteVariance,
  NotAnEsiFamily,
  MixedScalesUnderDependentMode,
  EmptyInput,
  NonConstantScale,
  NegativeMean,
  PreconditionViolated,
  NonNonnegativeModel,
  NoFeasibleCStar,
  NotRegular,
  SquaredWitnessFailed,
  SupportViolation,
  MissingCertificates,
  LossOutOfRange,
  EmptyGrid,
  UnverifiedScenario,
  AssumptionUnverified,
  HorizonZero,
  StoppingRuleNeverFires,
  Unsupported,
  ParseError,
  SchemaMismatch,
  UnknownTask,
  MissingTable,
};

inline const char* errc_name(Errc e) {
  switch (e) {
    case Errc::NonpositiveEta: return "NonpositiveEta";
    case Errc::EmptyModel: return "EmptyModel";
    case Errc::InvalidModel: return "InvalidModel";
    case Errc::InvalidScale: return "InvalidScale";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::DomainViolation: return "DomainViolation";
    case Errc::IncomparableModels: return "IncomparableModels";
    case Errc::UncertifiedInput: return "UncertifiedInput";
    case Errc::EtaOutOfRange: return "EtaOutOfRange";
    case Errc::WrongShape: return "WrongShape";
    case Errc::NegativeA: return "NegativeA";
    case Errc::InfiniteVariance: return "InfiniteVariance";
    case Errc::NotAnEsiFamily: return "NotAnEsiFamily";
    case Errc::MixedScalesUnderDependentMode: return "MixedScalesUnderDependentMode";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::NonConstantScale: return "NonConstantScale";
    case Errc::NegativeMean: return "NegativeMean";
    case Errc::PreconditionViolated: return "PreconditionViolated";
    case Errc::NonNonnegativeModel: return "NonNonnegativeModel";
    case Errc::NoFeasibleCStar: return "NoFeasibleCStar";
    case Errc::NotRegular: return "NotRegular";
    case Errc::SquaredWitnessFailed: return "SquaredWitnessFailed";
    case Errc::SupportViolation: return "SupportViolation";
    case Errc::MissingCertificates: return "MissingCertificates";
    case Errc::LossOutOfRange: return "LossOutOfRange";
    case Errc::EmptyGrid: return "EmptyGrid";
    case Errc::UnverifiedScenario: return "UnverifiedScenario";
    case Errc::AssumptionUnverified: return "AssumptionUnverified";
    case Errc::HorizonZero: return "HorizonZero";
    case Errc::StoppingRuleNeverFires: return "StoppingRuleNeverFires";
    case Errc::Unsupported: return "Unsupported";
    case Errc::ParseError: return "ParseError";
    case Errc::SchemaMismatch: return "SchemaMismatch";
    case Errc::UnknownTask: return "UnknownTask";
    case Errc::MissingTable: return "MissingTable";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// Sample budget for Monte Carlo work. Results depend on (seed, samples, chunks)
// only; the thread count never changes the output.
struct EvalBudget {
  std::uint64_t seed = 0;
  std::size_t samples = 100000;
  std::size_t chunks = 64;
  unsigned threads = 0;  // 0: hardware concurrency; ESI_LAB_THREADS caps either way
};

inline double log_sum_exp(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  if (m == kInf) return kInf;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double log_sum_exp(const std::vector<double>& xs) {
  double m = -kInf;
  for (double x : xs) m = std::max(m, x);
  if (m == -kInf || m == kInf) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

// Shortest decimal text that reads back to the same double.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

// p * log(1/p), continuously extended by 0 at p = 0.
inline double plog_inv(double p) { return p <= 0.0 ? 0.0 : -p * std::log(p); }

inline std::vector<double> log_spaced(double lo, double hi, std::size_t n) {
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = lo;
    return out;
  }
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
  out.front() = lo;
  out.back() = hi;
  return out;
}

// ---------------------------------------------------------------------------
// Random streams

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

using Rng = std::mt19937_64;

inline Rng substream(std::uint64_t seed, std::uint64_t stream) {
  return Rng(splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL)));
}

inline double uniform01(Rng& rng) {
  // 53 random bits in (0,1); never returns exactly 0.
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

inline double standard_normal(Rng& rng) {
  // Box-Muller on our own uniforms so streams are portable across standard libraries.
  const double u1 = uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline unsigned worker_count(unsigned requested) {
  unsigned n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ESI_LAB_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap > 0) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
  }
  return std::max(1u, n);
}

// Runs fn(chunk_index, count, rng) for every chunk and returns the results in
// chunk order. Chunk sizes and streams depend only on (total, chunks, seed).
template <class Acc, class Fn>
std::vector<Acc> run_chunked(std::size_t total, std::size_t chunks, std::uint64_t seed, unsigned threads,
                             Fn&& fn) {
  chunks = std::max<std::size_t>(1, std::min(chunks, std::max<std::size_t>(total, 1)));
  std::vector<Acc> out(chunks);
  auto work = [&](std::size_t c) {
    const std::size_t count = total / chunks + (c < total % chunks ? 1 : 0);
    Rng rng = substream(seed, c);
    out[c] = fn(c, count, rng);
  };
  const unsigned nw = std::min<unsigned>(worker_count(threads), static_cast<unsigned>(chunks));
  if (nw <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) work(c);
    return out;
  }
  std::vector<std::thread> pool;
  pool.reserve(nw);
  for (unsigned w = 0; w < nw; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t c = w; c < chunks; c += nw) work(c);
    });
  for (auto& t : pool) t.join();
  return out;
}

struct MeanAccumulator {
  double sum = 0.0;
  double sumsq = 0.0;
  std::size_t n = 0;

  void add(double x) {
    sum += x;
    sumsq += x * x;
    ++n;
  }
  void merge(const MeanAccumulator& o) {
    sum += o.sum;
    sumsq += o.sumsq;
    n += o.n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
  double variance() const {
    if (n < 2) return 0.0;
    const double m = mean();
    return std::max(0.0, (sumsq - static_cast<double>(n) * m * m) / static_cast<double>(n - 1));
  }
  double standard_error() const { return n ? std::sqrt(variance() / static_cast<double>(n)) : 0.0; }
};

template <class Acc>
Acc merge_all(const std::vector<Acc>& parts) {
  Acc total;
  for (const auto& p : parts) total.merge(p);
  return total;
}

}  // namespace esi
