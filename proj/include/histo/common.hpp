#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace histo {

namespace fs = std::filesystem;

/// Raised for problems the caller can fix: bad paths, bad configuration,
/// invalid arguments. The CLI maps it to exit code 1.
class UserError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Raised when training produces a non-finite loss.
class DivergenceError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace log {

using Sink = std::function<void(std::string_view)>;

void info(std::string_view message);
void warn(std::string_view message);

/// Replaces the warning sink and returns the previous one. An empty sink
/// restores the default (stderr).
Sink set_warning_sink(Sink sink);

/// Suppresses info output (warnings still go to the sink).
void set_quiet(bool quiet);

/// Collects warnings for the lifetime of the object; used by tests and by
/// commands that need to report warning counts.
class WarningCapture {
  public:
    WarningCapture();
    ~WarningCapture();
    WarningCapture(const WarningCapture&) = delete;
    WarningCapture& operator=(const WarningCapture&) = delete;

    const std::vector<std::string>& messages() const { return messages_; }
    std::size_t count() const { return messages_.size(); }

  private:
    std::vector<std::string> messages_;
    Sink previous_;
};

}  // namespace log

/// splitmix64 step; used to derive independent seeds for substreams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// Portable deterministic RNG. std::uniform_*_distribution output differs
/// between standard libraries, so the draws used for splits and synthetic
/// data are computed here directly from the engine.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Uniform double in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller.
    double normal();

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[below(i)]);
        }
    }

  private:
    std::mt19937_64 engine_;
};

/// Explicit CPU generator for dropout masks and parameter draws.
at::Generator make_generator(std::uint64_t seed);

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const fs::path& path);

std::string read_text_file(const fs::path& path);
void write_text_file(const fs::path& path, std::string_view text);

}  // namespace histo
