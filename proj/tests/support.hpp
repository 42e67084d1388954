#pragma once

#include "histo/common.hpp"

// torch's logging header defines its own CHECK
#ifdef CHECK
#undef CHECK
#endif
#include <doctest.h>

#include <random>
#include <string>

namespace histo::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = fs::temp_directory_path() / ("histo_" + tag + "_" + std::to_string(rd()));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

  private:
    fs::path path_;
};

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
    return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

/// Random point on the probability simplex (rows of an n×k tensor).
inline torch::Tensor random_simplex(int64_t n, int64_t k, std::uint64_t seed) {
    auto gen = make_generator(seed);
    auto e = -torch::log(torch::rand({n, k}, gen, torch::kFloat64) + 1e-12);
    return e / e.sum(1, true);
}

}  // namespace histo::test
