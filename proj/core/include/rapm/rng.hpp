#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>

namespace rapm {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic per-index sub-seed so parallel and serial generation agree.
inline std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(seed ^ splitmix64(index + 1));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double normal() { return normal_(gen_); }
    double uniform() { return uniform_(gen_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int n) {
        std::uniform_int_distribution<int> d(0, n - 1);
        return d(gen_);
    }
    std::uint64_t raw() { return gen_(); }

    Eigen::VectorXd normal_vec(int d) {
        Eigen::VectorXd v(d);
        for (int i = 0; i < d; ++i) v(i) = normal();
        return v;
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace rapm
