#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace sml {

// Error taxonomy mirrored by the CLI exit codes:
// ConfigError -> 2, DataError -> 3, NumericError -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Seeded RNG used for parameter init, dataset synthesis and shuffling.
// One instance per logical stream; never shared across streams so that
// adding draws in one place cannot perturb another.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    float uniform(float lo, float hi) {
        std::uniform_real_distribution<float> d(lo, hi);
        return d(engine_);
    }

    double uniform_double(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }

    int uniform_int(int lo, int hi) {  // inclusive range
        std::uniform_int_distribution<int> d(lo, hi);
        return d(engine_);
    }

    float normal(float mean, float stddev) {
        std::normal_distribution<float> d(mean, stddev);
        return d(engine_);
    }

    // log-uniform over [lo, hi], lo > 0
    double log_uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(std::log(lo), std::log(hi));
        return std::exp(d(engine_));
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace sml
