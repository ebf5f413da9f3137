#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace uniforget {

/// SplitMix64 finalizer. Used to derive independent stream seeds from a
/// (seed, stream) pair so that every consumer of randomness is addressable.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix_seed(mix_seed(seed) ^ (stream * 0xd1342543de82ef95ULL + 1));
}

// Stream tags for derive_seed. Values are part of the reproducibility contract.
namespace streams {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t corpus = 2;
inline constexpr std::uint64_t batch = 3;
inline constexpr std::uint64_t noise = 4;
inline constexpr std::uint64_t prune = 5;
inline constexpr std::uint64_t retrain = 6;
inline constexpr std::uint64_t eval = 7;
inline constexpr std::uint64_t holdout = 8;
}  // namespace streams

/// Source of the Gaussian and uniform draws consumed by the samplers and losses.
/// Virtual so tests can substitute a recording or scripted source.
class NoiseSource {
public:
    virtual ~NoiseSource() = default;
    virtual void normal(std::span<double> out) = 0;
    virtual double uniform() = 0;
};

class SeededNoise final : public NoiseSource {
public:
    explicit SeededNoise(std::uint64_t seed) : engine_(seed) {}

    void normal(std::span<double> out) override {
        for (auto& v : out) {
            v = gauss_(engine_);
        }
    }

    double uniform() override { return unit_(engine_); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> gauss_{0.0, 1.0};
    std::uniform_real_distribution<double> unit_{0.0, 1.0};
};

/// Forwards to another source and keeps a copy of every normal draw.
class RecordingNoise final : public NoiseSource {
public:
    explicit RecordingNoise(NoiseSource& inner) : inner_(inner) {}

    void normal(std::span<double> out) override {
        inner_.normal(out);
        draws_.emplace_back(out.begin(), out.end());
    }

    double uniform() override {
        const double u = inner_.uniform();
        uniforms_.push_back(u);
        return u;
    }

    const std::vector<std::vector<double>>& normal_draws() const { return draws_; }
    const std::vector<double>& uniform_draws() const { return uniforms_; }

private:
    NoiseSource& inner_;
    std::vector<std::vector<double>> draws_;
    std::vector<double> uniforms_;
};

}  // namespace uniforget
