#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "uniforget/errors.hpp"
#include "uniforget/flownet.hpp"
#include "uniforget/maskengine.hpp"
#include "uniforget/memoria.hpp"
#include "uniforget/rng.hpp"

namespace uniforget {

/// A set of latents of equal dimension, stored row-major.
struct LatentSet {
    int dim = 0;
    std::vector<double> data;

    LatentSet() = default;
    LatentSet(int d, std::vector<double> rows) : dim(d), data(std::move(rows)) {
        require(d >= 1 && data.size() % static_cast<std::size_t>(d) == 0, "latent set: data length is not a multiple of dim");
    }

    std::size_t size() const { return dim == 0 ? 0 : data.size() / static_cast<std::size_t>(dim); }
    bool empty() const { return size() == 0; }
    std::span<const double> row(std::size_t i) const {
        return {data.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
    void append(std::span<const double> r) {
        if (dim == 0) dim = static_cast<int>(r.size());
        require(r.size() == static_cast<std::size_t>(dim), "latent set: row dimension mismatch");
        data.insert(data.end(), r.begin(), r.end());
    }
    void append(const LatentSet& other) {
        for (std::size_t i = 0; i < other.size(); ++i) append(other.row(i));
    }
};

/// Noise stream for evaluation samples of condition `cond_id`: seed + id.
inline std::uint64_t eval_stream_seed(std::uint64_t seed, int cond_id) {
    return derive_seed(seed + static_cast<std::uint64_t>(cond_id), streams::eval);
}

/// n samples z_N for one condition. The same (seed, condition) gives the same
/// z_0 draws regardless of the model, so two models can be compared pairwise.
template <VelocityField F>
LatentSet generate(const F& field, const Condition& c, int n, int steps, std::uint64_t seed) {
    require(n >= 1, "generate: sample count must be >= 1");
    SeededNoise noise(eval_stream_seed(seed, c.id));
    LatentSet out;
    out.dim = field.dim();
    Latent z0(static_cast<std::size_t>(field.dim()));
    for (int i = 0; i < n; ++i) {
        noise.normal(z0);
        out.append(euler_sample(field, z0, steps, c).z);
    }
    return out;
}

inline LatentSet generate(const Parameters& params, const Gates* masks, const Condition& c, int n, int steps, std::uint64_t seed) {
    return generate(NetField(params, masks), c, n, steps, seed);
}

template <VelocityField F>
LatentSet generate(const F& field, std::span<const Condition> conds, int n_per, int steps, std::uint64_t seed) {
    LatentSet out;
    out.dim = field.dim();
    for (const auto& c : conds) out.append(generate(field, c, n_per, steps, seed));
    return out;
}

/// Fraction of trigger-conditioned samples landing within tau_rel * RMS norm of
/// their planted exemplar. Lower means stronger de-memorization.
template <VelocityField F>
double reproduction_rate(const F& field, const ExemplarRegistry& registry, double tau_rel, int n_per_trigger, int steps,
                         std::uint64_t seed) {
    require(!registry.exemplars.empty(), "reproduction_rate: registry is empty");
    require(tau_rel > 0.0, "reproduction_rate: tau_rel must be > 0");
    require(n_per_trigger >= 1, "reproduction_rate: n_per_trigger must be >= 1");
    const double radius = tau_rel * registry.rms_norm;
    std::size_t hits = 0, total = 0;
    for (const auto& ex : registry.exemplars) {
        const auto samples = generate(field, ex.trigger, n_per_trigger, steps, seed);
        for (std::size_t i = 0; i < samples.size(); ++i, ++total) {
            if (std::sqrt(detail::sq_dist(samples.row(i), ex.vector)) < radius) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

inline double reproduction_rate(const Parameters& params, const Gates* masks, const ExemplarRegistry& registry, double tau_rel,
                                int n_per_trigger, int steps, std::uint64_t seed) {
    return reproduction_rate(NetField(params, masks), registry, tau_rel, n_per_trigger, steps, seed);
}

inline constexpr int magnitude_bins = 64;

struct MagnitudeProfile {
    std::vector<double> norms;  // per-sample l2 norms, input order
    double lo = 0.0, hi = 0.0;  // histogram range
    std::vector<double> histogram;  // magnitude_bins counts
    double mean = 0.0;
    double median = 0.0;
};

inline std::vector<double> l2_norms(const LatentSet& latents) {
    std::vector<double> out(latents.size());
    for (std::size_t i = 0; i < latents.size(); ++i) {
        double s = 0.0;
        for (double v : latents.row(i)) s += v * v;
        out[i] = std::sqrt(s);
    }
    return out;
}

/// Histogram over [lo, hi]; values outside are clamped into the edge bins.
inline MagnitudeProfile magnitude_profile(const LatentSet& latents, double lo, double hi) {
    require(!latents.empty(), "magnitude_profile: empty latent set");
    require(hi >= lo, "magnitude_profile: invalid range");
    MagnitudeProfile p;
    p.norms = l2_norms(latents);
    p.lo = lo;
    p.hi = hi;
    p.histogram.assign(magnitude_bins, 0.0);
    const double width = (hi - lo) / magnitude_bins;
    for (double n : p.norms) {
        int b = width > 0.0 ? static_cast<int>((n - lo) / width) : 0;
        b = std::clamp(b, 0, magnitude_bins - 1);
        p.histogram[static_cast<std::size_t>(b)] += 1.0;
    }
    p.mean = std::accumulate(p.norms.begin(), p.norms.end(), 0.0) / static_cast<double>(p.norms.size());
    auto sorted = p.norms;
    std::sort(sorted.begin(), sorted.end());
    const auto m = sorted.size();
    p.median = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    return p;
}

inline MagnitudeProfile magnitude_profile(const LatentSet& latents) {
    const auto n = l2_norms(latents);
    require(!n.empty(), "magnitude_profile: empty latent set");
    const auto [lo, hi] = std::minmax_element(n.begin(), n.end());
    return magnitude_profile(latents, *lo, *hi);
}

/// Profiles of several sets histogrammed over their pooled range.
inline std::vector<MagnitudeProfile> pooled_profiles(std::span<const LatentSet> sets) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : sets) {
        for (double n : l2_norms(s)) {
            lo = std::min(lo, n);
            hi = std::max(hi, n);
        }
    }
    std::vector<MagnitudeProfile> out;
    for (const auto& s : sets) out.push_back(magnitude_profile(s, lo, hi));
    return out;
}

/// 1-Wasserstein distance between two empirical distributions on the line:
/// the integral of |F_a - F_b| over the merged sorted support.
inline double wasserstein1(std::vector<double> a, std::vector<double> b) {
    require(!a.empty() && !b.empty(), "wasserstein1: empty sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double prev = std::min(a.front(), b.front());
    double dist = 0.0;
    while (i < a.size() || j < b.size()) {
        double x;
        if (j >= b.size() || (i < a.size() && a[i] <= b[j])) {
            x = a[i];
        } else {
            x = b[j];
        }
        dist += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (x - prev);
        prev = x;
        while (i < a.size() && a[i] == x) ++i;
        while (j < b.size() && b[j] == x) ++j;
    }
    return dist;
}

inline double magnitude_shift(const MagnitudeProfile& p, const MagnitudeProfile& q) { return wasserstein1(p.norms, q.norms); }

struct Projection2D {
    std::vector<std::array<double, 2>> a, b;
    std::array<double, 2> eigenvalues{};
    double explained_variance = 0.0;  // fraction captured by the two components
};

/// PCA fitted on the union of both sets; both are projected on the same basis.
/// Each component's sign is fixed so that its largest-magnitude coordinate is positive.
inline Projection2D project2d(const LatentSet& a, const LatentSet& b) {
    require(a.size() + b.size() >= 3, "project2d: need at least 3 points");
    require(a.dim >= 2 && (b.empty() || b.dim == a.dim), "project2d: need matching dimension >= 2");
    const int d = a.dim;
    const auto n = a.size() + b.size();
    Eigen::MatrixXd X(static_cast<Eigen::Index>(n), d);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (int k = 0; k < d; ++k) X(static_cast<Eigen::Index>(i), k) = a.row(i)[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < b.size(); ++i)
        for (int k = 0; k < d; ++k) X(static_cast<Eigen::Index>(a.size() + i), k) = b.row(i)[static_cast<std::size_t>(k)];
    const Eigen::RowVectorXd mean = X.colwise().mean();
    X.rowwise() -= mean;
    const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n - 1);
    const double total_var = cov.trace();
    require(total_var > 1e-300, "project2d: degenerate input (zero variance)");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Eigen::MatrixXd basis(d, 2);
    Projection2D out;
    for (int c = 0; c < 2; ++c) {
        Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - c);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        basis.col(c) = v;
        out.eigenvalues[static_cast<std::size_t>(c)] = std::max(0.0, eig.eigenvalues()(d - 1 - c));
    }
    out.explained_variance = (out.eigenvalues[0] + out.eigenvalues[1]) / total_var;
    const Eigen::MatrixXd Y = X * basis;
    for (std::size_t i = 0; i < n; ++i) {
        std::array<double, 2> p{Y(static_cast<Eigen::Index>(i), 0), Y(static_cast<Eigen::Index>(i), 1)};
        (i < a.size() ? out.a : out.b).push_back(p);
    }
    return out;
}

/// Leave-one-out 1-nearest-neighbour balanced accuracy at telling `a` from `b`
/// in the full latent space. 0.5 means the sets overlap; 1 means they are
/// fully separated. Exact distance ties split credit evenly.
inline double decoupling_score(const LatentSet& a, const LatentSet& b) {
    require(a.size() >= 10 && b.size() >= 10, "decoupling_score: each set needs at least 10 latents");
    require(a.dim == b.dim, "decoupling_score: dimension mismatch");
    const auto na = a.size(), nb = b.size(), n = na + b.size();
    auto row = [&](std::size_t i) { return i < na ? a.row(i) : b.row(i - na); };
    double correct_a = 0.0, correct_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool in_a = i < na;
        double best = std::numeric_limits<double>::infinity();
        double same = 0.0, tied = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double dd = detail::sq_dist(row(i), row(j));
            const bool same_label = (j < na) == in_a;
            if (dd < best) {
                best = dd;
                same = same_label ? 1.0 : 0.0;
                tied = 1.0;
            } else if (dd == best) {
                same += same_label ? 1.0 : 0.0;
                tied += 1.0;
            }
        }
        (in_a ? correct_a : correct_b) += same / tied;
    }
    return 0.5 * (correct_a / static_cast<double>(na) + correct_b / static_cast<double>(nb));
}

namespace detail {

inline Eigen::MatrixXd to_matrix(const LatentSet& s) {
    Eigen::MatrixXd X(static_cast<Eigen::Index>(s.size()), s.dim);
    for (std::size_t i = 0; i < s.size(); ++i)
        for (int k = 0; k < s.dim; ++k) X(static_cast<Eigen::Index>(i), k) = s.row(i)[static_cast<std::size_t>(k)];
    return X;
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
    const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(1e-10).cwiseSqrt();
    return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace detail

/// Fréchet distance between Gaussian fits of two sets:
/// ||mu_g - mu_r||^2 + tr(S_g + S_r - 2 (S_r^1/2 S_g S_r^1/2)^1/2).
inline double frechet_quality(const LatentSet& generated, const LatentSet& reference) {
    require(generated.dim == reference.dim, "frechet_quality: dimension mismatch");
    const auto need = static_cast<std::size_t>(generated.dim) + 1;
    require(generated.size() >= need && reference.size() >= need, "frechet_quality: each set needs at least dim+1 samples");
    auto moments = [](const LatentSet& s) {
        Eigen::MatrixXd X = detail::to_matrix(s);
        Eigen::RowVectorXd mu = X.colwise().mean();
        X.rowwise() -= mu;
        Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(s.size() - 1);
        return std::pair{Eigen::VectorXd(mu.transpose()), cov};
    };
    const auto [mg, sg] = moments(generated);
    const auto [mr, sr] = moments(reference);
    const Eigen::MatrixXd root_r = detail::psd_sqrt(sr);
    const Eigen::MatrixXd inner = detail::psd_sqrt(root_r * sg * root_r);
    const double fd = (mg - mr).squaredNorm() + (sg + sr).trace() - 2.0 * inner.trace();
    return std::max(0.0, fd);
}

/// Metrics bundle of one run (one seed).
struct Report {
    std::uint64_t seed = 0;
    std::map<std::string, double> reproduction;     // model label -> rate
    std::map<std::string, double> magnitude_shift;  // pair label -> W1 distance
    std::map<std::string, double> decoupling;       // pair label -> score
    std::map<std::string, DeactivationReport> deactivation;  // mask label -> ratios
    std::map<std::string, double> quality;          // model label -> Fréchet distance
    std::map<std::string, double> projection_variance;  // pair label -> explained fraction
    std::map<std::string, std::string> digests;     // stage -> config digest
};

}  // namespace uniforget
