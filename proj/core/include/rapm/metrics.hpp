#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>

#include "rapm/diffusion.hpp"
#include "rapm/trajectories.hpp"

// Distribution-quality metrics at desk scale: exact 2-Wasserstein through an
// optimal assignment and an unbiased RBF-kernel MMD estimate.
namespace rapm::metrics {

struct SampleSet {
    Eigen::MatrixXd points;  // n x d
    std::string source;
    std::uint64_t seed = 0;

    int count() const { return static_cast<int>(points.rows()); }
};

struct MetricResult {
    std::string name;
    double value = 0.0;
    int n = 0;
    std::uint64_t seed = 0;
};

// count rollouts of one DDIM step per coarse slot from fresh noise;
// conditions drawn uniformly over [0, num_labels) (all -1 when num_labels==0).
SampleSet sample_student(const diff::NoiseSchedule& ns, const diff::Denoiser& model,
                         const traj::CoarseGrid& grid, int count, std::uint64_t seed,
                         int num_labels);

SampleSet sample_data(const diff::GaussianMixture& data, int count, std::uint64_t seed);

// Exact W2: optimal assignment on the squared-distance matrix, then
// sqrt(total / n).
MetricResult wasserstein2(const SampleSet& a, const SampleSet& b);

// Unbiased MMD^2 with k(x,y) = exp(-||x-y||^2 / (2 h^2)), clamped at 0.
// bandwidth <= 0 selects the median pairwise-distance heuristic.
MetricResult mmd_rbf(const SampleSet& a, const SampleSet& b, double bandwidth = 0.0);

double median_pairwise_distance(const SampleSet& a, const SampleSet& b);

// Min-cost assignment (Jonker-Volgenant style shortest augmenting paths) on a
// square cost matrix; returns total cost, fills row -> column assignment.
double solve_assignment(const Eigen::MatrixXd& cost, std::vector<int>& row_to_col);

}  // namespace rapm::metrics
