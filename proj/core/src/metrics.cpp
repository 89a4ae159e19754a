#include "rapm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "rapm/rng.hpp"

namespace rapm::metrics {

SampleSet sample_student(const diff::NoiseSchedule& ns, const diff::Denoiser& model,
                         const traj::CoarseGrid& grid, int count, std::uint64_t seed,
                         int num_labels) {
    if (count < 1) throw std::invalid_argument("sample_student: count must be >= 1");
    const int d = model.dim();
    const int N = grid.segments();
    SampleSet out;
    out.points.resize(count, d);
    out.source = "student-" + std::to_string(N) + "steps";
    out.seed = seed;
    const double sT = ns.sigma(grid.times.back());
    for (int i = 0; i < count; ++i) {
        Rng rng(sub_seed(seed, static_cast<std::uint64_t>(i)));
        int cond = num_labels > 0 ? rng.uniform_int(num_labels) : -1;
        Eigen::VectorXd z = sT * rng.normal_vec(d);
        for (int n = N - 1; n >= 0; --n) {
            z = diff::ddim_step(ns, model, z, grid.times[static_cast<std::size_t>(n + 1)],
                                grid.times[static_cast<std::size_t>(n)], cond);
        }
        out.points.row(i) = z.transpose();
    }
    return out;
}

SampleSet sample_data(const diff::GaussianMixture& data, int count, std::uint64_t seed) {
    SampleSet out;
    out.points.resize(count, data.dim());
    out.source = "data";
    out.seed = seed;
    Rng rng(seed);
    for (int i = 0; i < count; ++i) out.points.row(i) = data.sample(rng).transpose();
    return out;
}

double solve_assignment(const Eigen::MatrixXd& cost, std::vector<int>& row_to_col) {
    const int n = static_cast<int>(cost.rows());
    if (cost.cols() != n) throw std::invalid_argument("assignment matrix must be square");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = 0;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    row_to_col.assign(n, -1);
    double total = 0.0;
    for (int j = 1; j <= n; ++j) {
        if (p[j]) {
            row_to_col[p[j] - 1] = j - 1;
            total += cost(p[j] - 1, j - 1);
        }
    }
    return total;
}

MetricResult wasserstein2(const SampleSet& a, const SampleSet& b) {
    const int n = a.count();
    if (n != b.count()) {
        throw std::invalid_argument("wasserstein2: sample counts differ (" +
                                    std::to_string(n) + " vs " +
                                    std::to_string(b.count()) + ")");
    }
    Eigen::MatrixXd cost(n, n);
    for (int i = 0; i < n; ++i) {
        cost.row(i) =
            (b.points.rowwise() - a.points.row(i)).rowwise().squaredNorm().transpose();
    }
    std::vector<int> assign;
    double total = solve_assignment(cost, assign);
    MetricResult r;
    r.name = "w2";
    r.value = std::sqrt(std::max(0.0, total / n));
    r.n = n;
    r.seed = a.seed;
    return r;
}

double median_pairwise_distance(const SampleSet& a, const SampleSet& b) {
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(a.count()) * b.count());
    for (int i = 0; i < a.count(); ++i) {
        for (int j = 0; j < b.count(); ++j) {
            d.push_back((a.points.row(i) - b.points.row(j)).norm());
        }
    }
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2),
                     d.end());
    return d[d.size() / 2];
}

MetricResult mmd_rbf(const SampleSet& a, const SampleSet& b, double bandwidth) {
    const int m = a.count(), n = b.count();
    if (m < 2 || n < 2) throw std::invalid_argument("mmd_rbf needs at least 2 samples each");
    double h = bandwidth > 0.0 ? bandwidth : median_pairwise_distance(a, b);
    const double g = 1.0 / (2.0 * h * h);
    auto k = [g](const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& y) {
        return std::exp(-g * (x - y).squaredNorm());
    };
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < m; ++j) {
            if (i != j) kxx += k(a.points.row(i), a.points.row(j));
        }
    }
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j) kyy += k(b.points.row(i), b.points.row(j));
        }
    }
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) kxy += k(a.points.row(i), b.points.row(j));
    }
    double mmd2 = kxx / (static_cast<double>(m) * (m - 1)) +
                  kyy / (static_cast<double>(n) * (n - 1)) -
                  2.0 * kxy / (static_cast<double>(m) * n);
    MetricResult r;
    r.name = "mmd";
    r.value = std::max(0.0, mmd2);
    r.n = m;
    r.seed = a.seed;
    return r;
}

}  // namespace rapm::metrics
