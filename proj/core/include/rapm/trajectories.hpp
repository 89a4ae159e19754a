#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "rapm/diffusion.hpp"

namespace rapm::traj {

struct StoreError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagic : StoreError {
    using StoreError::StoreError;
};
struct BadVersion : StoreError {
    using StoreError::StoreError;
};
struct Truncated : StoreError {
    using StoreError::StoreError;
};
struct GridMismatch : StoreError {
    using StoreError::StoreError;
};

// Distillation timesteps. times[n] ascends with n: times[0] = t_min,
// times[N] = t_max; generation walks the index down from N.
struct CoarseGrid {
    std::vector<double> times;
    int fine_steps = 25;   // M, teacher sub-steps per slot
    double offset = 0.0;   // Delta, teacher nudge inside a slot

    int segments() const { return static_cast<int>(times.size()) - 1; }  // N

    // Uniform grid over [t_min, t_max]; offset <= 0 selects the default
    // slot_width / fine_steps (one fine teacher step).
    static CoarseGrid uniform(const diff::NoiseSchedule& ns, int segments,
                              int fine_steps, double offset = -1.0);

    void validate(const diff::NoiseSchedule& ns) const;
    bool same_times(const CoarseGrid& other) const;
};

// One stored teacher rollout. Column n of positions is z~_n; column N holds
// the initial noise. Payload is 32-bit, matching the on-disk format, so what
// trainers consume is byte-identical to what a reloaded store yields.
struct TeacherTrajectory {
    std::uint32_t condition = 0;
    Eigen::MatrixXf positions;  // d x (N+1)

    Eigen::VectorXd position(int n) const { return positions.col(n).cast<double>(); }
};

struct TrajectoryStore {
    CoarseGrid grid;
    int dim = 0;
    std::vector<TeacherTrajectory> records;

    void append(TeacherTrajectory rec);
};

TeacherTrajectory generate_trajectory(const diff::NoiseSchedule& ns,
                                      const diff::Denoiser& teacher,
                                      const CoarseGrid& grid,
                                      const Eigen::VectorXd& initial_noise, int condition);

void store_write(const TrajectoryStore& store, const std::string& path);
TrajectoryStore store_read(const std::string& path);

// Header + count * (4 + (N+1)*d*4) bytes.
std::size_t store_file_size(int dim, int segments, std::size_t count);

}  // namespace rapm::traj
