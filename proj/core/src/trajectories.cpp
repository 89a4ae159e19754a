#include "rapm/trajectories.hpp"

#include <cstring>
#include <fstream>

namespace rapm::traj {

namespace {
constexpr char kMagic[8] = {'R', 'A', 'P', 'M', 'T', 'R', 'A', 'J'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

CoarseGrid CoarseGrid::uniform(const diff::NoiseSchedule& ns, int segments,
                               int fine_steps, double offset) {
    if (segments < 1) throw std::invalid_argument("grid needs at least one segment");
    if (fine_steps < 1) throw std::invalid_argument("fine_steps must be >= 1");
    CoarseGrid g;
    g.fine_steps = fine_steps;
    g.times.resize(static_cast<std::size_t>(segments) + 1);
    for (int n = 0; n <= segments; ++n) {
        g.times[static_cast<std::size_t>(n)] =
            ns.t_min + (ns.t_max - ns.t_min) * n / segments;
    }
    g.times.front() = ns.t_min;
    g.times.back() = ns.t_max;
    // Derive the default nudge from the realized slot widths; the nominal
    // (t_max - t_min)/segments can exceed the smallest rounded slot by one ulp.
    double min_slot = ns.t_max;
    for (std::size_t i = 0; i + 1 < g.times.size(); ++i) {
        min_slot = std::min(min_slot, g.times[i + 1] - g.times[i]);
    }
    g.offset = offset > 0.0 ? offset : min_slot / fine_steps;
    g.validate(ns);
    return g;
}

void CoarseGrid::validate(const diff::NoiseSchedule& ns) const {
    if (times.size() < 2) throw std::invalid_argument("grid needs at least two timesteps");
    if (times.front() != ns.t_min || times.back() != ns.t_max) {
        throw std::invalid_argument("grid must span [t_min, t_max]");
    }
    double min_slot = ns.t_max;
    for (std::size_t i = 0; i + 1 < times.size(); ++i) {
        if (!(times[i] < times[i + 1])) {
            throw std::invalid_argument("grid timesteps must strictly increase");
        }
        min_slot = std::min(min_slot, times[i + 1] - times[i]);
    }
    if (!(offset > 0.0) || offset > min_slot) {
        throw std::invalid_argument("grid offset must lie in (0, min slot width]");
    }
    if (fine_steps < 1) throw std::invalid_argument("fine_steps must be >= 1");
}

bool CoarseGrid::same_times(const CoarseGrid& other) const {
    return times == other.times && fine_steps == other.fine_steps;
}

void TrajectoryStore::append(TeacherTrajectory rec) {
    if (rec.positions.cols() != grid.segments() + 1 ||
        (dim > 0 && rec.positions.rows() != dim)) {
        throw GridMismatch("trajectory shape does not match store grid");
    }
    if (dim == 0) dim = static_cast<int>(rec.positions.rows());
    records.push_back(std::move(rec));
}

TeacherTrajectory generate_trajectory(const diff::NoiseSchedule& ns,
                                      const diff::Denoiser& teacher,
                                      const CoarseGrid& grid,
                                      const Eigen::VectorXd& initial_noise,
                                      int condition) {
    const int N = grid.segments();
    TeacherTrajectory rec;
    rec.condition = static_cast<std::uint32_t>(condition);
    rec.positions.resize(initial_noise.size(), N + 1);
    rec.positions.col(N) = initial_noise.cast<float>();
    Eigen::VectorXd z = initial_noise;
    for (int n = N - 1; n >= 0; --n) {
        z = diff::ddim_multi(ns, teacher, z, grid.times[static_cast<std::size_t>(n + 1)],
                             grid.times[static_cast<std::size_t>(n)], grid.fine_steps,
                             condition);
        rec.positions.col(n) = z.cast<float>();
    }
    return rec;
}

std::size_t store_file_size(int dim, int segments, std::size_t count) {
    std::size_t header = 8 + 4 + 4 + 4 + 4 + 8 +
                         static_cast<std::size_t>(segments + 1) * 8;
    std::size_t record = 4 + static_cast<std::size_t>(segments + 1) *
                                 static_cast<std::size_t>(dim) * 4;
    return header + count * record;
}

void store_write(const TrajectoryStore& store, const std::string& path) {
    if (store.records.empty()) throw StoreError("refusing to write an empty store");
    const int N = store.grid.segments();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw StoreError("cannot open " + path + " for writing");
    auto put = [&f](const void* p, std::size_t n) {
        f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    };
    put(kMagic, 8);
    std::uint32_t v32 = kVersion;
    put(&v32, 4);
    v32 = static_cast<std::uint32_t>(store.dim);
    put(&v32, 4);
    v32 = static_cast<std::uint32_t>(N);
    put(&v32, 4);
    v32 = static_cast<std::uint32_t>(store.grid.fine_steps);
    put(&v32, 4);
    std::uint64_t count = store.records.size();
    put(&count, 8);
    put(store.grid.times.data(), static_cast<std::size_t>(N + 1) * 8);
    for (const TeacherTrajectory& rec : store.records) {
        if (rec.positions.cols() != N + 1 || rec.positions.rows() != store.dim) {
            throw GridMismatch("record shape does not match store grid");
        }
        put(&rec.condition, 4);
        put(rec.positions.data(),
            sizeof(float) * static_cast<std::size_t>(rec.positions.size()));
    }
}

TrajectoryStore store_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw StoreError("cannot open " + path);
    auto get = [&f](void* p, std::size_t n) {
        f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(f.gcount()) != n) {
            throw Truncated("trajectory store truncated");
        }
    };
    char magic[8];
    get(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw BadMagic("bad trajectory store magic");
    std::uint32_t version;
    get(&version, 4);
    if (version != kVersion) {
        throw BadVersion("unsupported store version " + std::to_string(version));
    }
    std::uint32_t dim, segments, fine_steps;
    get(&dim, 4);
    get(&segments, 4);
    get(&fine_steps, 4);
    std::uint64_t count;
    get(&count, 8);

    TrajectoryStore store;
    store.dim = static_cast<int>(dim);
    store.grid.fine_steps = static_cast<int>(fine_steps);
    store.grid.times.resize(segments + 1);
    get(store.grid.times.data(), static_cast<std::size_t>(segments + 1) * 8);
    double min_slot = store.grid.times.back() - store.grid.times.front();
    for (std::size_t i = 0; i + 1 < store.grid.times.size(); ++i) {
        min_slot = std::min(min_slot, store.grid.times[i + 1] - store.grid.times[i]);
    }
    store.grid.offset = min_slot / fine_steps;

    store.records.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        TeacherTrajectory rec;
        get(&rec.condition, 4);
        rec.positions.resize(dim, segments + 1);
        get(rec.positions.data(),
            sizeof(float) * static_cast<std::size_t>(rec.positions.size()));
        store.records.push_back(std::move(rec));
    }
    return store;
}

}  // namespace rapm::traj
