#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "rapm/models.hpp"
#include "rapm/rng.hpp"
#include "rapm/trajectories.hpp"

using namespace rapm;

namespace {

struct CountingOracle : diff::Denoiser {
    diff::OracleDenoiser inner;
    mutable long evals = 0;
    CountingOracle(diff::GaussianMixture gm, diff::NoiseSchedule ns)
        : inner(std::move(gm), ns) {}
    int dim() const override { return inner.dim(); }
    Eigen::VectorXd predict(const Eigen::VectorXd& z, double t, int cond) const override {
        ++evals;
        return inner.predict(z, t, cond);
    }
    Eigen::VectorXd predict_x(const Eigen::VectorXd& z, double t,
                              int cond) const override {
        ++evals;
        return inner.predict_x(z, t, cond);
    }
};

diff::GaussianMixture centered_gaussian(double sd) {
    diff::GaussianMixture gm;
    gm.std_dev = sd;
    diff::GmComponent c;
    c.mean = Eigen::Vector2d(0.0, 0.0);
    c.weight = 1.0;
    gm.components.push_back(c);
    return gm;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/rapm_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

traj::TrajectoryStore make_store(int count, std::uint64_t seed, int segments = 4,
                                 int fine_steps = 25) {
    diff::NoiseSchedule ns;
    auto gm = diff::GaussianMixture::ring(8, 1.2, 0.15, 2);
    diff::OracleDenoiser oracle(gm, ns);
    traj::TrajectoryStore store;
    store.grid = traj::CoarseGrid::uniform(ns, segments, fine_steps);
    for (int i = 0; i < count; ++i) {
        Rng rng(sub_seed(seed, static_cast<std::uint64_t>(i)));
        int cond = rng.uniform_int(2);
        Eigen::VectorXd noise = ns.sigma(ns.t_max) * rng.normal_vec(2);
        store.append(traj::generate_trajectory(ns, oracle, store.grid, noise, cond));
    }
    return store;
}

}  // namespace

TEST_CASE("uniform grid spans the schedule and validates its shape") {
    diff::NoiseSchedule ns;
    auto g = traj::CoarseGrid::uniform(ns, 4, 25);
    CHECK(g.segments() == 4);
    CHECK(g.times.front() == ns.t_min);
    CHECK(g.times.back() == ns.t_max);
    CHECK(g.offset == doctest::Approx((ns.t_max - ns.t_min) / 4 / 25));
    g.validate(ns);

    auto bad = g;
    bad.offset = 1.0;
    CHECK_THROWS(bad.validate(ns));
    bad = g;
    bad.times[1] = bad.times[2];
    CHECK_THROWS(bad.validate(ns));
    bad = g;
    bad.times.back() = 0.9;
    CHECK_THROWS(bad.validate(ns));
    CHECK_THROWS(traj::CoarseGrid::uniform(ns, 0, 25));
}

TEST_CASE("N=4, M=25 rollout stores 5 positions from 100 teacher evaluations") {
    diff::NoiseSchedule ns;
    CountingOracle teacher(diff::GaussianMixture::ring(8, 1.2, 0.15, 0), ns);
    auto grid = traj::CoarseGrid::uniform(ns, 4, 25);
    Rng rng(3);
    auto rec = traj::generate_trajectory(ns, teacher, grid,
                                         ns.sigma(ns.t_max) * rng.normal_vec(2), 0);
    CHECK(rec.positions.cols() == 5);
    CHECK(rec.positions.rows() == 2);
    CHECK(teacher.evals == 100);
    CHECK(rec.positions.col(4).cast<double>().size() == 2);  // stored initial noise
}

TEST_CASE("exact oracle on a centered Gaussian follows the closed-form linear map") {
    diff::NoiseSchedule ns;
    double sd = 0.4;
    diff::OracleDenoiser oracle(centered_gaussian(sd), ns);
    auto grid = traj::CoarseGrid::uniform(ns, 4, 25);
    Rng rng(5);
    Eigen::VectorXd noise = ns.sigma(ns.t_max) * rng.normal_vec(2);
    auto rec = traj::generate_trajectory(ns, oracle, grid, noise, -1);

    // Every DDIM substep is z -> A z for a centered Gaussian; accumulate the
    // scalar coefficients independently.
    double A = 1.0;
    int n_check = 4;
    for (int n = 3; n >= 0; --n) {
        double hi = grid.times[static_cast<std::size_t>(n + 1)];
        double lo = grid.times[static_cast<std::size_t>(n)];
        for (int i = 0; i < grid.fine_steps; ++i) {
            double ta = hi + (lo - hi) * i / grid.fine_steps;
            double tb =
                (i + 1 == grid.fine_steps) ? lo : hi + (lo - hi) * (i + 1) / grid.fine_steps;
            double a = ns.alpha(ta), s = ns.sigma(ta);
            double at = ns.alpha(tb), st = ns.sigma(tb);
            double var = a * a * sd * sd + s * s;
            A *= (at * a * sd * sd + st * s) / var;
        }
        --n_check;
        Eigen::VectorXd expect = A * noise;
        CHECK((rec.position(n) - expect).norm() < 1e-6);
    }
    (void)n_check;
}

TEST_CASE("store round-trips 1000 records bit-identically with the exact file size") {
    auto store = make_store(1000, 77);
    TempFile f("store.bin");
    traj::store_write(store, f.path);

    std::ifstream in(f.path, std::ios::binary | std::ios::ate);
    auto actual = static_cast<std::size_t>(in.tellg());
    CHECK(actual == traj::store_file_size(2, 4, 1000));

    auto back = traj::store_read(f.path);
    CHECK(back.dim == store.dim);
    CHECK(back.grid.same_times(store.grid));
    CHECK(back.grid.offset == doctest::Approx(store.grid.offset));
    REQUIRE(back.records.size() == 1000);
    for (std::size_t i = 0; i < 1000; ++i) {
        CHECK(back.records[i].condition == store.records[i].condition);
        CHECK(back.records[i].positions == store.records[i].positions);
    }
}

TEST_CASE("store loader distinguishes corruption modes") {
    auto store = make_store(3, 11);
    TempFile f("corrupt_store.bin");
    traj::store_write(store, f.path);

    auto patch = [&](std::streamoff pos, const char* bytes, std::size_t n) {
        std::fstream io(f.path, std::ios::in | std::ios::out | std::ios::binary);
        io.seekp(pos);
        io.write(bytes, static_cast<std::streamsize>(n));
    };
    patch(0, "XXXXXXXX", 8);
    CHECK_THROWS_AS(traj::store_read(f.path), traj::BadMagic);

    traj::store_write(store, f.path);
    char v9[4] = {9, 0, 0, 0};
    patch(8, v9, 4);
    CHECK_THROWS_AS(traj::store_read(f.path), traj::BadVersion);

    traj::store_write(store, f.path);
    {
        std::ifstream in(f.path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        std::ofstream out(f.path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
    }
    CHECK_THROWS_AS(traj::store_read(f.path), traj::Truncated);

    traj::TeacherTrajectory wrong;
    wrong.positions.resize(2, 3);  // grid wants 5 columns
    CHECK_THROWS_AS(store.append(wrong), traj::GridMismatch);

    traj::TrajectoryStore empty;
    empty.grid = store.grid;
    CHECK_THROWS_AS(traj::store_write(empty, "/tmp/rapm_empty.bin"), traj::StoreError);
}

TEST_CASE("generation is deterministic: same seed, byte-identical store files") {
    TempFile fa("det_a.bin"), fb("det_b.bin");
    traj::store_write(make_store(20, 123), fa.path);
    traj::store_write(make_store(20, 123), fb.path);
    std::ifstream a(fa.path, std::ios::binary), b(fb.path, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    traj::store_write(make_store(20, 124), fb.path);
    std::ifstream c(fb.path, std::ios::binary);
    std::string sc((std::istreambuf_iterator<char>(c)), std::istreambuf_iterator<char>());
    CHECK(sa != sc);
}

TEST_CASE("single-record store is valid") {
    auto store = make_store(1, 9);
    TempFile f("single.bin");
    traj::store_write(store, f.path);
    CHECK(traj::store_read(f.path).records.size() == 1);
}

TEST_CASE("mean position norm shrinks toward the data as n decreases") {
    // Needs data whose norm sits well below the noise norm sqrt(pi/2)*...,
    // otherwise the trend is flat within Monte-Carlo noise.
    diff::NoiseSchedule ns;
    diff::OracleDenoiser oracle(diff::GaussianMixture::ring(8, 0.6, 0.15, 0), ns);
    traj::TrajectoryStore store;
    store.grid = traj::CoarseGrid::uniform(ns, 4, 25);
    for (int i = 0; i < 256; ++i) {
        Rng rng(sub_seed(31, static_cast<std::uint64_t>(i)));
        Eigen::VectorXd noise = ns.sigma(ns.t_max) * rng.normal_vec(2);
        store.append(traj::generate_trajectory(ns, oracle, store.grid, noise, -1));
    }
    const int N = store.grid.segments();
    std::vector<double> mean_norm(static_cast<std::size_t>(N) + 1, 0.0);
    for (const auto& rec : store.records) {
        for (int n = 0; n <= N; ++n) {
            mean_norm[static_cast<std::size_t>(n)] += rec.position(n).norm();
        }
    }
    for (auto& v : mean_norm) v /= static_cast<double>(store.records.size());
    // E||x||^2 = 1.485 for the ring, E||noise||^2 = 2: the trend is monotone.
    for (int n = 0; n < N; ++n) {
        CHECK(mean_norm[static_cast<std::size_t>(n)] <
              mean_norm[static_cast<std::size_t>(n + 1)]);
    }
}
