#include <benchmark/benchmark.h>

#include "rapm/distill.hpp"
#include "rapm/metrics.hpp"

using namespace rapm;

namespace {

struct Fixture {
    diff::NoiseSchedule ns;
    diff::GaussianMixture gm = diff::GaussianMixture::ring(8, 2.0, 0.10, 8);
    std::shared_ptr<models::MlpDenoiser> teacher;
    traj::CoarseGrid grid = traj::CoarseGrid::uniform(ns, 4, 25);
    traj::TrajectoryStore store;

    Fixture() {
        Rng rng(1);
        teacher = std::make_shared<models::MlpDenoiser>(2, 64, 8, 8, 16, rng, ns);
        store.grid = grid;
        for (int i = 0; i < 32; ++i) {
            Rng r(sub_seed(2, static_cast<std::uint64_t>(i)));
            store.append(traj::generate_trajectory(
                ns, *teacher, grid, ns.sigma(ns.t_max) * r.normal_vec(2),
                r.uniform_int(8)));
        }
    }
};

Fixture& fx() {
    static Fixture f;
    return f;
}

void BM_DdimMulti(benchmark::State& state) {
    auto& f = fx();
    Rng rng(3);
    Eigen::VectorXd z = f.ns.sigma(f.ns.t_max) * rng.normal_vec(2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(diff::ddim_multi(f.ns, *f.teacher, z, f.ns.t_max,
                                                  f.ns.t_min,
                                                  static_cast<int>(state.range(0)), 0));
    }
}
BENCHMARK(BM_DdimMulti)->Arg(4)->Arg(25)->Arg(100);

void BM_TrajectoryGeneration(benchmark::State& state) {
    auto& f = fx();
    Rng rng(4);
    Eigen::VectorXd noise = f.ns.sigma(f.ns.t_max) * rng.normal_vec(2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(traj::generate_trajectory(f.ns, *f.teacher, f.grid,
                                                           noise, 0));
    }
}
BENCHMARK(BM_TrajectoryGeneration);

void BM_RapmIteration(benchmark::State& state) {
    auto& f = fx();
    distill::DistillConfig cfg;
    cfg.grid = f.grid;
    cfg.slot_weights.assign(4, 1.0);
    cfg.iterations = 1 << 20;
    distill::RapmTrainer trainer(f.teacher, cfg, 5);
    long k = 0;
    for (auto _ : state) {
        trainer.iteration(f.store.records[static_cast<std::size_t>(k) % 32], k);
        ++k;
    }
}
BENCHMARK(BM_RapmIteration);

void BM_TeacherStep(benchmark::State& state) {
    auto& f = fx();
    models::MlpDenoiser model = *f.teacher;
    Rng trng(6);
    for (auto _ : state) {
        benchmark::DoNotOptimize(
            distill::train_teacher(model, f.gm, f.ns, 1, 32, 1e-3, trng));
    }
}
BENCHMARK(BM_TeacherStep);

void BM_Assignment(benchmark::State& state) {
    int n = static_cast<int>(state.range(0));
    Rng rng(7);
    Eigen::MatrixXd cost(n, n);
    for (Eigen::Index i = 0; i < cost.size(); ++i) cost(i) = rng.uniform(0.0, 1.0);
    std::vector<int> assign;
    for (auto _ : state) {
        benchmark::DoNotOptimize(metrics::solve_assignment(cost, assign));
    }
}
BENCHMARK(BM_Assignment)->Arg(128)->Arg(512)->Arg(1024);

void BM_Wasserstein2(benchmark::State& state) {
    auto& f = fx();
    int n = static_cast<int>(state.range(0));
    auto a = metrics::sample_data(f.gm, n, 8);
    auto b = metrics::sample_data(f.gm, n, 9);
    for (auto _ : state) {
        benchmark::DoNotOptimize(metrics::wasserstein2(a, b));
    }
}
BENCHMARK(BM_Wasserstein2)->Arg(256)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
