#pragma once

#include <json.hpp>
#include <stdexcept>
#include <string>

#include "rapm/diffusion.hpp"
#include "rapm/distill.hpp"

namespace rapm::cli {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One JSON document drives the whole pipeline; flags override single keys.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "run";

    struct Data {
        int components = 8;
        double radius = 2.0;
        double std_dev = 0.10;
        int families = 8;
    } data;

    struct Schedule {
        double t_min = 1e-3;
        double t_max = 1.0;
    } schedule;

    struct Model {
        int width = 64;
        int cond_dim = 8;
        int time_freqs = 16;
    } model;

    struct Grid {
        int segments = 4;
        int fine_steps = 25;
        double offset = -1.0;  // <= 0 selects one fine step
    } grid;

    struct Teacher {
        long iterations = 60000;
        int batch = 32;
        double lr = 1e-3;
    } teacher;

    struct Trajectories {
        int count = 1000;
    } trajectories;

    struct Distill {
        std::string method = "rapm";  // rapm | pcm | sfd
        long iterations = 20000;
        double lr_student = 1e-4;
        double lr_disc = 1e-4;
        double huber_delta = 0.1;
        double adv_weight = 0.05;
        bool relative = true;
        bool absolute = true;
        int lora_rank = 8;
        int disc_rank = 4;
        int disc_head_width = 64;
        bool sfd_immediate_updates = true;
        long eval_every = 1000;
        std::vector<double> slot_weights;  // empty: all 1.0
    } distill;

    struct Eval {
        int samples = 1024;
    } eval;

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::string& path);

    diff::NoiseSchedule noise_schedule() const;
    diff::GaussianMixture mixture() const;
    traj::CoarseGrid coarse_grid() const;
    distill::DistillConfig distill_config() const;
};

// FNV-1a over the canonical serialized form.
std::uint64_t config_hash(const RunConfig& cfg);

// Writes the resolved document (defaults filled in, overrides applied).
void persist_resolved(const RunConfig& cfg, const std::string& dir);

}  // namespace rapm::cli
