#include "config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

namespace rapm::cli {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
    if (data.components < 1) throw ConfigError("data.components must be >= 1");
    if (data.std_dev <= 0) throw ConfigError("data.std must be > 0");
    if (data.families < 0 || data.families > data.components) {
        throw ConfigError("data.families must lie in [0, components]");
    }
    if (!(schedule.t_min > 0 && schedule.t_min < schedule.t_max && schedule.t_max <= 1)) {
        throw ConfigError("schedule must satisfy 0 < t_min < t_max <= 1");
    }
    if (model.width < 1 || model.time_freqs < 1 || model.cond_dim < 1) {
        throw ConfigError("model sizes must be positive");
    }
    if (grid.segments < 1 || grid.fine_steps < 1) {
        throw ConfigError("grid.segments and grid.fine_steps must be >= 1");
    }
    if (teacher.iterations < 1 || teacher.batch < 1 || teacher.lr <= 0) {
        throw ConfigError("teacher settings must be positive");
    }
    if (trajectories.count < 1) throw ConfigError("trajectories.count must be >= 1");
    if (distill.method != "rapm" && distill.method != "pcm" && distill.method != "sfd") {
        throw ConfigError("distill.method must be rapm, pcm, or sfd");
    }
    if (eval.samples < 2) throw ConfigError("eval.samples must be >= 2");
    try {
        coarse_grid();
        distill_config().validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

json RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["out"] = out;
    j["data"] = {{"components", data.components},
                 {"radius", data.radius},
                 {"std", data.std_dev},
                 {"families", data.families}};
    j["schedule"] = {{"t_min", schedule.t_min}, {"t_max", schedule.t_max}};
    j["model"] = {{"width", model.width},
                  {"cond_dim", model.cond_dim},
                  {"time_freqs", model.time_freqs}};
    j["grid"] = {{"segments", grid.segments},
                 {"fine_steps", grid.fine_steps},
                 {"offset", grid.offset}};
    j["teacher"] = {{"iterations", teacher.iterations},
                    {"batch", teacher.batch},
                    {"lr", teacher.lr}};
    j["trajectories"] = {{"count", trajectories.count}};
    j["distill"] = {{"method", distill.method},
                    {"iterations", distill.iterations},
                    {"lr_student", distill.lr_student},
                    {"lr_disc", distill.lr_disc},
                    {"huber_delta", distill.huber_delta},
                    {"adv_weight", distill.adv_weight},
                    {"relative", distill.relative},
                    {"absolute", distill.absolute},
                    {"lora_rank", distill.lora_rank},
                    {"disc_rank", distill.disc_rank},
                    {"disc_head_width", distill.disc_head_width},
                    {"sfd_immediate_updates", distill.sfd_immediate_updates},
                    {"eval_every", distill.eval_every},
                    {"slot_weights", distill.slot_weights}};
    j["eval"] = {{"samples", eval.samples}};
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    // config_hash appears in persisted resolved documents; accepted, recomputed.
    reject_unknown(j, {"seed", "out", "data", "schedule", "model", "grid", "teacher",
                       "trajectories", "distill", "eval", "config_hash"},
                   "config root");
    RunConfig c;
    maybe(j, "seed", c.seed);
    maybe(j, "out", c.out);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        reject_unknown(d, {"components", "radius", "std", "families"}, "data");
        maybe(d, "components", c.data.components);
        maybe(d, "radius", c.data.radius);
        maybe(d, "std", c.data.std_dev);
        maybe(d, "families", c.data.families);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        reject_unknown(s, {"t_min", "t_max"}, "schedule");
        maybe(s, "t_min", c.schedule.t_min);
        maybe(s, "t_max", c.schedule.t_max);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        reject_unknown(m, {"width", "cond_dim", "time_freqs"}, "model");
        maybe(m, "width", c.model.width);
        maybe(m, "cond_dim", c.model.cond_dim);
        maybe(m, "time_freqs", c.model.time_freqs);
    }
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        reject_unknown(g, {"segments", "fine_steps", "offset"}, "grid");
        maybe(g, "segments", c.grid.segments);
        maybe(g, "fine_steps", c.grid.fine_steps);
        maybe(g, "offset", c.grid.offset);
    }
    if (j.contains("teacher")) {
        const auto& t = j.at("teacher");
        reject_unknown(t, {"iterations", "batch", "lr"}, "teacher");
        maybe(t, "iterations", c.teacher.iterations);
        maybe(t, "batch", c.teacher.batch);
        maybe(t, "lr", c.teacher.lr);
    }
    if (j.contains("trajectories")) {
        const auto& t = j.at("trajectories");
        reject_unknown(t, {"count"}, "trajectories");
        maybe(t, "count", c.trajectories.count);
    }
    if (j.contains("distill")) {
        const auto& d = j.at("distill");
        reject_unknown(d,
                       {"method", "iterations", "lr_student", "lr_disc", "huber_delta",
                        "adv_weight", "relative", "absolute", "lora_rank", "disc_rank",
                        "disc_head_width", "sfd_immediate_updates", "eval_every",
                        "slot_weights"},
                       "distill");
        maybe(d, "method", c.distill.method);
        maybe(d, "iterations", c.distill.iterations);
        maybe(d, "lr_student", c.distill.lr_student);
        maybe(d, "lr_disc", c.distill.lr_disc);
        maybe(d, "huber_delta", c.distill.huber_delta);
        maybe(d, "adv_weight", c.distill.adv_weight);
        maybe(d, "relative", c.distill.relative);
        maybe(d, "absolute", c.distill.absolute);
        maybe(d, "lora_rank", c.distill.lora_rank);
        maybe(d, "disc_rank", c.distill.disc_rank);
        maybe(d, "disc_head_width", c.distill.disc_head_width);
        maybe(d, "sfd_immediate_updates", c.distill.sfd_immediate_updates);
        maybe(d, "eval_every", c.distill.eval_every);
        maybe(d, "slot_weights", c.distill.slot_weights);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        reject_unknown(e, {"samples"}, "eval");
        maybe(e, "samples", c.eval.samples);
    }
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return from_json(j);
}

diff::NoiseSchedule RunConfig::noise_schedule() const {
    diff::NoiseSchedule ns;
    ns.t_min = schedule.t_min;
    ns.t_max = schedule.t_max;
    return ns;
}

diff::GaussianMixture RunConfig::mixture() const {
    return diff::GaussianMixture::ring(data.components, data.radius, data.std_dev,
                                       data.families);
}

traj::CoarseGrid RunConfig::coarse_grid() const {
    return traj::CoarseGrid::uniform(noise_schedule(), grid.segments, grid.fine_steps,
                                     grid.offset);
}

distill::DistillConfig RunConfig::distill_config() const {
    distill::DistillConfig d;
    d.grid = coarse_grid();
    d.slot_weights = distill.slot_weights.empty()
                         ? std::vector<double>(static_cast<std::size_t>(grid.segments), 1.0)
                         : distill.slot_weights;
    d.huber_delta = distill.huber_delta;
    d.adv_weight = distill.adv_weight;
    d.relative = distill.relative;
    d.absolute = distill.absolute;
    d.lr_student = distill.lr_student;
    d.lr_disc = distill.lr_disc;
    d.iterations = distill.iterations;
    d.seed = seed;
    d.lora_rank = distill.lora_rank;
    d.disc_rank = distill.disc_rank;
    d.disc_head_width = distill.disc_head_width;
    d.sfd_immediate_updates = distill.sfd_immediate_updates;
    d.eval_every = distill.eval_every;
    return d;
}

std::uint64_t config_hash(const RunConfig& cfg) {
    std::string s = cfg.to_json().dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void persist_resolved(const RunConfig& cfg, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream f(dir + "/config.resolved.json");
    json j = cfg.to_json();
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(config_hash(cfg)));
    j["config_hash"] = hex;
    f << j.dump(2) << "\n";
}

}  // namespace rapm::cli
