#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "config.hpp"
#include "rapm/distill.hpp"
#include "rapm/metrics.hpp"
#include "svg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rapm;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
    bool oracle = false;
};

cli::RunConfig resolve(const Common& c) {
    cli::RunConfig cfg =
        c.config_path.empty() ? cli::RunConfig{} : cli::RunConfig::load(c.config_path);
    if (c.seed_set) cfg.seed = c.seed;
    if (!c.out.empty()) cfg.out = c.out;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, Common& c, bool with_oracle) {
    cmd->add_option("--config", c.config_path, "JSON configuration file");
    cmd->add_option("--seed", c.seed, "override the config seed")
        ->each([&c](const std::string&) { c.seed_set = true; });
    cmd->add_option("--out", c.out, "override the output directory");
    if (with_oracle) {
        cmd->add_flag("--oracle", c.oracle,
                      "use the exact mixture score instead of a trained model");
    }
}

std::shared_ptr<models::MlpDenoiser> load_teacher(const cli::RunConfig& cfg) {
    std::string path = cfg.out + "/teacher.ckpt";
    if (!fs::exists(path)) {
        throw cli::ConfigError("missing " + path + " (run teacher-train first)");
    }
    return models::load_checkpoint(path).base;
}

std::unique_ptr<diff::Denoiser> pick_sampler(const cli::RunConfig& cfg, bool oracle,
                                             std::shared_ptr<models::MlpDenoiser>& keep) {
    if (oracle) {
        return std::make_unique<diff::OracleDenoiser>(cfg.mixture(), cfg.noise_schedule());
    }
    std::string student_path = cfg.out + "/student.ckpt";
    if (fs::exists(student_path)) {
        auto ck = models::load_checkpoint(student_path);
        keep = ck.base;
        if (ck.student) return std::make_unique<models::LoraDenoiser>(*ck.student);
        return std::make_unique<models::MlpDenoiser>(*ck.base);
    }
    keep = load_teacher(cfg);
    return std::make_unique<models::MlpDenoiser>(*keep);
}

void write_loss_csv(const std::string& path, const std::vector<double>& losses) {
    std::ofstream f(path);
    f << "iter,dsm\n";
    f.precision(17);
    for (std::size_t i = 0; i < losses.size(); ++i) f << i << "," << losses[i] << "\n";
}

int cmd_teacher_train(const Common& c) {
    auto cfg = resolve(c);
    cli::persist_resolved(cfg, cfg.out);
    if (c.oracle) {
        std::cout << "oracle teacher selected; nothing to train\n";
        return 0;
    }
    auto ns = cfg.noise_schedule();
    auto gm = cfg.mixture();
    Rng init(sub_seed(cfg.seed, 0x7E4C));
    models::MlpDenoiser teacher(gm.dim(), cfg.model.width, gm.num_labels(),
                                cfg.model.cond_dim, cfg.model.time_freqs, init, ns);
    Rng trng(sub_seed(cfg.seed, 0x7E4D));
    auto losses = distill::train_teacher(teacher, gm, ns, cfg.teacher.iterations,
                                         cfg.teacher.batch, cfg.teacher.lr, trng);
    for (double l : losses) {
        if (!std::isfinite(l)) {
            std::cerr << "non-finite training loss\n";
            return kExitNumerical;
        }
    }
    models::save_checkpoint(teacher, cfg.out + "/teacher.ckpt");
    write_loss_csv(cfg.out + "/teacher_loss.csv", losses);
    std::cout << "teacher checkpoint written to " << cfg.out << "/teacher.ckpt\n";
    return 0;
}

int cmd_traj_gen(const Common& c) {
    auto cfg = resolve(c);
    cli::persist_resolved(cfg, cfg.out);
    auto ns = cfg.noise_schedule();
    auto grid = cfg.coarse_grid();
    std::shared_ptr<models::MlpDenoiser> teacher;
    std::unique_ptr<diff::Denoiser> oracle;
    const diff::Denoiser* den;
    int labels;
    if (c.oracle) {
        oracle = std::make_unique<diff::OracleDenoiser>(cfg.mixture(), ns);
        den = oracle.get();
        labels = cfg.mixture().num_labels();
    } else {
        teacher = load_teacher(cfg);
        den = teacher.get();
        labels = teacher->num_labels();
    }
    traj::TrajectoryStore store;
    store.grid = grid;
    for (int i = 0; i < cfg.trajectories.count; ++i) {
        Rng rng(sub_seed(cfg.seed, 0x54A0 + static_cast<std::uint64_t>(i)));
        int cond = labels > 0 ? rng.uniform_int(labels) : -1;
        Eigen::VectorXd noise = ns.sigma(ns.t_max) * rng.normal_vec(den->dim());
        store.append(traj::generate_trajectory(ns, *den, grid, noise, cond));
    }
    traj::store_write(store, cfg.out + "/trajectories.bin");
    std::cout << store.records.size() << " trajectories written to " << cfg.out
              << "/trajectories.bin\n";
    return 0;
}

int cmd_distill(const Common& c, const std::string& method_flag, bool relative_only,
                bool absolute_only) {
    auto cfg = resolve(c);
    if (!method_flag.empty()) cfg.distill.method = method_flag;
    if (relative_only) cfg.distill.absolute = false;
    if (absolute_only) cfg.distill.relative = false;
    cfg.validate();
    cli::persist_resolved(cfg, cfg.out);
    if (c.oracle) {
        throw cli::ConfigError(
            "distillation trains adapters on a parametric teacher; --oracle applies to "
            "teacher-train, traj-gen, sample, and eval");
    }

    auto ns = cfg.noise_schedule();
    auto gm = cfg.mixture();
    auto teacher = load_teacher(cfg);
    auto dcfg = cfg.distill_config();
    auto grid = dcfg.grid;
    int labels = teacher->num_labels();
    int eval_n = std::min(512, cfg.eval.samples);
    distill::EvalFn eval_fn = [&](const diff::Denoiser& s) {
        auto ss = metrics::sample_student(ns, s, grid, eval_n,
                                          sub_seed(cfg.seed, 0xE7A1), labels);
        auto dd = metrics::sample_data(gm, eval_n, sub_seed(cfg.seed, 0xE7A2));
        return metrics::wasserstein2(dd, ss).value;
    };

    distill::TrainReport report;
    std::uint64_t init_seed = sub_seed(cfg.seed, 0xD157);
    if (cfg.distill.method == "pcm") {
        distill::PcmTrainer trainer(teacher, dcfg, init_seed);
        report = distill::train_pcm(trainer, gm, eval_fn);
        if (!report.aborted) {
            models::save_checkpoint(trainer.student(), cfg.out + "/student.ckpt");
        }
    } else {
        std::string spath = cfg.out + "/trajectories.bin";
        if (!fs::exists(spath)) {
            throw cli::ConfigError("missing " + spath + " (run traj-gen first)");
        }
        auto store = traj::store_read(spath);
        if (!store.grid.same_times(dcfg.grid)) {
            throw cli::ConfigError("trajectory store grid differs from the config grid");
        }
        if (cfg.distill.method == "sfd") {
            distill::SfdTrainer trainer(teacher, dcfg, init_seed);
            report = distill::train_sfd(trainer, store, eval_fn);
            if (!report.aborted) {
                models::save_checkpoint(trainer.student(), cfg.out + "/student.ckpt");
            }
        } else {
            distill::RapmTrainer trainer(teacher, dcfg, init_seed);
            report = distill::train_rapm(trainer, store, eval_fn);
            if (!report.aborted) {
                models::save_checkpoint(trainer.student(), cfg.out + "/student.ckpt");
            }
        }
    }
    report.write_csv(cfg.out + "/report.csv");
    if (report.aborted) {
        std::cerr << "training aborted on a non-finite loss; diagnostic row kept\n";
        return kExitNumerical;
    }
    std::cout << "student checkpoint and report written to " << cfg.out << "\n";
    return 0;
}

int cmd_sample(const Common& c) {
    auto cfg = resolve(c);
    cli::persist_resolved(cfg, cfg.out);
    auto ns = cfg.noise_schedule();
    auto grid = cfg.coarse_grid();
    std::shared_ptr<models::MlpDenoiser> keep;
    auto den = pick_sampler(cfg, c.oracle, keep);
    int labels = c.oracle ? cfg.mixture().num_labels()
                          : (keep ? keep->num_labels() : cfg.mixture().num_labels());
    auto set = metrics::sample_student(ns, *den, grid, cfg.eval.samples,
                                       sub_seed(cfg.seed, 0x5A3B), labels);
    std::ofstream f(cfg.out + "/samples.csv");
    f << "x,y\n";
    f.precision(17);
    for (int i = 0; i < set.count(); ++i) {
        f << set.points(i, 0) << "," << set.points(i, 1) << "\n";
    }
    std::cout << set.count() << " samples written to " << cfg.out << "/samples.csv\n";
    return 0;
}

int cmd_eval(const Common& c) {
    auto cfg = resolve(c);
    cli::persist_resolved(cfg, cfg.out);
    auto ns = cfg.noise_schedule();
    auto gm = cfg.mixture();
    auto grid = cfg.coarse_grid();
    std::shared_ptr<models::MlpDenoiser> keep;
    auto den = pick_sampler(cfg, c.oracle, keep);
    int labels = c.oracle ? gm.num_labels()
                          : (keep ? keep->num_labels() : gm.num_labels());
    auto samples = metrics::sample_student(ns, *den, grid, cfg.eval.samples,
                                           sub_seed(cfg.seed, 0xEA01), labels);
    auto data = metrics::sample_data(gm, cfg.eval.samples, sub_seed(cfg.seed, 0xEA02));
    auto w2 = metrics::wasserstein2(data, samples);
    auto mmd = metrics::mmd_rbf(data, samples);

    json j;
    j["run_id"] = fs::path(cfg.out).filename().string();
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(cli::config_hash(cfg)));
    j["config_hash"] = hex;
    j["n"] = cfg.eval.samples;
    j["seed"] = cfg.seed;
    j["metrics"] = {{"w2", w2.value}, {"mmd", mmd.value}};
    std::ofstream f(cfg.out + "/metrics.json");
    f << j.dump(2) << "\n";
    std::cout << "w2=" << w2.value << " mmd=" << mmd.value << " -> " << cfg.out
              << "/metrics.json\n";
    return 0;
}

cli::Series series_from(const distill::TrainReport& rep, const std::string& run,
                        double (*pick)(const distill::ReportRow&), bool checkpoints_only) {
    cli::Series s;
    s.label = run;
    for (const auto& r : rep.rows) {
        double v = pick(r);
        if (checkpoints_only && !std::isfinite(v)) continue;
        s.x.push_back(static_cast<double>(r.iter));
        s.y.push_back(v);
    }
    return s;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out_flag) {
    if (dirs.empty()) throw cli::ConfigError("report needs at least one run directory");
    for (const auto& d : dirs) {
        if (!fs::exists(d + "/report.csv")) {
            throw cli::ConfigError("missing " + d + "/report.csv");
        }
    }
    std::string out = out_flag.empty() ? dirs.front() : out_flag;
    fs::create_directories(out);

    struct Metric {
        const char* name;
        double (*pick)(const distill::ReportRow&);
        bool checkpoints_only;
    };
    const Metric metrics[] = {
        {"huber_rel", [](const distill::ReportRow& r) { return r.huber_rel; }, false},
        {"huber_abs", [](const distill::ReportRow& r) { return r.huber_abs; }, false},
        {"adv_rel", [](const distill::ReportRow& r) { return r.adv_rel; }, false},
        {"adv_abs", [](const distill::ReportRow& r) { return r.adv_abs; }, false},
        {"disc1", [](const distill::ReportRow& r) { return r.disc1; }, false},
        {"disc2", [](const distill::ReportRow& r) { return r.disc2; }, false},
        {"eval_metric", [](const distill::ReportRow& r) { return r.eval_metric; }, true},
    };
    for (const auto& m : metrics) {
        std::vector<cli::Series> all;
        for (const auto& d : dirs) {
            auto rep = distill::TrainReport::read_csv(d + "/report.csv");
            auto s = series_from(rep, fs::path(d).filename().string(), m.pick,
                                 m.checkpoints_only);
            if (!s.x.empty()) all.push_back(std::move(s));
        }
        if (all.empty()) continue;
        cli::write_svg(out + "/" + m.name + ".svg",
                       cli::render_line_chart(m.name, "iteration", m.name, all));
    }
    std::cout << "plots written to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale diffusion distillation laboratory"};
    app.require_subcommand(1);

    Common c_teacher, c_traj, c_distill, c_sample, c_eval;
    std::string method_flag;
    bool relative_only = false, absolute_only = false;
    std::vector<std::string> report_dirs;
    std::string report_out;

    auto* teacher = app.add_subcommand("teacher-train", "pretrain the base denoiser");
    add_common(teacher, c_teacher, true);
    auto* trajgen = app.add_subcommand("traj-gen", "precompute teacher trajectories");
    add_common(trajgen, c_traj, true);
    auto* dist = app.add_subcommand("distill", "train a few-step student");
    add_common(dist, c_distill, true);
    dist->add_option("--method", method_flag, "rapm | pcm | sfd");
    dist->add_flag("--relative-only", relative_only, "disable the absolute term");
    dist->add_flag("--absolute-only", absolute_only, "disable the relative term");
    auto* sample = app.add_subcommand("sample", "draw samples from the latest model");
    add_common(sample, c_sample, true);
    auto* eval = app.add_subcommand("eval", "score samples against fresh data");
    add_common(eval, c_eval, true);
    auto* report = app.add_subcommand("report", "render SVG curves from run reports");
    report->add_option("dirs", report_dirs, "run directories (several overlay)");
    report->add_option("--out", report_out, "directory for the plots");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (teacher->parsed()) return cmd_teacher_train(c_teacher);
        if (trajgen->parsed()) return cmd_traj_gen(c_traj);
        if (dist->parsed()) {
            return cmd_distill(c_distill, method_flag, relative_only, absolute_only);
        }
        if (sample->parsed()) return cmd_sample(c_sample);
        if (eval->parsed()) return cmd_eval(c_eval);
        if (report->parsed()) return cmd_report(report_dirs, report_out);
    } catch (const cli::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const distill::NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return 0;
}
