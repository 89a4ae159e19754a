#include "rapm/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace rapm::distill {

void DistillConfig::validate() const {
    if (!relative && !absolute) {
        throw std::invalid_argument("at least one of relative/absolute must be enabled");
    }
    if (slot_weights.size() != static_cast<std::size_t>(grid.segments())) {
        throw std::invalid_argument("slot_weights length must equal the segment count");
    }
    for (double w : slot_weights) {
        if (w < 0.0) throw std::invalid_argument("slot weights must be >= 0");
    }
    if (!(huber_delta > 0.0)) throw std::invalid_argument("huber_delta must be > 0");
    if (adv_weight < 0.0) throw std::invalid_argument("adv_weight must be >= 0");
    if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
}

double DistillConfig::adv_weight_at(long k) const {
    long warm = std::max<long>(1, iterations / 10);
    double ramp = std::min(1.0, static_cast<double>(k + 1) / static_cast<double>(warm));
    return adv_weight * ramp;
}

ad::Value huber(const ad::Value& a, const ad::Value& b, double delta) {
    if (!(delta > 0.0)) throw std::invalid_argument("huber: delta must be > 0");
    ad::Value d = ad::sub(a, b);
    ad::Value sq = ad::sum(ad::mul(d, d));
    ad::Value inner = ad::add_scalar(ad::scale(sq, 1.0 / (delta * delta)), 1.0);
    return ad::add_scalar(ad::scale(ad::sqrt_ew(inner), delta * delta), -delta * delta);
}

double huber_value(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double delta) {
    double sq = (a - b).squaredNorm();
    return delta * delta * (std::sqrt(1.0 + sq / (delta * delta)) - 1.0);
}

AdvLosses adversarial_losses(ad::Tape& tape, const models::Discriminator& d,
                             const ad::Value& fake, const ad::Value& real, double t_n) {
    ad::Value s_real = d.score(tape, real, t_n);
    ad::Value s_fake_detached = d.score(tape, ad::detach(fake), t_n);
    ad::Value disc = ad::add(ad::relu(ad::add_scalar(ad::neg(s_real), 1.0)),
                             ad::relu(ad::add_scalar(s_fake_detached, 1.0)));
    ad::Value gen = ad::neg(d.score(tape, fake, t_n));
    return {disc, gen};
}

ad::Value ddim_step(ad::Tape& tape, const diff::NoiseSchedule& ns,
                    const diff::TrainableDenoiser& model, const ad::Value& z,
                    double t_from, double t_to, int cond) {
    ns.check_time(t_from);
    ns.check_time(t_to);
    if (t_to > t_from) {
        throw diff::TimeRangeError("ddim_step: t_to exceeds t_from");
    }
    if (t_to == t_from) return z;
    const double af = ns.alpha(t_from), sf = ns.sigma(t_from);
    const double at = ns.alpha(t_to), st = ns.sigma(t_to);
    // Same xhat grouping as the plain solver: exact where af underflows.
    ad::Value xhat = model.predict_x(tape, z, t_from, {cond});
    ad::Value eps = ad::scale(ad::sub(z, ad::scale(xhat, af)), 1.0 / sf);
    return ad::add(ad::scale(xhat, at), ad::scale(eps, st));
}

// ------------------------------------------------------------------ report

void TrainReport::write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << "iter,huber_rel,adv_rel,huber_abs,adv_abs,disc1,disc2,eval_metric\n";
    char buf[64];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        f << buf;
    };
    for (const ReportRow& r : rows) {
        f << r.iter << ',';
        put(r.huber_rel);
        f << ',';
        put(r.adv_rel);
        f << ',';
        put(r.huber_abs);
        f << ',';
        put(r.adv_abs);
        f << ',';
        put(r.disc1);
        f << ',';
        put(r.disc2);
        f << ',';
        put(r.eval_metric);
        f << '\n';
    }
}

TrainReport TrainReport::read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    TrainReport rep;
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error(path + " is empty");
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        ReportRow r;
        auto next = [&]() {
            if (!std::getline(ss, field, ',')) {
                throw std::runtime_error("malformed report row: " + line);
            }
            return std::stod(field);
        };
        r.iter = static_cast<long>(next());
        r.huber_rel = next();
        r.adv_rel = next();
        r.huber_abs = next();
        r.adv_abs = next();
        r.disc1 = next();
        r.disc2 = next();
        r.eval_metric = next();
        rep.rows.push_back(r);
    }
    return rep;
}

// ------------------------------------------------------------------ trainers

namespace {

ad::Value zero_scalar() { return ad::constant(ad::Mat::Zero(1, 1)); }

bool row_is_finite(const ReportRow& r) {
    return std::isfinite(r.huber_rel) && std::isfinite(r.adv_rel) &&
           std::isfinite(r.huber_abs) && std::isfinite(r.adv_abs) &&
           std::isfinite(r.disc1) && std::isfinite(r.disc2);
}

}  // namespace

RapmTrainer::RapmTrainer(std::shared_ptr<const models::MlpDenoiser> teacher,
                         DistillConfig cfg, std::uint64_t init_seed)
    : teacher_(teacher),
      cfg_(std::move(cfg)),
      student_([&] {
          Rng r(sub_seed(init_seed, 1));
          return models::LoraDenoiser::attach(teacher, cfg_.lora_rank, r);
      }()),
      disc1_([&] {
          Rng r(sub_seed(init_seed, 2));
          return models::Discriminator(teacher, cfg_.disc_rank, cfg_.disc_head_width, r);
      }()),
      disc2_([&] {
          Rng r(sub_seed(init_seed, 3));
          return models::Discriminator(teacher, cfg_.disc_rank, cfg_.disc_head_width, r);
      }()) {
    cfg_.validate();
    opt_student_.lr = cfg_.lr_student;
    opt_disc1_.lr = cfg_.lr_disc;
    opt_disc2_.lr = cfg_.lr_disc;
}

ReportRow RapmTrainer::iteration(const traj::TeacherTrajectory& trajectory, long k) {
    const auto& ns = teacher_->schedule();
    const auto& grid = cfg_.grid;
    const int N = grid.segments();
    if (trajectory.positions.cols() != N + 1) {
        throw std::invalid_argument("trajectory grid does not match config grid");
    }
    const int cond = static_cast<int>(trajectory.condition);
    const double lambda = cfg_.adv_weight_at(k);
    const bool use_adv = cfg_.adv_weight > 0.0;

    ad::Tape tape;
    student_.bind(tape);
    if (use_adv) {
        disc1_.bind(tape);
        disc2_.bind(tape);
    }

    ReportRow row;
    row.iter = k;
    ad::Value student_loss = zero_scalar();
    ad::Value disc_loss = zero_scalar();
    ad::Value z_cur = ad::constant(trajectory.position(N));  // z_N = z~_N

    for (int n = N - 1; n >= 0; --n) {
        const double t_hi = grid.times[static_cast<std::size_t>(n + 1)];
        const double t_lo = grid.times[static_cast<std::size_t>(n)];

        ad::Value z_phi = ddim_step(tape, ns, student_, z_cur, t_hi, t_lo, cond);

        if (cfg_.relative) {
            // Relative target: teacher nudge from the stored position, one
            // student step, then the 1st detach freezes it as an anchor.
            Eigen::VectorXd mid = diff::ddim_step(ns, *teacher_, trajectory.position(n + 1),
                                                  t_hi, t_hi - grid.offset, cond);
            ad::Value zhat_phi = ddim_step(tape, ns, student_, ad::constant(mid),
                                           t_hi - grid.offset, t_lo, cond);
            ad::Value zhat = ad::detach(zhat_phi);

            ad::Value h = huber(z_phi, zhat, cfg_.huber_delta);
            row.slot_huber_rel.push_back(h.scalar());
            row.huber_rel += h.scalar();
            student_loss = ad::add(student_loss, h);
            if (use_adv) {
                AdvLosses adv = adversarial_losses(tape, disc1_, z_phi, zhat, t_lo);
                row.adv_rel += adv.gen.scalar();
                row.disc1 += adv.disc.scalar();
                student_loss = ad::add(student_loss, ad::scale(adv.gen, lambda));
                disc_loss = ad::add(disc_loss, adv.disc);
            }
        }

        if (cfg_.absolute) {
            const double wn = cfg_.slot_weights[static_cast<std::size_t>(n)];
            ad::Value ztilde = ad::constant(trajectory.position(n));
            ad::Value h = huber(z_phi, ztilde, cfg_.huber_delta);
            row.slot_huber_abs.push_back(h.scalar());
            row.huber_abs += wn * h.scalar();
            student_loss = ad::add(student_loss, ad::scale(h, wn));
            if (use_adv) {
                AdvLosses adv = adversarial_losses(tape, disc2_, z_phi, ztilde, t_lo);
                row.adv_abs += wn * adv.gen.scalar();
                row.disc2 += adv.disc.scalar();
                student_loss = ad::add(student_loss, ad::scale(adv.gen, wn * lambda));
                disc_loss = ad::add(disc_loss, adv.disc);
            }
        }

        // 2nd detach: position matching stays decoupled across slots.
        z_cur = ad::detach(z_phi);
    }

    row.finite = row_is_finite(row);
    if (!row.finite) return row;

    if (k % 2 == 0) {
        if (use_adv) {
            tape.backward(disc_loss);
            ad::adam_step(disc1_.trainable_params(), disc1_.trainable_grads(tape),
                          opt_disc1_);
            ad::adam_step(disc2_.trainable_params(), disc2_.trainable_grads(tape),
                          opt_disc2_);
        }
    } else {
        tape.backward(student_loss);
        ad::adam_step(student_.trainable_params(), student_.trainable_grads(tape),
                      opt_student_);
    }
    return row;
}

PcmTrainer::PcmTrainer(std::shared_ptr<const models::MlpDenoiser> teacher,
                       DistillConfig cfg, std::uint64_t init_seed)
    : teacher_(teacher),
      cfg_(std::move(cfg)),
      student_([&] {
          Rng r(sub_seed(init_seed, 1));
          return models::LoraDenoiser::attach(teacher, cfg_.lora_rank, r);
      }()),
      disc1_([&] {
          Rng r(sub_seed(init_seed, 2));
          return models::Discriminator(teacher, cfg_.disc_rank, cfg_.disc_head_width, r);
      }()),
      rng_(sub_seed(init_seed, 4)) {
    cfg_.validate();
    opt_student_.lr = cfg_.lr_student;
    opt_disc_.lr = cfg_.lr_disc;
}

ReportRow PcmTrainer::iteration(const Eigen::VectorXd& x, int label, long k) {
    const auto& ns = teacher_->schedule();
    const auto& grid = cfg_.grid;
    const double lambda = cfg_.adv_weight_at(k);
    const bool use_adv = cfg_.adv_weight > 0.0;

    const double t = rng_.uniform(ns.t_min, ns.t_max);
    Eigen::VectorXd zt = diff::forward_sample(ns, x, t, rng_.normal_vec(teacher_->dim()));

    // Slot containing t - Delta; degenerate draws clamp to the lowest slot.
    double mid = t - grid.offset;
    int n = 0;
    if (mid <= grid.times.front()) {
        mid = grid.times.front();
    } else {
        auto it = std::upper_bound(grid.times.begin(), grid.times.end(), mid);
        n = static_cast<int>(it - grid.times.begin()) - 1;
        n = std::min(n, grid.segments() - 1);
    }
    const double t_lo = grid.times[static_cast<std::size_t>(n)];

    ad::Tape tape;
    student_.bind(tape);
    if (use_adv) disc1_.bind(tape);

    Eigen::VectorXd zhat_mid = diff::ddim_step(ns, *teacher_, zt, t, mid, label);
    ad::Value zhat_phi =
        ddim_step(tape, ns, student_, ad::constant(zhat_mid), mid, t_lo, label);
    ad::Value zhat = ad::detach(zhat_phi);
    ad::Value z_phi = ddim_step(tape, ns, student_, ad::constant(zt), t, t_lo, label);

    ReportRow row;
    row.iter = k;
    ad::Value h = huber(z_phi, zhat, cfg_.huber_delta);
    row.huber_rel = h.scalar();
    row.slot_huber_rel.push_back(h.scalar());
    ad::Value student_loss = h;
    ad::Value disc_loss = zero_scalar();
    if (use_adv) {
        AdvLosses adv = adversarial_losses(tape, disc1_, z_phi, zhat, t_lo);
        row.adv_rel = adv.gen.scalar();
        row.disc1 = adv.disc.scalar();
        student_loss = ad::add(student_loss, ad::scale(adv.gen, lambda));
        disc_loss = adv.disc;
    }

    row.finite = row_is_finite(row);
    if (!row.finite) return row;

    if (k % 2 == 0) {
        if (use_adv) {
            tape.backward(disc_loss);
            ad::adam_step(disc1_.trainable_params(), disc1_.trainable_grads(tape),
                          opt_disc_);
        }
    } else {
        tape.backward(student_loss);
        ad::adam_step(student_.trainable_params(), student_.trainable_grads(tape),
                      opt_student_);
    }
    return row;
}

SfdTrainer::SfdTrainer(std::shared_ptr<const models::MlpDenoiser> teacher,
                       DistillConfig cfg, std::uint64_t init_seed)
    : teacher_(teacher),
      cfg_(std::move(cfg)),
      student_([&] {
          Rng r(sub_seed(init_seed, 1));
          return models::LoraDenoiser::attach(teacher, cfg_.lora_rank, r);
      }()) {
    cfg_.validate();
    opt_student_.lr = cfg_.lr_student;
}

ReportRow SfdTrainer::iteration(const traj::TeacherTrajectory& trajectory, long k) {
    const auto& ns = teacher_->schedule();
    const auto& grid = cfg_.grid;
    const int N = grid.segments();
    const int cond = static_cast<int>(trajectory.condition);

    ReportRow row;
    row.iter = k;

    if (cfg_.sfd_immediate_updates) {
        Eigen::VectorXd z_cur = trajectory.position(N);
        for (int n = N - 1; n >= 0; --n) {
            ad::Tape tape;
            student_.bind(tape);
            ad::Value z_phi =
                ddim_step(tape, ns, student_, ad::constant(z_cur),
                          grid.times[static_cast<std::size_t>(n + 1)],
                          grid.times[static_cast<std::size_t>(n)], cond);
            ad::Value h = huber(z_phi, ad::constant(trajectory.position(n)),
                                cfg_.huber_delta);
            row.slot_huber_abs.push_back(h.scalar());
            row.huber_abs += h.scalar();
            if (!std::isfinite(h.scalar())) {
                row.finite = false;
                return row;
            }
            tape.backward(h);
            ad::adam_step(student_.trainable_params(), student_.trainable_grads(tape),
                          opt_student_);
            z_cur = z_phi.data;  // detached by leaving the per-slot tape behind
        }
    } else {
        ad::Tape tape;
        student_.bind(tape);
        ad::Value loss = zero_scalar();
        ad::Value z_cur = ad::constant(trajectory.position(N));
        for (int n = N - 1; n >= 0; --n) {
            ad::Value z_phi = ddim_step(tape, ns, student_, z_cur,
                                        grid.times[static_cast<std::size_t>(n + 1)],
                                        grid.times[static_cast<std::size_t>(n)], cond);
            ad::Value h = huber(z_phi, ad::constant(trajectory.position(n)),
                                cfg_.huber_delta);
            row.slot_huber_abs.push_back(h.scalar());
            row.huber_abs += h.scalar();
            loss = ad::add(loss, h);
            z_cur = ad::detach(z_phi);
        }
        if (!std::isfinite(row.huber_abs)) {
            row.finite = false;
            return row;
        }
        tape.backward(loss);
        ad::adam_step(student_.trainable_params(), student_.trainable_grads(tape),
                      opt_student_);
    }
    return row;
}

// ------------------------------------------------------------------ loops

namespace {

template <typename Step>
TrainReport run_loop(const DistillConfig& cfg, const diff::Denoiser& student,
                     const EvalFn& eval, Step step) {
    TrainReport report;
    report.rows.reserve(static_cast<std::size_t>(cfg.iterations));
    for (long k = 0; k < cfg.iterations; ++k) {
        ReportRow row = step(k);
        bool last = (k + 1 == cfg.iterations);
        if (row.finite && eval &&
            (last || (cfg.eval_every > 0 && (k + 1) % cfg.eval_every == 0))) {
            row.eval_metric = eval(student);
        }
        bool finite = row.finite;
        report.rows.push_back(std::move(row));
        if (!finite) {
            report.aborted = true;
            break;
        }
    }
    return report;
}

}  // namespace

TrainReport train_rapm(RapmTrainer& trainer, const traj::TrajectoryStore& store,
                       const EvalFn& eval) {
    if (store.records.empty()) throw std::invalid_argument("empty trajectory store");
    Rng rng(sub_seed(trainer.config().seed, 0xA11));
    return run_loop(trainer.config(), trainer.student(), eval, [&](long k) {
        const auto& rec =
            store.records[static_cast<std::size_t>(rng.uniform_int(
                static_cast<int>(store.records.size())))];
        return trainer.iteration(rec, k);
    });
}

TrainReport train_sfd(SfdTrainer& trainer, const traj::TrajectoryStore& store,
                      const EvalFn& eval) {
    if (store.records.empty()) throw std::invalid_argument("empty trajectory store");
    Rng rng(sub_seed(trainer.config().seed, 0xA11));
    return run_loop(trainer.config(), trainer.student(), eval, [&](long k) {
        const auto& rec =
            store.records[static_cast<std::size_t>(rng.uniform_int(
                static_cast<int>(store.records.size())))];
        return trainer.iteration(rec, k);
    });
}

TrainReport train_pcm(PcmTrainer& trainer, const diff::GaussianMixture& data,
                      const EvalFn& eval) {
    Rng rng(sub_seed(trainer.config().seed, 0xA12));
    return run_loop(trainer.config(), trainer.student(), eval, [&](long k) {
        auto [x, label] = data.sample_labeled(rng);
        return trainer.iteration(x, label, k);
    });
}

std::vector<double> train_teacher(models::MlpDenoiser& model,
                                  const diff::GaussianMixture& data,
                                  const diff::NoiseSchedule& ns, long iterations,
                                  int batch, double lr, Rng& rng) {
    ad::AdamState opt;
    opt.lr = lr;
    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(iterations));
    const int d = model.dim();
    for (long k = 0; k < iterations; ++k) {
        ad::Mat x(d, batch), noise(d, batch);
        std::vector<int> labels(static_cast<std::size_t>(batch));
        for (int j = 0; j < batch; ++j) {
            auto [xx, label] = data.sample_labeled(rng);
            x.col(j) = xx;
            noise.col(j) = rng.normal_vec(d);
            labels[static_cast<std::size_t>(j)] = label;
        }
        double t = rng.uniform(ns.t_min, ns.t_max);
        ad::Tape tape;
        model.bind(tape);
        ad::Value loss =
            ad::scale(diff::dsm_loss(tape, model, ns, x, t, noise, labels),
                      1.0 / batch);
        losses.push_back(loss.scalar());
        if (!std::isfinite(loss.scalar())) {
            throw NumericalError("teacher training produced a non-finite loss at iter " +
                                 std::to_string(k));
        }
        tape.backward(loss);
        ad::adam_step(model.trainable_params(), model.trainable_grads(tape), opt);
    }
    return losses;
}

}  // namespace rapm::distill
