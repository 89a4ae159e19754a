#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "rapm/autodiff.hpp"
#include "rapm/diffusion.hpp"
#include "rapm/models.hpp"
#include "rapm/trajectories.hpp"

// The three distillation trainers: trajectory matching with relative and
// absolute targets plus two critics; the noisy-real-data baseline with one
// critic; and plain absolute matching with per-slot updates.
namespace rapm::distill {

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DistillConfig {
    traj::CoarseGrid grid;
    std::vector<double> slot_weights;  // w_n, one per slot
    double huber_delta = 0.1;
    double adv_weight = 0.05;  // generator-side weight, linear warm-up first 10%
    bool relative = true;
    bool absolute = true;
    double lr_student = 1e-4;
    double lr_disc = 1e-4;
    long iterations = 20000;
    std::uint64_t seed = 0;
    int lora_rank = 8;
    int disc_rank = 4;
    int disc_head_width = 64;
    bool sfd_immediate_updates = true;
    long eval_every = 500;

    void validate() const;
    double adv_weight_at(long k) const;
};

struct ReportRow {
    long iter = 0;
    double huber_rel = 0, adv_rel = 0, huber_abs = 0, adv_abs = 0;
    double disc1 = 0, disc2 = 0;
    double eval_metric = std::numeric_limits<double>::quiet_NaN();
    bool finite = true;
    // Per-slot diagnostics (index n), not serialized.
    std::vector<double> slot_huber_rel, slot_huber_abs;
};

struct TrainReport {
    std::vector<ReportRow> rows;
    bool aborted = false;

    void write_csv(const std::string& path) const;
    static TrainReport read_csv(const std::string& path);
};

// Pseudo-Huber: delta^2 (sqrt(1 + ||a-b||^2/delta^2) - 1).
ad::Value huber(const ad::Value& a, const ad::Value& b, double delta);
double huber_value(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double delta);

// Role-split hinge pair. `real` must be detached; `fake` keeps student
// ancestry for the generator term and is detached inside the critic term.
struct AdvLosses {
    ad::Value disc;  // relu(1 - D(real)) + relu(1 + D(detach(fake)))
    ad::Value gen;   // -D(fake)
};
AdvLosses adversarial_losses(ad::Tape& tape, const models::Discriminator& d,
                             const ad::Value& fake, const ad::Value& real, double t_n);

// One DDIM update on the tape; identity (same Value) when t_to == t_from.
ad::Value ddim_step(ad::Tape& tape, const diff::NoiseSchedule& ns,
                    const diff::TrainableDenoiser& model, const ad::Value& z,
                    double t_from, double t_to, int cond);

using EvalFn = std::function<double(const diff::Denoiser& student)>;

class RapmTrainer {
public:
    RapmTrainer(std::shared_ptr<const models::MlpDenoiser> teacher, DistillConfig cfg,
                std::uint64_t init_seed);

    // Even k updates the critics, odd k updates the student.
    ReportRow iteration(const traj::TeacherTrajectory& trajectory, long k);

    models::LoraDenoiser& student() { return student_; }
    const models::LoraDenoiser& student() const { return student_; }
    models::Discriminator& disc1() { return disc1_; }
    models::Discriminator& disc2() { return disc2_; }
    const DistillConfig& config() const { return cfg_; }
    const models::MlpDenoiser& teacher() const { return *teacher_; }

private:
    std::shared_ptr<const models::MlpDenoiser> teacher_;
    DistillConfig cfg_;
    models::LoraDenoiser student_;
    models::Discriminator disc1_, disc2_;
    ad::AdamState opt_student_, opt_disc1_, opt_disc2_;
};

class PcmTrainer {
public:
    PcmTrainer(std::shared_ptr<const models::MlpDenoiser> teacher, DistillConfig cfg,
               std::uint64_t init_seed);

    // Draws t and the corruption noise internally; x is one data sample.
    ReportRow iteration(const Eigen::VectorXd& x, int label, long k);

    models::LoraDenoiser& student() { return student_; }
    models::Discriminator& disc1() { return disc1_; }
    const DistillConfig& config() const { return cfg_; }

private:
    std::shared_ptr<const models::MlpDenoiser> teacher_;
    DistillConfig cfg_;
    models::LoraDenoiser student_;
    models::Discriminator disc1_;
    ad::AdamState opt_student_, opt_disc_;
    Rng rng_;
};

class SfdTrainer {
public:
    SfdTrainer(std::shared_ptr<const models::MlpDenoiser> teacher, DistillConfig cfg,
               std::uint64_t init_seed);

    ReportRow iteration(const traj::TeacherTrajectory& trajectory, long k);

    models::LoraDenoiser& student() { return student_; }
    const DistillConfig& config() const { return cfg_; }

private:
    std::shared_ptr<const models::MlpDenoiser> teacher_;
    DistillConfig cfg_;
    models::LoraDenoiser student_;
    ad::AdamState opt_student_;
};

// Full loops: one trajectory / data sample per iteration, eval checkpoints at
// eval_every and on the final iteration. A non-finite loss stops the run with
// the diagnostic row appended and aborted = true.
TrainReport train_rapm(RapmTrainer& trainer, const traj::TrajectoryStore& store,
                       const EvalFn& eval);
TrainReport train_sfd(SfdTrainer& trainer, const traj::TrajectoryStore& store,
                      const EvalFn& eval);
TrainReport train_pcm(PcmTrainer& trainer, const diff::GaussianMixture& data,
                      const EvalFn& eval);

// Denoising-score-matching pretraining of the base model. Returns the
// per-iteration mean loss.
std::vector<double> train_teacher(models::MlpDenoiser& model,
                                  const diff::GaussianMixture& data,
                                  const diff::NoiseSchedule& ns, long iterations,
                                  int batch, double lr, Rng& rng);

}  // namespace rapm::distill
