#pragma once

#include <Eigen/Dense>
#include <memory>
#include <stdexcept>
#include <vector>

#include "rapm/autodiff.hpp"
#include "rapm/rng.hpp"

// Continuous-time diffusion math: the VP-cosine schedule, forward sampling,
// denoising score matching, the probability-flow drift, DDIM stepping and the
// closed-form Gaussian-mixture oracle used as an exact teacher in tests.
namespace rapm::diff {

using Eigen::VectorXd;

struct TimeRangeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// alpha(t) = cos(pi t / 2), sigma(t) = sin(pi t / 2) on [t_min, t_max].
// alpha non-increasing, sigma non-decreasing, lambda strictly increasing;
// alpha^2 + sigma^2 = 1. Derivatives are analytic.
struct NoiseSchedule {
    double t_min = 1e-3;
    double t_max = 1.0;

    double alpha(double t) const { return std::cos(0.5 * M_PI * t); }
    double sigma(double t) const { return std::sin(0.5 * M_PI * t); }
    double lambda(double t) const { return sigma(t) / alpha(t); }
    double dlog_alpha(double t) const { return -0.5 * M_PI * std::tan(0.5 * M_PI * t); }
    double dsigma2(double t) const { return 0.5 * M_PI * std::sin(M_PI * t); }

    void check_time(double t) const {
        if (!(t >= t_min && t <= t_max)) {
            throw TimeRangeError("time " + std::to_string(t) + " outside [" +
                                 std::to_string(t_min) + ", " + std::to_string(t_max) + "]");
        }
    }
};

struct Denoiser {
    virtual ~Denoiser() = default;
    virtual int dim() const = 0;
    // Epsilon prediction at state z, time t, condition label (-1: unconditioned).
    virtual VectorXd predict(const VectorXd& z, double t, int cond) const = 0;
    // Clean-data estimate consistent with predict: eps = (z - alpha*xhat)/sigma.
    // Exposed directly because recovering xhat from eps divides by alpha(t),
    // which underflows near t_max and loses the estimate to rounding.
    virtual VectorXd predict_x(const VectorXd& z, double t, int cond) const = 0;
};

// Denoiser that can also run on a tape for training.
struct TrainableDenoiser : Denoiser {
    // Registers trainable parameters as leaves on the tape. Must be called
    // once per tape before any graph forward.
    virtual void bind(ad::Tape& tape) const = 0;
    // Batched graph forward: z is d x B, cond has one label per column.
    virtual ad::Value predict(ad::Tape& tape, const ad::Value& z, double t,
                              const std::vector<int>& cond) const = 0;
    virtual ad::Value predict_x(ad::Tape& tape, const ad::Value& z, double t,
                                const std::vector<int>& cond) const = 0;
    virtual std::vector<ad::Mat*> trainable_params() = 0;
    virtual std::vector<ad::Mat> trainable_grads(const ad::Tape& tape) const = 0;
};

struct GmComponent {
    Eigen::VectorXd mean;
    double weight = 1.0;
    int label = 0;
};

// Isotropic Gaussian mixture standing in for the data distribution. The
// marginal at noise level (alpha, sigma) stays a mixture with variance
// alpha^2 s^2 + sigma^2, so the score and the optimal epsilon predictor are
// closed-form.
struct GaussianMixture {
    std::vector<GmComponent> components;
    double std_dev = 0.15;

    int dim() const { return static_cast<int>(components.at(0).mean.size()); }
    int num_labels() const;
    void validate() const;

    VectorXd sample(Rng& rng) const;
    std::pair<VectorXd, int> sample_labeled(Rng& rng) const;

    // log q(z; alpha, sigma), marginal mixture density at a noise level.
    double log_density(const VectorXd& z, double alpha, double sigma, int cond = -1) const;

    // Exact posterior epsilon, optionally restricted to one label family.
    VectorXd eps_star(const NoiseSchedule& ns, const VectorXd& z, double t,
                      int cond = -1) const;

    // Responsibility-weighted component mean at noise level t.
    VectorXd xbar(const NoiseSchedule& ns, const VectorXd& z, double t,
                  int cond = -1) const;

    Eigen::VectorXd mean_vector() const;
    Eigen::MatrixXd covariance() const;

    // count components evenly spaced on a circle of given radius, labels
    // assigned round-robin over `families`.
    static GaussianMixture ring(int count, double radius, double std_dev, int families);
};

// Exact-score denoiser backed by the mixture; conditioning selects the family.
class OracleDenoiser : public Denoiser {
public:
    OracleDenoiser(GaussianMixture gm, NoiseSchedule ns)
        : gm_(std::move(gm)), ns_(ns) {}
    int dim() const override { return gm_.dim(); }
    VectorXd predict(const VectorXd& z, double t, int cond) const override {
        return gm_.eps_star(ns_, z, t, cond);
    }
    // Posterior mean E[x | z]: the shrinkage form stays exact where the
    // eps-based reconstruction would cancel catastrophically.
    VectorXd predict_x(const VectorXd& z, double t, int cond) const override {
        const double a = ns_.alpha(t), s = ns_.sigma(t);
        const double var = a * a * gm_.std_dev * gm_.std_dev + s * s;
        VectorXd xb = gm_.xbar(ns_, z, t, cond);
        return (a * gm_.std_dev * gm_.std_dev * z + s * s * xb) / var;
    }
    const GaussianMixture& mixture() const { return gm_; }

private:
    GaussianMixture gm_;
    NoiseSchedule ns_;
};

VectorXd forward_sample(const NoiseSchedule& ns, const VectorXd& x, double t,
                        const VectorXd& noise);

// || eps_hat(alpha x + sigma eps, t) - eps ||^2 on the tape; cond per column
// when x has several columns (batched training).
ad::Value dsm_loss(ad::Tape& tape, const TrainableDenoiser& model,
                   const NoiseSchedule& ns, const ad::Mat& x, double t,
                   const ad::Mat& noise, const std::vector<int>& cond);

VectorXd score_from_eps(const NoiseSchedule& ns, const VectorXd& eps_hat, double t);

VectorXd pf_drift(const NoiseSchedule& ns, const Denoiser& model, const VectorXd& z,
                  double t, int cond);

VectorXd ddim_step(const NoiseSchedule& ns, const Denoiser& model, const VectorXd& z,
                   double t_from, double t_to, int cond);

VectorXd ddim_multi(const NoiseSchedule& ns, const Denoiser& model, const VectorXd& z,
                    double t_from, double t_to, int steps, int cond);

}  // namespace rapm::diff
