#include "rapm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace rapm::diff {

int GaussianMixture::num_labels() const {
    int m = 0;
    for (const auto& c : components) m = std::max(m, c.label + 1);
    return m;
}

void GaussianMixture::validate() const {
    if (components.empty()) throw std::invalid_argument("mixture has no components");
    double total = 0.0;
    for (const auto& c : components) {
        if (c.weight <= 0.0) throw std::invalid_argument("mixture weight must be positive");
        if (c.mean.size() != components[0].mean.size()) {
            throw std::invalid_argument("mixture component dimensions differ");
        }
        total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-12) {
        throw std::invalid_argument("mixture weights sum to " + std::to_string(total));
    }
    if (std_dev <= 0.0) throw std::invalid_argument("mixture std must be positive");
}

VectorXd GaussianMixture::sample(Rng& rng) const { return sample_labeled(rng).first; }

std::pair<VectorXd, int> GaussianMixture::sample_labeled(Rng& rng) const {
    double u = rng.uniform();
    double acc = 0.0;
    std::size_t pick = components.size() - 1;
    for (std::size_t k = 0; k < components.size(); ++k) {
        acc += components[k].weight;
        if (u < acc) {
            pick = k;
            break;
        }
    }
    const GmComponent& c = components[pick];
    VectorXd x = c.mean + std_dev * rng.normal_vec(dim());
    return {x, c.label};
}

double GaussianMixture::log_density(const VectorXd& z, double alpha, double sigma,
                                    int cond) const {
    const double var = alpha * alpha * std_dev * std_dev + sigma * sigma;
    const int d = dim();
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> logs;
    logs.reserve(components.size());
    double wsum = 0.0;
    for (const auto& c : components) {
        if (cond >= 0 && c.label != cond) continue;
        wsum += c.weight;
        double sq = (z - alpha * c.mean).squaredNorm();
        double lp = std::log(c.weight) - 0.5 * sq / var -
                    0.5 * d * std::log(2.0 * M_PI * var);
        logs.push_back(lp);
        best = std::max(best, lp);
    }
    if (logs.empty()) throw std::invalid_argument("no mixture component with requested label");
    double s = 0.0;
    for (double lp : logs) s += std::exp(lp - best);
    return best + std::log(std::max(s, 1e-300)) - std::log(wsum);
}

VectorXd GaussianMixture::eps_star(const NoiseSchedule& ns, const VectorXd& z, double t,
                                   int cond) const {
    const double a = ns.alpha(t);
    const double s = ns.sigma(t);
    if (!(s > 0.0)) throw TimeRangeError("eps_star requires sigma(t) > 0");
    const double var = a * a * std_dev * std_dev + s * s;
    return s * (z - a * xbar(ns, z, t, cond)) / var;
}

VectorXd GaussianMixture::xbar(const NoiseSchedule& ns, const VectorXd& z, double t,
                               int cond) const {
    const double a = ns.alpha(t);
    const double s = ns.sigma(t);
    const double var = a * a * std_dev * std_dev + s * s;

    // Responsibilities via log-sum-exp, then the posterior data mean.
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> logs(components.size(),
                             -std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < components.size(); ++k) {
        const auto& c = components[k];
        if (cond >= 0 && c.label != cond) continue;
        logs[k] = std::log(c.weight) - 0.5 * (z - a * c.mean).squaredNorm() / var;
        best = std::max(best, logs[k]);
    }
    if (!std::isfinite(best)) {
        throw std::invalid_argument("no mixture component with requested label");
    }
    VectorXd xbar = VectorXd::Zero(dim());
    double norm = 0.0;
    for (std::size_t k = 0; k < components.size(); ++k) {
        if (!std::isfinite(logs[k])) continue;
        double r = std::exp(logs[k] - best);
        xbar += r * components[k].mean;
        norm += r;
    }
    xbar /= norm;
    return xbar;
}

Eigen::VectorXd GaussianMixture::mean_vector() const {
    VectorXd m = VectorXd::Zero(dim());
    for (const auto& c : components) m += c.weight * c.mean;
    return m;
}

Eigen::MatrixXd GaussianMixture::covariance() const {
    const int d = dim();
    VectorXd m = mean_vector();
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto& c : components) {
        cov += c.weight * (std_dev * std_dev * Eigen::MatrixXd::Identity(d, d) +
                           c.mean * c.mean.transpose());
    }
    cov -= m * m.transpose();
    return cov;
}

GaussianMixture GaussianMixture::ring(int count, double radius, double std_dev,
                                      int families) {
    GaussianMixture gm;
    gm.std_dev = std_dev;
    gm.components.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) {
        double ang = 2.0 * M_PI * k / count;
        GmComponent c;
        c.mean = Eigen::Vector2d(radius * std::cos(ang), radius * std::sin(ang));
        c.weight = 1.0 / count;
        c.label = families > 0 ? k % families : 0;
        gm.components.push_back(std::move(c));
    }
    gm.validate();
    return gm;
}

VectorXd forward_sample(const NoiseSchedule& ns, const VectorXd& x, double t,
                        const VectorXd& noise) {
    ns.check_time(t);
    return ns.alpha(t) * x + ns.sigma(t) * noise;
}

ad::Value dsm_loss(ad::Tape& tape, const TrainableDenoiser& model,
                   const NoiseSchedule& ns, const ad::Mat& x, double t,
                   const ad::Mat& noise, const std::vector<int>& cond) {
    ns.check_time(t);
    ad::Mat z = ns.alpha(t) * x + ns.sigma(t) * noise;
    ad::Value eps_hat = model.predict(tape, ad::constant(std::move(z)), t, cond);
    ad::Value diff = ad::sub(eps_hat, ad::constant(noise));
    return ad::sum(ad::mul(diff, diff));
}

VectorXd score_from_eps(const NoiseSchedule& ns, const VectorXd& eps_hat, double t) {
    const double s = ns.sigma(t);
    if (!(s > 0.0)) throw TimeRangeError("score_from_eps requires sigma(t) > 0");
    return -eps_hat / s;
}

VectorXd pf_drift(const NoiseSchedule& ns, const Denoiser& model, const VectorXd& z,
                  double t, int cond) {
    ns.check_time(t);
    const double a = ns.alpha(t), s = ns.sigma(t);
    VectorXd xhat = model.predict_x(z, t, cond);
    VectorXd score = -(z - a * xhat) / (s * s);
    // dloga*z - 0.5*(dsigma2 - 2*dloga*sigma^2)*score. With score written via
    // xhat, dloga*(z + sigma^2*score) collapses to alpha'(t)*xhat, which stays
    // finite as alpha -> 0 where dloga alone overflows.
    const double dalpha = -0.5 * M_PI * s;  // d/dt cos(pi t / 2)
    return dalpha * xhat - 0.5 * ns.dsigma2(t) * score;
}

VectorXd ddim_step(const NoiseSchedule& ns, const Denoiser& model, const VectorXd& z,
                   double t_from, double t_to, int cond) {
    ns.check_time(t_from);
    ns.check_time(t_to);
    if (t_to > t_from) {
        throw TimeRangeError("ddim_step: t_to " + std::to_string(t_to) +
                             " exceeds t_from " + std::to_string(t_from));
    }
    if (t_to == t_from) return z;
    const double af = ns.alpha(t_from), sf = ns.sigma(t_from);
    const double at = ns.alpha(t_to), st = ns.sigma(t_to);
    // out = at*xhat + st*eps with eps = (z - af*xhat)/sf. Working from the
    // model's xhat keeps the update exact where af underflows near t_max.
    VectorXd xhat = model.predict_x(z, t_from, cond);
    VectorXd eps = (z - af * xhat) / sf;
    return at * xhat + st * eps;
}

VectorXd ddim_multi(const NoiseSchedule& ns, const Denoiser& model, const VectorXd& z,
                    double t_from, double t_to, int steps, int cond) {
    if (steps < 1) throw std::invalid_argument("ddim_multi: steps must be >= 1");
    VectorXd cur = z;
    for (int i = 0; i < steps; ++i) {
        double ta = t_from + (t_to - t_from) * i / steps;
        double tb = (i + 1 == steps) ? t_to : t_from + (t_to - t_from) * (i + 1) / steps;
        cur = ddim_step(ns, model, cur, ta, tb, cond);
    }
    return cur;
}

}  // namespace rapm::diff
