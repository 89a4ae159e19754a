#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "rapm/diffusion.hpp"
#include "rapm/models.hpp"
#include "rapm/rng.hpp"

using namespace rapm;

namespace {

diff::GaussianMixture single_gaussian(Eigen::Vector2d mean, double sd) {
    diff::GaussianMixture gm;
    gm.std_dev = sd;
    diff::GmComponent c;
    c.mean = mean;
    c.weight = 1.0;
    gm.components.push_back(c);
    gm.validate();
    return gm;
}

}  // namespace

TEST_CASE("schedule: monotone, unit-energy, analytic derivatives match differences") {
    diff::NoiseSchedule ns;
    CHECK(ns.alpha(ns.t_min) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(ns.sigma(ns.t_min) < 2e-3);
    CHECK(ns.sigma(ns.t_max) == doctest::Approx(1.0).epsilon(1e-12));

    const int n = 10000;
    double prev_a = ns.alpha(ns.t_min), prev_s = ns.sigma(ns.t_min);
    double prev_l = ns.lambda(ns.t_min);
    for (int i = 1; i <= n; ++i) {
        double t = ns.t_min + (ns.t_max - ns.t_min) * i / n;
        double a = ns.alpha(t), s = ns.sigma(t);
        CHECK(a <= prev_a);
        CHECK(s >= prev_s);
        CHECK(a * a + s * s == doctest::Approx(1.0).epsilon(1e-14));
        if (t < ns.t_max) {
            double l = ns.lambda(t);
            CHECK(l > prev_l);
            prev_l = l;
        }
        prev_a = a;
        prev_s = s;
    }

    for (double t : {0.05, 0.2, 0.5, 0.8, 0.95}) {
        double h = 1e-6;
        double fd_dloga =
            (std::log(ns.alpha(t + h)) - std::log(ns.alpha(t - h))) / (2 * h);
        double s_hi = ns.sigma(t + h), s_lo = ns.sigma(t - h);
        double fd_ds2 = (s_hi * s_hi - s_lo * s_lo) / (2 * h);
        CHECK(ns.dlog_alpha(t) == doctest::Approx(fd_dloga).epsilon(1e-7));
        CHECK(ns.dsigma2(t) == doctest::Approx(fd_ds2).epsilon(1e-7));
    }
}

TEST_CASE("forward_sample: boundary behavior and range checks") {
    diff::NoiseSchedule ns;
    Eigen::VectorXd x(2), noise(2);
    x << 0.7, -0.4;
    noise << 1.0, 2.0;
    Eigen::VectorXd z0 = diff::forward_sample(ns, x, ns.t_min, noise);
    CHECK((z0 - x).norm() < 4e-3);
    Eigen::VectorXd zT = diff::forward_sample(ns, x, ns.t_max, noise);
    CHECK((zT - noise).norm() < 1e-15);
    CHECK_THROWS_AS(diff::forward_sample(ns, x, 1.5, noise), diff::TimeRangeError);
    CHECK_THROWS_AS(diff::forward_sample(ns, x, 0.0, noise), diff::TimeRangeError);
}

TEST_CASE("eps_star matches the closed form for a single Gaussian") {
    diff::NoiseSchedule ns;
    auto gm = single_gaussian({0.4, -0.9}, 0.3);
    Rng rng(11);
    for (int i = 0; i < 20; ++i) {
        double t = rng.uniform(0.05, 0.95);
        Eigen::VectorXd z = rng.normal_vec(2);
        double a = ns.alpha(t), s = ns.sigma(t);
        double var = a * a * 0.09 + s * s;
        Eigen::VectorXd expect = s * (z - a * gm.components[0].mean) / var;
        CHECK((gm.eps_star(ns, z, t) - expect).norm() < 1e-14);
        // predict_x consistency: eps = (z - a*xhat)/s.
        diff::OracleDenoiser oracle(gm, ns);
        Eigen::VectorXd from_x = (z - a * oracle.predict_x(z, t, -1)) / s;
        CHECK((from_x - expect).norm() < 1e-12);
    }
}

TEST_CASE("eps_star agrees with finite differences of the marginal log-density") {
    diff::NoiseSchedule ns;
    auto gm = diff::GaussianMixture::ring(8, 1.2, 0.15, 2);
    Rng rng(13);
    for (int i = 0; i < 16; ++i) {
        double t = rng.uniform(0.1, 0.9);
        int cond = (i % 3 == 0) ? i % 2 : -1;
        Eigen::VectorXd z = 1.5 * rng.normal_vec(2);
        double a = ns.alpha(t), s = ns.sigma(t);
        double h = 1e-5;
        Eigen::VectorXd score(2);
        for (int d = 0; d < 2; ++d) {
            Eigen::VectorXd zp = z, zm = z;
            zp(d) += h;
            zm(d) -= h;
            score(d) =
                (gm.log_density(zp, a, s, cond) - gm.log_density(zm, a, s, cond)) /
                (2 * h);
        }
        Eigen::VectorXd eps = gm.eps_star(ns, z, t, cond);
        CHECK((eps + s * score).norm() < 1e-6);
    }
}

TEST_CASE("eps_star of a centrally symmetric mixture is odd in z") {
    diff::NoiseSchedule ns;
    auto gm = diff::GaussianMixture::ring(8, 1.2, 0.15, 0);
    Rng rng(17);
    for (int i = 0; i < 10; ++i) {
        double t = rng.uniform(0.1, 0.95);
        Eigen::VectorXd z = rng.normal_vec(2);
        Eigen::VectorXd a = gm.eps_star(ns, z, t);
        Eigen::VectorXd b = gm.eps_star(ns, Eigen::VectorXd(-z), t);
        CHECK((a + b).norm() < 1e-12);
    }
}

TEST_CASE("conditional eps_star equals the restricted sub-mixture") {
    diff::NoiseSchedule ns;
    auto gm = diff::GaussianMixture::ring(8, 1.2, 0.15, 2);
    diff::GaussianMixture fam;
    fam.std_dev = gm.std_dev;
    double total = 0;
    for (const auto& c : gm.components) {
        if (c.label == 1) total += c.weight;
    }
    for (const auto& c : gm.components) {
        if (c.label == 1) {
            auto cc = c;
            cc.weight /= total;
            fam.components.push_back(cc);
        }
    }
    fam.validate();
    Rng rng(19);
    for (int i = 0; i < 10; ++i) {
        double t = rng.uniform(0.1, 0.9);
        Eigen::VectorXd z = rng.normal_vec(2);
        CHECK((gm.eps_star(ns, z, t, 1) - fam.eps_star(ns, z, t)).norm() < 1e-12);
    }
    CHECK_THROWS(gm.eps_star(ns, Eigen::VectorXd::Zero(2), 0.5, 7));
}

TEST_CASE("dsm_loss equals the plain-forward squared error") {
    diff::NoiseSchedule ns;
    Rng rng(23);
    models::MlpDenoiser model(2, 16, 2, 4, 4, rng, ns);
    ad::Mat x(2, 3), noise(2, 3);
    for (int i = 0; i < 6; ++i) {
        x(i) = rng.normal();
        noise(i) = rng.normal();
    }
    std::vector<int> labels = {0, 1, 0};
    double t = 0.4;
    ad::Tape tape;
    model.bind(tape);
    double loss = diff::dsm_loss(tape, model, ns, x, t, noise, labels).scalar();
    double manual = 0;
    for (int j = 0; j < 3; ++j) {
        Eigen::VectorXd z = ns.alpha(t) * x.col(j) + ns.sigma(t) * noise.col(j);
        manual += (model.predict(z, t, labels[static_cast<std::size_t>(j)]) -
                   Eigen::VectorXd(noise.col(j)))
                      .squaredNorm();
    }
    CHECK(loss == doctest::Approx(manual).epsilon(1e-12));
    CHECK(loss >= 0.0);
}

TEST_CASE("probability-flow drift vanishes on standard-normal data") {
    diff::NoiseSchedule ns;
    auto gm = single_gaussian({0.0, 0.0}, 1.0);
    diff::OracleDenoiser oracle(gm, ns);
    Rng rng(29);
    for (double t : {ns.t_min, 0.1, 0.5, 0.9, 0.999, ns.t_max}) {
        Eigen::VectorXd z = rng.normal_vec(2);
        CHECK(diff::pf_drift(ns, oracle, z, t, -1).norm() < 1e-12);
    }
}

TEST_CASE("probability-flow drift is continuous in t") {
    diff::NoiseSchedule ns;
    auto gm = diff::GaussianMixture::ring(8, 1.2, 0.15, 0);
    diff::OracleDenoiser oracle(gm, ns);
    Rng rng(31);
    Eigen::VectorXd z = rng.normal_vec(2);
    for (double t : {0.05, 0.3, 0.6, 0.9, 0.99}) {
        Eigen::VectorXd d0 = diff::pf_drift(ns, oracle, z, t, -1);
        Eigen::VectorXd d1 = diff::pf_drift(ns, oracle, z, t + 1e-6, -1);
        CHECK((d0 - d1).norm() < 1e-3);
    }
}

TEST_CASE("RK4 on the probability flow matches the Gaussian closed form") {
    diff::NoiseSchedule ns;
    Eigen::Vector2d mu(0.3, -0.2);
    double sd = 0.5;
    auto gm = single_gaussian(mu, sd);
    diff::OracleDenoiser oracle(gm, ns);
    auto var_at = [&](double t) {
        double a = ns.alpha(t), s = ns.sigma(t);
        return a * a * sd * sd + s * s;
    };
    Rng rng(37);
    for (int trial = 0; trial < 8; ++trial) {
        Eigen::VectorXd zT =
            ns.alpha(ns.t_max) * mu + std::sqrt(var_at(ns.t_max)) * rng.normal_vec(2);
        // RK4 backwards in t over 400 steps, endpoints computed per index so
        // rounding never pushes an evaluation outside [t_min, t_max].
        Eigen::VectorXd z = zT;
        int steps = 400;
        for (int i = 0; i < steps; ++i) {
            double ta = ns.t_max + (ns.t_min - ns.t_max) * i / steps;
            double tb = (i + 1 == steps)
                            ? ns.t_min
                            : ns.t_max + (ns.t_min - ns.t_max) * (i + 1) / steps;
            double h = tb - ta;
            auto f = [&](const Eigen::VectorXd& y, double tt) {
                return diff::pf_drift(ns, oracle, y, tt, -1);
            };
            Eigen::VectorXd k1 = f(z, ta);
            Eigen::VectorXd k2 = f(z + 0.5 * h * k1, 0.5 * (ta + tb));
            Eigen::VectorXd k3 = f(z + 0.5 * h * k2, 0.5 * (ta + tb));
            Eigen::VectorXd k4 = f(z + h * k3, tb);
            z += (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4);
        }
        // The flow preserves the standardized residual of the marginal.
        Eigen::VectorXd expect =
            ns.alpha(ns.t_min) * mu +
            std::sqrt(var_at(ns.t_min) / var_at(ns.t_max)) *
                (zT - ns.alpha(ns.t_max) * mu);
        CHECK((z - expect).norm() < 1e-6);
    }
}

TEST_CASE("RK4 transport of a noise cloud lands on N(0, I) data") {
    diff::NoiseSchedule ns;
    auto gm = single_gaussian({0.0, 0.0}, 1.0);
    diff::OracleDenoiser oracle(gm, ns);
    Rng rng(41);
    int n = 4096;
    Eigen::MatrixXd pts(n, 2);
    int steps = 16;  // drift is ~0 pointwise, few steps suffice
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd z = rng.normal_vec(2);
        for (int k = 0; k < steps; ++k) {
            double ta = ns.t_max + (ns.t_min - ns.t_max) * k / steps;
            double tb = (k + 1 == steps)
                            ? ns.t_min
                            : ns.t_max + (ns.t_min - ns.t_max) * (k + 1) / steps;
            double h = tb - ta;
            auto f = [&](const Eigen::VectorXd& y, double tt) {
                return diff::pf_drift(ns, oracle, y, tt, -1);
            };
            Eigen::VectorXd k1 = f(z, ta);
            Eigen::VectorXd k2 = f(z + 0.5 * h * k1, 0.5 * (ta + tb));
            Eigen::VectorXd k3 = f(z + 0.5 * h * k2, 0.5 * (ta + tb));
            Eigen::VectorXd k4 = f(z + h * k3, tb);
            z += (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4);
        }
        pts.row(i) = z.transpose();
    }
    Eigen::RowVector2d mean = pts.colwise().mean();
    Eigen::MatrixXd centered = pts.rowwise() - mean;
    Eigen::Matrix2d cov = centered.transpose() * centered / (n - 1);
    CHECK(std::abs(cov(0, 0) - 1.0) < 0.05);
    CHECK(std::abs(cov(1, 1) - 1.0) < 0.05);
    CHECK(std::abs(cov(0, 1)) < 0.05);
}

TEST_CASE("ddim_step: identity, ordering error, closed-form linear map") {
    diff::NoiseSchedule ns;
    Eigen::Vector2d mu(0.0, 0.0);
    double sd = 1.0;
    auto gm = single_gaussian(mu, sd);
    diff::OracleDenoiser oracle(gm, ns);
    Eigen::VectorXd z(2);
    z << 0.8, -1.3;

    Eigen::VectorXd same = diff::ddim_step(ns, oracle, z, 0.5, 0.5, -1);
    CHECK(same == z);
    CHECK_THROWS_AS(diff::ddim_step(ns, oracle, z, 0.3, 0.7, -1),
                    diff::TimeRangeError);

    // One step T -> t_min against scalar coefficients computed independently.
    double tf = ns.t_max, tt = ns.t_min;
    double a = ns.alpha(tf), s = ns.sigma(tf);
    double at = ns.alpha(tt), st = ns.sigma(tt);
    double var = a * a * sd * sd + s * s;
    double A = (at * a * sd * sd + st * s) / var;
    double B = (at * s * s - st * s * a) / var;
    Eigen::VectorXd expect = A * z + B * mu;
    Eigen::VectorXd got = diff::ddim_step(ns, oracle, z, tf, tt, -1);
    CHECK((got - expect).norm() < 1e-12);
}

TEST_CASE("ddim_multi: single step reduction and first-order convergence") {
    diff::NoiseSchedule ns;
    auto gm = diff::GaussianMixture::ring(8, 1.2, 0.15, 0);
    diff::OracleDenoiser oracle(gm, ns);
    Rng rng(43);
    Eigen::VectorXd z = rng.normal_vec(2);
    CHECK(diff::ddim_multi(ns, oracle, z, 0.9, 0.2, 1, -1) ==
          diff::ddim_step(ns, oracle, z, 0.9, 0.2, -1));
    CHECK_THROWS(diff::ddim_multi(ns, oracle, z, 0.9, 0.2, 0, -1));

    std::vector<double> e25, e50;
    for (int i = 0; i < 16; ++i) {
        Eigen::VectorXd z0 = rng.normal_vec(2);
        Eigen::VectorXd ref =
            diff::ddim_multi(ns, oracle, z0, ns.t_max, ns.t_min, 400, -1);
        e25.push_back(
            (diff::ddim_multi(ns, oracle, z0, ns.t_max, ns.t_min, 25, -1) - ref)
                .norm());
        e50.push_back(
            (diff::ddim_multi(ns, oracle, z0, ns.t_max, ns.t_min, 50, -1) - ref)
                .norm());
    }
    std::sort(e25.begin(), e25.end());
    std::sort(e50.begin(), e50.end());
    double ratio = e25[8] / e50[8];
    CHECK(ratio > 1.7);
    CHECK(ratio < 2.3);
}

TEST_CASE("oracle reverse rollout reproduces the data moments") {
    diff::NoiseSchedule ns;
    auto gm = diff::GaussianMixture::ring(8, 1.2, 0.15, 0);
    diff::OracleDenoiser oracle(gm, ns);
    Rng rng(47);
    int n = 2048;
    Eigen::MatrixXd pts(n, 2);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd z = rng.normal_vec(2);
        pts.row(i) =
            diff::ddim_multi(ns, oracle, z, ns.t_max, ns.t_min, 200, -1).transpose();
    }
    Eigen::RowVector2d mean = pts.colwise().mean();
    CHECK(mean.norm() < 0.08);
    double msq = pts.rowwise().squaredNorm().mean();
    double expect = gm.covariance().trace();
    CHECK(msq == doctest::Approx(expect).epsilon(0.05));
}
