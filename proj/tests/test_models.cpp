#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "rapm/models.hpp"
#include "rapm/rng.hpp"
#include "test_util.hpp"

using namespace rapm;

namespace {

std::shared_ptr<models::MlpDenoiser> make_teacher(std::uint64_t seed = 1,
                                                  int width = 16) {
    diff::NoiseSchedule ns;
    Rng rng(seed);
    return std::make_shared<models::MlpDenoiser>(2, width, 2, 4, 4, rng, ns);
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/rapm_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("time embedding: shape, bounds, frequency endpoints") {
    models::TimeEmbedding te;
    CHECK(te.size() == 32);
    Eigen::VectorXd f = te.features(0.37);
    CHECK(f.size() == 32);
    CHECK(f.cwiseAbs().maxCoeff() <= 1.0);
    CHECK(f(0) == doctest::Approx(std::sin(0.37)));
    CHECK(f(1) == doctest::Approx(std::cos(0.37)));
    CHECK(f(30) == doctest::Approx(std::sin(1000.0 * 0.37)));
}

TEST_CASE("parameter_count matches the layer arithmetic") {
    auto m = make_teacher();
    int in0 = 2 + 2 * 4 + 4;  // z + time features + condition embedding
    std::size_t expect = 16 * in0 + 16        // layer 0
                         + 16 * 16 + 16       // layer 1
                         + 16 * 16 + 16       // layer 2
                         + 2 * 16 + 2         // head
                         + 4 * 2;             // condition embedding
    CHECK(m->parameter_count() == expect);
}

TEST_CASE("graph forward equals plain forward per batch column") {
    auto m = make_teacher();
    Rng rng(5);
    ad::Mat z(2, 3);
    for (int i = 0; i < 6; ++i) z(i) = rng.normal();
    std::vector<int> cond = {0, 1, 0};
    ad::Tape tape;
    m->bind(tape);
    ad::Value out = m->predict(tape, ad::constant(z), 0.6, cond);
    for (int j = 0; j < 3; ++j) {
        Eigen::VectorXd plain =
            m->predict(z.col(j), 0.6, cond[static_cast<std::size_t>(j)]);
        CHECK((Eigen::VectorXd(out.data.col(j)) - plain).norm() < 1e-12);
    }
    ad::Value unc = m->predict(tape, ad::constant(z), 0.6, {-1});
    for (int j = 0; j < 3; ++j) {
        CHECK((Eigen::VectorXd(unc.data.col(j)) - m->predict(z.col(j), 0.6, -1)).norm() <
              1e-12);
    }
}

TEST_CASE("mlp parameter gradients match finite differences") {
    auto m = make_teacher(7, 8);
    Rng rng(8);
    Eigen::VectorXd z = rng.normal_vec(2);
    double t = 0.45;
    int cond = 1;

    ad::Tape tape;
    m->bind(tape);
    ad::Value eps = m->predict(tape, ad::constant(ad::Mat(z)), t, {cond});
    ad::Value loss = ad::sum(ad::mul(eps, eps));
    tape.backward(loss);
    auto grads = m->trainable_grads(tape);
    auto params = m->trainable_params();

    for (std::size_t p = 0; p < params.size(); ++p) {
        ad::Mat fd = ad::Mat::Zero(params[p]->rows(), params[p]->cols());
        for (Eigen::Index i = 0; i < params[p]->size(); ++i) {
            double orig = (*params[p])(i);
            double h = 1e-6;
            (*params[p])(i) = orig + h;
            double up = m->predict(z, t, cond).squaredNorm();
            (*params[p])(i) = orig - h;
            double down = m->predict(z, t, cond).squaredNorm();
            (*params[p])(i) = orig;
            fd(i) = (up - down) / (2 * h);
        }
        CHECK(testutil::rel_err(grads[p], fd) < 1e-5);
    }
}

TEST_CASE("input gradients through the graph match finite differences") {
    auto m = make_teacher(9, 8);
    Rng rng(10);
    ad::Mat z(2, 1);
    z << 0.4, -0.7;
    ad::Tape tape;
    m->bind(tape);
    ad::Value zl = tape.leaf(z);
    ad::Value out = m->predict(tape, zl, 0.3, {0});
    tape.backward(ad::sum(ad::mul(out, out)));
    ad::Mat fd(2, 1);
    for (int i = 0; i < 2; ++i) {
        double h = 1e-6;
        ad::Mat zp = z, zm = z;
        zp(i) += h;
        zm(i) -= h;
        fd(i) = (m->predict(zp.col(0), 0.3, 0).squaredNorm() -
                 m->predict(zm.col(0), 0.3, 0).squaredNorm()) /
                (2 * h);
    }
    CHECK(testutil::rel_err(tape.grad(zl), fd) < 1e-5);
}

TEST_CASE("zero-init adapters leave the student bit-identical to the teacher") {
    auto teacher = make_teacher();
    Rng rng(12);
    auto student = models::student_from_teacher(teacher, 4, rng);
    for (int i = 0; i < 10; ++i) {
        Eigen::VectorXd z = rng.normal_vec(2);
        double t = rng.uniform(teacher->schedule().t_min, teacher->schedule().t_max);
        int cond = rng.uniform_int(3) - 1;
        CHECK(student.predict(z, t, cond) == teacher->predict(z, t, cond));
        CHECK(student.predict_x(z, t, cond) == teacher->predict_x(z, t, cond));
    }
}

TEST_CASE("lora gradients match finite differences") {
    auto teacher = make_teacher(14, 8);
    Rng rng(15);
    auto student = models::student_from_teacher(teacher, 2, rng);
    // Move B off zero so both factors carry gradient.
    for (auto& L : student.adapters()) {
        for (Eigen::Index i = 0; i < L.B.size(); ++i) L.B(i) = 0.1 * rng.normal();
    }
    Eigen::VectorXd z = rng.normal_vec(2);
    double t = 0.55;

    ad::Tape tape;
    student.bind(tape);
    ad::Value out = student.predict(tape, ad::constant(ad::Mat(z)), t, {0});
    tape.backward(ad::sum(ad::mul(out, out)));
    auto grads = student.trainable_grads(tape);
    auto params = student.trainable_params();
    for (std::size_t p = 0; p < params.size(); ++p) {
        ad::Mat fd = ad::Mat::Zero(params[p]->rows(), params[p]->cols());
        for (Eigen::Index i = 0; i < params[p]->size(); ++i) {
            double orig = (*params[p])(i);
            double h = 1e-6;
            (*params[p])(i) = orig + h;
            double up = student.predict(z, t, 0).squaredNorm();
            (*params[p])(i) = orig - h;
            double down = student.predict(z, t, 0).squaredNorm();
            (*params[p])(i) = orig;
            fd(i) = (up - down) / (2 * h);
        }
        CHECK(testutil::rel_err(grads[p], fd) < 1e-5);
    }
}

TEST_CASE("lora rank must fit inside every layer") {
    auto teacher = make_teacher(1, 8);
    Rng rng(16);
    CHECK_THROWS(models::LoraDenoiser::attach(teacher, 8, rng));
    CHECK_THROWS(models::LoraDenoiser::attach(teacher, 0, rng));
}

TEST_CASE("untrained discriminator scores exactly zero, trained one uses t") {
    auto teacher = make_teacher();
    Rng rng(18);
    models::Discriminator d(teacher, 2, 8, rng);
    for (int i = 0; i < 5; ++i) {
        Eigen::VectorXd z = rng.normal_vec(2);
        CHECK(d.score(z, rng.uniform(0.1, 0.9)) == 0.0);
    }
    // Graph score agrees with the plain path.
    ad::Tape tape;
    d.bind(tape);
    Eigen::VectorXd z = rng.normal_vec(2);
    CHECK(d.score(tape, ad::constant(ad::Mat(z)), 0.4).scalar() == d.score(z, 0.4));

    // A nonzero head makes the score time-dependent.
    auto params = d.trainable_params();
    ad::Mat* w2 = params[params.size() - 2];
    for (Eigen::Index i = 0; i < w2->size(); ++i) (*w2)(i) = 0.3;
    CHECK(d.score(z, 0.2) != d.score(z, 0.8));
}

TEST_CASE("discriminator gradients match finite differences") {
    auto teacher = make_teacher(20, 8);
    Rng rng(21);
    models::Discriminator d(teacher, 2, 4, rng);
    auto params = d.trainable_params();
    for (auto* p : params) {
        for (Eigen::Index i = 0; i < p->size(); ++i) {
            if ((*p)(i) == 0.0) (*p)(i) = 0.05 * rng.normal();
        }
    }
    Eigen::VectorXd z = rng.normal_vec(2);
    double t = 0.65;
    ad::Tape tape;
    d.bind(tape);
    ad::Value s = d.score(tape, ad::constant(ad::Mat(z)), t);
    tape.backward(s);
    auto grads = d.trainable_grads(tape);
    for (std::size_t p = 0; p < params.size(); ++p) {
        ad::Mat fd = ad::Mat::Zero(params[p]->rows(), params[p]->cols());
        for (Eigen::Index i = 0; i < params[p]->size(); ++i) {
            double orig = (*params[p])(i);
            double h = 1e-6;
            (*params[p])(i) = orig + h;
            double up = d.score(z, t);
            (*params[p])(i) = orig - h;
            double down = d.score(z, t);
            (*params[p])(i) = orig;
            fd(i) = (up - down) / (2 * h);
        }
        CHECK(testutil::rel_err(grads[p], fd) < 1e-5);
    }
}

TEST_CASE("checkpoint round-trip is bit-exact for base and student") {
    auto teacher = make_teacher(22);
    TempFile base_f("base.ckpt"), student_f("student.ckpt");

    models::save_checkpoint(*teacher, base_f.path);
    auto ck = models::load_checkpoint(base_f.path);
    REQUIRE(ck.base);
    CHECK(!ck.student.has_value());
    for (std::size_t i = 0; i < teacher->weights.size(); ++i) {
        CHECK(ck.base->weights[i] == teacher->weights[i]);
        CHECK(ck.base->biases[i] == teacher->biases[i]);
    }
    CHECK(ck.base->cond_embed == teacher->cond_embed);
    CHECK(models::parameter_checksum(*ck.base) == models::parameter_checksum(*teacher));

    Rng rng(23);
    auto student = models::student_from_teacher(teacher, 3, rng);
    for (auto& L : student.adapters()) {
        for (Eigen::Index i = 0; i < L.B.size(); ++i) L.B(i) = rng.normal();
    }
    models::save_checkpoint(student, student_f.path);
    auto ck2 = models::load_checkpoint(student_f.path);
    REQUIRE(ck2.student.has_value());
    CHECK(ck2.student->rank() == 3);
    for (std::size_t i = 0; i < student.adapters().size(); ++i) {
        CHECK(ck2.student->adapters()[i].A == student.adapters()[i].A);
        CHECK(ck2.student->adapters()[i].B == student.adapters()[i].B);
        CHECK(ck2.student->adapters()[i].scale == student.adapters()[i].scale);
    }
    Eigen::VectorXd z(2);
    z << 0.3, -0.8;
    CHECK(ck2.student->predict(z, 0.5, 1) == student.predict(z, 0.5, 1));
}

TEST_CASE("checkpoint loader rejects corruption") {
    auto teacher = make_teacher(24);
    TempFile f("corrupt.ckpt");
    models::save_checkpoint(*teacher, f.path);
    {
        std::fstream io(f.path, std::ios::in | std::ios::out | std::ios::binary);
        io.seekp(0);
        io.write("XXXX", 4);
    }
    CHECK_THROWS_AS(models::load_checkpoint(f.path), models::CheckpointError);

    models::save_checkpoint(*teacher, f.path);
    {
        // Truncate mid-payload.
        std::ifstream in(f.path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        std::ofstream out(f.path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(models::load_checkpoint(f.path), models::CheckpointError);
    CHECK_THROWS_AS(models::load_checkpoint("/tmp/rapm_does_not_exist.ckpt"),
                    models::CheckpointError);
}

TEST_CASE("same seed builds identical models") {
    auto a = make_teacher(99);
    auto b = make_teacher(99);
    CHECK(models::parameter_checksum(*a) == models::parameter_checksum(*b));
    auto c = make_teacher(100);
    CHECK(models::parameter_checksum(*a) != models::parameter_checksum(*c));
}
