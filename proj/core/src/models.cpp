#include "rapm/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace rapm::models {

namespace {

constexpr char kCkptMagic[8] = {'R', 'A', 'P', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

struct GLayer {
    ad::Value W, b;
    bool lora = false;
    ad::Value A, B;
    double scale = 0.0;
};

ad::Value run_layers(const std::vector<GLayer>& layers, ad::Value x, bool final_linear) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const GLayer& L = layers[i];
        ad::Value pre = ad::add_colwise(ad::matmul(L.W, x), L.b);
        if (L.lora) {
            pre = ad::add(pre, ad::scale(ad::matmul(L.B, ad::matmul(L.A, x)), L.scale));
        }
        bool last = (i + 1 == layers.size());
        x = (last && final_linear) ? pre : ad::silu(pre);
    }
    return x;
}

Eigen::MatrixXd silu_plain(const Eigen::MatrixXd& x) {
    return (x.array() / (1.0 + (-x.array()).exp())).matrix();
}

// Plain forward through the first `count` layers; adapters[i] may be null.
Eigen::MatrixXd run_plain(const std::vector<Mat>& weights, const std::vector<Mat>& biases,
                          const std::vector<const LoraLayer*>& adapters,
                          const Eigen::MatrixXd& input, std::size_t count,
                          bool final_linear) {
    Eigen::MatrixXd x = input;
    for (std::size_t i = 0; i < count; ++i) {
        Eigen::MatrixXd pre = (weights[i] * x).colwise() + Eigen::VectorXd(biases[i].col(0));
        if (adapters[i]) {
            const LoraLayer& L = *adapters[i];
            pre += L.scale * (L.B * (L.A * x));
        }
        bool last = (i + 1 == count);
        x = (last && final_linear) ? pre : silu_plain(pre);
    }
    return x;
}

Mat random_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = stddev * rng.normal();
    }
    return m;
}

}  // namespace

Eigen::VectorXd TimeEmbedding::features(double t) const {
    Eigen::VectorXd f(2 * freqs);
    for (int i = 0; i < freqs; ++i) {
        double w = freqs > 1
                       ? omega_min * std::pow(omega_max / omega_min,
                                              static_cast<double>(i) / (freqs - 1))
                       : omega_min;
        f(2 * i) = std::sin(w * t);
        f(2 * i + 1) = std::cos(w * t);
    }
    return f;
}

MlpDenoiser::MlpDenoiser(int dim, int width, int num_labels, int cond_dim,
                         int time_freqs, Rng& rng, const diff::NoiseSchedule& ns)
    : dim_(dim), width_(width), num_labels_(num_labels), cond_dim_(cond_dim), ns_(ns) {
    temb_.freqs = time_freqs;
    const int in0 = dim + temb_.size() + cond_dim;
    std::vector<std::pair<int, int>> shapes = {
        {width, in0}, {width, width}, {width, width}, {dim, width}};
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        double s = 1.0 / std::sqrt(static_cast<double>(shapes[i].second));
        // Small output head: the initial x-estimate starts near zero.
        if (i + 1 == shapes.size()) s *= 0.01;
        weights.push_back(random_matrix(shapes[i].first, shapes[i].second, s, rng));
        biases.push_back(Mat::Zero(shapes[i].first, 1));
    }
    cond_embed = random_matrix(cond_dim, std::max(num_labels, 1), 0.1, rng);
}

Eigen::MatrixXd MlpDenoiser::input_block(const Eigen::MatrixXd& z, double t,
                                         const std::vector<int>& cond) const {
    const Eigen::Index b = z.cols();
    Eigen::MatrixXd in(dim_ + temb_.size() + cond_dim_, b);
    Eigen::VectorXd tf = temb_.features(t);
    for (Eigen::Index j = 0; j < b; ++j) {
        int c = cond.size() == 1 ? cond[0] : cond.at(static_cast<std::size_t>(j));
        in.col(j).head(dim_) = z.col(j);
        in.col(j).segment(dim_, temb_.size()) = tf;
        if (c >= 0) {
            in.col(j).tail(cond_dim_) = cond_embed.col(c);
        } else {
            in.col(j).tail(cond_dim_).setZero();
        }
    }
    return in;
}

Eigen::VectorXd MlpDenoiser::predict_x(const Eigen::VectorXd& z, double t,
                                       int cond) const {
    ns_.check_time(t);
    Eigen::MatrixXd in = input_block(z, t, {cond});
    std::vector<const LoraLayer*> none(weights.size(), nullptr);
    return run_plain(weights, biases, none, in, weights.size(), true).col(0);
}

Eigen::VectorXd MlpDenoiser::predict(const Eigen::VectorXd& z, double t,
                                     int cond) const {
    return (z - ns_.alpha(t) * predict_x(z, t, cond)) / ns_.sigma(t);
}

Eigen::VectorXd MlpDenoiser::hidden_features(const Eigen::VectorXd& z, double t,
                                             int cond) const {
    Eigen::MatrixXd in = input_block(z, t, {cond});
    std::vector<const LoraLayer*> none(weights.size(), nullptr);
    return run_plain(weights, biases, none, in, weights.size() - 1, false).col(0);
}

void MlpDenoiser::bind(ad::Tape& tape) const {
    leaves_.clear();
    for (std::size_t i = 0; i < weights.size(); ++i) {
        leaves_.push_back(tape.leaf(weights[i]));
        leaves_.push_back(tape.leaf(biases[i]));
    }
    leaves_.push_back(tape.leaf(cond_embed));
    bound_ = &tape;
}

ad::Value MlpDenoiser::predict_x(ad::Tape& tape, const ad::Value& z, double t,
                                 const std::vector<int>& cond) const {
    if (bound_ != &tape) throw std::logic_error("MlpDenoiser: bind() the tape first");
    ns_.check_time(t);
    const Eigen::Index b = z.cols();

    Eigen::VectorXd tf = temb_.features(t);
    ad::Value tmat = ad::constant(tf.replicate(1, b));
    bool labeled = cond.at(0) >= 0;
    ad::Value ce = labeled
                       ? ad::gather_cols(leaves_.back(), cond)
                       : ad::constant(Mat::Zero(cond_dim_, b));
    ad::Value in = ad::concat_rows(ad::concat_rows(z, tmat), ce);

    std::vector<GLayer> layers;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        layers.push_back(GLayer{leaves_[2 * i], leaves_[2 * i + 1]});
    }
    return run_layers(layers, in, true);
}

ad::Value MlpDenoiser::predict(ad::Tape& tape, const ad::Value& z, double t,
                               const std::vector<int>& cond) const {
    ad::Value xhat = predict_x(tape, z, t, cond);
    double a = ns_.alpha(t), s = ns_.sigma(t);
    return ad::scale(ad::sub(z, ad::scale(xhat, a)), 1.0 / s);
}

std::vector<Mat*> MlpDenoiser::trainable_params() {
    std::vector<Mat*> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        out.push_back(&weights[i]);
        out.push_back(&biases[i]);
    }
    out.push_back(&cond_embed);
    return out;
}

std::vector<Mat> MlpDenoiser::trainable_grads(const ad::Tape& tape) const {
    std::vector<Mat> out;
    out.reserve(leaves_.size());
    for (const auto& leaf : leaves_) out.push_back(tape.grad(leaf));
    return out;
}

std::size_t MlpDenoiser::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        n += static_cast<std::size_t>(weights[i].size() + biases[i].size());
    }
    n += static_cast<std::size_t>(cond_embed.size());
    return n;
}

LoraDenoiser LoraDenoiser::attach(std::shared_ptr<const MlpDenoiser> base, int rank,
                                  Rng& rng) {
    if (rank < 1) throw std::invalid_argument("lora rank must be >= 1");
    LoraDenoiser s;
    s.base_ = std::move(base);
    s.rank_ = rank;
    if (rank >= s.base_->width()) {
        throw std::invalid_argument("lora rank " + std::to_string(rank) +
                                    " too large for hidden width " +
                                    std::to_string(s.base_->width()));
    }
    for (const Mat& W : s.base_->weights) {
        // Narrow layers (the output head) cap the effective rank.
        Eigen::Index r = std::min<Eigen::Index>(rank, std::min(W.rows(), W.cols()));
        LoraLayer L;
        L.A = random_matrix(r, W.cols(), 1.0 / std::sqrt(static_cast<double>(W.cols())),
                            rng);
        L.B = Mat::Zero(W.rows(), r);
        L.scale = 1.0 / static_cast<double>(r);
        s.adapters_.push_back(std::move(L));
    }
    return s;
}

LoraDenoiser student_from_teacher(std::shared_ptr<const MlpDenoiser> teacher, int rank,
                                  Rng& rng) {
    return LoraDenoiser::attach(std::move(teacher), rank, rng);
}

Eigen::VectorXd LoraDenoiser::predict_x(const Eigen::VectorXd& z, double t,
                                        int cond) const {
    const auto& net = *base_;
    net.ns_.check_time(t);
    Eigen::MatrixXd in = net.input_block(z, t, {cond});
    std::vector<const LoraLayer*> ad(net.weights.size(), nullptr);
    for (std::size_t i = 0; i < adapters_.size(); ++i) ad[i] = &adapters_[i];
    return run_plain(net.weights, net.biases, ad, in, net.weights.size(), true).col(0);
}

Eigen::VectorXd LoraDenoiser::predict(const Eigen::VectorXd& z, double t,
                                      int cond) const {
    const auto& ns = base_->ns_;
    return (z - ns.alpha(t) * predict_x(z, t, cond)) / ns.sigma(t);
}

void LoraDenoiser::bind(ad::Tape& tape) const {
    leaves_.clear();
    for (const LoraLayer& L : adapters_) {
        leaves_.push_back(tape.leaf(L.A));
        leaves_.push_back(tape.leaf(L.B));
    }
    bound_ = &tape;
}

ad::Value LoraDenoiser::predict_x(ad::Tape& tape, const ad::Value& z, double t,
                                  const std::vector<int>& cond) const {
    if (bound_ != &tape) throw std::logic_error("LoraDenoiser: bind() the tape first");
    const auto& net = *base_;
    net.ns_.check_time(t);
    const Eigen::Index b = z.cols();

    Eigen::VectorXd tf = net.temb_.features(t);
    ad::Value tmat = ad::constant(tf.replicate(1, b));
    Mat ce(net.cond_dim_, b);
    for (Eigen::Index j = 0; j < b; ++j) {
        int c = cond.size() == 1 ? cond[0] : cond.at(static_cast<std::size_t>(j));
        if (c >= 0) {
            ce.col(j) = net.cond_embed.col(c);
        } else {
            ce.col(j).setZero();
        }
    }
    ad::Value in = ad::concat_rows(ad::concat_rows(z, tmat), ad::constant(std::move(ce)));

    std::vector<GLayer> layers;
    for (std::size_t i = 0; i < net.weights.size(); ++i) {
        GLayer L{ad::constant(net.weights[i]), ad::constant(net.biases[i])};
        L.lora = true;
        L.A = leaves_[2 * i];
        L.B = leaves_[2 * i + 1];
        L.scale = adapters_[i].scale;
        layers.push_back(std::move(L));
    }
    return run_layers(layers, in, true);
}

ad::Value LoraDenoiser::predict(ad::Tape& tape, const ad::Value& z, double t,
                                const std::vector<int>& cond) const {
    ad::Value xhat = predict_x(tape, z, t, cond);
    double a = base_->ns_.alpha(t), s = base_->ns_.sigma(t);
    return ad::scale(ad::sub(z, ad::scale(xhat, a)), 1.0 / s);
}

std::vector<Mat*> LoraDenoiser::trainable_params() {
    std::vector<Mat*> out;
    for (LoraLayer& L : adapters_) {
        out.push_back(&L.A);
        out.push_back(&L.B);
    }
    return out;
}

std::vector<Mat> LoraDenoiser::trainable_grads(const ad::Tape& tape) const {
    std::vector<Mat> out;
    out.reserve(leaves_.size());
    for (const auto& leaf : leaves_) out.push_back(tape.grad(leaf));
    return out;
}

std::size_t LoraDenoiser::trainable_parameter_count() const {
    std::size_t n = 0;
    for (const LoraLayer& L : adapters_) {
        n += static_cast<std::size_t>(L.A.size() + L.B.size());
    }
    return n;
}

Discriminator::Discriminator(std::shared_ptr<const MlpDenoiser> backbone, int rank,
                             int head_width, Rng& rng)
    : backbone_(std::move(backbone)), rank_(rank) {
    const auto& net = *backbone_;
    if (rank < 1 || rank >= net.width()) {
        throw std::invalid_argument("discriminator lora rank too large");
    }
    for (std::size_t i = 0; i + 1 < net.weights.size(); ++i) {
        const Mat& W = net.weights[i];
        LoraLayer L;
        L.A = random_matrix(rank, W.cols(), 1.0 / std::sqrt(static_cast<double>(W.cols())),
                            rng);
        L.B = Mat::Zero(W.rows(), rank);
        L.scale = 1.0 / rank;
        adapters_.push_back(std::move(L));
    }
    const int in = net.width_ + net.temb_.size();
    head_w1 = random_matrix(head_width, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    head_b1 = Mat::Zero(head_width, 1);
    head_w2 = Mat::Zero(1, head_width);
    head_b2 = Mat::Zero(1, 1);
}

double Discriminator::score(const Eigen::VectorXd& z, double t_n) const {
    const auto& net = *backbone_;
    Eigen::MatrixXd in = net.input_block(z, t_n, {-1});
    std::vector<const LoraLayer*> ad(net.weights.size(), nullptr);
    for (std::size_t i = 0; i < adapters_.size(); ++i) ad[i] = &adapters_[i];
    Eigen::MatrixXd feat =
        run_plain(net.weights, net.biases, ad, in, net.weights.size() - 1, false);
    Eigen::VectorXd u(feat.rows() + net.temb_.size());
    u.head(feat.rows()) = feat.col(0);
    u.tail(net.temb_.size()) = net.temb_.features(t_n);
    Eigen::VectorXd h = silu_plain(head_w1 * u + head_b1.col(0));
    return (head_w2 * h + head_b2.col(0))(0);
}

void Discriminator::bind(ad::Tape& tape) const {
    leaves_.clear();
    for (const LoraLayer& L : adapters_) {
        leaves_.push_back(tape.leaf(L.A));
        leaves_.push_back(tape.leaf(L.B));
    }
    leaves_.push_back(tape.leaf(head_w1));
    leaves_.push_back(tape.leaf(head_b1));
    leaves_.push_back(tape.leaf(head_w2));
    leaves_.push_back(tape.leaf(head_b2));
    bound_ = &tape;
}

ad::Value Discriminator::score(ad::Tape& tape, const ad::Value& z, double t_n) const {
    if (bound_ != &tape) throw std::logic_error("Discriminator: bind() the tape first");
    const auto& net = *backbone_;
    const Eigen::Index b = z.cols();
    Eigen::VectorXd tf = net.temb_.features(t_n);
    ad::Value tmat = ad::constant(tf.replicate(1, b));
    ad::Value ce = ad::constant(Mat::Zero(net.cond_dim_, b));
    ad::Value in = ad::concat_rows(ad::concat_rows(z, tmat), ce);

    std::vector<GLayer> layers;
    for (std::size_t i = 0; i + 1 < net.weights.size(); ++i) {
        GLayer L{ad::constant(net.weights[i]), ad::constant(net.biases[i])};
        L.lora = true;
        L.A = leaves_[2 * i];
        L.B = leaves_[2 * i + 1];
        L.scale = adapters_[i].scale;
        layers.push_back(std::move(L));
    }
    ad::Value feat = run_layers(layers, in, false);
    ad::Value u = ad::concat_rows(feat, tmat);
    std::size_t h0 = adapters_.size() * 2;
    ad::Value h = ad::silu(ad::add_colwise(ad::matmul(leaves_[h0], u), leaves_[h0 + 1]));
    return ad::add_colwise(ad::matmul(leaves_[h0 + 2], h), leaves_[h0 + 3]);
}

std::vector<Mat*> Discriminator::trainable_params() {
    std::vector<Mat*> out;
    for (LoraLayer& L : adapters_) {
        out.push_back(&L.A);
        out.push_back(&L.B);
    }
    out.push_back(&head_w1);
    out.push_back(&head_b1);
    out.push_back(&head_w2);
    out.push_back(&head_b2);
    return out;
}

std::vector<Mat> Discriminator::trainable_grads(const ad::Tape& tape) const {
    std::vector<Mat> out;
    out.reserve(leaves_.size());
    for (const auto& leaf : leaves_) out.push_back(tape.grad(leaf));
    return out;
}

// ---------------------------------------------------------------- checkpoint

namespace {

void write_bytes(std::ofstream& f, const void* p, std::size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
void write_u32(std::ofstream& f, std::uint32_t v) { write_bytes(f, &v, 4); }
void write_f64(std::ofstream& f, double v) { write_bytes(f, &v, 8); }
void write_mat(std::ofstream& f, const Mat& m) {
    write_u32(f, static_cast<std::uint32_t>(m.rows()));
    write_u32(f, static_cast<std::uint32_t>(m.cols()));
    write_bytes(f, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
}

void read_bytes(std::ifstream& f, void* p, std::size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(f.gcount()) != n) {
        throw CheckpointError("checkpoint truncated");
    }
}
std::uint32_t read_u32(std::ifstream& f) {
    std::uint32_t v;
    read_bytes(f, &v, 4);
    return v;
}
double read_f64(std::ifstream& f) {
    double v;
    read_bytes(f, &v, 8);
    return v;
}
Mat read_mat(std::ifstream& f) {
    std::uint32_t r = read_u32(f), c = read_u32(f);
    Mat m(r, c);
    read_bytes(f, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    return m;
}

void write_base(std::ofstream& f, const MlpDenoiser& m) {
    write_bytes(f, kCkptMagic, 8);
    write_u32(f, kCkptVersion);
    write_u32(f, static_cast<std::uint32_t>(m.dim()));
    write_u32(f, static_cast<std::uint32_t>(m.width()));
    write_u32(f, static_cast<std::uint32_t>(m.weights.size() - 1));
    write_u32(f, static_cast<std::uint32_t>(m.time_embedding().freqs));
    write_u32(f, static_cast<std::uint32_t>(m.cond_dim()));
    write_u32(f, static_cast<std::uint32_t>(m.num_labels()));
    write_f64(f, m.schedule().t_min);
    write_f64(f, m.schedule().t_max);
    for (std::size_t i = 0; i < m.weights.size(); ++i) {
        write_mat(f, m.weights[i]);
        write_mat(f, m.biases[i]);
    }
    write_mat(f, m.cond_embed);
}

}  // namespace

struct CheckpointIO {
    static std::shared_ptr<MlpDenoiser> read_base(std::ifstream& f) {
        char magic[8];
        read_bytes(f, magic, 8);
        if (std::memcmp(magic, kCkptMagic, 8) != 0) {
            throw CheckpointError("bad checkpoint magic");
        }
        std::uint32_t version = read_u32(f);
        if (version != kCkptVersion) {
            throw CheckpointError("unsupported checkpoint version " +
                                  std::to_string(version));
        }
        auto m = std::make_shared<MlpDenoiser>();
        m->dim_ = static_cast<int>(read_u32(f));
        m->width_ = static_cast<int>(read_u32(f));
        std::uint32_t hidden = read_u32(f);
        m->temb_.freqs = static_cast<int>(read_u32(f));
        m->cond_dim_ = static_cast<int>(read_u32(f));
        m->num_labels_ = static_cast<int>(read_u32(f));
        m->ns_.t_min = read_f64(f);
        m->ns_.t_max = read_f64(f);
        for (std::uint32_t i = 0; i < hidden + 1; ++i) {
            m->weights.push_back(read_mat(f));
            m->biases.push_back(read_mat(f));
        }
        m->cond_embed = read_mat(f);
        return m;
    }

    static LoraDenoiser read_student(std::ifstream& f,
                                     std::shared_ptr<const MlpDenoiser> base,
                                     std::uint32_t count) {
        LoraDenoiser s;
        s.base_ = std::move(base);
        for (std::uint32_t i = 0; i < count; ++i) {
            read_u32(f);  // layer index, sequential by construction
            std::uint32_t rank = read_u32(f);
            LoraLayer L;
            L.scale = read_f64(f);
            L.A = read_mat(f);
            L.B = read_mat(f);
            s.rank_ = std::max(s.rank_, static_cast<int>(rank));
            s.adapters_.push_back(std::move(L));
        }
        return s;
    }
};

void save_checkpoint(const MlpDenoiser& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path + " for writing");
    write_base(f, model);
    write_u32(f, 0);  // no adapter section
}

void save_checkpoint(const LoraDenoiser& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path + " for writing");
    write_base(f, model.base());
    write_u32(f, static_cast<std::uint32_t>(model.adapters().size()));
    for (std::size_t i = 0; i < model.adapters().size(); ++i) {
        const LoraLayer& L = model.adapters()[i];
        write_u32(f, static_cast<std::uint32_t>(i));
        write_u32(f, static_cast<std::uint32_t>(L.A.rows()));
        write_f64(f, L.scale);
        write_mat(f, L.A);
        write_mat(f, L.B);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    Checkpoint ck;
    ck.base = CheckpointIO::read_base(f);
    std::uint32_t count = read_u32(f);
    if (count > 0) {
        ck.student = CheckpointIO::read_student(f, ck.base, count);
    }
    return ck;
}

std::uint64_t parameter_checksum(const MlpDenoiser& model) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const Mat& m) {
        const auto* p = reinterpret_cast<const unsigned char*>(m.data());
        for (std::size_t i = 0; i < sizeof(double) * static_cast<std::size_t>(m.size());
             ++i) {
            h ^= p[i];
            h *= 0x100000001b3ull;
        }
    };
    for (std::size_t i = 0; i < model.weights.size(); ++i) {
        mix(model.weights[i]);
        mix(model.biases[i]);
    }
    mix(model.cond_embed);
    return h;
}

}  // namespace rapm::models
