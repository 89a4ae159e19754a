#pragma once

#include <Eigen/Dense>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rapm/autodiff.hpp"
#include "rapm/diffusion.hpp"
#include "rapm/rng.hpp"

namespace rapm::models {

using ad::Mat;

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Sinusoidal features of t, geometric frequency spacing.
struct TimeEmbedding {
    int freqs = 16;
    double omega_min = 1.0;
    double omega_max = 1000.0;

    int size() const { return 2 * freqs; }
    Eigen::VectorXd features(double t) const;
};

// Base epsilon-predictor: input [z; time features; condition embedding],
// three SiLU hidden layers, linear output head. The head output is read as an
// x-estimate and converted to epsilon as (z - alpha*xhat)/sigma, which keeps
// predictions finite near t = t_max where alpha(t) underflows.
class MlpDenoiser : public diff::TrainableDenoiser {
public:
    MlpDenoiser(int dim, int width, int num_labels, int cond_dim, int time_freqs,
                Rng& rng, const diff::NoiseSchedule& ns);
    MlpDenoiser() = default;

    int dim() const override { return dim_; }
    int width() const { return width_; }
    int num_labels() const { return num_labels_; }
    int cond_dim() const { return cond_dim_; }
    const TimeEmbedding& time_embedding() const { return temb_; }
    const diff::NoiseSchedule& schedule() const { return ns_; }

    Eigen::VectorXd predict(const Eigen::VectorXd& z, double t, int cond) const override;
    Eigen::VectorXd predict_x(const Eigen::VectorXd& z, double t, int cond) const override;

    void bind(ad::Tape& tape) const override;
    ad::Value predict(ad::Tape& tape, const ad::Value& z, double t,
                      const std::vector<int>& cond) const override;
    ad::Value predict_x(ad::Tape& tape, const ad::Value& z, double t,
                        const std::vector<int>& cond) const override;
    std::vector<Mat*> trainable_params() override;
    std::vector<Mat> trainable_grads(const ad::Tape& tape) const override;

    std::size_t parameter_count() const;

    // Plain hidden features after the last SiLU layer (for discriminators).
    Eigen::VectorXd hidden_features(const Eigen::VectorXd& z, double t, int cond) const;

    // Layout: weights[i] is (out x in), biases[i] is (out x 1), i = 0..3.
    std::vector<Mat> weights;
    std::vector<Mat> biases;
    Mat cond_embed;  // cond_dim x num_labels

    Eigen::MatrixXd input_block(const Eigen::MatrixXd& z, double t,
                                const std::vector<int>& cond) const;

private:
    int dim_ = 0, width_ = 0, num_labels_ = 0, cond_dim_ = 0;
    TimeEmbedding temb_;
    diff::NoiseSchedule ns_;

    mutable ad::Tape* bound_ = nullptr;
    mutable std::vector<ad::Value> leaves_;

    friend class LoraDenoiser;
    friend class Discriminator;
    friend struct CheckpointIO;
};

// One low-rank delta on a frozen layer: effective W = W_base + scale * B * A.
// Only A and B train; zero-init B makes the adapted model equal the base.
struct LoraLayer {
    Mat A;  // rank x in
    Mat B;  // out x rank
    double scale = 1.0;
};

// Student: frozen teacher backbone plus a LoRA pair on every layer.
class LoraDenoiser : public diff::TrainableDenoiser {
public:
    static LoraDenoiser attach(std::shared_ptr<const MlpDenoiser> base, int rank,
                               Rng& rng);

    int dim() const override { return base_->dim(); }
    int rank() const { return rank_; }
    const MlpDenoiser& base() const { return *base_; }
    std::shared_ptr<const MlpDenoiser> base_ptr() const { return base_; }
    const std::vector<LoraLayer>& adapters() const { return adapters_; }
    std::vector<LoraLayer>& adapters() { return adapters_; }

    Eigen::VectorXd predict(const Eigen::VectorXd& z, double t, int cond) const override;
    Eigen::VectorXd predict_x(const Eigen::VectorXd& z, double t, int cond) const override;

    void bind(ad::Tape& tape) const override;
    ad::Value predict(ad::Tape& tape, const ad::Value& z, double t,
                      const std::vector<int>& cond) const override;
    ad::Value predict_x(ad::Tape& tape, const ad::Value& z, double t,
                        const std::vector<int>& cond) const override;
    std::vector<Mat*> trainable_params() override;
    std::vector<Mat> trainable_grads(const ad::Tape& tape) const override;

    std::size_t trainable_parameter_count() const;

private:
    std::shared_ptr<const MlpDenoiser> base_;
    std::vector<LoraLayer> adapters_;
    int rank_ = 0;

    mutable ad::Tape* bound_ = nullptr;
    mutable std::vector<ad::Value> leaves_;

    friend struct CheckpointIO;
};

// Conditional critic: frozen teacher backbone with its own adapters on the
// feature-producing layers, plus a scalar head over [features; temb(t_n)].
// The head's final layer is zero-init so an untrained critic scores 0.
class Discriminator {
public:
    Discriminator(std::shared_ptr<const MlpDenoiser> backbone, int rank, int head_width,
                  Rng& rng);

    double score(const Eigen::VectorXd& z, double t_n) const;

    void bind(ad::Tape& tape) const;
    ad::Value score(ad::Tape& tape, const ad::Value& z, double t_n) const;
    std::vector<Mat*> trainable_params();
    std::vector<Mat> trainable_grads(const ad::Tape& tape) const;

    const MlpDenoiser& backbone() const { return *backbone_; }

private:
    std::shared_ptr<const MlpDenoiser> backbone_;
    std::vector<LoraLayer> adapters_;  // layers 0..2
    Mat head_w1, head_b1, head_w2, head_b2;
    int rank_ = 0;

    mutable ad::Tape* bound_ = nullptr;
    mutable std::vector<ad::Value> leaves_;
};

LoraDenoiser student_from_teacher(std::shared_ptr<const MlpDenoiser> teacher, int rank,
                                  Rng& rng);

// Versioned binary checkpoint, magic "RAPMCKPT". Round-trips bit-exactly.
void save_checkpoint(const MlpDenoiser& model, const std::string& path);
void save_checkpoint(const LoraDenoiser& model, const std::string& path);

struct Checkpoint {
    std::shared_ptr<MlpDenoiser> base;
    std::optional<LoraDenoiser> student;  // present when an adapter section exists
};
Checkpoint load_checkpoint(const std::string& path);

// FNV-1a over all parameter bytes; freezing contract checks.
std::uint64_t parameter_checksum(const MlpDenoiser& model);

}  // namespace rapm::models
