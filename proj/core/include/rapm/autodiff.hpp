#pragma once

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

// Minimal reverse-mode engine over dense 64-bit matrices. A Tape records
// operations in topological order; backward() walks it once in reverse and
// accumulates gradients additively. Values with node == -1 are constants and
// carry no ancestry.
namespace rapm::ad {

using Mat = Eigen::MatrixXd;

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Tape;

struct Value {
    Mat data;
    int node = -1;
    Tape* tape = nullptr;

    bool requires_grad() const { return node >= 0; }
    double scalar() const;
    Eigen::Index rows() const { return data.rows(); }
    Eigen::Index cols() const { return data.cols(); }
};

class Tape {
public:
    // Trainable leaf: participates in backward, grad retrievable afterwards.
    Value leaf(Mat data);

    // Records an interior node. `pull` receives the node's output gradient
    // and must accumulate into its parents via Tape::accumulate.
    Value record(Mat data, std::function<void(Tape&, const Mat&)> pull);

    void backward(const Value& loss);

    // Gradient of a tracked value after backward(); zeros if none flowed.
    Mat grad(const Value& v) const;

    void accumulate(int node, const Mat& g);
    void reset() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::function<void(Tape&, const Mat&)> pull;
        Mat grad;
        bool has_grad = false;
        Eigen::Index rows = 0, cols = 0;
    };
    std::vector<Node> nodes_;
};

Value constant(Mat data);

// Shares data bit-for-bit, drops all tape ancestry.
Value detach(const Value& v);

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);  // element-wise
Value matmul(const Value& a, const Value& b);
Value scale(const Value& v, double c);
Value add_scalar(const Value& v, double c);
Value neg(const Value& v);
Value silu(const Value& v);
Value relu(const Value& v);
Value sqrt_ew(const Value& v);
Value sum(const Value& v);
Value mean(const Value& v);
Value concat_rows(const Value& a, const Value& b);
// m + bias replicated across columns; bias is (rows x 1).
Value add_colwise(const Value& m, const Value& bias);
// Column gather with scatter-add backward.
Value gather_cols(const Value& m, const std::vector<int>& idx);

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<Mat> m, v;
};

void adam_step(const std::vector<Mat*>& params, const std::vector<Mat>& grads,
               AdamState& state);

}  // namespace rapm::ad
