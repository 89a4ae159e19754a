#include "rapm/autodiff.hpp"

#include <cmath>

namespace rapm::ad {

namespace {

std::string shape_str(const Mat& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const char* op, const Mat& a, const Mat& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                         " vs " + shape_str(b));
    }
}

Tape* resolve_tape(const char* op, const Value& a, const Value& b) {
    if (a.requires_grad() && b.requires_grad() && a.tape != b.tape) {
        throw std::logic_error(std::string(op) + ": operands on different tapes");
    }
    if (a.requires_grad()) return a.tape;
    if (b.requires_grad()) return b.tape;
    return nullptr;
}

}  // namespace

double Value::scalar() const {
    if (data.rows() != 1 || data.cols() != 1) {
        throw ShapeError("scalar() on non-scalar value " + shape_str(data));
    }
    return data(0, 0);
}

Value Tape::leaf(Mat data) {
    Node n;
    n.pull = nullptr;
    n.rows = data.rows();
    n.cols = data.cols();
    nodes_.push_back(std::move(n));
    return Value{std::move(data), static_cast<int>(nodes_.size() - 1), this};
}

Value Tape::record(Mat data, std::function<void(Tape&, const Mat&)> pull) {
    Node n;
    n.pull = std::move(pull);
    n.rows = data.rows();
    n.cols = data.cols();
    nodes_.push_back(std::move(n));
    return Value{std::move(data), static_cast<int>(nodes_.size() - 1), this};
}

void Tape::accumulate(int node, const Mat& g) {
    Node& n = nodes_.at(static_cast<std::size_t>(node));
    if (g.rows() != n.rows || g.cols() != n.cols) {
        throw ShapeError("gradient shape " + shape_str(g) + " does not match node " +
                         std::to_string(n.rows) + "x" + std::to_string(n.cols));
    }
    if (!n.has_grad) {
        n.grad = g;
        n.has_grad = true;
    } else {
        n.grad += g;
    }
}

void Tape::backward(const Value& loss) {
    if (!loss.requires_grad() || loss.tape != this) {
        throw std::logic_error("backward: loss is not on this tape");
    }
    if (loss.data.rows() != 1 || loss.data.cols() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.data));
    }
    accumulate(loss.node, Mat::Ones(1, 1));
    for (int i = loss.node; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.has_grad && n.pull) {
            n.pull(*this, n.grad);
        }
    }
}

Mat Tape::grad(const Value& v) const {
    if (!v.requires_grad() || v.tape != this) {
        throw std::logic_error("grad: value is not tracked on this tape");
    }
    const Node& n = nodes_.at(static_cast<std::size_t>(v.node));
    if (!n.has_grad) return Mat::Zero(n.rows, n.cols);
    return n.grad;
}

Value constant(Mat data) { return Value{std::move(data), -1, nullptr}; }

Value detach(const Value& v) { return Value{v.data, -1, nullptr}; }

Value add(const Value& a, const Value& b) {
    require_same_shape("add", a.data, b.data);
    Tape* t = resolve_tape("add", a, b);
    Mat out = a.data + b.data;
    if (!t) return constant(std::move(out));
    int pa = a.node, pb = b.node;
    return t->record(std::move(out), [pa, pb](Tape& tp, const Mat& g) {
        if (pa >= 0) tp.accumulate(pa, g);
        if (pb >= 0) tp.accumulate(pb, g);
    });
}

Value sub(const Value& a, const Value& b) {
    require_same_shape("sub", a.data, b.data);
    Tape* t = resolve_tape("sub", a, b);
    Mat out = a.data - b.data;
    if (!t) return constant(std::move(out));
    int pa = a.node, pb = b.node;
    return t->record(std::move(out), [pa, pb](Tape& tp, const Mat& g) {
        if (pa >= 0) tp.accumulate(pa, g);
        if (pb >= 0) tp.accumulate(pb, -g);
    });
}

Value mul(const Value& a, const Value& b) {
    require_same_shape("mul", a.data, b.data);
    Tape* t = resolve_tape("mul", a, b);
    Mat out = a.data.cwiseProduct(b.data);
    if (!t) return constant(std::move(out));
    int pa = a.node, pb = b.node;
    Mat da = a.data, db = b.data;
    return t->record(std::move(out), [pa, pb, da, db](Tape& tp, const Mat& g) {
        if (pa >= 0) tp.accumulate(pa, g.cwiseProduct(db));
        if (pb >= 0) tp.accumulate(pb, g.cwiseProduct(da));
    });
}

Value matmul(const Value& a, const Value& b) {
    if (a.data.cols() != b.data.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.data) +
                         " vs " + shape_str(b.data));
    }
    Tape* t = resolve_tape("matmul", a, b);
    Mat out = a.data * b.data;
    if (!t) return constant(std::move(out));
    int pa = a.node, pb = b.node;
    Mat da = a.data, db = b.data;
    return t->record(std::move(out), [pa, pb, da, db](Tape& tp, const Mat& g) {
        if (pa >= 0) tp.accumulate(pa, g * db.transpose());
        if (pb >= 0) tp.accumulate(pb, da.transpose() * g);
    });
}

Value scale(const Value& v, double c) {
    Mat out = v.data * c;
    if (!v.requires_grad()) return constant(std::move(out));
    int p = v.node;
    return v.tape->record(std::move(out), [p, c](Tape& tp, const Mat& g) {
        tp.accumulate(p, g * c);
    });
}

Value add_scalar(const Value& v, double c) {
    Mat out = v.data.array() + c;
    if (!v.requires_grad()) return constant(std::move(out));
    int p = v.node;
    return v.tape->record(std::move(out), [p](Tape& tp, const Mat& g) {
        tp.accumulate(p, g);
    });
}

Value neg(const Value& v) { return scale(v, -1.0); }

Value silu(const Value& v) {
    Mat sig = (1.0 / (1.0 + (-v.data.array()).exp())).matrix();
    Mat out = v.data.cwiseProduct(sig);
    if (!v.requires_grad()) return constant(std::move(out));
    int p = v.node;
    Mat x = v.data;
    return v.tape->record(std::move(out), [p, x, sig](Tape& tp, const Mat& g) {
        // d/dx x*s(x) = s(x) * (1 + x*(1-s(x)))
        Mat d = sig.array() * (1.0 + x.array() * (1.0 - sig.array()));
        tp.accumulate(p, g.cwiseProduct(d));
    });
}

Value relu(const Value& v) {
    Mat out = v.data.cwiseMax(0.0);
    if (!v.requires_grad()) return constant(std::move(out));
    int p = v.node;
    Mat x = v.data;
    return v.tape->record(std::move(out), [p, x](Tape& tp, const Mat& g) {
        Mat d = (x.array() > 0.0).cast<double>();
        tp.accumulate(p, g.cwiseProduct(d));
    });
}

Value sqrt_ew(const Value& v) {
    Mat out = v.data.array().sqrt().matrix();
    if (!v.requires_grad()) return constant(std::move(out));
    int p = v.node;
    Mat y = out;
    return v.tape->record(std::move(out), [p, y](Tape& tp, const Mat& g) {
        tp.accumulate(p, (g.array() * 0.5 / y.array()).matrix());
    });
}

Value sum(const Value& v) {
    Mat out(1, 1);
    out(0, 0) = v.data.sum();
    if (!v.requires_grad()) return constant(std::move(out));
    int p = v.node;
    Eigen::Index r = v.data.rows(), c = v.data.cols();
    return v.tape->record(std::move(out), [p, r, c](Tape& tp, const Mat& g) {
        tp.accumulate(p, Mat::Constant(r, c, g(0, 0)));
    });
}

Value mean(const Value& v) {
    Mat out(1, 1);
    out(0, 0) = v.data.mean();
    if (!v.requires_grad()) return constant(std::move(out));
    int p = v.node;
    Eigen::Index r = v.data.rows(), c = v.data.cols();
    double n = static_cast<double>(r * c);
    return v.tape->record(std::move(out), [p, r, c, n](Tape& tp, const Mat& g) {
        tp.accumulate(p, Mat::Constant(r, c, g(0, 0) / n));
    });
}

Value concat_rows(const Value& a, const Value& b) {
    if (a.data.cols() != b.data.cols()) {
        throw ShapeError("concat_rows: column count differs, " + shape_str(a.data) +
                         " vs " + shape_str(b.data));
    }
    Tape* t = resolve_tape("concat_rows", a, b);
    Mat out(a.data.rows() + b.data.rows(), a.data.cols());
    out.topRows(a.data.rows()) = a.data;
    out.bottomRows(b.data.rows()) = b.data;
    if (!t) return constant(std::move(out));
    int pa = a.node, pb = b.node;
    Eigen::Index ra = a.data.rows(), rb = b.data.rows();
    return t->record(std::move(out), [pa, pb, ra, rb](Tape& tp, const Mat& g) {
        if (pa >= 0) tp.accumulate(pa, g.topRows(ra));
        if (pb >= 0) tp.accumulate(pb, g.bottomRows(rb));
    });
}

Value add_colwise(const Value& m, const Value& bias) {
    if (bias.data.cols() != 1 || bias.data.rows() != m.data.rows()) {
        throw ShapeError("add_colwise: bias " + shape_str(bias.data) +
                         " does not broadcast over " + shape_str(m.data));
    }
    Tape* t = resolve_tape("add_colwise", m, bias);
    Mat out = m.data.colwise() + Eigen::VectorXd(bias.data.col(0));
    if (!t) return constant(std::move(out));
    int pm = m.node, pb = bias.node;
    return t->record(std::move(out), [pm, pb](Tape& tp, const Mat& g) {
        if (pm >= 0) tp.accumulate(pm, g);
        if (pb >= 0) tp.accumulate(pb, g.rowwise().sum());
    });
}

Value gather_cols(const Value& m, const std::vector<int>& idx) {
    Mat out(m.data.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] < 0 || idx[j] >= m.data.cols()) {
            throw std::out_of_range("gather_cols: index " + std::to_string(idx[j]) +
                                    " out of " + std::to_string(m.data.cols()));
        }
        out.col(static_cast<Eigen::Index>(j)) = m.data.col(idx[j]);
    }
    if (!m.requires_grad()) return constant(std::move(out));
    int p = m.node;
    Eigen::Index r = m.data.rows(), c = m.data.cols();
    std::vector<int> ix = idx;
    return m.tape->record(std::move(out), [p, r, c, ix](Tape& tp, const Mat& g) {
        Mat acc = Mat::Zero(r, c);
        for (std::size_t j = 0; j < ix.size(); ++j) {
            acc.col(ix[j]) += g.col(static_cast<Eigen::Index>(j));
        }
        tp.accumulate(p, acc);
    });
}

void adam_step(const std::vector<Mat*>& params, const std::vector<Mat>& grads,
               AdamState& state) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adam_step: params/grads count mismatch");
    }
    if (state.m.empty()) {
        state.m.reserve(params.size());
        state.v.reserve(params.size());
        for (const Mat* p : params) {
            state.m.push_back(Mat::Zero(p->rows(), p->cols()));
            state.v.push_back(Mat::Zero(p->rows(), p->cols()));
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Mat& p = *params[i];
        const Mat& g = grads[i];
        if (g.rows() != p.rows() || g.cols() != p.cols()) {
            throw ShapeError("adam_step: gradient shape mismatch at param " +
                             std::to_string(i));
        }
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i].array().matrix() +
                     (1.0 - state.beta2) * g.cwiseProduct(g);
        Mat mhat = state.m[i] / bc1;
        Mat vhat = state.v[i] / bc2;
        p.array() -= state.lr * mhat.array() / (vhat.array().sqrt() + state.eps);
    }
}

}  // namespace rapm::ad
