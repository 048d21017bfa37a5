#include "spf/tensor_nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "spf/io.hpp"

namespace spf::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

void same_shape(const Mat& a, const Mat& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()) + ")");
}

Tape& tape_of(Var a) {
    if (a.tape == nullptr) throw std::invalid_argument("Var is not attached to a tape");
    return *a.tape;
}

Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw std::invalid_argument("Vars belong to different tapes");
    return tape_of(a);
}

// Unary elementwise op with derivative computed from input and output.
template <class F, class DF>
Var unary(Var x, F f, DF df) {
    Tape& t = tape_of(x);
    Mat out = x.value().unaryExpr(f);
    const std::size_t xi = x.id;
    return t.push(std::move(out), t.needs(xi), [xi, df](Tape& tp, std::size_t self) {
        const Mat& in = tp.value(Var{&tp, xi});
        const Mat& y = tp.value(Var{&tp, self});
        Mat g = tp.grad_ref(self);
        for (Eigen::Index i = 0; i < g.size(); ++i) g(i) *= df(in(i), y(i));
        tp.accumulate(xi, g);
    });
}

double sigmoid_of(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---- Tensor / ParamTree ---------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shp, double fill) : shape(std::move(shp)) {
    require(!shape.empty() && shape.size() <= 2, "Tensor: rank must be 1 or 2");
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    data.assign(n, fill);
}

Tensor Tensor::from_matrix(const Mat& m) {
    Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    Eigen::Map<RowMat>(t.data.data(), m.rows(), m.cols()) = m;
    return t;
}

Mat Tensor::to_matrix() const {
    return Eigen::Map<const RowMat>(data.data(), static_cast<Eigen::Index>(rows()),
                                    static_cast<Eigen::Index>(cols()));
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

Tensor& ParamTree::add(const std::string& name, Tensor value) {
    auto [it, inserted] = tensors_.emplace(name, std::move(value));
    if (!inserted) throw std::invalid_argument("ParamTree: duplicate name " + name);
    return it->second;
}

Tensor& ParamTree::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::invalid_argument("ParamTree: no tensor named " + name);
    return it->second;
}

const Tensor& ParamTree::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::invalid_argument("ParamTree: no tensor named " + name);
    return it->second;
}

std::size_t ParamTree::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.size();
    return n;
}

ParamTree ParamTree::subtree(const std::string& prefix) const {
    ParamTree out;
    for (auto it = tensors_.lower_bound(prefix); it != tensors_.end() && it->first.starts_with(prefix); ++it)
        out.tensors_.emplace(it->first, it->second);
    return out;
}

void ParamTree::assign_from(const ParamTree& other) {
    for (const auto& [name, t] : other.tensors_) {
        Tensor& dst = at(name);
        require(dst.shape == t.shape, "ParamTree::assign_from: shape mismatch for " + name);
        dst.data = t.data;
    }
}

bool ParamTree::same_structure(const ParamTree& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    auto a = tensors_.begin();
    auto b = other.tensors_.begin();
    for (; a != tensors_.end(); ++a, ++b)
        if (a->first != b->first || a->second.shape != b->second.shape) return false;
    return true;
}

void ParamTree::zero_grad() {
    for (auto& [name, t] : tensors_) t.zero_grad();
}

// ---- Tape -------------------------------------------------------------------

const Mat& Var::value() const { return tape->value(*this); }

Var Tape::push(Mat value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Mat value) { return push(std::move(value), false, nullptr); }

Var Tape::leaf(Mat value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Tape::param(ParamTree& tree, const std::string& name) {
    Tensor& t = tree.at(name);
    Var v = leaf(t.to_matrix());
    nodes_[v.id].bound = &t;
    return v;
}

Var Tape::frozen(const ParamTree& tree, const std::string& name) { return constant(tree.at(name).to_matrix()); }

Mat Tape::grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::accumulate(std::size_t id, const Mat& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    n.grad += g;
    n.touched = true;
}

void Tape::backward(Var loss) {
    require(loss.tape == this, "backward: loss is not on this tape");
    require(value(loss).size() == 1, "backward: loss must be 1 x 1");
    for (auto& n : nodes_) {
        n.touched = false;
        if (n.requires_grad)
            n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        else
            n.grad.resize(0, 0);
    }
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad(0, 0) = 1.0;
    nodes_[loss.id].touched = true;
    // Nodes that received nothing (e.g. everything behind a detach) are skipped.
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.requires_grad && n.touched && n.backward) n.backward(*this, i);
    }
    for (auto& n : nodes_) {
        if (n.bound == nullptr) continue;
        n.bound->ensure_grad();
        Eigen::Map<RowMat> dst(n.bound->grad.data(), n.value.rows(), n.value.cols());
        dst += n.grad;
    }
}

// ---- Ops --------------------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require(a.cols() == b.rows(), "matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                                      std::to_string(b.rows()) + ")");
    const std::size_t ai = a.id, bi = b.id;
    return t.push(a.value() * b.value(), t.needs(ai) || t.needs(bi), [ai, bi](Tape& tp, std::size_t self) {
        const Mat& g = tp.grad_ref(self);
        if (tp.needs(ai)) tp.accumulate(ai, g * tp.value(Var{&tp, bi}).transpose());
        if (tp.needs(bi)) tp.accumulate(bi, tp.value(Var{&tp, ai}).transpose() * g);
    });
}

Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    same_shape(a.value(), b.value(), "add");
    const std::size_t ai = a.id, bi = b.id;
    return t.push(a.value() + b.value(), t.needs(ai) || t.needs(bi), [ai, bi](Tape& tp, std::size_t self) {
        const Mat g = tp.grad_ref(self);
        tp.accumulate(ai, g);
        tp.accumulate(bi, g);
    });
}

Var sub(Var a, Var b) {
    Tape& t = tape_of(a, b);
    same_shape(a.value(), b.value(), "sub");
    const std::size_t ai = a.id, bi = b.id;
    return t.push(a.value() - b.value(), t.needs(ai) || t.needs(bi), [ai, bi](Tape& tp, std::size_t self) {
        const Mat g = tp.grad_ref(self);
        tp.accumulate(ai, g);
        tp.accumulate(bi, -g);
    });
}

Var mul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    same_shape(a.value(), b.value(), "mul");
    const std::size_t ai = a.id, bi = b.id;
    return t.push(a.value().cwiseProduct(b.value()), t.needs(ai) || t.needs(bi),
                  [ai, bi](Tape& tp, std::size_t self) {
                      const Mat g = tp.grad_ref(self);
                      if (tp.needs(ai)) tp.accumulate(ai, g.cwiseProduct(tp.value(Var{&tp, bi})));
                      if (tp.needs(bi)) tp.accumulate(bi, g.cwiseProduct(tp.value(Var{&tp, ai})));
                  });
}

Var add_row(Var x, Var b) {
    Tape& t = tape_of(x, b);
    require(b.rows() == 1 && b.cols() == x.cols(), "add_row: bias must be 1 x cols(x)");
    const std::size_t xi = x.id, bi = b.id;
    Mat out = x.value().rowwise() + b.value().row(0);
    return t.push(std::move(out), t.needs(xi) || t.needs(bi), [xi, bi](Tape& tp, std::size_t self) {
        const Mat g = tp.grad_ref(self);
        tp.accumulate(xi, g);
        if (tp.needs(bi)) tp.accumulate(bi, g.colwise().sum());
    });
}

Var mul_row(Var x, Var b) {
    Tape& t = tape_of(x, b);
    require(b.rows() == 1 && b.cols() == x.cols(), "mul_row: scale must be 1 x cols(x)");
    const std::size_t xi = x.id, bi = b.id;
    Mat out = x.value().array().rowwise() * b.value().row(0).array();
    return t.push(std::move(out), t.needs(xi) || t.needs(bi), [xi, bi](Tape& tp, std::size_t self) {
        const Mat g = tp.grad_ref(self);
        const Mat& xv = tp.value(Var{&tp, xi});
        const Mat& bv = tp.value(Var{&tp, bi});
        if (tp.needs(xi)) tp.accumulate(xi, (g.array().rowwise() * bv.row(0).array()).matrix());
        if (tp.needs(bi)) tp.accumulate(bi, g.cwiseProduct(xv).colwise().sum());
    });
}

Var mul_col(Var x, Var c) {
    Tape& t = tape_of(x, c);
    require(c.cols() == 1 && c.rows() == x.rows(), "mul_col: scale must be rows(x) x 1");
    const std::size_t xi = x.id, ci = c.id;
    Mat out = x.value().array().colwise() * c.value().col(0).array();
    return t.push(std::move(out), t.needs(xi) || t.needs(ci), [xi, ci](Tape& tp, std::size_t self) {
        const Mat g = tp.grad_ref(self);
        const Mat& xv = tp.value(Var{&tp, xi});
        const Mat& cv = tp.value(Var{&tp, ci});
        if (tp.needs(xi)) tp.accumulate(xi, (g.array().colwise() * cv.col(0).array()).matrix());
        if (tp.needs(ci)) tp.accumulate(ci, g.cwiseProduct(xv).rowwise().sum());
    });
}

Var scale(Var x, double s) {
    Tape& t = tape_of(x);
    const std::size_t xi = x.id;
    return t.push(x.value() * s, t.needs(xi),
                  [xi, s](Tape& tp, std::size_t self) { tp.accumulate(xi, tp.grad_ref(self) * s); });
}

Var add_scalar(Var x, double s) {
    Tape& t = tape_of(x);
    const std::size_t xi = x.id;
    return t.push(x.value().array() + s, t.needs(xi),
                  [xi](Tape& tp, std::size_t self) { tp.accumulate(xi, tp.grad_ref(self)); });
}

Var mul_const(Var x, const Mat& c) {
    Tape& t = tape_of(x);
    same_shape(x.value(), c, "mul_const");
    const std::size_t xi = x.id;
    return t.push(x.value().cwiseProduct(c), t.needs(xi),
                  [xi, c](Tape& tp, std::size_t self) { tp.accumulate(xi, tp.grad_ref(self).cwiseProduct(c)); });
}

Var relu(Var x) {
    return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                 [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Var swish(Var x) {
    return unary(x, [](double v) { return v * sigmoid_of(v); },
                 [](double in, double) {
                     const double s = sigmoid_of(in);
                     return s + in * s * (1.0 - s);
                 });
}

Var tanh(Var x) {
    return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var x) {
    return unary(x, [](double v) { return sigmoid_of(v); }, [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var x) {
    return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var square(Var x) {
    return unary(x, [](double v) { return v * v; }, [](double in, double) { return 2.0 * in; });
}

Var concat_cols(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require(a.rows() == b.rows(), "concat_cols: row counts differ");
    Mat out(a.rows(), a.cols() + b.cols());
    out << a.value(), b.value();
    const std::size_t ai = a.id, bi = b.id;
    const Eigen::Index ac = a.cols(), bc = b.cols();
    return t.push(std::move(out), t.needs(ai) || t.needs(bi), [ai, bi, ac, bc](Tape& tp, std::size_t self) {
        const Mat& g = tp.grad_ref(self);
        if (tp.needs(ai)) tp.accumulate(ai, g.leftCols(ac));
        if (tp.needs(bi)) tp.accumulate(bi, g.rightCols(bc));
    });
}

Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
    Tape& t = tape_of(x);
    require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols: range out of bounds");
    const std::size_t xi = x.id;
    const Eigen::Index rows = x.rows(), cols = x.cols();
    return t.push(x.value().middleCols(start, count), t.needs(xi),
                  [xi, start, count, rows, cols](Tape& tp, std::size_t self) {
                      Mat g = Mat::Zero(rows, cols);
                      g.middleCols(start, count) = tp.grad_ref(self);
                      tp.accumulate(xi, g);
                  });
}

Var sum(Var x) {
    Tape& t = tape_of(x);
    const std::size_t xi = x.id;
    const Eigen::Index r = x.rows(), c = x.cols();
    Mat out(1, 1);
    out(0, 0) = x.value().sum();
    return t.push(std::move(out), t.needs(xi), [xi, r, c](Tape& tp, std::size_t self) {
        tp.accumulate(xi, Mat::Constant(r, c, tp.grad_ref(self)(0, 0)));
    });
}

Var mean(Var x) {
    const double n = static_cast<double>(x.value().size());
    require(n > 0, "mean: empty input");
    return scale(sum(x), 1.0 / n);
}

Var row_sum(Var x) {
    Tape& t = tape_of(x);
    const std::size_t xi = x.id;
    const Eigen::Index c = x.cols();
    return t.push(x.value().rowwise().sum(), t.needs(xi), [xi, c](Tape& tp, std::size_t self) {
        tp.accumulate(xi, tp.grad_ref(self).replicate(1, c));
    });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    Tape& t = tape_of(x, gain);
    tape_of(x, bias);
    require(gain.rows() == 1 && gain.cols() == x.cols() && bias.rows() == 1 && bias.cols() == x.cols(),
            "layer_norm: gain and bias must be 1 x cols(x)");
    const Mat& xv = x.value();
    const Eigen::Index n = xv.cols();
    Mat xhat(xv.rows(), n);
    Eigen::VectorXd inv_sd(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const double mu = xv.row(r).mean();
        const double var = (xv.row(r).array() - mu).square().mean();
        inv_sd(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mu) * inv_sd(r);
    }
    Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
    const std::size_t xi = x.id, gi = gain.id, bi = bias.id;
    const bool needs = t.needs(xi) || t.needs(gi) || t.needs(bi);
    return t.push(std::move(out), needs, [xi, gi, bi, xhat, inv_sd](Tape& tp, std::size_t self) {
        const Mat& g = tp.grad_ref(self);
        const Mat& gv = tp.value(Var{&tp, gi});
        if (tp.needs(gi)) tp.accumulate(gi, g.cwiseProduct(xhat).colwise().sum());
        if (tp.needs(bi)) tp.accumulate(bi, g.colwise().sum());
        if (tp.needs(xi)) {
            const Mat gx = g.array().rowwise() * gv.row(0).array();
            Mat dx(gx.rows(), gx.cols());
            for (Eigen::Index r = 0; r < gx.rows(); ++r) {
                const double m1 = gx.row(r).mean();
                const double m2 = gx.row(r).cwiseProduct(xhat.row(r)).mean();
                dx.row(r) = inv_sd(r) * (gx.row(r).array() - m1 - xhat.row(r).array() * m2);
            }
            tp.accumulate(xi, dx);
        }
    });
}

Var cosine_distance(Var x, Var y, double eps) {
    Tape& t = tape_of(x, y);
    same_shape(x.value(), y.value(), "cosine_distance");
    const Mat& xv = x.value();
    const Mat& yv = y.value();
    const Eigen::Index B = xv.rows();
    Eigen::VectorXd nx(B), ny(B), dot(B);
    Mat out(B, 1);
    for (Eigen::Index r = 0; r < B; ++r) {
        nx(r) = xv.row(r).norm();
        ny(r) = yv.row(r).norm();
        dot(r) = xv.row(r).dot(yv.row(r));
        out(r, 0) = 1.0 - dot(r) / (nx(r) * ny(r) + eps);
    }
    const std::size_t xi = x.id, yi = y.id;
    return t.push(std::move(out), t.needs(xi) || t.needs(yi), [xi, yi, nx, ny, dot, eps](Tape& tp, std::size_t self) {
        const Mat& g = tp.grad_ref(self);
        const Mat& xv2 = tp.value(Var{&tp, xi});
        const Mat& yv2 = tp.value(Var{&tp, yi});
        Mat gx = Mat::Zero(xv2.rows(), xv2.cols());
        Mat gy = Mat::Zero(yv2.rows(), yv2.cols());
        for (Eigen::Index r = 0; r < xv2.rows(); ++r) {
            const double den = nx(r) * ny(r) + eps;
            // d = 1 - dot / den; a zero-norm row contributes no direction term.
            gx.row(r) = -yv2.row(r) / den;
            gy.row(r) = -xv2.row(r) / den;
            if (nx(r) > 0.0) gx.row(r) += dot(r) * ny(r) / (den * den * nx(r)) * xv2.row(r);
            if (ny(r) > 0.0) gy.row(r) += dot(r) * nx(r) / (den * den * ny(r)) * yv2.row(r);
            gx.row(r) *= g(r, 0);
            gy.row(r) *= g(r, 0);
        }
        if (tp.needs(xi)) tp.accumulate(xi, gx);
        if (tp.needs(yi)) tp.accumulate(yi, gy);
    });
}

Var squared_error(Var x, Var y) { return row_sum(square(sub(x, y))); }

Var detach(Var x) { return tape_of(x).constant(x.value()); }

// ---- Layers -----------------------------------------------------------------

Activation parse_activation(const std::string& name) {
    if (name == "identity" || name == "linear") return Activation::identity;
    if (name == "relu") return Activation::relu;
    if (name == "swish") return Activation::swish;
    if (name == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::swish: return "swish";
        case Activation::tanh: return "tanh";
    }
    return "identity";
}

std::size_t LayerSpec::output_width() const {
    switch (kind) {
        case LayerKind::dense: return out;
        case LayerKind::densenet_block: return in + out;
        case LayerKind::layernorm:
        case LayerKind::activation: return in;
    }
    return in;
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out, Activation act) {
    return {LayerKind::dense, in, out, act};
}
LayerSpec LayerSpec::densenet_block(std::size_t in, std::size_t growth, Activation act) {
    return {LayerKind::densenet_block, in, growth, act};
}
LayerSpec LayerSpec::layernorm(std::size_t width) { return {LayerKind::layernorm, width, width, Activation::identity}; }
LayerSpec LayerSpec::activation_only(std::size_t width, Activation act) {
    return {LayerKind::activation, width, width, act};
}

void validate_stack(const LayerStack& stack) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
        const auto& l = stack[i];
        require(l.in > 0 && l.out > 0, "layer " + std::to_string(i) + ": widths must be positive");
        if (i > 0)
            require(stack[i - 1].output_width() == l.in,
                    "layer " + std::to_string(i) + ": input width " + std::to_string(l.in) +
                        " does not match previous output " + std::to_string(stack[i - 1].output_width()));
    }
}

LayerStack densenet_stack(std::size_t in, std::size_t blocks, std::size_t growth, Activation act) {
    LayerStack out;
    std::size_t width = in;
    for (std::size_t b = 0; b < blocks; ++b) {
        out.push_back(LayerSpec::densenet_block(width, growth, act));
        width += growth;
    }
    return out;
}

LayerStack mlp_stack(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Activation act) {
    LayerStack s;
    std::size_t width = in;
    for (auto h : hidden) {
        s.push_back(LayerSpec::dense(width, h, act));
        width = h;
    }
    s.push_back(LayerSpec::dense(width, out, Activation::identity));
    return s;
}

namespace {

std::string layer_name(const std::string& prefix, std::size_t i, const char* leaf) {
    return prefix + "/layer" + std::to_string(i) + "/" + leaf;
}

void init_dense(ParamTree& params, const std::string& w, const std::string& b, std::size_t in, std::size_t out,
                Rng& rng, DenseInit mode) {
    Tensor weight({in, out});
    if (mode == DenseInit::uniform) {
        const double lim = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& v : weight.data) v = rng.uniform(-lim, lim);
    } else if (mode == DenseInit::identity) {
        for (std::size_t i = 0; i < std::min(in, out); ++i) weight.data[i * out + i] = 1.0;
    }
    params.add(w, std::move(weight));
    params.add(b, Tensor({1, out}));
}

Var apply_activation(Var x, Activation a) {
    switch (a) {
        case Activation::identity: return x;
        case Activation::relu: return relu(x);
        case Activation::swish: return swish(x);
        case Activation::tanh: return tanh(x);
    }
    return x;
}

}  // namespace

void init_stack(const LayerStack& stack, const std::string& prefix, ParamTree& params, Rng& rng, DenseInit last) {
    validate_stack(stack);
    std::size_t last_dense = stack.size();
    for (std::size_t i = 0; i < stack.size(); ++i)
        if (stack[i].kind == LayerKind::dense) last_dense = i;
    for (std::size_t i = 0; i < stack.size(); ++i) {
        const auto& l = stack[i];
        switch (l.kind) {
            case LayerKind::dense:
                init_dense(params, layer_name(prefix, i, "weight"), layer_name(prefix, i, "bias"), l.in, l.out, rng,
                           i == last_dense ? last : DenseInit::uniform);
                break;
            case LayerKind::densenet_block:
                init_dense(params, layer_name(prefix, i, "weight"), layer_name(prefix, i, "bias"), l.in, l.out, rng,
                           DenseInit::uniform);
                params.add(layer_name(prefix, i, "ln_gain"), Tensor({1, l.out}, 1.0));
                params.add(layer_name(prefix, i, "ln_bias"), Tensor({1, l.out}));
                break;
            case LayerKind::layernorm:
                params.add(layer_name(prefix, i, "ln_gain"), Tensor({1, l.in}, 1.0));
                params.add(layer_name(prefix, i, "ln_bias"), Tensor({1, l.in}));
                break;
            case LayerKind::activation: break;
        }
    }
}

Var forward(const LayerStack& stack, const std::string& prefix, ParamTree& params, Var input, Tape& tape,
            bool trainable) {
    auto p = [&](std::size_t i, const char* leaf) {
        const std::string name = layer_name(prefix, i, leaf);
        return trainable ? tape.param(params, name) : tape.frozen(params, name);
    };
    Var x = input;
    for (std::size_t i = 0; i < stack.size(); ++i) {
        const auto& l = stack[i];
        require(static_cast<std::size_t>(x.cols()) == l.in,
                prefix + " layer " + std::to_string(i) + ": expected width " + std::to_string(l.in) + ", got " +
                    std::to_string(x.cols()));
        switch (l.kind) {
            case LayerKind::dense: {
                Var h = matmul(x, p(i, "weight"));
                x = apply_activation(add_row(h, p(i, "bias")), l.activation);
                break;
            }
            case LayerKind::densenet_block: {
                Var h = matmul(x, p(i, "weight"));
                h = add_row(h, p(i, "bias"));
                h = layer_norm(h, p(i, "ln_gain"),
                               p(i, "ln_bias"));
                x = concat_cols(x, apply_activation(h, l.activation));
                break;
            }
            case LayerKind::layernorm:
                x = layer_norm(x, p(i, "ln_gain"),
                               p(i, "ln_bias"));
                break;
            case LayerKind::activation: x = apply_activation(x, l.activation); break;
        }
    }
    return x;
}

// ---- Optimisation -----------------------------------------------------------

AdamState adam_init(const ParamTree& params, const std::string& prefix) {
    AdamState s;
    for (const auto& [name, t] : params) {
        if (!name.starts_with(prefix)) continue;
        s.m.add(name, Tensor(t.shape));
        s.v.add(name, Tensor(t.shape));
    }
    return s;
}

void adam_step(ParamTree& params, AdamState& state, const AdamConfig& cfg) {
    require(state.m.same_structure(state.v), "adam_step: moment trees misaligned");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (auto& [name, mt] : state.m) {
        Tensor& p = params.at(name);
        require(p.shape == mt.shape, "adam_step: shape mismatch for " + name);
        auto& m = mt.data;
        auto& v = state.v.at(name).data;
        const bool has_grad = p.grad.size() == p.data.size();
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double g = has_grad ? p.grad[i] : 0.0;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

void ema_update(const ParamTree& online, ParamTree& target, double tau) {
    require(online.same_structure(target), "ema_update: online and target structures differ");
    require(tau >= 0.0 && tau <= 1.0, "ema_update: tau must lie in [0, 1]");
    for (const auto& [name, src] : online) {
        auto& dst = target.at(name).data;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = tau * src.data[i] + (1.0 - tau) * dst[i];
    }
}

// ---- Checkpoints ------------------------------------------------------------

void Checkpoint::add_tree(const std::string& prefix, const ParamTree& tree) {
    for (const auto& [name, t] : tree) {
        Tensor copy;
        copy.shape = t.shape;
        copy.data = t.data;
        tensors.emplace_back(prefix + name, std::move(copy));
    }
}

void Checkpoint::load_tree(const std::string& prefix, ParamTree& tree) const {
    std::size_t found = 0;
    for (const auto& [name, t] : tensors) {
        if (!name.starts_with(prefix)) continue;
        Tensor& dst = tree.at(name.substr(prefix.size()));
        require(dst.shape == t.shape, "checkpoint: shape mismatch for " + name);
        dst.data = t.data;
        ++found;
    }
    require(found == tree.size(), "checkpoint: tree '" + prefix + "' is incomplete");
}

const Tensor& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw std::invalid_argument("checkpoint: no tensor named " + name);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& base_path) {
    nlohmann::json manifest;
    manifest["format"] = "spf-checkpoint";
    manifest["version"] = 1;
    manifest["dtype"] = "float64";
    manifest["endianness"] = "little";
    manifest["step"] = ckpt.step;
    manifest["meta"] = nlohmann::json::parse(ckpt.meta_json);
    std::string blob;
    std::size_t offset = 0;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [name, t] : ckpt.tensors) {
        entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"count", t.data.size()}});
        for (double v : t.data) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
        }
        offset += t.data.size();
    }
    manifest["tensors"] = std::move(entries);
    write_atomic(base_path + ".bin", blob);
    write_atomic(base_path + ".json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& base_path) {
    const std::string text = read_file(base_path + ".json");
    const std::string blob = read_file(base_path + ".bin");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint manifest " + base_path + ".json is not valid JSON: " + e.what());
    }
    if (manifest.value("format", "") != "spf-checkpoint") throw IoError("not a checkpoint manifest: " + base_path);
    Checkpoint ckpt;
    ckpt.step = manifest.at("step").get<std::uint64_t>();
    ckpt.meta_json = manifest.at("meta").dump();
    for (const auto& e : manifest.at("tensors")) {
        Tensor t;
        t.shape = e.at("shape").get<std::vector<std::size_t>>();
        const auto offset = e.at("offset").get<std::size_t>();
        const auto count = e.at("count").get<std::size_t>();
        if ((offset + count) * 8 > blob.size()) throw IoError("checkpoint blob truncated: " + base_path + ".bin");
        t.data.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[(offset + i) * 8 + b])) << (8 * b);
            t.data[i] = std::bit_cast<double>(bits);
        }
        ckpt.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
    return ckpt;
}

}  // namespace spf::nn
