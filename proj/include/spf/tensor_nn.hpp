#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spf/rng.hpp"

namespace spf::nn {

using Mat = Eigen::MatrixXd;

/// Dense real tensor of rank 1 or 2 with row-major storage. A rank-1 tensor
/// of length n behaves as a 1 x n row wherever a matrix is expected.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  ///< empty, or the same length as data

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);

    static Tensor from_matrix(const Mat& m);
    Mat to_matrix() const;

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }
    void ensure_grad();
    void zero_grad();
};

/// Named parameter tensors, e.g. "encoder_s/layer0/weight".
class ParamTree {
public:
    /// Throws std::invalid_argument on a duplicate name.
    Tensor& add(const std::string& name, Tensor value);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    std::size_t size() const { return tensors_.size(); }
    std::size_t parameter_count() const;

    /// Sub-tree of all tensors whose name starts with `prefix`.
    ParamTree subtree(const std::string& prefix) const;
    /// Overwrites the tensors of `other` (names must already exist).
    void assign_from(const ParamTree& other);
    /// True when both trees hold the same names with the same shapes.
    bool same_structure(const ParamTree& other) const;
    void zero_grad();

    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }
    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }

private:
    std::map<std::string, Tensor> tensors_;
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Mat& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

/// Records operations for reverse-mode differentiation. Not thread safe; one
/// tape per forward/backward pass.
class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    /// Leaf that never receives a gradient.
    Var constant(Mat value);
    /// Leaf whose gradient is kept on the tape (read it with grad()).
    Var leaf(Mat value);
    /// Leaf bound to a parameter; backward() adds into the tensor's grad.
    Var param(ParamTree& tree, const std::string& name);
    /// Parameter value as a constant (no gradient).
    Var frozen(const ParamTree& tree, const std::string& name);

    const Mat& value(Var v) const { return nodes_[v.id].value; }
    /// Gradient of the last backward() with respect to v (zeros if unreachable).
    Mat grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    /// Back-propagates from a 1 x 1 loss. Parameter grads are accumulated.
    void backward(Var loss);
    std::size_t size() const { return nodes_.size(); }

    // Used by the op implementations.
    Var push(Mat value, bool requires_grad, Backward backward);
    Mat& grad_ref(std::size_t id) { return nodes_[id].grad; }
    bool needs(std::size_t id) const { return nodes_[id].requires_grad; }
    void accumulate(std::size_t id, const Mat& g);

private:
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
        bool touched = false;  ///< received a gradient during the current backward pass
        Backward backward;
        Tensor* bound = nullptr;
    };
    std::vector<Node> nodes_;
};

// Elementwise and linear ops. Shapes must agree exactly unless noted;
// mismatches throw std::invalid_argument.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// x (B x n) plus row vector b (1 x n) broadcast over rows.
Var add_row(Var x, Var b);
/// x (B x n) times row vector b (1 x n) broadcast over rows.
Var mul_row(Var x, Var b);
/// x (B x n) times column c (B x 1) broadcast over columns.
Var mul_col(Var x, Var c);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);
/// Elementwise product with a constant matrix of the same shape.
Var mul_const(Var x, const Mat& c);
Var relu(Var x);
Var swish(Var x);  ///< x * sigmoid(x)
Var tanh(Var x);
Var sigmoid(Var x);
Var exp(Var x);
Var square(Var x);
Var concat_cols(Var a, Var b);
Var slice_cols(Var x, Eigen::Index start, Eigen::Index count);
Var sum(Var x);   ///< 1 x 1
Var mean(Var x);  ///< 1 x 1
Var row_sum(Var x);  ///< B x 1
/// Row-wise layer normalization with per-feature gain and bias (1 x n).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Row-wise 1 - <x, y> / (|x| |y| + eps), returned as B x 1.
Var cosine_distance(Var x, Var y, double eps = 1e-8);
/// Row-wise squared Euclidean distance, B x 1.
Var squared_error(Var x, Var y);
/// Copy of x as a constant: no gradient flows back through it.
Var detach(Var x);

enum class LayerKind { dense, densenet_block, layernorm, activation };
enum class Activation { identity, relu, swish, tanh };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

/// One layer of a feed-forward stack. For dense: in -> out, then the
/// activation. For densenet_block: dense(in -> out) -> layernorm -> activation,
/// output [input || new], width in + out. layernorm and activation keep the width.
struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    std::size_t in = 0;
    std::size_t out = 0;
    Activation activation = Activation::identity;

    std::size_t output_width() const;

    static LayerSpec dense(std::size_t in, std::size_t out, Activation act = Activation::identity);
    static LayerSpec densenet_block(std::size_t in, std::size_t growth, Activation act = Activation::swish);
    static LayerSpec layernorm(std::size_t width);
    static LayerSpec activation_only(std::size_t width, Activation act);
};

using LayerStack = std::vector<LayerSpec>;

/// Throws unless consecutive widths chain.
void validate_stack(const LayerStack& stack);
/// MLP-DenseNet: `blocks` densenet blocks of the given growth.
LayerStack densenet_stack(std::size_t in, std::size_t blocks, std::size_t growth,
                          Activation act = Activation::swish);
/// Hidden dense layers with `act`, then a linear output layer.
LayerStack mlp_stack(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                     Activation act = Activation::relu);

enum class DenseInit { uniform, zeros, identity };

/// Adds prefix/layer{i}/{weight,bias,ln_gain,ln_bias} as needed. Weights
/// are uniform in +-1/sqrt(in); biases start at 0. `last` overrides the init
/// of the final dense layer.
void init_stack(const LayerStack& stack, const std::string& prefix, ParamTree& params, Rng& rng,
                DenseInit last = DenseInit::uniform);

/// Runs the stack. With `trainable` false the parameters enter the tape as
/// constants, so no gradient reaches them.
Var forward(const LayerStack& stack, const std::string& prefix, ParamTree& params, Var input, Tape& tape,
            bool trainable = true);

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    ParamTree m;
    ParamTree v;
    std::uint64_t step = 0;
};

/// Builds zeroed moment trees for the tensors of `params` whose names start with `prefix`.
AdamState adam_init(const ParamTree& params, const std::string& prefix = "");
/// Bias-corrected Adam step on the tensors tracked by `state`, using the
/// grads stored in `params` (a missing grad counts as zero).
void adam_step(ParamTree& params, AdamState& state, const AdamConfig& cfg);

/// target <- tau * online + (1 - tau) * target. Throws on structure mismatch.
void ema_update(const ParamTree& online, ParamTree& target, double tau);

/// Named tensors plus free-form JSON metadata, stored as `<base>.json`
/// (manifest: names, shapes, dtype, offsets, step, meta) and `<base>.bin`
/// (little-endian float64 data, concatenated in manifest order).
struct Checkpoint {
    std::uint64_t step = 0;
    std::string meta_json = "{}";
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add_tree(const std::string& prefix, const ParamTree& tree);
    /// Loads every tensor under `prefix` into the matching names of `tree`.
    void load_tree(const std::string& prefix, ParamTree& tree) const;
    const Tensor& get(const std::string& name) const;
};

/// Writes both files through temporary names and renames them into place.
void save_checkpoint(const Checkpoint& ckpt, const std::string& base_path);
Checkpoint load_checkpoint(const std::string& base_path);

}  // namespace spf::nn
