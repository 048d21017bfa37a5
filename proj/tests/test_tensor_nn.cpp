#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "spf/tensor_nn.hpp"

using namespace spf;
using namespace spf::nn;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double away_from_zero = 0.0) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        double v = rng.normal();
        if (away_from_zero > 0.0 && std::abs(v) < away_from_zero) v = v < 0 ? -away_from_zero : away_from_zero;
        m(i) = v;
    }
    return m;
}

double eval(const Builder& f, const std::vector<Mat>& inputs) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& m : inputs) vars.push_back(tape.constant(m));
    return tape.value(f(tape, vars))(0, 0);
}

/// Relative error ||analytic - numeric|| / (||analytic|| + ||numeric||) over all inputs.
double grad_check(const Builder& f, std::vector<Mat> inputs, double h = 1e-6) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& m : inputs) vars.push_back(tape.leaf(m));
    tape.backward(f(tape, vars));
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Mat analytic = tape.grad(vars[i]);
        for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
            const double orig = inputs[i](k);
            inputs[i](k) = orig + h;
            const double up = eval(f, inputs);
            inputs[i](k) = orig - h;
            const double down = eval(f, inputs);
            inputs[i](k) = orig;
            const double numeric = (up - down) / (2.0 * h);
            diff += (analytic(k) - numeric) * (analytic(k) - numeric);
            scale += analytic(k) * analytic(k) + numeric * numeric;
        }
    }
    return scale == 0.0 ? 0.0 : std::sqrt(diff) / std::sqrt(scale);
}

// Reduces any output to a scalar with fixed random weights so every entry matters.
Var weigh(Tape& tape, Var x) {
    Rng rng(x.rows() * 131 + x.cols());
    return sum(mul_const(x, random_mat(x.rows(), x.cols(), rng)));
}

}  // namespace

TEST_CASE("elementwise and linear ops pass finite-difference checks") {
    Rng rng(1);
    const Mat a = random_mat(3, 4, rng, 0.05), b = random_mat(3, 4, rng, 0.05), w = random_mat(4, 2, rng);
    const Mat row = random_mat(1, 4, rng), col = random_mat(3, 1, rng);
    struct Case {
        const char* name;
        Builder f;
        std::vector<Mat> in;
    };
    const std::vector<Case> cases = {
        {"matmul", [](Tape& t, const std::vector<Var>& v) { return weigh(t, matmul(v[0], v[1])); }, {a, w}},
        {"add", [](Tape& t, const std::vector<Var>& v) { return weigh(t, add(v[0], v[1])); }, {a, b}},
        {"sub", [](Tape& t, const std::vector<Var>& v) { return weigh(t, sub(v[0], v[1])); }, {a, b}},
        {"mul", [](Tape& t, const std::vector<Var>& v) { return weigh(t, mul(v[0], v[1])); }, {a, b}},
        {"add_row", [](Tape& t, const std::vector<Var>& v) { return weigh(t, add_row(v[0], v[1])); }, {a, row}},
        {"mul_row", [](Tape& t, const std::vector<Var>& v) { return weigh(t, mul_row(v[0], v[1])); }, {a, row}},
        {"mul_col", [](Tape& t, const std::vector<Var>& v) { return weigh(t, mul_col(v[0], v[1])); }, {a, col}},
        {"scale", [](Tape& t, const std::vector<Var>& v) { return weigh(t, scale(v[0], -2.5)); }, {a}},
        {"add_scalar", [](Tape& t, const std::vector<Var>& v) { return weigh(t, add_scalar(v[0], 0.3)); }, {a}},
        {"relu", [](Tape& t, const std::vector<Var>& v) { return weigh(t, relu(v[0])); }, {a}},
        {"swish", [](Tape& t, const std::vector<Var>& v) { return weigh(t, swish(v[0])); }, {a}},
        {"tanh", [](Tape& t, const std::vector<Var>& v) { return weigh(t, tanh(v[0])); }, {a}},
        {"sigmoid", [](Tape& t, const std::vector<Var>& v) { return weigh(t, sigmoid(v[0])); }, {a}},
        {"exp", [](Tape& t, const std::vector<Var>& v) { return weigh(t, exp(v[0])); }, {a}},
        {"square", [](Tape& t, const std::vector<Var>& v) { return weigh(t, square(v[0])); }, {a}},
        {"concat_cols", [](Tape& t, const std::vector<Var>& v) { return weigh(t, concat_cols(v[0], v[1])); }, {a, col}},
        {"slice_cols", [](Tape& t, const std::vector<Var>& v) { return weigh(t, slice_cols(v[0], 1, 2)); }, {a}},
        {"mean", [](Tape&, const std::vector<Var>& v) { return mean(square(v[0])); }, {a}},
        {"row_sum", [](Tape& t, const std::vector<Var>& v) { return weigh(t, row_sum(v[0])); }, {a}},
        {"layer_norm", [](Tape& t, const std::vector<Var>& v) { return weigh(t, layer_norm(v[0], v[1], v[2])); },
         {a, row, random_mat(1, 4, rng)}},
        {"cosine_distance", [](Tape& t, const std::vector<Var>& v) { return weigh(t, cosine_distance(v[0], v[1])); },
         {a, b}},
        {"squared_error", [](Tape& t, const std::vector<Var>& v) { return weigh(t, squared_error(v[0], v[1])); },
         {a, b}},
    };
    for (const auto& c : cases) {
        INFO(c.name);
        CHECK(grad_check(c.f, c.in) < 1e-4);
    }
}

TEST_CASE("every layer kind passes finite-difference checks on its parameters") {
    Rng rng(2);
    const std::vector<std::pair<const char*, LayerStack>> stacks = {
        {"dense", {LayerSpec::dense(3, 4, Activation::tanh)}},
        {"densenet", densenet_stack(3, 2, 3, Activation::swish)},
        {"layernorm", {LayerSpec::dense(3, 4), LayerSpec::layernorm(4)}},
        {"activation", {LayerSpec::dense(3, 4), LayerSpec::activation_only(4, Activation::relu)}},
        {"mlp", mlp_stack(3, {5, 4}, 2, Activation::relu)},
    };
    const Mat x = random_mat(4, 3, rng);
    for (const auto& [name, stack] : stacks) {
        INFO(name);
        ParamTree params;
        Rng init(3);
        init_stack(stack, "net", params, init);
        // Perturb LayerNorm gains and biases away from their identity init.
        for (auto& [pname, t] : params)
            for (double& v : t.data) v += 0.1 * rng.normal();
        Tape tape;
        Var out = forward(stack, "net", params, tape.constant(x), tape);
        params.zero_grad();
        tape.backward(weigh(tape, out));
        for (auto& [pname, t] : params) {
            INFO(pname);
            double diff = 0.0, scale = 0.0;
            for (std::size_t k = 0; k < t.data.size(); ++k) {
                const double orig = t.data[k];
                auto value = [&](double v) {
                    t.data[k] = v;
                    Tape tp;
                    const double r = tp.value(weigh(tp, forward(stack, "net", params, tp.constant(x), tp, false)))(0, 0);
                    t.data[k] = orig;
                    return r;
                };
                const double numeric = (value(orig + 1e-6) - value(orig - 1e-6)) / 2e-6;
                diff += (t.grad[k] - numeric) * (t.grad[k] - numeric);
                scale += t.grad[k] * t.grad[k] + numeric * numeric;
            }
            CHECK(std::sqrt(diff) <= 1e-4 * std::sqrt(scale) + 1e-12);
        }
    }
}

TEST_CASE("frozen and detached values block gradients") {
    ParamTree params;
    params.add("w", Tensor::from_matrix(Mat::Ones(2, 2)));
    Tape tape;
    Var x = tape.leaf(Mat::Ones(1, 2));
    Var y = matmul(detach(x), tape.frozen(params, "w"));
    Var z = matmul(x, tape.param(params, "w"));
    tape.backward(sum(add(y, z)));
    CHECK(tape.grad(x).isApprox(Mat::Constant(1, 2, 2.0)));
    CHECK(params.at("w").grad == std::vector<double>(4, 1.0));
}

TEST_CASE("shape mismatches throw") {
    Tape tape;
    Var a = tape.constant(Mat::Ones(2, 3)), b = tape.constant(Mat::Ones(2, 2));
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
    CHECK_THROWS_AS(tape.backward(a), std::invalid_argument);
    CHECK_THROWS_AS(validate_stack({LayerSpec::dense(3, 4), LayerSpec::dense(5, 1)}), std::invalid_argument);
}

TEST_CASE("Adam minimises a quadratic and EMA interpolates") {
    ParamTree params;
    params.add("x", Tensor::from_matrix(Mat::Constant(1, 3, 5.0)));
    AdamState state = adam_init(params);
    const AdamConfig cfg{0.1};
    for (int i = 0; i < 500; ++i) {
        params.zero_grad();
        Tape tape;
        tape.backward(sum(square(add_scalar(tape.param(params, "x"), -1.0))));
        adam_step(params, state, cfg);
    }
    for (double v : params.at("x").data) CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
    ParamTree target;
    target.add("x", Tensor::from_matrix(Mat::Zero(1, 3)));
    ema_update(params, target, 0.25);
    CHECK(target.at("x").data[0] == doctest::Approx(0.25 * params.at("x").data[0]));
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    Rng rng(4);
    ParamTree params;
    init_stack(densenet_stack(3, 2, 4), "enc", params, rng);
    Checkpoint ckpt;
    ckpt.step = 42;
    ckpt.meta_json = R"({"note":"x"})";
    ckpt.add_tree("online/", params);
    const auto dir = std::filesystem::temp_directory_path() / "spf_ckpt_test";
    std::filesystem::create_directories(dir);
    save_checkpoint(ckpt, (dir / "c").string());
    const Checkpoint back = load_checkpoint((dir / "c").string());
    CHECK(back.step == 42);
    ParamTree restored;
    Rng other(99);
    init_stack(densenet_stack(3, 2, 4), "enc", restored, other);
    back.load_tree("online/", restored);
    for (const auto& [name, t] : params) CHECK(restored.at(name).data == t.data);
    std::filesystem::remove_all(dir);
}
