#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace humdex::nn {

struct Linear {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;    // out
};

struct LeakyRelu {
    double slope = 0.01;
};

struct BatchNorm {
    Eigen::VectorXd gamma, beta, running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNorm identity(int features);
};

struct Tanh {};

using Layer = std::variant<Linear, LeakyRelu, BatchNorm, Tanh>;

enum class Mode { Train, Infer };

struct DenseNet {
    std::vector<Layer> layers;

    int input_dim() const;
    int output_dim() const;

    // linear(in->h) / leaky / bn repeated, then linear(h->out). Weights
    // uniform in +-1/sqrt(fan_in), biases zero, bn at identity.
    static DenseNet mlp(const std::vector<int>& dims, bool batchnorm, std::uint64_t seed,
                        double leaky_slope = 0.01);

    nlohmann::json to_json() const;
    static DenseNet from_json(const nlohmann::json& doc);
};

// Per-layer activations captured during a train-mode forward pass.
struct ForwardCache {
    std::vector<Eigen::MatrixXd> inputs;             // input to each layer
    std::vector<Eigen::MatrixXd> bn_xhat;            // batchnorm normalized input
    std::vector<Eigen::VectorXd> bn_invstd;          // 1/sqrt(var + eps)
    std::vector<Eigen::MatrixXd> outputs_last;       // final output
};

// Train mode uses batch statistics and updates running stats in place
// (new = (1-m)*old + m*batch_stat, unbiased variance for the running
// estimate); infer mode reads running stats and never mutates. Train-mode
// batchnorm requires a batch of at least 2 rows.
Eigen::MatrixXd forward(DenseNet& net, const Eigen::MatrixXd& batch, Mode mode,
                        ForwardCache* cache = nullptr);

// Parameter gradients laid out parallel to the layer list.
struct LayerGrads {
    Eigen::MatrixXd d_weight;
    Eigen::VectorXd d_bias;
    Eigen::VectorXd d_gamma, d_beta;
};

struct Gradients {
    std::vector<LayerGrads> layers;
    Eigen::MatrixXd input_grad;
};

// Exact reverse-mode gradients through the cached train-mode pass, including
// the batch-statistics terms of batchnorm.
Gradients backward(const DenseNet& net, const ForwardCache& cache,
                   const Eigen::MatrixXd& grad_output);

// Mean over all B*d entries; gradient is 2*(pred-target)/(B*d).
std::pair<double, Eigen::MatrixXd> mse_loss(const Eigen::MatrixXd& pred,
                                            const Eigen::MatrixXd& target);

// Decoupled AdamW: p -= lr*wd*p, then the bias-corrected Adam update with
// eps added outside the square root.
struct AdamW {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::int64_t step_count = 0;
    std::vector<LayerGrads> m, v;  // moment accumulators, same layout as Gradients

    void step(DenseNet& net, const Gradients& grads);
};

// Max relative FD error over every parameter of an MSE objective on (batch,
// target), central differences with the given step. Used as the training
// correctness oracle.
double grad_check(const DenseNet& net, const Eigen::MatrixXd& batch,
                  const Eigen::MatrixXd& target, double fd_step);

}  // namespace humdex::nn
