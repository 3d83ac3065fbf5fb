#include "humdex/neuralnet.hpp"

#include <cmath>
#include <random>

#include "humdex/error.hpp"

namespace humdex::nn {

namespace {

using nlohmann::json;

int layer_output_dim(const Layer& layer, int current) {
    if (const auto* lin = std::get_if<Linear>(&layer)) return static_cast<int>(lin->weight.rows());
    return current;
}

json matrix_to_json(const Eigen::MatrixXd& m) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) arr.push_back(m(i, j));
    return arr;
}

Eigen::MatrixXd matrix_from_json(const json& arr, Eigen::Index rows, Eigen::Index cols) {
    if (!arr.is_array() || static_cast<Eigen::Index>(arr.size()) != rows * cols) {
        throw Error(ErrorKind::Schema, "parameter tensor has the wrong element count");
    }
    Eigen::MatrixXd m(rows, cols);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = arr[static_cast<size_t>(k++)].get<double>();
    return m;
}

Eigen::VectorXd vector_from_json(const json& arr) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = arr[static_cast<size_t>(i)].get<double>();
    return v;
}

LayerGrads zero_grads_for(const Layer& layer) {
    LayerGrads g;
    if (const auto* lin = std::get_if<Linear>(&layer)) {
        g.d_weight = Eigen::MatrixXd::Zero(lin->weight.rows(), lin->weight.cols());
        g.d_bias = Eigen::VectorXd::Zero(lin->bias.size());
    } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
        g.d_gamma = Eigen::VectorXd::Zero(bn->gamma.size());
        g.d_beta = Eigen::VectorXd::Zero(bn->beta.size());
    }
    return g;
}

}  // namespace

BatchNorm BatchNorm::identity(int features) {
    BatchNorm bn;
    bn.gamma = Eigen::VectorXd::Ones(features);
    bn.beta = Eigen::VectorXd::Zero(features);
    bn.running_mean = Eigen::VectorXd::Zero(features);
    bn.running_var = Eigen::VectorXd::Ones(features);
    return bn;
}

int DenseNet::input_dim() const {
    for (const auto& layer : layers) {
        if (const auto* lin = std::get_if<Linear>(&layer)) return static_cast<int>(lin->weight.cols());
        if (const auto* bn = std::get_if<BatchNorm>(&layer)) return static_cast<int>(bn->gamma.size());
    }
    return -1;
}

int DenseNet::output_dim() const {
    int dim = input_dim();
    for (const auto& layer : layers) dim = layer_output_dim(layer, dim);
    return dim;
}

DenseNet DenseNet::mlp(const std::vector<int>& dims, bool batchnorm, std::uint64_t seed,
                       double leaky_slope) {
    if (dims.size() < 2) throw Error(ErrorKind::Schema, "mlp needs at least input and output dims");
    std::mt19937_64 rng(seed);
    DenseNet net;
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
        Linear lin;
        const double bound = 1.0 / std::sqrt(static_cast<double>(dims[i]));
        std::uniform_real_distribution<double> dist(-bound, bound);
        lin.weight = Eigen::MatrixXd::NullaryExpr(dims[i + 1], dims[i], [&] { return dist(rng); });
        lin.bias = Eigen::VectorXd::Zero(dims[i + 1]);
        net.layers.emplace_back(std::move(lin));
        const bool hidden = i + 2 < dims.size();
        if (hidden) {
            net.layers.emplace_back(LeakyRelu{leaky_slope});
            if (batchnorm) net.layers.emplace_back(BatchNorm::identity(dims[i + 1]));
        }
    }
    return net;
}

Eigen::MatrixXd forward(DenseNet& net, const Eigen::MatrixXd& batch, Mode mode,
                        ForwardCache* cache) {
    if (net.input_dim() >= 0 && batch.cols() != net.input_dim()) {
        throw Error(ErrorKind::Dimension, "batch width " + std::to_string(batch.cols()) +
                                              " does not match network input " +
                                              std::to_string(net.input_dim()));
    }
    if (cache != nullptr) {
        cache->inputs.assign(net.layers.size(), {});
        cache->bn_xhat.assign(net.layers.size(), {});
        cache->bn_invstd.assign(net.layers.size(), {});
    }

    Eigen::MatrixXd x = batch;
    const double batch_rows = static_cast<double>(batch.rows());
    for (size_t li = 0; li < net.layers.size(); ++li) {
        if (cache != nullptr) cache->inputs[li] = x;
        Layer& layer = net.layers[li];
        if (auto* lin = std::get_if<Linear>(&layer)) {
            x = (x * lin->weight.transpose()).rowwise() + lin->bias.transpose();
        } else if (auto* lr = std::get_if<LeakyRelu>(&layer)) {
            x = x.unaryExpr([s = lr->slope](double v) { return v > 0.0 ? v : s * v; });
        } else if (auto* bn = std::get_if<BatchNorm>(&layer)) {
            if (mode == Mode::Train) {
                if (batch.rows() < 2) {
                    throw Error(ErrorKind::Dimension,
                                "train-mode batch normalization needs a batch of at least 2");
                }
                const Eigen::RowVectorXd mean = x.colwise().mean();
                const Eigen::MatrixXd centered = x.rowwise() - mean;
                const Eigen::RowVectorXd var_biased =
                    centered.array().square().colwise().sum() / batch_rows;
                const Eigen::RowVectorXd invstd =
                    (var_biased.array() + bn->eps).sqrt().inverse().matrix();
                const Eigen::MatrixXd xhat =
                    (centered.array().rowwise() * invstd.array()).matrix();
                x = ((xhat.array().rowwise() * bn->gamma.transpose().array()).rowwise() +
                     bn->beta.transpose().array())
                        .matrix();
                const Eigen::RowVectorXd var_unbiased =
                    var_biased * (batch_rows / (batch_rows - 1.0));
                bn->running_mean =
                    (1.0 - bn->momentum) * bn->running_mean + bn->momentum * mean.transpose();
                bn->running_var =
                    (1.0 - bn->momentum) * bn->running_var + bn->momentum * var_unbiased.transpose();
                if (cache != nullptr) {
                    cache->bn_xhat[li] = xhat;
                    cache->bn_invstd[li] = invstd.transpose();
                }
            } else {
                const Eigen::RowVectorXd scale =
                    (bn->gamma.array() * (bn->running_var.array() + bn->eps).sqrt().inverse())
                        .matrix()
                        .transpose();
                const Eigen::MatrixXd centered = x.rowwise() - bn->running_mean.transpose();
                x = ((centered.array().rowwise() * scale.array()).rowwise() +
                     bn->beta.transpose().array())
                        .matrix();
            }
        } else if (std::holds_alternative<Tanh>(layer)) {
            x = x.array().tanh().matrix();
        }
    }
    if (cache != nullptr) cache->outputs_last.assign(1, x);
    return x;
}

Gradients backward(const DenseNet& net, const ForwardCache& cache,
                   const Eigen::MatrixXd& grad_output) {
    if (cache.inputs.size() != net.layers.size()) {
        throw Error(ErrorKind::Dimension, "forward cache does not match the network");
    }
    Gradients grads;
    grads.layers.resize(net.layers.size());

    Eigen::MatrixXd g = grad_output;
    for (int li = static_cast<int>(net.layers.size()) - 1; li >= 0; --li) {
        const Layer& layer = net.layers[static_cast<size_t>(li)];
        const Eigen::MatrixXd& x = cache.inputs[static_cast<size_t>(li)];
        LayerGrads& lg = grads.layers[static_cast<size_t>(li)];
        if (const auto* lin = std::get_if<Linear>(&layer)) {
            if (g.cols() != lin->weight.rows() || x.cols() != lin->weight.cols()) {
                throw Error(ErrorKind::Dimension, "stale cache: linear layer shape mismatch");
            }
            lg.d_weight = g.transpose() * x;
            lg.d_bias = g.colwise().sum().transpose();
            g = g * lin->weight;
        } else if (const auto* lr = std::get_if<LeakyRelu>(&layer)) {
            g = (g.array() * x.unaryExpr([s = lr->slope](double v) {
                                  return v > 0.0 ? 1.0 : s;
                              }).array())
                    .matrix();
        } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
            const Eigen::MatrixXd& xhat = cache.bn_xhat[static_cast<size_t>(li)];
            const Eigen::VectorXd& invstd = cache.bn_invstd[static_cast<size_t>(li)];
            if (xhat.rows() != g.rows() || xhat.cols() != g.cols()) {
                throw Error(ErrorKind::Dimension, "stale cache: batchnorm shape mismatch");
            }
            const double B = static_cast<double>(g.rows());
            lg.d_gamma = (g.array() * xhat.array()).colwise().sum().transpose().matrix();
            lg.d_beta = g.colwise().sum().transpose();
            const Eigen::MatrixXd dxhat =
                (g.array().rowwise() * bn->gamma.transpose().array()).matrix();
            const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
            const Eigen::RowVectorXd sum_dxhat_xhat = (dxhat.array() * xhat.array()).colwise().sum();
            Eigen::MatrixXd dx = B * dxhat;
            dx.rowwise() -= sum_dxhat;
            dx -= (xhat.array().rowwise() * sum_dxhat_xhat.array()).matrix();
            g = (dx.array().rowwise() * (invstd.transpose().array() / B)).matrix();
        } else if (std::holds_alternative<Tanh>(layer)) {
            const Eigen::MatrixXd y = x.array().tanh().matrix();
            g = (g.array() * (1.0 - y.array().square())).matrix();
        }
    }
    grads.input_grad = g;
    return grads;
}

std::pair<double, Eigen::MatrixXd> mse_loss(const Eigen::MatrixXd& pred,
                                            const Eigen::MatrixXd& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw Error(ErrorKind::Dimension, "mse_loss shape mismatch");
    }
    const double n = static_cast<double>(pred.size());
    const Eigen::MatrixXd diff = pred - target;
    const double loss = diff.squaredNorm() / n;
    return {loss, (2.0 / n) * diff};
}

void AdamW::step(DenseNet& net, const Gradients& grads) {
    if (grads.layers.size() != net.layers.size()) {
        throw Error(ErrorKind::Dimension, "gradients do not match the network layout");
    }
    if (m.empty()) {
        for (const auto& layer : net.layers) {
            m.push_back(zero_grads_for(layer));
            v.push_back(zero_grads_for(layer));
        }
    }
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));

    auto update = [&](auto& param, const auto& grad, auto& m_acc, auto& v_acc) {
        if (param.size() == 0) return;
        param *= (1.0 - lr * weight_decay);
        m_acc = beta1 * m_acc + (1.0 - beta1) * grad;
        v_acc = beta2 * v_acc + (1.0 - beta2) * grad.array().square().matrix();
        param -= (lr * (m_acc / bc1).array() / ((v_acc / bc2).array().sqrt() + eps)).matrix();
    };

    for (size_t li = 0; li < net.layers.size(); ++li) {
        Layer& layer = net.layers[li];
        const LayerGrads& lg = grads.layers[li];
        if (auto* lin = std::get_if<Linear>(&layer)) {
            update(lin->weight, lg.d_weight, m[li].d_weight, v[li].d_weight);
            update(lin->bias, lg.d_bias, m[li].d_bias, v[li].d_bias);
        } else if (auto* bn = std::get_if<BatchNorm>(&layer)) {
            update(bn->gamma, lg.d_gamma, m[li].d_gamma, v[li].d_gamma);
            update(bn->beta, lg.d_beta, m[li].d_beta, v[li].d_beta);
        }
    }
}

namespace {

// Parameter views for grad_check: pointers into a net's trainable tensors.
std::vector<std::pair<double*, const double*>> parameter_views(DenseNet& net, Gradients& grads) {
    std::vector<std::pair<double*, const double*>> views;
    for (size_t li = 0; li < net.layers.size(); ++li) {
        Layer& layer = net.layers[li];
        LayerGrads& lg = grads.layers[li];
        if (auto* lin = std::get_if<Linear>(&layer)) {
            for (Eigen::Index k = 0; k < lin->weight.size(); ++k)
                views.push_back({lin->weight.data() + k, lg.d_weight.data() + k});
            for (Eigen::Index k = 0; k < lin->bias.size(); ++k)
                views.push_back({lin->bias.data() + k, lg.d_bias.data() + k});
        } else if (auto* bn = std::get_if<BatchNorm>(&layer)) {
            for (Eigen::Index k = 0; k < bn->gamma.size(); ++k)
                views.push_back({bn->gamma.data() + k, lg.d_gamma.data() + k});
            for (Eigen::Index k = 0; k < bn->beta.size(); ++k)
                views.push_back({bn->beta.data() + k, lg.d_beta.data() + k});
        }
    }
    return views;
}

}  // namespace

double grad_check(const DenseNet& net, const Eigen::MatrixXd& batch,
                  const Eigen::MatrixXd& target, double fd_step) {
    // Analytic gradients on a working copy (train mode mutates running stats).
    DenseNet work = net;
    ForwardCache cache;
    const Eigen::MatrixXd pred = forward(work, batch, Mode::Train, &cache);
    auto [loss, dpred] = mse_loss(pred, target);
    (void)loss;
    Gradients grads = backward(work, cache, dpred);

    DenseNet probe = net;
    Gradients probe_grads = grads;  // same layout; values ignored, used for pairing
    auto views = parameter_views(probe, probe_grads);

    auto loss_at = [&]() {
        DenseNet eval = probe;  // keep running stats of the probe untouched
        const Eigen::MatrixXd p = forward(eval, batch, Mode::Train, nullptr);
        return mse_loss(p, target).first;
    };

    double max_rel = 0.0;
    for (auto& [param, grad] : views) {
        const double original = *param;
        *param = original + fd_step;
        const double lp = loss_at();
        *param = original - fd_step;
        const double lm = loss_at();
        *param = original;
        const double fd = (lp - lm) / (2.0 * fd_step);
        const double analytic = *grad;
        const double denom = std::max({1.0, std::abs(analytic), std::abs(fd)});
        max_rel = std::max(max_rel, std::abs(analytic - fd) / denom);
    }
    return max_rel;
}

nlohmann::json DenseNet::to_json() const {
    json layers_json = json::array();
    for (const auto& layer : layers) {
        json jl;
        if (const auto* lin = std::get_if<Linear>(&layer)) {
            jl["kind"] = "linear";
            jl["out"] = lin->weight.rows();
            jl["in"] = lin->weight.cols();
            jl["weight"] = matrix_to_json(lin->weight);
            jl["bias"] = matrix_to_json(lin->bias);
        } else if (const auto* lr = std::get_if<LeakyRelu>(&layer)) {
            jl["kind"] = "leaky_relu";
            jl["slope"] = lr->slope;
        } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
            jl["kind"] = "batchnorm";
            jl["gamma"] = matrix_to_json(bn->gamma);
            jl["beta"] = matrix_to_json(bn->beta);
            jl["running_mean"] = matrix_to_json(bn->running_mean);
            jl["running_var"] = matrix_to_json(bn->running_var);
            jl["momentum"] = bn->momentum;
            jl["eps"] = bn->eps;
        } else {
            jl["kind"] = "tanh";
        }
        layers_json.push_back(std::move(jl));
    }
    return json{{"layers", layers_json}};
}

DenseNet DenseNet::from_json(const nlohmann::json& doc) {
    DenseNet net;
    for (const auto& jl : doc.at("layers")) {
        const std::string kind = jl.at("kind").get<std::string>();
        if (kind == "linear") {
            Linear lin;
            const auto rows = jl.at("out").get<Eigen::Index>();
            const auto cols = jl.at("in").get<Eigen::Index>();
            lin.weight = matrix_from_json(jl.at("weight"), rows, cols);
            lin.bias = matrix_from_json(jl.at("bias"), rows, 1);
            net.layers.emplace_back(std::move(lin));
        } else if (kind == "leaky_relu") {
            net.layers.emplace_back(LeakyRelu{jl.at("slope").get<double>()});
        } else if (kind == "batchnorm") {
            BatchNorm bn;
            bn.gamma = vector_from_json(jl.at("gamma"));
            bn.beta = vector_from_json(jl.at("beta"));
            bn.running_mean = vector_from_json(jl.at("running_mean"));
            bn.running_var = vector_from_json(jl.at("running_var"));
            bn.momentum = jl.at("momentum").get<double>();
            bn.eps = jl.at("eps").get<double>();
            if ((bn.running_var.array() <= 0.0).any()) {
                throw Error(ErrorKind::Schema, "batchnorm running variance must be positive");
            }
            net.layers.emplace_back(std::move(bn));
        } else if (kind == "tanh") {
            net.layers.emplace_back(Tanh{});
        } else {
            throw Error(ErrorKind::Schema, "unknown layer kind '" + kind + "'");
        }
    }
    return net;
}

}  // namespace humdex::nn
