#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/model.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// Fully connected tanh network with a softmax head, float64 end to end.
// Parameters live in a LayeredModel as alternating weight/bias layers
// ("w1", "b1", "w2", ...); weights are row-major (out x in).
struct MlpArchitecture {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims;
    int class_count = 0;

    std::vector<std::size_t> dims() const {
        std::vector<std::size_t> d;
        d.push_back(input_dim);
        d.insert(d.end(), hidden_dims.begin(), hidden_dims.end());
        d.push_back(static_cast<std::size_t>(class_count));
        return d;
    }
};

struct TrainHyperparams {
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.005;  // L2 term added to the gradient (classic SGD decay)
    std::size_t batch_size = 64;
    std::size_t epochs = 10;
    std::uint64_t rng_seed = 0;  // drives the per-epoch sample shuffle
};

inline void validate_architecture(const MlpArchitecture& arch) {
    if (arch.input_dim == 0) throw std::invalid_argument("mlp: input_dim must be positive");
    if (arch.class_count < 2) throw std::invalid_argument("mlp: need at least 2 classes");
    for (std::size_t h : arch.hidden_dims)
        if (h == 0) throw std::invalid_argument("mlp: hidden dim must be positive");
}

inline void validate_hyperparams(const TrainHyperparams& hp) {
    // learning_rate 0 is allowed here (a zero step is a useful identity in
    // tests); experiment configs demand a strictly positive rate.
    if (hp.learning_rate < 0.0) throw std::invalid_argument("mlp: negative learning rate");
    if (hp.momentum < 0.0 || hp.momentum >= 1.0)
        throw std::invalid_argument("mlp: momentum outside [0, 1)");
    if (hp.weight_decay < 0.0) throw std::invalid_argument("mlp: negative weight decay");
    if (hp.batch_size == 0) throw std::invalid_argument("mlp: batch_size must be positive");
    if (hp.epochs == 0) throw std::invalid_argument("mlp: epochs must be positive");
}

// Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases.
inline LayeredModel init_model(const MlpArchitecture& arch, std::uint64_t seed) {
    validate_architecture(arch);
    const auto d = arch.dims();
    Rng rng(stream_seed(seed, {stream::init}));

    LayeredModel m;
    for (std::size_t l = 0; l + 1 < d.size(); ++l) {
        const std::size_t fan_in = d[l], fan_out = d[l + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::vector<double> w(fan_out * fan_in);
        for (double& x : w) x = rng.uniform(-bound, bound);
        m.names.push_back("w" + std::to_string(l + 1));
        m.shapes.push_back({fan_out, fan_in});
        m.values.push_back(std::move(w));
        m.names.push_back("b" + std::to_string(l + 1));
        m.shapes.push_back({fan_out});
        m.values.push_back(std::vector<double>(fan_out, 0.0));
    }
    return m;
}

namespace detail {

inline void check_model_matches(const LayeredModel& m, const MlpArchitecture& arch) {
    const auto d = arch.dims();
    if (m.layer_count() != 2 * (d.size() - 1))
        throw std::invalid_argument("mlp: model layer count does not match architecture");
    for (std::size_t l = 0; l + 1 < d.size(); ++l) {
        if (m.values[2 * l].size() != d[l + 1] * d[l] || m.values[2 * l + 1].size() != d[l + 1])
            throw std::invalid_argument("mlp: model layer sizes do not match architecture");
    }
}

// Per-sample forward pass; fills pre-activations z[l] for every layer and
// returns the softmax probabilities in z.back() transformed in place.
struct Workspace {
    std::vector<std::vector<double>> z;  // one buffer per linear layer output
};

inline void forward_sample(const LayeredModel& m, const MlpArchitecture& arch, const double* x,
                           Workspace& ws) {
    const auto d = arch.dims();
    const std::size_t L = d.size() - 1;
    ws.z.resize(L);
    const double* in = x;
    std::size_t in_dim = d[0];
    for (std::size_t l = 0; l < L; ++l) {
        const auto& w = m.values[2 * l];
        const auto& b = m.values[2 * l + 1];
        const std::size_t out_dim = d[l + 1];
        ws.z[l].assign(out_dim, 0.0);
        for (std::size_t o = 0; o < out_dim; ++o) {
            double s = b[o];
            const double* wr = w.data() + o * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i) s += wr[i] * in[i];
            ws.z[l][o] = s;
        }
        if (l + 1 < L)  // hidden layers get tanh; the head stays linear
            for (double& v : ws.z[l]) v = std::tanh(v);
        in = ws.z[l].data();
        in_dim = out_dim;
    }
}

// Stable softmax + cross-entropy on the final pre-activations.  Returns the
// sample loss and replaces logits with probabilities.
inline double softmax_ce(std::vector<double>& logits, int label) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : logits) {
        v = std::exp(v - mx);
        sum += v;
    }
    const double logit_label = std::log(logits[static_cast<std::size_t>(label)]);
    for (double& v : logits) v /= sum;
    return std::log(sum) - logit_label;  // = log-sum-exp - (z_label - mx)
}

}  // namespace detail

struct ForwardResult {
    std::vector<double> probs;  // batch_size x class_count, row-major
    double loss = 0.0;          // mean cross-entropy
};

inline ForwardResult forward_loss(const LayeredModel& m, const MlpArchitecture& arch,
                                  const ClientDataset& data,
                                  const std::vector<std::size_t>& batch) {
    detail::check_model_matches(m, arch);
    if (batch.empty()) throw std::invalid_argument("forward_loss: empty batch");
    const std::size_t C = static_cast<std::size_t>(arch.class_count);
    ForwardResult r;
    r.probs.reserve(batch.size() * C);
    detail::Workspace ws;
    for (std::size_t bi : batch) {
        const int label = data.labels[bi];
        if (label < 0 || label >= arch.class_count)
            throw std::invalid_argument("forward_loss: label outside class range");
        detail::forward_sample(m, arch, data.row(bi), ws);
        r.loss += detail::softmax_ce(ws.z.back(), label);
        r.probs.insert(r.probs.end(), ws.z.back().begin(), ws.z.back().end());
    }
    r.loss /= static_cast<double>(batch.size());
    return r;
}

// Mean-reduction cross-entropy gradient for a batch.  Returns the task loss
// and fills grad (same schema as the model).
inline double backward(const LayeredModel& m, const MlpArchitecture& arch,
                       const ClientDataset& data, const std::vector<std::size_t>& batch,
                       LayeredModel& grad) {
    detail::check_model_matches(m, arch);
    if (batch.empty()) throw std::invalid_argument("backward: empty batch");
    const auto d = arch.dims();
    const std::size_t L = d.size() - 1;
    grad = zeros_like(m);

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    detail::Workspace ws;
    std::vector<double> delta, prev_delta;
    for (std::size_t bi : batch) {
        const int label = data.labels[bi];
        if (label < 0 || label >= arch.class_count)
            throw std::invalid_argument("backward: label outside class range");
        detail::forward_sample(m, arch, data.row(bi), ws);
        loss += detail::softmax_ce(ws.z.back(), label);

        // Head: dL/dz = (p - onehot) / B   (z.back() now holds probabilities)
        delta = ws.z.back();
        delta[static_cast<std::size_t>(label)] -= 1.0;
        for (double& v : delta) v *= inv_b;

        for (std::size_t l = L; l-- > 0;) {
            const std::size_t out_dim = d[l + 1], in_dim = d[l];
            const double* act = l == 0 ? data.row(bi) : ws.z[l - 1].data();
            auto& gw = grad.values[2 * l];
            auto& gb = grad.values[2 * l + 1];
            for (std::size_t o = 0; o < out_dim; ++o) {
                const double dz = delta[o];
                if (dz == 0.0) continue;
                double* gwr = gw.data() + o * in_dim;
                for (std::size_t i = 0; i < in_dim; ++i) gwr[i] += dz * act[i];
                gb[o] += dz;
            }
            if (l == 0) break;
            // Propagate through the tanh of the previous hidden layer: its
            // stored activation a is already tanh(z), so d/dz = 1 - a².
            const auto& w = m.values[2 * l];
            prev_delta.assign(in_dim, 0.0);
            for (std::size_t o = 0; o < out_dim; ++o) {
                const double dz = delta[o];
                if (dz == 0.0) continue;
                const double* wr = w.data() + o * in_dim;
                for (std::size_t i = 0; i < in_dim; ++i) prev_delta[i] += dz * wr[i];
            }
            for (std::size_t i = 0; i < in_dim; ++i)
                prev_delta[i] *= 1.0 - act[i] * act[i];
            delta.swap(prev_delta);
        }
    }
    return loss * inv_b;
}

// Hook for composite training objectives.  add_term() is invoked once per
// batch after the task gradient is in place: it may scale-aware add its own
// gradient into grad and returns the extra loss it contributed.
class ExtraObjective {
public:
    virtual ~ExtraObjective() = default;
    // Factor applied to the task loss gradient before extra terms are added.
    virtual double task_weight() const { return 1.0; }
    virtual double add_term(const LayeredModel& model, double task_loss, LayeredModel& grad) = 0;
};

// Local SGD with momentum and L2 decay folded into the gradient, matching
// the classic update: g = dL + wd*theta; v = mu*v + g; theta -= lr*v.
// The per-epoch sample shuffle is the only source of randomness.
inline LayeredModel train_local(const LayeredModel& init, const MlpArchitecture& arch,
                                const ClientDataset& data, const TrainHyperparams& hp,
                                ExtraObjective* extra = nullptr) {
    detail::check_model_matches(init, arch);
    validate_hyperparams(hp);
    if (data.size() == 0) throw std::invalid_argument("train_local: empty dataset");

    LayeredModel model = init;
    LayeredModel velocity = zeros_like(init);
    LayeredModel grad = zeros_like(init);

    Rng shuffle_rng(stream_seed(hp.rng_seed, {stream::train}));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::size_t> batch;

    for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
            const std::size_t end = std::min(order.size(), start + hp.batch_size);
            batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
            const double task_loss = backward(model, arch, data, batch, grad);
            if (extra) {
                const double tw = extra->task_weight();
                if (tw != 1.0)
                    for (auto& layer : grad.values)
                        for (double& g : layer) g *= tw;
                extra->add_term(model, task_loss, grad);
            }
            for (std::size_t l = 0; l < model.values.size(); ++l) {
                auto& th = model.values[l];
                auto& v = velocity.values[l];
                auto& g = grad.values[l];
                for (std::size_t i = 0; i < th.size(); ++i) {
                    const double gi = g[i] + hp.weight_decay * th[i];
                    v[i] = hp.momentum * v[i] + gi;
                    th[i] -= hp.learning_rate * v[i];
                }
            }
        }
    }
    return model;
}

inline std::vector<int> predict(const LayeredModel& m, const MlpArchitecture& arch,
                                const ClientDataset& data) {
    detail::check_model_matches(m, arch);
    std::vector<int> out;
    out.reserve(data.size());
    detail::Workspace ws;
    for (std::size_t i = 0; i < data.size(); ++i) {
        detail::forward_sample(m, arch, data.row(i), ws);
        const auto& logits = ws.z.back();
        std::size_t best = 0;  // argmax, ties to the lowest class index
        for (std::size_t c = 1; c < logits.size(); ++c)
            if (logits[c] > logits[best]) best = c;
        out.push_back(static_cast<int>(best));
    }
    return out;
}

// Fraction of samples classified as their stored label.
inline double accuracy(const LayeredModel& m, const MlpArchitecture& arch,
                       const ClientDataset& data) {
    if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
    const auto preds = predict(m, arch, data);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == data.labels[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(data.size());
}

}  // namespace fedsim
