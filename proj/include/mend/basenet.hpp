#pragma once
// Fully-connected classifiers whose backward pass keeps, for every layer and
// every example, the pair (u, delta) whose outer product is that example's
// weight gradient. The editor consumes these factors instead of the dense
// gradient.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mend/errors.hpp"
#include "mend/json_io.hpp"
#include "mend/numkit.hpp"

namespace mend {

enum class Activation { relu, identity };

struct DenseLayer {
    Matrix weight;  // n x m: maps an m-dim input to n pre-activations
    Vector bias;    // n
    Activation activation = Activation::relu;

    [[nodiscard]] std::size_t in_dim() const noexcept { return weight.cols(); }
    [[nodiscard]] std::size_t out_dim() const noexcept { return weight.rows(); }

    bool operator==(const DenseLayer&) const = default;
};

struct LabeledExample {
    Vector x;
    ClassIndex y = 0;

    bool operator==(const LabeledExample&) const = default;
};

namespace detail {
inline std::uint64_t next_model_stamp() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

class BaseModel {
public:
    explicit BaseModel(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { validate(); }

    // Xavier-uniform weights and zero biases; dims = {input, hidden..., classes}.
    static BaseModel random(std::span<const std::size_t> dims, Rng& rng) {
        if (dims.size() < 2) throw ConfigError("BaseModel: need at least input and output dims");
        std::vector<DenseLayer> layers;
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
            const bool last = i + 2 == dims.size();
            layers.push_back({xavier_uniform(dims[i + 1], dims[i], rng), Vector(dims[i + 1]),
                              last ? Activation::identity : Activation::relu});
        }
        return BaseModel(std::move(layers));
    }

    [[nodiscard]] std::size_t input_dim() const noexcept { return layers_.front().in_dim(); }
    [[nodiscard]] std::size_t num_classes() const noexcept { return layers_.back().out_dim(); }
    [[nodiscard]] std::size_t num_layers() const noexcept { return layers_.size(); }
    [[nodiscard]] const std::vector<DenseLayer>& layers() const noexcept { return layers_; }

    [[nodiscard]] const DenseLayer& layer(std::size_t id) const {
        if (id >= layers_.size()) throw IndexError("BaseModel: no layer " + std::to_string(id));
        return layers_[id];
    }

    // Identifies this exact parameter state; any mutation issues a new stamp.
    [[nodiscard]] std::uint64_t stamp() const noexcept { return stamp_; }

    [[nodiscard]] std::size_t parameter_count() const noexcept {
        std::size_t n = 0;
        for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
        return n;
    }

    // In-place parameter change (used by pre-training); traces taken before
    // the call become stale.
    template <class F>
    void mutate(F&& f) {
        f(layers_);
        validate();
        stamp_ = detail::next_model_stamp();
    }

    // Bitwise parameter equality; stamps are ignored.
    [[nodiscard]] bool same_parameters(const BaseModel& other) const { return layers_ == other.layers_; }

private:
    void validate() const {
        if (layers_.empty()) throw ConfigError("BaseModel: no layers");
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (l.weight.rows() == 0 || l.weight.cols() == 0) throw ShapeError("BaseModel: empty layer");
            if (l.bias.dim() != l.out_dim()) {
                throw ShapeError("BaseModel: layer " + std::to_string(i) + " bias dim mismatch");
            }
            if (i > 0 && l.in_dim() != layers_[i - 1].out_dim()) {
                throw ShapeError("BaseModel: layer " + std::to_string(i) + " input dim " +
                                 std::to_string(l.in_dim()) + " does not chain with previous output " +
                                 std::to_string(layers_[i - 1].out_dim()));
            }
            const bool last = i + 1 == layers_.size();
            if (last != (l.activation == Activation::identity)) {
                throw ConfigError("BaseModel: only the last layer may (and must) be linear");
            }
        }
    }

    std::vector<DenseLayer> layers_;
    std::uint64_t stamp_ = detail::next_model_stamp();
};

// Per-layer, per-example record of one forward pass.
struct ForwardTrace {
    std::uint64_t model_stamp = 0;
    std::vector<std::vector<Vector>> inputs;    // [layer][example] u_l
    std::vector<std::vector<Vector>> preacts;   // [layer][example] z_{l+1} = W u + b
    std::vector<Vector> logits;                 // [example]

    [[nodiscard]] std::size_t batch_size() const noexcept { return logits.size(); }
};

// The factors of one layer's gradient: sum_i outer(deltas[i], inputs[i]).
struct GradFactors {
    std::size_t layer = 0;
    std::vector<Vector> inputs;  // u_l^i
    std::vector<Vector> deltas;  // dLoss_i / dz_{l+1}^i

    [[nodiscard]] std::size_t batch_size() const noexcept { return inputs.size(); }
};

enum class Reduction { sum, mean };

struct Gradients {
    std::vector<GradFactors> factors;  // per layer, unsummed per example
    std::vector<Matrix> weight;        // per layer, dense
    std::vector<Vector> bias;          // per layer
};

struct NllBackward {
    double mean_loss = 0.0;
    Gradients grads;
};

inline ForwardTrace forward(const BaseModel& model, std::span<const Vector> batch) {
    ForwardTrace trace;
    trace.model_stamp = model.stamp();
    const std::size_t L = model.num_layers();
    trace.inputs.assign(L, {});
    trace.preacts.assign(L, {});
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].dim() != model.input_dim()) {
            throw ShapeError("forward: example " + std::to_string(i) + " has dim " +
                             std::to_string(batch[i].dim()) + ", model expects " +
                             std::to_string(model.input_dim()));
        }
        Vector act = batch[i];
        for (std::size_t l = 0; l < L; ++l) {
            const DenseLayer& layer = model.layers()[l];
            Vector z = matvec(layer.weight, act);
            axpy(1.0, layer.bias.values(), z.values());
            trace.inputs[l].push_back(std::move(act));
            act = layer.activation == Activation::relu ? relu(z) : z;
            trace.preacts[l].push_back(std::move(z));
        }
        require_finite(act.values(), "forward logits");
        trace.logits.push_back(std::move(act));
    }
    return trace;
}

inline Vector logits(const BaseModel& model, const Vector& x) {
    return std::move(forward(model, std::span<const Vector>(&x, 1)).logits.front());
}

inline ClassIndex predict(const BaseModel& model, const Vector& x) { return argmax(logits(model, x)); }

// Backpropagates arbitrary per-example logit gradients. Factors hold the
// per-example deltas; dense gradients are their sum (or mean).
inline Gradients backward(const BaseModel& model, const ForwardTrace& trace,
                          std::span<const Vector> grad_logits, Reduction reduction = Reduction::sum) {
    if (trace.model_stamp != model.stamp()) {
        throw ContractError("backward: trace was produced by a different or since-modified model");
    }
    if (grad_logits.size() != trace.batch_size()) {
        throw ShapeError("backward: one logit gradient per example required");
    }
    const std::size_t L = model.num_layers();
    const std::size_t B = trace.batch_size();
    Gradients g;
    g.factors.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        g.factors[l].layer = l;
        g.weight.emplace_back(model.layers()[l].out_dim(), model.layers()[l].in_dim());
        g.bias.emplace_back(model.layers()[l].out_dim());
    }
    for (std::size_t i = 0; i < B; ++i) {
        if (grad_logits[i].dim() != model.num_classes()) throw ShapeError("backward: logit gradient dim");
        Vector delta = grad_logits[i];
        for (std::size_t l = L; l-- > 0;) {
            const DenseLayer& layer = model.layers()[l];
            if (layer.activation == Activation::relu) {
                delta = hadamard(delta, relu_grad(trace.preacts[l][i]));
            }
            const Vector& u = trace.inputs[l][i];
            add_outer(g.weight[l], delta, u);
            axpy(1.0, delta.values(), g.bias[l].values());
            Vector upstream = l > 0 ? matvec_transposed(layer.weight, delta) : Vector();
            g.factors[l].inputs.push_back(u);
            g.factors[l].deltas.push_back(std::move(delta));
            delta = std::move(upstream);
        }
    }
    if (reduction == Reduction::mean && B > 0) {
        const double inv = 1.0 / static_cast<double>(B);
        for (auto& w : g.weight)
            for (double& x : w.values()) x *= inv;
        for (auto& b : g.bias)
            for (double& x : b.values()) x *= inv;
    }
    return g;
}

inline NllBackward backward_nll(const BaseModel& model, const ForwardTrace& trace,
                                std::span<const ClassIndex> labels, Reduction reduction = Reduction::sum) {
    if (labels.size() != trace.batch_size()) throw ShapeError("backward_nll: one label per example required");
    std::vector<Vector> grad_logits;
    grad_logits.reserve(labels.size());
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto nll = softmax_nll(trace.logits[i], labels[i]);
        total += nll.loss;
        grad_logits.push_back(std::move(nll.grad_logits));
    }
    NllBackward out;
    out.mean_loss = labels.empty() ? 0.0 : total / static_cast<double>(labels.size());
    out.grads = backward(model, trace, grad_logits, reduction);
    return out;
}

inline Matrix reconstruct_gradient(const GradFactors& factors) {
    if (factors.batch_size() == 0 || factors.deltas.size() != factors.inputs.size()) {
        throw ContractError("reconstruct_gradient: factors must be non-empty and paired");
    }
    Matrix out(factors.deltas.front().dim(), factors.inputs.front().dim());
    for (std::size_t i = 0; i < factors.batch_size(); ++i) add_outer(out, factors.deltas[i], factors.inputs[i]);
    return out;
}

// Returns an independent copy with some weight matrices replaced.
inline BaseModel clone_with_weights(const BaseModel& model, const std::map<std::size_t, Matrix>& replacements) {
    std::vector<DenseLayer> layers = model.layers();
    for (const auto& [id, weight] : replacements) {
        if (id >= layers.size()) throw IndexError("clone_with_weights: unknown layer " + std::to_string(id));
        if (weight.rows() != layers[id].weight.rows() || weight.cols() != layers[id].weight.cols()) {
            throw ShapeError("clone_with_weights: layer " + std::to_string(id) + " expects " +
                             shape_string(layers[id].weight) + ", got " + shape_string(weight));
        }
        layers[id].weight = weight;
    }
    return BaseModel(std::move(layers));
}

inline double accuracy(const BaseModel& model, std::span<const LabeledExample> data) {
    if (data.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& ex : data) correct += predict(model, ex.x) == ex.y ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainConfig {
    std::size_t epochs = 60;
    std::size_t batch_size = 32;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;
};

// Minibatch Adam on mean NLL over all weights and biases. Returns the
// trained copy; the input model is left as is.
inline BaseModel train_classifier(const BaseModel& init, std::span<const LabeledExample> data,
                                  const PretrainConfig& config) {
    if (data.empty()) throw DataError("train_classifier: empty training set");
    if (config.batch_size == 0) throw ConfigError("train_classifier: batch_size must be >= 1");
    BaseModel model = init;
    Rng rng(config.seed);
    AdamState adam(config.learning_rate);
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> flat;
    std::vector<double> flat_grad;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            std::vector<Vector> xs;
            std::vector<ClassIndex> ys;
            for (std::size_t k = start; k < stop; ++k) {
                xs.push_back(data[order[k]].x);
                ys.push_back(data[order[k]].y);
            }
            const auto trace = forward(model, xs);
            const auto back = backward_nll(model, trace, ys, Reduction::mean);
            flat.clear();
            flat_grad.clear();
            for (std::size_t l = 0; l < model.num_layers(); ++l) {
                const auto& layer = model.layers()[l];
                flat.insert(flat.end(), layer.weight.data().begin(), layer.weight.data().end());
                flat.insert(flat.end(), layer.bias.data().begin(), layer.bias.data().end());
                flat_grad.insert(flat_grad.end(), back.grads.weight[l].data().begin(),
                                 back.grads.weight[l].data().end());
                flat_grad.insert(flat_grad.end(), back.grads.bias[l].data().begin(), back.grads.bias[l].data().end());
            }
            adam_step(flat, flat_grad, adam);
            model.mutate([&](std::vector<DenseLayer>& layers) {
                std::size_t pos = 0;
                for (auto& layer : layers) {
                    for (double& w : layer.weight.values()) w = flat[pos++];
                    for (double& b : layer.bias.values()) b = flat[pos++];
                }
            });
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Checkpoint: {"format": "mend-base-model", "version": 1, "input_dim", "num_classes",
//              "layers": [{"activation", "weight": {rows, cols, data}, "bias": [...]}]}

inline constexpr int kModelFormatVersion = 1;

inline io::json model_to_json(const BaseModel& model) {
    io::json layers = io::json::array();
    for (const auto& l : model.layers()) {
        layers.push_back({{"activation", l.activation == Activation::relu ? "relu" : "identity"},
                          {"weight", io::to_json(l.weight)},
                          {"bias", io::to_json(l.bias)}});
    }
    return {{"format", "mend-base-model"},
            {"version", kModelFormatVersion},
            {"input_dim", model.input_dim()},
            {"num_classes", model.num_classes()},
            {"layers", layers}};
}

inline BaseModel model_from_json(const io::json& j) {
    io::check_envelope(j, "mend-base-model", kModelFormatVersion);
    try {
        std::vector<DenseLayer> layers;
        for (const auto& lj : j.at("layers")) {
            const auto act = lj.at("activation").get<std::string>();
            if (act != "relu" && act != "identity") throw DataError("unknown activation '" + act + "'");
            layers.push_back({io::matrix_from_json(lj.at("weight")), io::vector_from_json(lj.at("bias")),
                              act == "relu" ? Activation::relu : Activation::identity});
        }
        BaseModel model(std::move(layers));
        if (model.input_dim() != j.at("input_dim").get<std::size_t>() ||
            model.num_classes() != j.at("num_classes").get<std::size_t>()) {
            throw DataError("model checkpoint: header dims disagree with layers");
        }
        return model;
    } catch (const io::json::exception& e) {
        throw DataError(std::string("model checkpoint: ") + e.what());
    } catch (const ShapeError& e) {
        throw DataError(std::string("model checkpoint: ") + e.what());
    }
}

inline void save_model(const BaseModel& model, const std::filesystem::path& path) {
    io::write_text(path, model_to_json(model).dump() + "\n");
}

inline BaseModel load_model(const std::filesystem::path& path) {
    return model_from_json(io::parse_json(io::read_text(path), path.string()));
}

}  // namespace mend
