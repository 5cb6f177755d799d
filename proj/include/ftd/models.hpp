#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ftd/autograd.hpp"
#include "ftd/errors.hpp"
#include "ftd/param_vector.hpp"
#include "ftd/rng.hpp"
#include "ftd/tensor.hpp"

namespace ftd {

enum class Family : std::uint8_t { kMlp, kConvNet };
enum class NormKind : std::uint8_t { kNone, kInstance, kGroup, kLayer, kBatchEvalFrozen };
enum class Activation : std::uint8_t { kSigmoid, kRelu, kLeakyRelu };
enum class Pooling : std::uint8_t { kNone, kMax, kAvg };

inline const char* to_string(Family f) { return f == Family::kMlp ? "mlp" : "convnet"; }
inline const char* to_string(NormKind n) {
    switch (n) {
        case NormKind::kNone: return "none";
        case NormKind::kInstance: return "instance";
        case NormKind::kGroup: return "group";
        case NormKind::kLayer: return "layer";
        case NormKind::kBatchEvalFrozen: return "batch-eval-frozen";
    }
    return "?";
}
inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::kSigmoid: return "sigmoid";
        case Activation::kRelu: return "relu";
        case Activation::kLeakyRelu: return "leaky-relu";
    }
    return "?";
}
inline const char* to_string(Pooling p) {
    switch (p) {
        case Pooling::kNone: return "none";
        case Pooling::kMax: return "max";
        case Pooling::kAvg: return "avg";
    }
    return "?";
}

// One point of the architecture grid: (width, depth, norm, activation,
// pooling) plus family and data dimensions.
struct ArchSpec {
    Family family = Family::kMlp;
    std::int64_t width = 8;
    std::int64_t depth = 1;
    NormKind norm = NormKind::kNone;
    Activation activation = Activation::kRelu;
    Pooling pooling = Pooling::kNone;
    Shape input_shape; // (features) for mlp input, (c,h,w) for convnet
    std::int64_t classes = 2;

    std::string id() const {
        std::string s = to_string(family);
        s += "_w" + std::to_string(width) + "_d" + std::to_string(depth);
        s += "_n"; s += to_string(norm);
        s += "_a"; s += to_string(activation);
        s += "_p"; s += to_string(pooling);
        return s;
    }

    void validate() const {
        if (width < 1) throw ValidationError("ArchSpec: width must be >= 1");
        if (depth < 1) throw ValidationError("ArchSpec: depth must be >= 1");
        if (classes < 2) throw ValidationError("ArchSpec: classes must be >= 2");
        if (input_shape.empty()) throw ValidationError("ArchSpec: input shape missing");
        if (family == Family::kMlp && pooling != Pooling::kNone)
            throw ValidationError("ArchSpec: pooling is not defined for the mlp family");
        if (family == Family::kConvNet && input_shape.size() != 3)
            throw ValidationError("ArchSpec: convnet expects (c,h,w) input shape");
    }
};

struct Batch {
    Tensor pixels; // (batch, ...) matching ArchSpec::input_shape
    std::vector<int> labels;

    std::int64_t size() const { return pixels.dim(0); }
};

namespace detail {

// Largest group count <= 4 dividing n (group-norm grouping rule).
inline std::int64_t norm_groups(std::int64_t n) {
    for (std::int64_t g = 4; g >= 2; --g)
        if (n % g == 0) return g;
    return 1;
}

constexpr double kNormEps = 1e-5;

// Normalizes each row of a 2-D node to zero mean, unit variance.
inline ValueId normalize_rows(Graph& g, ValueId x) {
    const std::int64_t k = g.value(x).dim(1);
    const double inv_k = 1.0 / static_cast<double>(k);
    ValueId mu = g.scale(g.row_sum(x), inv_k);
    ValueId centered = g.sub(x, g.broadcast_cols(mu, k));
    ValueId var = g.scale(g.row_sum(g.mul(centered, centered)), inv_k);
    ValueId inv_std = g.reciprocal(g.sqrt_(g.add_scalar(var, kNormEps)));
    return g.mul(centered, g.broadcast_cols(inv_std, k));
}

} // namespace detail

// Immutable network: a parameter layout plus a pure forward function. Safe to
// share across threads once built.
class Network {
public:
    static Network build(ArchSpec spec) {
        spec.validate();
        Network net;
        net.spec_ = std::move(spec);
        auto layout = std::make_shared<ParamLayout>();
        auto& s = net.spec_;
        if (s.family == Family::kMlp) {
            std::int64_t in = shape_numel(s.input_shape);
            for (std::int64_t d = 0; d < s.depth; ++d) {
                const std::string p = "block" + std::to_string(d) + ".";
                layout->add(p + "w", {in, s.width});
                layout->add(p + "b", {s.width});
                net.inits_.push_back({InitKind::kKaiming, in});
                net.inits_.push_back({InitKind::kBiasUniform, in});
                if (s.norm != NormKind::kNone) {
                    layout->add(p + "gamma", {s.width});
                    layout->add(p + "beta", {s.width});
                    net.inits_.push_back({InitKind::kOnes, 0});
                    net.inits_.push_back({InitKind::kZeros, 0});
                }
                in = s.width;
            }
            layout->add("head.w", {in, s.classes});
            layout->add("head.b", {s.classes});
            net.inits_.push_back({InitKind::kKaiming, in});
            net.inits_.push_back({InitKind::kBiasUniform, in});
        } else {
            std::int64_t c = s.input_shape[0];
            std::int64_t h = s.input_shape[1];
            std::int64_t w = s.input_shape[2];
            for (std::int64_t d = 0; d < s.depth; ++d) {
                const std::string p = "block" + std::to_string(d) + ".";
                layout->add(p + "w", {s.width, c, 3, 3});
                layout->add(p + "b", {s.width});
                const std::int64_t fan_in = c * 9;
                net.inits_.push_back({InitKind::kKaiming, fan_in});
                net.inits_.push_back({InitKind::kBiasUniform, fan_in});
                if (s.norm != NormKind::kNone) {
                    layout->add(p + "gamma", {s.width});
                    layout->add(p + "beta", {s.width});
                    net.inits_.push_back({InitKind::kOnes, 0});
                    net.inits_.push_back({InitKind::kZeros, 0});
                }
                c = s.width;
                if (s.pooling != Pooling::kNone && h >= 2 && w >= 2) {
                    h /= 2;
                    w /= 2;
                }
            }
            const std::int64_t feat = c * h * w;
            layout->add("head.w", {feat, s.classes});
            layout->add("head.b", {s.classes});
            net.inits_.push_back({InitKind::kKaiming, feat});
            net.inits_.push_back({InitKind::kBiasUniform, feat});
        }
        net.layout_ = std::move(layout);
        return net;
    }

    const ArchSpec& spec() const { return spec_; }
    const LayoutPtr& layout() const { return layout_; }
    std::int64_t param_count() const { return layout_->total_size(); }

    // Kaiming-uniform fan-in draw; this defines the initialization
    // distribution teachers and students sample from.
    ParamVector init_weights(std::uint64_t seed) const {
        Rng rng(seed);
        ParamVector pv(layout_);
        const auto& entries = layout_->entries();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& e = entries[i];
            const auto& init = inits_[i];
            double* out = pv.elems().data() + e.offset;
            switch (init.kind) {
                case InitKind::kKaiming: {
                    const double bound = std::sqrt(6.0 / static_cast<double>(init.fan_in));
                    for (std::int64_t j = 0; j < e.size; ++j) out[j] = rng.uniform(-bound, bound);
                    break;
                }
                case InitKind::kBiasUniform: {
                    const double bound = 1.0 / std::sqrt(static_cast<double>(init.fan_in));
                    for (std::int64_t j = 0; j < e.size; ++j) out[j] = rng.uniform(-bound, bound);
                    break;
                }
                case InitKind::kOnes:
                    for (std::int64_t j = 0; j < e.size; ++j) out[j] = 1.0;
                    break;
                case InitKind::kZeros:
                    for (std::int64_t j = 0; j < e.size; ++j) out[j] = 0.0;
                    break;
            }
        }
        return pv;
    }

    // Forward pass to logits (batch, classes). `params` are graph nodes in
    // layout order; `x` is a pixel node of shape (batch, input_shape...).
    ValueId forward(Graph& g, std::span<const ValueId> params, ValueId x) const {
        if (params.size() != layout_->entries().size())
            throw ShapeError("Network::forward: expected " + std::to_string(layout_->entries().size()) +
                             " parameter nodes, got " + std::to_string(params.size()));
        std::size_t pi = 0;
        auto next = [&]() { return params[pi++]; };
        const std::int64_t batch = g.value(x).dim(0);

        if (spec_.family == Family::kMlp) {
            ValueId h = g.reshape(x, {batch, shape_numel(spec_.input_shape)});
            for (std::int64_t d = 0; d < spec_.depth; ++d) {
                h = g.bias_add(g.matmul(h, next()), next());
                if (spec_.norm != NormKind::kNone) h = mlp_norm(g, h, next(), next());
                h = activate(g, h);
            }
            return g.bias_add(g.matmul(h, next()), next());
        }

        std::int64_t ch = spec_.input_shape[0];
        std::int64_t hh = spec_.input_shape[1];
        std::int64_t ww = spec_.input_shape[2];
        ValueId h = g.reshape(x, {batch, ch, hh, ww});
        for (std::int64_t d = 0; d < spec_.depth; ++d) {
            h = g.conv2d(h, next(), next(), 1, 1);
            ch = spec_.width;
            if (spec_.norm != NormKind::kNone) h = conv_norm(g, h, next(), next(), batch, ch, hh, ww);
            h = activate(g, h);
            if (spec_.pooling != Pooling::kNone && hh >= 2 && ww >= 2) {
                h = spec_.pooling == Pooling::kMax ? g.max_pool(h, 2) : g.avg_pool(h, 2);
                hh /= 2;
                ww /= 2;
            }
        }
        ValueId flat = g.reshape(h, {batch, ch * hh * ww});
        return g.bias_add(g.matmul(flat, next()), next());
    }

    // Cross-entropy loss node, differentiable w.r.t. both params and pixels.
    ValueId loss(Graph& g, std::span<const ValueId> params, ValueId pixels, const std::vector<int>& labels) const {
        if (labels.empty()) throw ValidationError("Network::loss: empty batch");
        return g.softmax_xent(forward(g, params, pixels), labels);
    }

    // Value-level convenience: loss of a ParamVector on a batch.
    double loss_value(const ParamVector& params, const Batch& batch) const {
        Graph g;
        std::vector<ValueId> ps = params.to_graph_constants(g);
        return g.value(loss(g, ps, g.constant(batch.pixels), batch.labels)).scalar_value();
    }

    std::vector<int> predict(const ParamVector& params, const Tensor& pixels) const {
        Graph g;
        std::vector<ValueId> ps = params.to_graph_constants(g);
        const Tensor& logits = g.value(forward(g, ps, g.constant(pixels)));
        const std::int64_t b = logits.dim(0), c = logits.dim(1);
        std::vector<int> out(static_cast<std::size_t>(b));
        for (std::int64_t i = 0; i < b; ++i) {
            std::int64_t best = 0;
            for (std::int64_t j = 1; j < c; ++j)
                if (logits[i * c + j] > logits[i * c + best]) best = j;
            out[static_cast<std::size_t>(i)] = static_cast<int>(best);
        }
        return out;
    }

    double accuracy(const ParamVector& params, const Batch& batch) const {
        std::vector<int> pred = predict(params, batch.pixels);
        std::int64_t hits = 0;
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == batch.labels[i]) ++hits;
        return static_cast<double>(hits) / static_cast<double>(pred.size());
    }

private:
    enum class InitKind : std::uint8_t { kKaiming, kBiasUniform, kOnes, kZeros };
    struct InitInfo {
        InitKind kind;
        std::int64_t fan_in;
    };

    ValueId activate(Graph& g, ValueId h) const {
        switch (spec_.activation) {
            case Activation::kSigmoid: return g.sigmoid(h);
            case Activation::kRelu: return g.relu(h);
            case Activation::kLeakyRelu: return g.leaky_relu(h, 0.01);
        }
        throw ValidationError("unknown activation");
    }

    // Feature normalization for (batch, features) activations. Instance and
    // layer coincide in the mlp family; batch-eval-frozen normalizes over the
    // batch axis with statistics of the current forward pass (no running
    // state survives the unrolled inner loop).
    ValueId mlp_norm(Graph& g, ValueId h, ValueId gamma, ValueId beta, bool skip_affine = false) const {
        const std::int64_t b = g.value(h).dim(0);
        const std::int64_t f = g.value(h).dim(1);
        ValueId normed;
        switch (spec_.norm) {
            case NormKind::kInstance:
            case NormKind::kLayer:
                normed = detail::normalize_rows(g, h);
                break;
            case NormKind::kGroup: {
                const std::int64_t groups = detail::norm_groups(f);
                normed = g.reshape(detail::normalize_rows(g, g.reshape(h, {b * groups, f / groups})), {b, f});
                break;
            }
            case NormKind::kBatchEvalFrozen:
                normed = g.transpose(detail::normalize_rows(g, g.transpose(h)));
                break;
            case NormKind::kNone:
                return h;
        }
        if (skip_affine) return normed;
        return g.bias_add(g.mul(normed, g.broadcast_rows(gamma, b)), beta);
    }

    ValueId conv_norm(Graph& g, ValueId h, ValueId gamma, ValueId beta, std::int64_t b, std::int64_t c,
                      std::int64_t hh, std::int64_t ww) const {
        const std::int64_t spatial = hh * ww;
        ValueId normed;
        switch (spec_.norm) {
            case NormKind::kInstance:
                normed = g.reshape(detail::normalize_rows(g, g.reshape(h, {b * c, spatial})), {b, c, hh, ww});
                break;
            case NormKind::kLayer:
                normed = g.reshape(detail::normalize_rows(g, g.reshape(h, {b, c * spatial})), {b, c, hh, ww});
                break;
            case NormKind::kGroup: {
                const std::int64_t groups = detail::norm_groups(c);
                normed = g.reshape(detail::normalize_rows(g, g.reshape(h, {b * groups, (c / groups) * spatial})),
                                   {b, c, hh, ww});
                break;
            }
            case NormKind::kBatchEvalFrozen: {
                ValueId t = g.reshape(g.permute4(h, {1, 0, 2, 3}), {c, b * spatial});
                ValueId n2 = detail::normalize_rows(g, t);
                normed = g.permute4(g.reshape(n2, {c, b, hh, ww}), {1, 0, 2, 3});
                break;
            }
            case NormKind::kNone:
                return h;
        }
        // Per-channel affine on a (b*c, spatial) view.
        ValueId flat = g.reshape(normed, {b * c, spatial});
        ValueId scaled = g.mul(flat, g.broadcast_cols(g.tile(gamma, b), spatial));
        ValueId shifted = g.add(scaled, g.broadcast_cols(g.tile(beta, b), spatial));
        return g.reshape(shifted, {b, c, hh, ww});
    }

    ArchSpec spec_;
    LayoutPtr layout_;
    std::vector<InitInfo> inits_;
};

} // namespace ftd
