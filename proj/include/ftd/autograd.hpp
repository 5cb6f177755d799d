#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ftd/errors.hpp"
#include "ftd/tensor.hpp"

namespace ftd {

// Handle to a node on a Graph. Only meaningful for the graph that issued it.
struct ValueId {
    std::uint32_t v = UINT32_MAX;
    bool valid() const { return v != UINT32_MAX; }
    friend bool operator==(ValueId a, ValueId b) { return a.v == b.v; }
};

enum class Op : std::uint8_t {
    kInput,
    kConst,
    kAdd,
    kMul,
    kNeg,
    kScale,           // elementwise * constant c
    kAddScalar,       // elementwise + constant c
    kMatmul,          // (m,k) x (k,n)
    kTranspose,       // 2-D
    kSumRows,         // (m,n) -> (n)
    kBroadcastRows,   // (n) -> (m,n), ints = {m}
    kRowSum,          // (m,n) -> (m)
    kBroadcastCols,   // (m) -> (m,n), ints = {n}
    kSum,             // any -> (1)
    kBroadcastScalar, // (1) -> ints shape
    kReluMask,        // 1 where x > 0 else 0; derivative treated as 0
    kLeakyReluMask,   // 1 where x > 0 else c
    kSigmoid,
    kLog,
    kReciprocal,
    kSqrt,
    kSoftmax,      // row-wise, numerically stabilized
    kScaleBy,      // a * s[0] with s a 1-element node
    kIndexGather,  // out[i] = idx[i] < 0 ? 0 : a[idx[i]]; ints = out shape
    kIndexScatter, // out[idx[i]] += a[i] (idx < 0 skipped); ints = out shape
    kAvgPool,      // (n,c,h,w) -> (n,c,h/k,w/k), ints = {k}
    kNearestUpsample, // inverse layout of kAvgPool, ints = {k, H, W}
    kTile,            // (n) -> (reps*n), ints = {reps}
    kTileSum,         // (reps*n) -> (n), ints = {reps}
    kReshape,         // ints = new shape
    kPermute4,        // 4-D transpose, ints = axes
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::kInput: return "input";
        case Op::kConst: return "const";
        case Op::kAdd: return "add";
        case Op::kMul: return "mul";
        case Op::kNeg: return "neg";
        case Op::kScale: return "scale";
        case Op::kAddScalar: return "add_scalar";
        case Op::kMatmul: return "matmul";
        case Op::kTranspose: return "transpose";
        case Op::kSumRows: return "sum_rows";
        case Op::kBroadcastRows: return "broadcast_rows";
        case Op::kRowSum: return "row_sum";
        case Op::kBroadcastCols: return "broadcast_cols";
        case Op::kSum: return "sum";
        case Op::kBroadcastScalar: return "broadcast_scalar";
        case Op::kReluMask: return "relu_mask";
        case Op::kLeakyReluMask: return "leaky_relu_mask";
        case Op::kSigmoid: return "sigmoid";
        case Op::kLog: return "log";
        case Op::kReciprocal: return "reciprocal";
        case Op::kSqrt: return "sqrt";
        case Op::kSoftmax: return "softmax";
        case Op::kScaleBy: return "scale_by";
        case Op::kIndexGather: return "index_gather";
        case Op::kIndexScatter: return "index_scatter";
        case Op::kAvgPool: return "avg_pool";
        case Op::kNearestUpsample: return "nearest_upsample";
        case Op::kTile: return "tile";
        case Op::kTileSum: return "tile_sum";
        case Op::kReshape: return "reshape";
        case Op::kPermute4: return "permute4";
    }
    return "?";
}

using IndexArray = std::shared_ptr<const std::vector<std::int64_t>>;

struct OpAttr {
    double c = 0.0;
    std::vector<std::int64_t> ints;
    IndexArray indices;
};

// Append-only computation tape. Inputs always precede outputs, so node order
// is a topological order and replay is deterministic. Each op's backward rule
// emits further primitives onto the same tape, which is what makes gradients
// of gradients (double backward) work with no special machinery.
//
// A Graph is single-threaded; independent Graphs may run on separate threads.
class Graph {
public:
    struct Node {
        Op op;
        std::uint32_t a = UINT32_MAX;
        std::uint32_t b = UINT32_MAX;
        Tensor val;
        OpAttr attr;
    };

    std::size_t size() const { return nodes_.size(); }

    // Drops nodes from the tail. Callers must not hold ids >= n afterwards.
    void truncate(std::size_t n) {
        if (n > nodes_.size()) throw ValidationError("Graph::truncate beyond size");
        nodes_.resize(n);
    }

    const Tensor& value(ValueId id) const { return node(id).val; }
    const Shape& shape(ValueId id) const { return node(id).val.shape(); }
    Op op(ValueId id) const { return node(id).op; }

    ValueId input(Tensor t) { return emit(Op::kInput, {}, {}, std::move(t), {}); }
    ValueId constant(Tensor t) { return emit(Op::kConst, {}, {}, std::move(t), {}); }
    ValueId constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // ---- elementwise ----

    ValueId add(ValueId a, ValueId b) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        require(x.same_shape(y), "add", "shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
        Tensor out(x.shape());
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
        return emit(Op::kAdd, a, b, std::move(out), {});
    }

    ValueId mul(ValueId a, ValueId b) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        require(x.same_shape(y), "mul", "shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
        Tensor out(x.shape());
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
        return emit(Op::kMul, a, b, std::move(out), {});
    }

    ValueId neg(ValueId a) {
        Tensor out(shape(a));
        const Tensor& x = value(a);
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = -x[i];
        return emit(Op::kNeg, a, {}, std::move(out), {});
    }

    ValueId sub(ValueId a, ValueId b) { return add(a, neg(b)); }

    ValueId scale(ValueId a, double c) {
        Tensor out(shape(a));
        const Tensor& x = value(a);
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * c;
        OpAttr attr;
        attr.c = c;
        return emit(Op::kScale, a, {}, std::move(out), std::move(attr));
    }

    ValueId add_scalar(ValueId a, double c) {
        Tensor out(shape(a));
        const Tensor& x = value(a);
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + c;
        OpAttr attr;
        attr.c = c;
        return emit(Op::kAddScalar, a, {}, std::move(out), std::move(attr));
    }

    ValueId sigmoid(ValueId a) {
        Tensor out(shape(a));
        const Tensor& x = value(a);
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            const double v = x[i];
            out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        }
        return emit(Op::kSigmoid, a, {}, std::move(out), {});
    }

    ValueId log_(ValueId a) {
        Tensor out(shape(a));
        const Tensor& x = value(a);
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = std::log(x[i]);
        return emit(Op::kLog, a, {}, std::move(out), {});
    }

    ValueId reciprocal(ValueId a) {
        Tensor out(shape(a));
        const Tensor& x = value(a);
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = 1.0 / x[i];
        return emit(Op::kReciprocal, a, {}, std::move(out), {});
    }

    ValueId sqrt_(ValueId a) {
        Tensor out(shape(a));
        const Tensor& x = value(a);
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = std::sqrt(x[i]);
        return emit(Op::kSqrt, a, {}, std::move(out), {});
    }

    ValueId relu_mask(ValueId a) {
        Tensor out(shape(a));
        const Tensor& x = value(a);
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? 1.0 : 0.0;
        return emit(Op::kReluMask, a, {}, std::move(out), {});
    }

    ValueId leaky_relu_mask(ValueId a, double slope) {
        Tensor out(shape(a));
        const Tensor& x = value(a);
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? 1.0 : slope;
        OpAttr attr;
        attr.c = slope;
        return emit(Op::kLeakyReluMask, a, {}, std::move(out), std::move(attr));
    }

    ValueId relu(ValueId a) { return mul(a, relu_mask(a)); }
    ValueId leaky_relu(ValueId a, double slope = 0.01) { return mul(a, leaky_relu_mask(a, slope)); }

    // a * s[0] where s is a learnable 1-element node (the trained step size).
    ValueId scale_by(ValueId a, ValueId s) {
        require(value(s).numel() == 1, "scale_by", "scale operand must have one element");
        const double c = value(s)[0];
        Tensor out(shape(a));
        const Tensor& x = value(a);
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * c;
        return emit(Op::kScaleBy, a, s, std::move(out), {});
    }

    // ---- linear algebra ----

    ValueId matmul(ValueId a, ValueId b) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        require(x.rank() == 2 && y.rank() == 2, "matmul", "expects 2-D operands");
        require(x.dim(1) == y.dim(0), "matmul",
                "inner dims differ: " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
        const std::int64_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
        Tensor out({m, n});
        for (std::int64_t i = 0; i < m; ++i) {
            const double* xr = x.data() + i * k;
            double* or_ = out.data() + i * n;
            for (std::int64_t kk = 0; kk < k; ++kk) {
                const double xv = xr[kk];
                const double* yr = y.data() + kk * n;
                for (std::int64_t j = 0; j < n; ++j) or_[j] += xv * yr[j];
            }
        }
        return emit(Op::kMatmul, a, b, std::move(out), {});
    }

    ValueId transpose(ValueId a) {
        const Tensor& x = value(a);
        require(x.rank() == 2, "transpose", "expects 2-D operand");
        const std::int64_t m = x.dim(0), n = x.dim(1);
        Tensor out({n, m});
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
        return emit(Op::kTranspose, a, {}, std::move(out), {});
    }

    // ---- reductions and broadcasts ----

    ValueId sum_rows(ValueId a) {
        const Tensor& x = value(a);
        require(x.rank() == 2, "sum_rows", "expects 2-D operand");
        const std::int64_t m = x.dim(0), n = x.dim(1);
        Tensor out({n});
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) out[j] += x[i * n + j];
        return emit(Op::kSumRows, a, {}, std::move(out), {});
    }

    ValueId broadcast_rows(ValueId a, std::int64_t m) {
        const Tensor& x = value(a);
        require(x.rank() == 1, "broadcast_rows", "expects 1-D operand");
        const std::int64_t n = x.dim(0);
        Tensor out({m, n});
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = x[j];
        OpAttr attr;
        attr.ints = {m};
        return emit(Op::kBroadcastRows, a, {}, std::move(out), std::move(attr));
    }

    ValueId row_sum(ValueId a) {
        const Tensor& x = value(a);
        require(x.rank() == 2, "row_sum", "expects 2-D operand");
        const std::int64_t m = x.dim(0), n = x.dim(1);
        Tensor out({m});
        for (std::int64_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < n; ++j) acc += x[i * n + j];
            out[i] = acc;
        }
        return emit(Op::kRowSum, a, {}, std::move(out), {});
    }

    ValueId broadcast_cols(ValueId a, std::int64_t n) {
        const Tensor& x = value(a);
        require(x.rank() == 1, "broadcast_cols", "expects 1-D operand");
        const std::int64_t m = x.dim(0);
        Tensor out({m, n});
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = x[i];
        OpAttr attr;
        attr.ints = {n};
        return emit(Op::kBroadcastCols, a, {}, std::move(out), std::move(attr));
    }

    ValueId sum(ValueId a) {
        const Tensor& x = value(a);
        double acc = 0.0;
        for (std::int64_t i = 0; i < x.numel(); ++i) acc += x[i];
        return emit(Op::kSum, a, {}, Tensor::scalar(acc), {});
    }

    ValueId broadcast_scalar(ValueId a, Shape target) {
        require(value(a).numel() == 1, "broadcast_scalar", "expects 1-element operand");
        Tensor out = Tensor::full(target, value(a)[0]);
        OpAttr attr;
        attr.ints = target;
        return emit(Op::kBroadcastScalar, a, {}, std::move(out), std::move(attr));
    }

    ValueId mean(ValueId a) {
        const std::int64_t n = value(a).numel();
        return scale(sum(a), 1.0 / static_cast<double>(n));
    }

    ValueId squared_l2(ValueId a) { return sum(mul(a, a)); }

    ValueId dot(ValueId a, ValueId b) { return sum(mul(a, b)); }

    // ---- softmax / cross entropy ----

    ValueId softmax(ValueId a) {
        const Tensor& x = value(a);
        require(x.rank() == 2, "softmax", "expects 2-D logits");
        const std::int64_t m = x.dim(0), n = x.dim(1);
        Tensor out({m, n});
        for (std::int64_t i = 0; i < m; ++i) {
            double mx = x[i * n];
            for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
            double z = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                const double e = std::exp(x[i * n + j] - mx);
                out[i * n + j] = e;
                z += e;
            }
            for (std::int64_t j = 0; j < n; ++j) out[i * n + j] /= z;
        }
        return emit(Op::kSoftmax, a, {}, std::move(out), {});
    }

    // Mean cross-entropy over the batch; differentiable w.r.t. logits.
    ValueId softmax_xent(ValueId logits, const std::vector<int>& labels) {
        const Tensor& x = value(logits);
        require(x.rank() == 2, "softmax_xent", "expects 2-D logits");
        const std::int64_t m = x.dim(0), n = x.dim(1);
        require(static_cast<std::int64_t>(labels.size()) == m, "softmax_xent", "labels/batch size mismatch");
        auto idx = std::make_shared<std::vector<std::int64_t>>(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || labels[i] >= n)
                throw ValidationError("softmax_xent: label " + std::to_string(labels[i]) +
                                      " out of range [0," + std::to_string(n) + ")");
            (*idx)[i] = static_cast<std::int64_t>(i) * n + labels[i];
        }
        ValueId picked = index_gather(softmax(logits), IndexArray(idx), {m});
        return scale(sum(log_(picked)), -1.0 / static_cast<double>(m));
    }

    // ---- structural ops (exact linear gather/scatter pair) ----

    ValueId index_gather(ValueId a, IndexArray idx, Shape out_shape) {
        require(static_cast<std::int64_t>(idx->size()) == shape_numel(out_shape), "index_gather",
                "index count must equal output size");
        const Tensor& x = value(a);
        Tensor out(out_shape);
        const std::int64_t n = x.numel();
        for (std::size_t i = 0; i < idx->size(); ++i) {
            const std::int64_t k = (*idx)[i];
            if (k < 0) continue;
            require(k < n, "index_gather", "index out of range");
            out[static_cast<std::int64_t>(i)] = x[k];
        }
        OpAttr attr;
        attr.ints = std::move(out_shape);
        attr.indices = std::move(idx);
        return emit(Op::kIndexGather, a, {}, std::move(out), std::move(attr));
    }

    ValueId index_scatter(ValueId a, IndexArray idx, Shape out_shape) {
        const Tensor& x = value(a);
        require(static_cast<std::int64_t>(idx->size()) == x.numel(), "index_scatter",
                "index count must equal input size");
        Tensor out(out_shape);
        const std::int64_t n = out.numel();
        for (std::size_t i = 0; i < idx->size(); ++i) {
            const std::int64_t k = (*idx)[i];
            if (k < 0) continue;
            require(k < n, "index_scatter", "index out of range");
            out[k] += x[static_cast<std::int64_t>(i)];
        }
        OpAttr attr;
        attr.ints = std::move(out_shape);
        attr.indices = std::move(idx);
        return emit(Op::kIndexScatter, a, {}, std::move(out), std::move(attr));
    }

    // Row selection from a tensor whose first axis indexes examples.
    ValueId gather_rows(ValueId a, const std::vector<std::size_t>& rows) {
        const Tensor& x = value(a);
        require(x.rank() >= 1, "gather_rows", "expects rank >= 1");
        const std::int64_t stride = x.numel() / x.dim(0);
        auto idx = std::make_shared<std::vector<std::int64_t>>();
        idx->reserve(rows.size() * static_cast<std::size_t>(stride));
        for (std::size_t r : rows) {
            require(static_cast<std::int64_t>(r) < x.dim(0), "gather_rows", "row out of range");
            for (std::int64_t j = 0; j < stride; ++j)
                idx->push_back(static_cast<std::int64_t>(r) * stride + j);
        }
        Shape out_shape = x.shape();
        out_shape[0] = static_cast<std::int64_t>(rows.size());
        return index_gather(a, IndexArray(idx), std::move(out_shape));
    }

    ValueId reshape(ValueId a, Shape target) {
        const Tensor& x = value(a);
        require(shape_numel(target) == x.numel(), "reshape",
                "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(target));
        Tensor out(target, std::vector<double>(x.elems().begin(), x.elems().end()));
        OpAttr attr;
        attr.ints = std::move(target);
        return emit(Op::kReshape, a, {}, std::move(out), std::move(attr));
    }

    ValueId permute4(ValueId a, std::array<int, 4> axes) {
        const Tensor& x = value(a);
        require(x.rank() == 4, "permute4", "expects 4-D operand");
        Shape os(4);
        for (int i = 0; i < 4; ++i) os[static_cast<std::size_t>(i)] = x.dim(static_cast<std::size_t>(axes[i]));
        Tensor out(os);
        const std::int64_t d0 = x.dim(0), d1 = x.dim(1), d2 = x.dim(2), d3 = x.dim(3);
        std::array<std::int64_t, 4> src{};
        std::array<std::int64_t, 4> ostride{os[1] * os[2] * os[3], os[2] * os[3], os[3], 1};
        for (src[0] = 0; src[0] < d0; ++src[0])
            for (src[1] = 0; src[1] < d1; ++src[1])
                for (src[2] = 0; src[2] < d2; ++src[2])
                    for (src[3] = 0; src[3] < d3; ++src[3]) {
                        std::int64_t o = 0;
                        for (int i = 0; i < 4; ++i) o += src[static_cast<std::size_t>(axes[i])] * ostride[static_cast<std::size_t>(i)];
                        out[o] = x[((src[0] * d1 + src[1]) * d2 + src[2]) * d3 + src[3]];
                    }
        OpAttr attr;
        attr.ints = {axes[0], axes[1], axes[2], axes[3]};
        return emit(Op::kPermute4, a, {}, std::move(out), std::move(attr));
    }

    // ---- pooling ----

    ValueId avg_pool(ValueId a, std::int64_t k) {
        const Tensor& x = value(a);
        require(x.rank() == 4, "avg_pool", "expects (n,c,h,w)");
        const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const std::int64_t ho = h / k, wo = w / k;
        require(ho >= 1 && wo >= 1, "avg_pool", "window larger than input");
        Tensor out({n, c, ho, wo});
        const double inv = 1.0 / static_cast<double>(k * k);
        for (std::int64_t ni = 0; ni < n; ++ni)
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t i = 0; i < ho; ++i)
                    for (std::int64_t j = 0; j < wo; ++j) {
                        double acc = 0.0;
                        for (std::int64_t u = 0; u < k; ++u)
                            for (std::int64_t v = 0; v < k; ++v)
                                acc += x[((ni * c + ci) * h + i * k + u) * w + j * k + v];
                        out[((ni * c + ci) * ho + i) * wo + j] = acc * inv;
                    }
        OpAttr attr;
        attr.ints = {k, h, w};
        return emit(Op::kAvgPool, a, {}, std::move(out), std::move(attr));
    }

    // Zero outside the region covered by pooling windows (trailing rows/cols
    // of odd inputs), so it is the exact adjoint layout of avg_pool.
    ValueId nearest_upsample(ValueId a, std::int64_t k, std::int64_t h, std::int64_t w) {
        const Tensor& x = value(a);
        require(x.rank() == 4, "nearest_upsample", "expects (n,c,ho,wo)");
        const std::int64_t n = x.dim(0), c = x.dim(1), ho = x.dim(2), wo = x.dim(3);
        require(ho == h / k && wo == w / k, "nearest_upsample", "target extent mismatch");
        Tensor out({n, c, h, w});
        for (std::int64_t ni = 0; ni < n; ++ni)
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t i = 0; i < ho; ++i)
                    for (std::int64_t j = 0; j < wo; ++j) {
                        const double v = x[((ni * c + ci) * ho + i) * wo + j];
                        for (std::int64_t u = 0; u < k; ++u)
                            for (std::int64_t vv = 0; vv < k; ++vv)
                                out[((ni * c + ci) * h + i * k + u) * w + j * k + vv] = v;
                    }
        OpAttr attr;
        attr.ints = {k, h, w};
        return emit(Op::kNearestUpsample, a, {}, std::move(out), std::move(attr));
    }

    // Max pooling as an index gather at argmax positions captured at forward
    // time; gradients follow the selected entries exactly (a.e. correct).
    ValueId max_pool(ValueId a, std::int64_t k) {
        const Tensor& x = value(a);
        require(x.rank() == 4, "max_pool", "expects (n,c,h,w)");
        const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const std::int64_t ho = h / k, wo = w / k;
        require(ho >= 1 && wo >= 1, "max_pool", "window larger than input");
        auto idx = std::make_shared<std::vector<std::int64_t>>();
        idx->reserve(static_cast<std::size_t>(n * c * ho * wo));
        for (std::int64_t ni = 0; ni < n; ++ni)
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t i = 0; i < ho; ++i)
                    for (std::int64_t j = 0; j < wo; ++j) {
                        std::int64_t best = ((ni * c + ci) * h + i * k) * w + j * k;
                        for (std::int64_t u = 0; u < k; ++u)
                            for (std::int64_t v = 0; v < k; ++v) {
                                const std::int64_t cand = ((ni * c + ci) * h + i * k + u) * w + j * k + v;
                                if (x[cand] > x[best]) best = cand;
                            }
                        idx->push_back(best);
                    }
        return index_gather(a, IndexArray(idx), {n, c, ho, wo});
    }

    // ---- convolution via explicit patch expansion ----

    // Patch-extraction index table: rows iterate (n, ho, wo), columns iterate
    // (cin, kh, kw); -1 marks zero padding.
    static IndexArray im2col_indices(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                                     std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad) {
        const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
        const std::int64_t wo = (w + 2 * pad - kw) / stride + 1;
        auto idx = std::make_shared<std::vector<std::int64_t>>();
        idx->reserve(static_cast<std::size_t>(n * ho * wo * c * kh * kw));
        for (std::int64_t ni = 0; ni < n; ++ni)
            for (std::int64_t i = 0; i < ho; ++i)
                for (std::int64_t j = 0; j < wo; ++j)
                    for (std::int64_t ci = 0; ci < c; ++ci)
                        for (std::int64_t u = 0; u < kh; ++u)
                            for (std::int64_t v = 0; v < kw; ++v) {
                                const std::int64_t sh = i * stride - pad + u;
                                const std::int64_t sw = j * stride - pad + v;
                                const bool ok = sh >= 0 && sh < h && sw >= 0 && sw < w;
                                idx->push_back(ok ? ((ni * c + ci) * h + sh) * w + sw : -1);
                            }
        return idx;
    }

    // x: (n,cin,h,w), weight: (cout,cin,kh,kw), bias: (cout) -> (n,cout,ho,wo)
    ValueId conv2d(ValueId x, ValueId weight, ValueId bias, std::int64_t stride = 1, std::int64_t pad = 1) {
        const Tensor& xv = value(x);
        const Tensor& wv = value(weight);
        require(xv.rank() == 4 && wv.rank() == 4, "conv2d", "expects 4-D input and weight");
        require(xv.dim(1) == wv.dim(1), "conv2d", "channel mismatch");
        const std::int64_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        const std::int64_t cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
        const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
        const std::int64_t wo = (w + 2 * pad - kw) / stride + 1;
        require(ho >= 1 && wo >= 1, "conv2d", "kernel larger than padded input");
        IndexArray idx = im2col_indices(n, cin, h, w, kh, kw, stride, pad);
        ValueId cols = index_gather(x, idx, {n * ho * wo, cin * kh * kw});
        ValueId wmat = transpose(reshape(weight, {cout, cin * kh * kw}));
        ValueId prod = matmul(cols, wmat); // (n*ho*wo, cout)
        ValueId withb = bias_add(prod, bias);
        return permute4(reshape(withb, {n, ho, wo, cout}), {0, 3, 1, 2});
    }

    ValueId bias_add(ValueId x, ValueId b) {
        return add(x, broadcast_rows(b, value(x).dim(0)));
    }

    ValueId tile(ValueId a, std::int64_t reps) {
        const Tensor& x = value(a);
        require(x.rank() == 1, "tile", "expects 1-D operand");
        const std::int64_t n = x.dim(0);
        Tensor out({reps * n});
        for (std::int64_t r = 0; r < reps; ++r)
            for (std::int64_t i = 0; i < n; ++i) out[r * n + i] = x[i];
        OpAttr attr;
        attr.ints = {reps};
        return emit(Op::kTile, a, {}, std::move(out), std::move(attr));
    }

    ValueId tile_sum(ValueId a, std::int64_t reps) {
        const Tensor& x = value(a);
        require(x.rank() == 1 && x.dim(0) % reps == 0, "tile_sum", "length not divisible by reps");
        const std::int64_t n = x.dim(0) / reps;
        Tensor out({n});
        for (std::int64_t r = 0; r < reps; ++r)
            for (std::int64_t i = 0; i < n; ++i) out[i] += x[r * n + i];
        OpAttr attr;
        attr.ints = {reps};
        return emit(Op::kTileSum, a, {}, std::move(out), std::move(attr));
    }

    // ---- differentiation ----

    // Reverse-mode gradients of a scalar node. The returned ids are live graph
    // nodes; differentiate them again for higher-order derivatives. With
    // create_graph=false the caller promises not to differentiate the result
    // (the tape is still extended; use grad_values for a tidy tape).
    std::vector<ValueId> grad(ValueId out, std::span<const ValueId> wrt, bool create_graph = true) {
        (void)create_graph;
        check_on_graph(out);
        for (ValueId w : wrt) check_on_graph(w);
        if (value(out).numel() != 1)
            throw ValidationError("grad: output must be scalar, got shape " + shape_str(shape(out)));

        std::vector<ValueId> adj(nodes_.size());
        adj[out.v] = constant_scalar(1.0);
        for (std::uint32_t id = out.v + 1; id-- > 0;) {
            if (!adj[id].valid()) continue;
            accumulate_vjp(id, adj[id], adj);
        }
        std::vector<ValueId> result;
        result.reserve(wrt.size());
        for (ValueId w : wrt)
            result.push_back(adj[w.v].valid() ? adj[w.v] : constant(Tensor::zeros(shape(w))));
        return result;
    }

    std::vector<ValueId> grad(ValueId out, std::initializer_list<ValueId> wrt, bool create_graph = true) {
        std::vector<ValueId> w(wrt);
        return grad(out, std::span<const ValueId>(w), create_graph);
    }

    // First-order convenience: computes gradients, copies them out, and
    // truncates the tape back so training loops do not accumulate nodes.
    std::vector<Tensor> grad_values(ValueId out, std::span<const ValueId> wrt) {
        const std::size_t mark = nodes_.size();
        std::vector<ValueId> ids = grad(out, wrt, false);
        std::vector<Tensor> vals;
        vals.reserve(ids.size());
        for (ValueId id : ids) vals.push_back(value(id));
        truncate(mark);
        return vals;
    }

private:
    const Node& node(ValueId id) const {
        check_on_graph(id);
        return nodes_[id.v];
    }

    void check_on_graph(ValueId id) const {
        if (!id.valid() || id.v >= nodes_.size())
            throw ValidationError("ValueId not on this graph");
    }

    static void require(bool ok, const char* op, const std::string& msg) {
        if (!ok) throw ShapeError(std::string(op) + ": " + msg);
    }

    ValueId emit(Op op, ValueId a, ValueId b, Tensor val, OpAttr attr) {
        if (!val.all_finite())
            throw NonFiniteError(std::string("non-finite result in op '") + op_name(op) + "'");
        Node n;
        n.op = op;
        n.a = a.v;
        n.b = b.v;
        n.val = std::move(val);
        n.attr = std::move(attr);
        nodes_.push_back(std::move(n));
        return ValueId{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    void add_into(std::vector<ValueId>& adj, std::uint32_t target, ValueId contribution) {
        adj[target] = adj[target].valid() ? add(adj[target], contribution) : contribution;
    }

    // Emits the backward rule of node `id` given its adjoint `g`. Every rule
    // is a composition of primitives, so the emitted nodes are differentiable
    // in turn.
    void accumulate_vjp(std::uint32_t id, ValueId g, std::vector<ValueId>& adj) {
        // Copy POD fields before emitting: emission may reallocate nodes_.
        const Op op = nodes_[id].op;
        const std::uint32_t a = nodes_[id].a;
        const std::uint32_t b = nodes_[id].b;
        const ValueId self{id};
        switch (op) {
            case Op::kInput:
            case Op::kConst:
            case Op::kReluMask:
            case Op::kLeakyReluMask:
                return; // leaves and a.e.-constant masks
            case Op::kAdd:
                add_into(adj, a, g);
                add_into(adj, b, g);
                return;
            case Op::kMul:
                add_into(adj, a, mul(g, ValueId{b}));
                add_into(adj, b, mul(g, ValueId{a}));
                return;
            case Op::kNeg:
                add_into(adj, a, neg(g));
                return;
            case Op::kScale:
                add_into(adj, a, scale(g, nodes_[id].attr.c));
                return;
            case Op::kAddScalar:
                add_into(adj, a, g);
                return;
            case Op::kMatmul:
                add_into(adj, a, matmul(g, transpose(ValueId{b})));
                add_into(adj, b, matmul(transpose(ValueId{a}), g));
                return;
            case Op::kTranspose:
                add_into(adj, a, transpose(g));
                return;
            case Op::kSumRows:
                add_into(adj, a, broadcast_rows(g, value(ValueId{a}).dim(0)));
                return;
            case Op::kBroadcastRows:
                add_into(adj, a, sum_rows(g));
                return;
            case Op::kRowSum:
                add_into(adj, a, broadcast_cols(g, value(ValueId{a}).dim(1)));
                return;
            case Op::kBroadcastCols:
                add_into(adj, a, row_sum(g));
                return;
            case Op::kSum:
                add_into(adj, a, broadcast_scalar(g, value(ValueId{a}).shape()));
                return;
            case Op::kBroadcastScalar:
                add_into(adj, a, sum(g));
                return;
            case Op::kSigmoid: {
                ValueId one_minus = add_scalar(neg(self), 1.0);
                add_into(adj, a, mul(g, mul(self, one_minus)));
                return;
            }
            case Op::kLog:
                add_into(adj, a, mul(g, reciprocal(ValueId{a})));
                return;
            case Op::kReciprocal:
                add_into(adj, a, neg(mul(g, mul(self, self))));
                return;
            case Op::kSqrt:
                add_into(adj, a, mul(g, scale(reciprocal(self), 0.5)));
                return;
            case Op::kSoftmax: {
                const std::int64_t n = value(self).dim(1);
                ValueId t = mul(self, g);
                ValueId r = row_sum(t);
                add_into(adj, a, sub(t, mul(self, broadcast_cols(r, n))));
                return;
            }
            case Op::kScaleBy:
                add_into(adj, a, scale_by(g, ValueId{b}));
                add_into(adj, b, sum(mul(g, ValueId{a})));
                return;
            case Op::kIndexGather: {
                IndexArray idx = nodes_[id].attr.indices;
                Shape src_shape = value(ValueId{a}).shape();
                add_into(adj, a, index_scatter(g, std::move(idx), std::move(src_shape)));
                return;
            }
            case Op::kIndexScatter: {
                IndexArray idx = nodes_[id].attr.indices;
                Shape src_shape = value(ValueId{a}).shape();
                add_into(adj, a, index_gather(g, std::move(idx), std::move(src_shape)));
                return;
            }
            case Op::kAvgPool: {
                const auto ints = nodes_[id].attr.ints; // {k, h, w}
                add_into(adj, a, scale(nearest_upsample(g, ints[0], ints[1], ints[2]),
                                       1.0 / static_cast<double>(ints[0] * ints[0])));
                return;
            }
            case Op::kNearestUpsample: {
                const auto ints = nodes_[id].attr.ints;
                add_into(adj, a, scale(avg_pool(g, ints[0]), static_cast<double>(ints[0] * ints[0])));
                return;
            }
            case Op::kTile:
                add_into(adj, a, tile_sum(g, nodes_[id].attr.ints[0]));
                return;
            case Op::kTileSum:
                add_into(adj, a, tile(g, nodes_[id].attr.ints[0]));
                return;
            case Op::kReshape:
                add_into(adj, a, reshape(g, value(ValueId{a}).shape()));
                return;
            case Op::kPermute4: {
                const auto& ax = nodes_[id].attr.ints;
                std::array<int, 4> inv{};
                for (int i = 0; i < 4; ++i) inv[static_cast<std::size_t>(ax[static_cast<std::size_t>(i)])] = i;
                add_into(adj, a, permute4(g, inv));
                return;
            }
        }
        throw ValidationError(std::string("no backward rule for op '") + op_name(op) + "'");
    }

    std::vector<Node> nodes_;
};

} // namespace ftd
