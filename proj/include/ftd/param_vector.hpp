#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ftd/autograd.hpp"
#include "ftd/errors.hpp"
#include "ftd/rng.hpp"
#include "ftd/tensor.hpp"

namespace ftd {

// Maps named parameter tensors onto slices of one flat vector. Two parameter
// vectors are compatible only when they share an identical layout.
class ParamLayout {
public:
    struct Entry {
        std::string name;
        Shape shape;
        std::int64_t offset;
        std::int64_t size;
    };

    void add(std::string name, Shape shape) {
        const std::int64_t n = shape_numel(shape);
        entries_.push_back({std::move(name), std::move(shape), total_, n});
        total_ += n;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::int64_t total_size() const { return total_; }

    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        auto mix = [&h](std::uint64_t v) {
            h ^= v;
            h *= 0x100000001b3ull;
        };
        for (const auto& e : entries_) {
            mix(fnv1a64(e.name));
            for (auto d : e.shape) mix(static_cast<std::uint64_t>(d));
        }
        mix(static_cast<std::uint64_t>(total_));
        return h;
    }

    bool operator==(const ParamLayout& o) const {
        if (total_ != o.total_ || entries_.size() != o.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].name != o.entries_[i].name || entries_[i].shape != o.entries_[i].shape) return false;
        return true;
    }

private:
    std::vector<Entry> entries_;
    std::int64_t total_ = 0;
};

using LayoutPtr = std::shared_ptr<const ParamLayout>;

// Flat, ordered vector of all network weights.
class ParamVector {
public:
    ParamVector() = default;

    explicit ParamVector(LayoutPtr layout)
        : layout_(std::move(layout)), data_(static_cast<std::size_t>(layout_->total_size()), 0.0) {}

    ParamVector(LayoutPtr layout, std::vector<double> data) : layout_(std::move(layout)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != layout_->total_size())
            throw ShapeError("ParamVector: data size does not match layout");
    }

    const LayoutPtr& layout() const { return layout_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    std::span<double> elems() { return data_; }
    std::span<const double> elems() const { return data_; }
    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // flatten: per-parameter tensors -> flat vector, in layout order.
    static ParamVector flatten(LayoutPtr layout, std::span<const Tensor> params) {
        if (params.size() != layout->entries().size()) throw ShapeError("flatten: parameter count mismatch");
        ParamVector out(layout);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& e = layout->entries()[i];
            if (params[i].shape() != e.shape)
                throw ShapeError("flatten: shape mismatch for '" + e.name + "'");
            std::copy(params[i].elems().begin(), params[i].elems().end(), out.data_.begin() + e.offset);
        }
        return out;
    }

    // unflatten: flat vector -> per-parameter tensors. Lossless round trip.
    std::vector<Tensor> unflatten() const {
        std::vector<Tensor> out;
        out.reserve(layout_->entries().size());
        for (const auto& e : layout_->entries()) {
            std::vector<double> chunk(data_.begin() + e.offset, data_.begin() + e.offset + e.size);
            out.emplace_back(e.shape, std::move(chunk));
        }
        return out;
    }

    // Puts every parameter on the graph as a differentiable input.
    std::vector<ValueId> to_graph_inputs(Graph& g) const {
        std::vector<Tensor> parts = unflatten();
        std::vector<ValueId> ids;
        ids.reserve(parts.size());
        for (Tensor& t : parts) ids.push_back(g.input(std::move(t)));
        return ids;
    }

    std::vector<ValueId> to_graph_constants(Graph& g) const {
        std::vector<Tensor> parts = unflatten();
        std::vector<ValueId> ids;
        ids.reserve(parts.size());
        for (Tensor& t : parts) ids.push_back(g.constant(std::move(t)));
        return ids;
    }

    // Reads per-parameter node values back into one flat vector.
    static ParamVector from_graph(const Graph& g, LayoutPtr layout, std::span<const ValueId> ids) {
        if (ids.size() != layout->entries().size()) throw ShapeError("from_graph: parameter count mismatch");
        ParamVector out(layout);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const auto& e = layout->entries()[i];
            const Tensor& t = g.value(ids[i]);
            if (t.shape() != e.shape) throw ShapeError("from_graph: shape mismatch for '" + e.name + "'");
            std::copy(t.elems().begin(), t.elems().end(), out.data_.begin() + e.offset);
        }
        return out;
    }

    bool compatible_with(const ParamVector& o) const {
        return layout_ == o.layout_ || (layout_ && o.layout_ && *layout_ == *o.layout_);
    }

    ParamVector& operator+=(const ParamVector& o) {
        check_compat(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    ParamVector& operator-=(const ParamVector& o) {
        check_compat(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }

    ParamVector& operator*=(double c) {
        for (auto& v : data_) v *= c;
        return *this;
    }

    friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
    friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
    friend ParamVector operator*(ParamVector a, double c) { return a *= c; }
    friend ParamVector operator*(double c, ParamVector a) { return a *= c; }

    // this += c * o
    void axpy(double c, const ParamVector& o) {
        check_compat(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += c * o.data_[i];
    }

    double dot(const ParamVector& o) const {
        check_compat(o);
        double acc = 0.0;
        for (std::size_t i = 0; i < data_.size(); ++i) acc += data_[i] * o.data_[i];
        return acc;
    }

    double squared_norm() const {
        double acc = 0.0;
        for (double v : data_) acc += v * v;
        return acc;
    }

    double norm() const { return std::sqrt(squared_norm()); }

    double rms() const { return data_.empty() ? 0.0 : std::sqrt(squared_norm() / static_cast<double>(data_.size())); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool bit_equal(const ParamVector& o) const {
        return compatible_with(o) && data_ == o.data_;
    }

    static ParamVector gaussian(LayoutPtr layout, double sigma, Rng& rng) {
        ParamVector out(std::move(layout));
        for (auto& v : out.data_) v = rng.normal(0.0, sigma);
        return out;
    }

private:
    void check_compat(const ParamVector& o) const {
        if (!compatible_with(o)) throw ShapeError("ParamVector: layout mismatch");
        if (data_.size() != o.data_.size()) throw ShapeError("ParamVector: size mismatch");
    }

    LayoutPtr layout_;
    std::vector<double> data_;
};

} // namespace ftd
