#pragma once

#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedsim {

// A model is an ordered list of named layers, each a flat float64 buffer with
// a recorded shape.  Layer order is the schema: flatten() concatenates in this
// order, and every arithmetic helper refuses to mix models whose schemas
// differ.  Defense code works on these buffers directly and never needs to
// know what the layers mean.
struct LayeredModel {
    std::vector<std::string> names;
    std::vector<std::vector<std::size_t>> shapes;  // row-major dims per layer
    std::vector<std::vector<double>> values;       // flat buffer per layer

    std::size_t layer_count() const { return names.size(); }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& v : values) n += v.size();
        return n;
    }

    bool same_schema(const LayeredModel& o) const {
        return names == o.names && shapes == o.shapes;
    }
};

inline std::size_t shape_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline void check_schema(const LayeredModel& a, const LayeredModel& b, const char* op) {
    if (!a.same_schema(b))
        throw std::invalid_argument(std::string(op) + ": layer schema mismatch");
}

inline std::vector<double> flatten(const LayeredModel& m) {
    std::vector<double> out;
    out.reserve(m.total_params());
    for (const auto& v : m.values) out.insert(out.end(), v.begin(), v.end());
    return out;
}

// Inverse of flatten for a given schema donor.
inline LayeredModel unflatten(const std::vector<double>& flat, const LayeredModel& schema) {
    if (flat.size() != schema.total_params())
        throw std::invalid_argument("unflatten: flat size does not match schema");
    LayeredModel out;
    out.names = schema.names;
    out.shapes = schema.shapes;
    out.values.resize(schema.values.size());
    std::size_t pos = 0;
    for (std::size_t l = 0; l < schema.values.size(); ++l) {
        const std::size_t n = schema.values[l].size();
        out.values[l].assign(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                             flat.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
    }
    return out;
}

inline LayeredModel zeros_like(const LayeredModel& m) {
    LayeredModel out;
    out.names = m.names;
    out.shapes = m.shapes;
    out.values.resize(m.values.size());
    for (std::size_t l = 0; l < m.values.size(); ++l)
        out.values[l].assign(m.values[l].size(), 0.0);
    return out;
}

inline LayeredModel add(const LayeredModel& a, const LayeredModel& b) {
    check_schema(a, b, "add");
    LayeredModel out = a;
    for (std::size_t l = 0; l < out.values.size(); ++l)
        for (std::size_t i = 0; i < out.values[l].size(); ++i)
            out.values[l][i] += b.values[l][i];
    return out;
}

inline LayeredModel sub(const LayeredModel& a, const LayeredModel& b) {
    check_schema(a, b, "sub");
    LayeredModel out = a;
    for (std::size_t l = 0; l < out.values.size(); ++l)
        for (std::size_t i = 0; i < out.values[l].size(); ++i)
            out.values[l][i] -= b.values[l][i];
    return out;
}

inline LayeredModel scale(const LayeredModel& a, double c) {
    LayeredModel out = a;
    for (auto& v : out.values)
        for (double& x : v) x *= c;
    return out;
}

// In-place axpy: dst += c * src.  The aggregation hot path.
inline void add_scaled(LayeredModel& dst, const LayeredModel& src, double c) {
    check_schema(dst, src, "add_scaled");
    for (std::size_t l = 0; l < dst.values.size(); ++l)
        for (std::size_t i = 0; i < dst.values[l].size(); ++i)
            dst.values[l][i] += c * src.values[l][i];
}

}  // namespace fedsim
