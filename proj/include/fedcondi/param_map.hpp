#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedcondi/tensor.hpp"

namespace fedcondi {

// Named trainable parameters with matching gradient accumulators.
// Iteration order is lexicographic by name (std::map), which fixes the
// serialization layout and the aggregation order.
class ParamMap {
public:
    struct Entry {
        Tensor value;
        Tensor grad;  // same shape, zero-initialized
    };

    void add(const std::string& name, Tensor value) {
        Tensor g = Tensor::zeros(value.shape());
        entries_[name] = Entry{std::move(value), std::move(g)};
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor& value(const std::string& name) { return entry(name).value; }
    const Tensor& value(const std::string& name) const { return entry(name).value; }
    Tensor& grad(const std::string& name) { return entry(name).grad; }
    const Tensor& grad(const std::string& name) const { return entry(name).grad; }

    Entry& entry(const std::string& name);
    const Entry& entry(const std::string& name) const;

    std::size_t size() const { return entries_.size(); }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grads();

    // True when every value tensor holds only finite numbers.
    bool values_finite() const;

    // True when both maps hold the same names with the same shapes.
    bool same_schema(const ParamMap& other) const;

    std::int64_t total_parameters() const;

    // Flat binary format: magic "FCND", version u32, then per entry
    // name length (u32), UTF-8 name, rank (u32), dims (u64 each),
    // little-endian f64 payload. Values only; gradients are transient.
    void save(const std::string& path) const;
    static ParamMap load(const std::string& path);

private:
    std::map<std::string, Entry> entries_;
};

}  // namespace fedcondi
