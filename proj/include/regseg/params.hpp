#pragma once

// Named-parameter registry shared by the networks, the optimizer, and the
// checkpoint container. Registration order is the canonical serialization
// order, so construction must be deterministic.

#include <map>

#include "regseg/autodiff.hpp"

namespace regseg {

struct ParamStore {
    std::vector<std::pair<std::string, Var>> items;
    std::map<std::string, std::size_t> index;

    Var add(const std::string& name, Tensor init) {
        require(!index.count(name), "ParamStore: duplicate parameter \"" + name + "\"");
        Var v = leaf(std::move(init), true);
        index[name] = items.size();
        items.emplace_back(name, v);
        return v;
    }

    const Var& get(const std::string& name) const {
        auto it = index.find(name);
        require(it != index.end(), "ParamStore: unknown parameter \"" + name + "\"");
        return items[it->second].second;
    }

    bool has(const std::string& name) const { return index.count(name) != 0; }

    std::vector<Var> vars() const {
        std::vector<Var> out;
        out.reserve(items.size());
        for (const auto& [name, v] : items) out.push_back(v);
        return out;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& [name, v] : items) n += v->val.numel();
        return n;
    }
};

// Gaussian init with the given std; all network tensors go through here so
// the draw order (and hence the model) is fixed by construction order.
inline Tensor gaussian_init(Rng& rng, std::vector<std::int64_t> shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = rng.normal(0.0, stddev);
    return t;
}

}  // namespace regseg
