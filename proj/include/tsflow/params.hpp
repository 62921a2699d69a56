#pragma once

#include <map>
#include <string>
#include <vector>

#include "tsflow/autograd.hpp"

namespace tsflow {

/// Named learnable tensors in registration order.
template <typename Real>
class ParamStore {
public:
    Var<Real> add(const std::string& name, Tensor<Real> init) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
        index_[name] = vars_.size();
        names_.push_back(name);
        vars_.emplace_back(std::move(init), true);
        return vars_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const Var<Real>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
        return vars_[it->second];
    }
    Var<Real>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
        return vars_[it->second];
    }

    const std::vector<std::string>& names() const { return names_; }
    std::vector<Var<Real>>& vars() { return vars_; }
    const std::vector<Var<Real>>& vars() const { return vars_; }
    std::size_t size() const { return vars_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& v : vars_) n += v.numel();
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<Var<Real>> vars_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace tsflow
