#pragma once

// Central finite-difference verification of reverse-mode gradients. The
// fragment under test is rebuilt from the current parameter data on every
// call, so perturbing a parameter element and re-evaluating gives the
// directional derivative. Intended to run on the double instantiation.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fmrt/tensor.hpp"

namespace fmrt {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool deterministic = true;
    double tol = 0.0;

    bool pass() const { return deterministic && max_rel_err <= tol; }
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, TensorT<T>>>;

template <typename T>
GradCheckReport check_gradients(const std::function<TensorT<T>()>& fragment,
                                const NamedTensors<T>& params, T step, double tol) {
    GradCheckReport report;
    report.tol = tol;

    const T base0 = fragment().value();
    const T base1 = fragment().value();
    if (std::memcmp(&base0, &base1, sizeof(T)) != 0) {
        report.deterministic = false;
        report.max_rel_err = std::abs(double(base0) - double(base1));
        return report;
    }

    for (auto& [name, t] : params) t.zero_grad();
    {
        auto loss = fragment();
        backward(loss);
    }
    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, t] : params) {
        analytic.push_back(t.grad().empty() ? std::vector<T>(t.size(), T(0)) : t.grad());
    }

    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& t = const_cast<TensorT<T>&>(params[p].second);
        GradCheckEntry entry;
        entry.name = params[p].first;
        auto& data = t.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const T saved = data[i];
            data[i] = saved + step;
            const double fplus = double(fragment().value());
            data[i] = saved - step;
            const double fminus = double(fragment().value());
            data[i] = saved;
            const double fd = (fplus - fminus) / (2.0 * double(step));
            const double an = double(analytic[p][i]);
            const double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
            entry.max_rel_err = std::max(entry.max_rel_err, std::abs(an - fd) / denom);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace fmrt
