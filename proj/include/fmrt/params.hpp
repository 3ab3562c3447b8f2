#pragma once

// Named parameter registry shared by initialization, the optimizer, the
// weights file, and gradient checks.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fmrt/tensor.hpp"

namespace fmrt {

template <typename T>
class ParamStore {
public:
    // Registers a trainable tensor under a unique name.
    TensorT<T> add(std::string name, Shape shape, std::vector<T> data = {}) {
        for (const auto& [n, t] : items_)
            if (n == name) throw InputError("duplicate parameter name: " + name);
        auto t = TensorT<T>::from_data(std::move(shape), std::move(data), true);
        items_.emplace_back(std::move(name), t);
        return t;
    }

    const std::vector<std::pair<std::string, TensorT<T>>>& items() const { return items_; }
    std::vector<std::pair<std::string, TensorT<T>>>& items() { return items_; }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

    TensorT<T>* find(const std::string& name) {
        for (auto& [n, t] : items_)
            if (n == name) return &t;
        return nullptr;
    }

private:
    std::vector<std::pair<std::string, TensorT<T>>> items_;
};

// Uniform(-bound, bound) fill, bound = sqrt(3 / fan_in) unless overridden.
template <typename T>
std::vector<T> uniform_init(std::mt19937& rng, std::size_t count, double fan_in,
                            double gain = 1.0) {
    const double bound = gain * std::sqrt(3.0 / std::max(fan_in, 1.0));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> out(count);
    for (auto& v : out) v = static_cast<T>(dist(rng));
    return out;
}

}  // namespace fmrt
