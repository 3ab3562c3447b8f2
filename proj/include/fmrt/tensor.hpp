#pragma once

// Dense row-major tensors with reverse-mode differentiation over exactly the
// operation set the matching pipeline needs. The element type is a template
// parameter: the pipeline runs on float, the gradient-check reference path
// instantiates the same code in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "fmrt/errors.hpp"

namespace fmrt {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int e : s) n *= static_cast<std::size_t>(e);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

}  // namespace detail

template <typename T>
class TensorT {
public:
    using Scalar = T;

    TensorT() = default;

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return from_data(std::move(shape), {}, requires_grad, T(0));
    }
    static TensorT full(Shape shape, T v, bool requires_grad = false) {
        return from_data(std::move(shape), {}, requires_grad, v);
    }
    static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false,
                             T fill = T(0)) {
        auto n = std::make_shared<detail::Node<T>>();
        const std::size_t count = shape_numel(shape);
        n->shape = std::move(shape);
        if (data.empty()) {
            n->data.assign(count, fill);
        } else {
            if (data.size() != count)
                throw InputError("tensor data size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(n->shape));
            n->data = std::move(data);
        }
        n->requires_grad = requires_grad;
        TensorT t;
        t.n_ = std::move(n);
        return t;
    }
    static TensorT scalar(T v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return n_->data.size(); }
    bool requires_grad() const { return n_->requires_grad; }

    const std::vector<T>& data() const { return n_->data; }
    // Direct mutation is reserved for leaves (parameters, inputs).
    std::vector<T>& mutable_data() { return n_->data; }
    const std::vector<T>& grad() const { return n_->grad; }

    T value() const {
        if (size() != 1) throw InputError("value() requires a one-element tensor");
        return n_->data[0];
    }
    T at(std::initializer_list<int> idx) const { return n_->data[flat_index(idx)]; }
    void set(std::initializer_list<int> idx, T v) { n_->data[flat_index(idx)] = v; }

    void set_requires_grad(bool rg) { n_->requires_grad = rg; }
    void zero_grad() { n_->grad.assign(n_->data.size(), T(0)); }

    std::shared_ptr<detail::Node<T>> node() const { return n_; }

private:
    std::size_t flat_index(std::initializer_list<int> idx) const {
        if (idx.size() != n_->shape.size())
            throw InputError("index rank mismatch for shape " + shape_str(n_->shape));
        std::size_t flat = 0;
        std::size_t k = 0;
        for (int i : idx) {
            const int extent = n_->shape[k];
            if (i < 0 || i >= extent) throw InputError("index out of bounds");
            flat = flat * static_cast<std::size_t>(extent) + static_cast<std::size_t>(i);
            ++k;
        }
        return flat;
    }

    std::shared_ptr<detail::Node<T>> n_;
};

using Tensor = TensorT<float>;

namespace detail {

template <typename T>
TensorT<T> make_result(Shape shape, std::vector<T> data,
                       std::vector<TensorT<T>> parents,
                       std::function<void(Node<T>&)> backprop) {
    auto out = TensorT<T>::from_data(std::move(shape), std::move(data));
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    if (rg) {
        auto n = out.node();
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return out;
}

template <typename T>
void accumulate(Node<T>& dst, const std::vector<T>& g) {
    dst.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw InputError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<T> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] + b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(d), {a, b}, [an, bn](detail::Node<T>& out) {
        if (an->requires_grad) detail::accumulate(*an, out.grad);
        if (bn->requires_grad) detail::accumulate(*bn, out.grad);
    });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw InputError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<T> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] - b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(d), {a, b}, [an, bn](detail::Node<T>& out) {
        if (an->requires_grad) detail::accumulate(*an, out.grad);
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) bn->grad[i] -= out.grad[i];
        }
    });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw InputError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<T> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] * b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(d), {a, b}, [an, bn](detail::Node<T>& out) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                an->grad[i] += out.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                bn->grad[i] += out.grad[i] * an->data[i];
        }
    });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
    std::vector<T> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] + c;
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(d), {a}, [an](detail::Node<T>& out) {
        if (an->requires_grad) detail::accumulate(*an, out.grad);
    });
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T c) {
    std::vector<T> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] * c;
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(d), {a}, [an, c](detail::Node<T>& out) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i] * c;
        }
    });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    std::vector<T> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(d), {a}, [an](detail::Node<T>& out) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i)
            if (an->data[i] > T(0)) an->grad[i] += out.grad[i];
    });
}

// phi(x) = elu(x) + 1: x + 1 for x >= 0, exp(x) for x < 0. Strictly positive.
template <typename T>
TensorT<T> phi(const TensorT<T>& a) {
    std::vector<T> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const T x = a.data()[i];
        d[i] = x >= T(0) ? x + T(1) : std::exp(x);
    }
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(d), {a}, [an](detail::Node<T>& out) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            const T x = an->data[i];
            const T dx = x >= T(0) ? T(1) : out.data[i];  // exp(x) was stored
            an->grad[i] += out.grad[i] * dx;
        }
    });
}

template <typename T>
TensorT<T> log_elem(const TensorT<T>& a) {
    std::vector<T> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::log(a.data()[i]);
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(d), {a}, [an](detail::Node<T>& out) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i)
            an->grad[i] += out.grad[i] / an->data[i];
    });
}

template <typename T>
TensorT<T> sqrt_elem(const TensorT<T>& a) {
    std::vector<T> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::sqrt(a.data()[i]);
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(d), {a}, [an](detail::Node<T>& out) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            const T den = std::max(T(2) * out.data[i], T(1e-12));
            an->grad[i] += out.grad[i] / den;
        }
    });
}

template <typename T>
TensorT<T> clamp(const TensorT<T>& a, T lo, T hi) {
    std::vector<T> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::min(std::max(a.data()[i], lo), hi);
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(d), {a}, [an, lo, hi](detail::Node<T>& out) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            const T x = an->data[i];
            if (x > lo && x < hi) an->grad[i] += out.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw InputError("matmul: expects rank-2 tensors");
    const int n = a.dim(0), k = a.dim(1), k2 = b.dim(0), m = b.dim(1);
    if (k != k2)
        throw InputError("matmul: inner dimensions " + std::to_string(k) + " vs " +
                         std::to_string(k2));
    std::vector<T> d(static_cast<std::size_t>(n) * m, T(0));
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < k; ++p) {
            const T av = a.data()[static_cast<std::size_t>(i) * k + p];
            const T* brow = b.data().data() + static_cast<std::size_t>(p) * m;
            T* orow = d.data() + static_cast<std::size_t>(i) * m;
            for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>({n, m}, std::move(d), {a, b},
                                  [an, bn, n, k, m](detail::Node<T>& out) {
        if (an->requires_grad) {  // dA = G * B^T
            an->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int p = 0; p < k; ++p) {
                    T s = 0;
                    const T* grow = out.grad.data() + static_cast<std::size_t>(i) * m;
                    const T* brow = bn->data.data() + static_cast<std::size_t>(p) * m;
                    for (int j = 0; j < m; ++j) s += grow[j] * brow[j];
                    an->grad[static_cast<std::size_t>(i) * k + p] += s;
                }
        }
        if (bn->requires_grad) {  // dB = A^T * G
            bn->ensure_grad();
            for (int i = 0; i < n; ++i) {
                const T* arow = an->data.data() + static_cast<std::size_t>(i) * k;
                const T* grow = out.grad.data() + static_cast<std::size_t>(i) * m;
                for (int p = 0; p < k; ++p) {
                    const T av = arow[p];
                    T* brow = bn->grad.data() + static_cast<std::size_t>(p) * m;
                    for (int j = 0; j < m; ++j) brow[j] += av * grow[j];
                }
            }
        }
    });
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    if (a.rank() != 2) throw InputError("transpose: expects rank-2 tensor");
    const int n = a.dim(0), m = a.dim(1);
    std::vector<T> d(a.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            d[static_cast<std::size_t>(j) * n + i] = a.data()[static_cast<std::size_t>(i) * m + j];
    auto an = a.node();
    return detail::make_result<T>({m, n}, std::move(d), {a}, [an, n, m](detail::Node<T>& out) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                an->grad[static_cast<std::size_t>(i) * m + j] +=
                    out.grad[static_cast<std::size_t>(j) * n + i];
    });
}

// out[n, o] = sum_i x[n, i] * w[o, i] + b[o]
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
        throw InputError("linear: expects x[N,Din], w[Dout,Din], b[Dout]");
    const int n = x.dim(0), din = x.dim(1), dout = w.dim(0);
    if (w.dim(1) != din || b.dim(0) != dout)
        throw InputError("linear: shape mismatch x" + shape_str(x.shape()) + " w" +
                         shape_str(w.shape()) + " b" + shape_str(b.shape()));
    std::vector<T> d(static_cast<std::size_t>(n) * dout);
    for (int r = 0; r < n; ++r) {
        const T* xrow = x.data().data() + static_cast<std::size_t>(r) * din;
        for (int o = 0; o < dout; ++o) {
            const T* wrow = w.data().data() + static_cast<std::size_t>(o) * din;
            T s = b.data()[static_cast<std::size_t>(o)];
            for (int i = 0; i < din; ++i) s += xrow[i] * wrow[i];
            d[static_cast<std::size_t>(r) * dout + o] = s;
        }
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return detail::make_result<T>({n, dout}, std::move(d), {x, w, b},
                                  [xn, wn, bn, n, din, dout](detail::Node<T>& out) {
        if (xn->requires_grad) {  // dx = G * W
            xn->ensure_grad();
            for (int r = 0; r < n; ++r) {
                const T* grow = out.grad.data() + static_cast<std::size_t>(r) * dout;
                T* xrow = xn->grad.data() + static_cast<std::size_t>(r) * din;
                for (int o = 0; o < dout; ++o) {
                    const T g = grow[o];
                    const T* wrow = wn->data.data() + static_cast<std::size_t>(o) * din;
                    for (int i = 0; i < din; ++i) xrow[i] += g * wrow[i];
                }
            }
        }
        if (wn->requires_grad) {  // dw = G^T * X
            wn->ensure_grad();
            for (int r = 0; r < n; ++r) {
                const T* grow = out.grad.data() + static_cast<std::size_t>(r) * dout;
                const T* xrow = xn->data.data() + static_cast<std::size_t>(r) * din;
                for (int o = 0; o < dout; ++o) {
                    const T g = grow[o];
                    T* wrow = wn->grad.data() + static_cast<std::size_t>(o) * din;
                    for (int i = 0; i < din; ++i) wrow[i] += g * xrow[i];
                }
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int o = 0; o < dout; ++o)
                    bn->grad[static_cast<std::size_t>(o)] +=
                        out.grad[static_cast<std::size_t>(r) * dout + o];
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization / softmax

// Row-wise layer normalization with biased variance, then scale/shift.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-5)) {
    if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1)
        throw InputError("layer_norm: expects x[N,D], gamma[D], beta[D]");
    const int n = x.dim(0), dd = x.dim(1);
    if (gamma.dim(0) != dd || beta.dim(0) != dd)
        throw InputError("layer_norm: gamma/beta size mismatch");
    std::vector<T> out(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_sigma(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) {
        const T* row = x.data().data() + static_cast<std::size_t>(r) * dd;
        T mean = 0;
        for (int j = 0; j < dd; ++j) mean += row[j];
        mean /= T(dd);
        T var = 0;
        for (int j = 0; j < dd; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= T(dd);
        const T is = T(1) / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(r)] = is;
        for (int j = 0; j < dd; ++j) {
            const std::size_t idx = static_cast<std::size_t>(r) * dd + j;
            const T xh = (row[j] - mean) * is;
            xhat[idx] = xh;
            out[idx] = xh * gamma.data()[static_cast<std::size_t>(j)] +
                       beta.data()[static_cast<std::size_t>(j)];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, n, dd, xhat = std::move(xhat),
         inv_sigma = std::move(inv_sigma)](detail::Node<T>& o) {
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int r = 0; r < n; ++r)
                    for (int j = 0; j < dd; ++j)
                        bn->grad[static_cast<std::size_t>(j)] +=
                            o.grad[static_cast<std::size_t>(r) * dd + j];
            }
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int r = 0; r < n; ++r)
                    for (int j = 0; j < dd; ++j) {
                        const std::size_t idx = static_cast<std::size_t>(r) * dd + j;
                        gn->grad[static_cast<std::size_t>(j)] += o.grad[idx] * xhat[idx];
                    }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int r = 0; r < n; ++r) {
                    // gy = upstream grad through the scale; two row reductions.
                    T mean_gy = 0, mean_gy_xhat = 0;
                    for (int j = 0; j < dd; ++j) {
                        const std::size_t idx = static_cast<std::size_t>(r) * dd + j;
                        const T gy = o.grad[idx] * gn->data[static_cast<std::size_t>(j)];
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat[idx];
                    }
                    mean_gy /= T(dd);
                    mean_gy_xhat /= T(dd);
                    const T is = inv_sigma[static_cast<std::size_t>(r)];
                    for (int j = 0; j < dd; ++j) {
                        const std::size_t idx = static_cast<std::size_t>(r) * dd + j;
                        const T gy = o.grad[idx] * gn->data[static_cast<std::size_t>(j)];
                        xn->grad[idx] += is * (gy - mean_gy - xhat[idx] * mean_gy_xhat);
                    }
                }
            }
        });
}

// Softmax over the last dimension with max subtraction. Works on any rank;
// leading dimensions are treated as independent rows.
template <typename T>
TensorT<T> row_softmax(const TensorT<T>& x) {
    if (x.rank() < 1) throw InputError("row_softmax: expects rank >= 1");
    const int dd = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / static_cast<std::size_t>(dd);
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = x.data().data() + r * dd;
        T* orow = out.data() + r * dd;
        T mx = row[0];
        for (int j = 1; j < dd; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (int j = 0; j < dd; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < dd; ++j) orow[j] *= inv;
    }
    auto xn = x.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x},
                                  [xn, rows, dd](detail::Node<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* s = o.data.data() + r * dd;
            const T* g = o.grad.data() + r * dd;
            T dot = 0;
            for (int j = 0; j < dd; ++j) dot += g[j] * s[j];
            T* gx = xn->grad.data() + r * dd;
            for (int j = 0; j < dd; ++j) gx[j] += s[j] * (g[j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions (single image, CHW layout)

// Per-channel 2-D cross-correlation with zero padding; output extent equals
// input extent. Kernel extent must be odd.
template <typename T>
TensorT<T> dw_conv2d(const TensorT<T>& x, const TensorT<T>& k) {
    if (x.rank() != 3 || k.rank() != 3)
        throw InputError("dw_conv2d: expects x[C,H,W], kernels[C,k,k]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (k.dim(0) != c)
        throw InputError("dw_conv2d: kernel channels " + std::to_string(k.dim(0)) +
                         " != input channels " + std::to_string(c));
    const int kh = k.dim(1), kw = k.dim(2);
    if (kh != kw || kh % 2 == 0) throw InputError("dw_conv2d: kernel must be square and odd");
    const int pad = (kh - 1) / 2;
    std::vector<T> out(x.size(), T(0));
    for (int ch = 0; ch < c; ++ch) {
        const T* xp = x.data().data() + static_cast<std::size_t>(ch) * h * w;
        const T* kp = k.data().data() + static_cast<std::size_t>(ch) * kh * kw;
        T* op = out.data() + static_cast<std::size_t>(ch) * h * w;
        for (int y = 0; y < h; ++y)
            for (int xcol = 0; xcol < w; ++xcol) {
                T acc = 0;
                for (int dy = 0; dy < kh; ++dy) {
                    const int sy = y + dy - pad;
                    if (sy < 0 || sy >= h) continue;
                    for (int dx = 0; dx < kw; ++dx) {
                        const int sx = xcol + dx - pad;
                        if (sx < 0 || sx >= w) continue;
                        acc += xp[static_cast<std::size_t>(sy) * w + sx] *
                               kp[static_cast<std::size_t>(dy) * kw + dx];
                    }
                }
                op[static_cast<std::size_t>(y) * w + xcol] = acc;
            }
    }
    auto xn = x.node();
    auto kn = k.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x, k},
                                  [xn, kn, c, h, w, kh, kw, pad](detail::Node<T>& o) {
        for (int ch = 0; ch < c; ++ch) {
            const T* gp = o.grad.data() + static_cast<std::size_t>(ch) * h * w;
            const T* xp = xn->data.data() + static_cast<std::size_t>(ch) * h * w;
            const T* kp = kn->data.data() + static_cast<std::size_t>(ch) * kh * kw;
            if (xn->requires_grad) {
                xn->ensure_grad();
                T* gx = xn->grad.data() + static_cast<std::size_t>(ch) * h * w;
                for (int y = 0; y < h; ++y)
                    for (int xcol = 0; xcol < w; ++xcol) {
                        const T g = gp[static_cast<std::size_t>(y) * w + xcol];
                        if (g == T(0)) continue;
                        for (int dy = 0; dy < kh; ++dy) {
                            const int sy = y + dy - pad;
                            if (sy < 0 || sy >= h) continue;
                            for (int dx = 0; dx < kw; ++dx) {
                                const int sx = xcol + dx - pad;
                                if (sx < 0 || sx >= w) continue;
                                gx[static_cast<std::size_t>(sy) * w + sx] +=
                                    g * kp[static_cast<std::size_t>(dy) * kw + dx];
                            }
                        }
                    }
            }
            if (kn->requires_grad) {
                kn->ensure_grad();
                T* gk = kn->grad.data() + static_cast<std::size_t>(ch) * kh * kw;
                for (int dy = 0; dy < kh; ++dy)
                    for (int dx = 0; dx < kw; ++dx) {
                        T acc = 0;
                        for (int y = 0; y < h; ++y) {
                            const int sy = y + dy - pad;
                            if (sy < 0 || sy >= h) continue;
                            for (int xcol = 0; xcol < w; ++xcol) {
                                const int sx = xcol + dx - pad;
                                if (sx < 0 || sx >= w) continue;
                                acc += gp[static_cast<std::size_t>(y) * w + xcol] *
                                       xp[static_cast<std::size_t>(sy) * w + sx];
                            }
                        }
                        gk[static_cast<std::size_t>(dy) * kw + dx] += acc;
                    }
            }
        }
    });
}

// 1x1 point-wise convolution: out[o,y,x] = sum_i w[o,i] * x[i,y,x] + b[o]
template <typename T>
TensorT<T> pw_conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    if (x.rank() != 3 || w.rank() != 2 || b.rank() != 1)
        throw InputError("pw_conv2d: expects x[Cin,H,W], w[Cout,Cin], b[Cout]");
    const int cin = x.dim(0), h = x.dim(1), ww = x.dim(2);
    const int cout = w.dim(0);
    if (w.dim(1) != cin || b.dim(0) != cout)
        throw InputError("pw_conv2d: shape mismatch x" + shape_str(x.shape()) + " w" +
                         shape_str(w.shape()));
    const std::size_t hw = static_cast<std::size_t>(h) * ww;
    std::vector<T> out(static_cast<std::size_t>(cout) * hw);
    for (int o = 0; o < cout; ++o) {
        T* op = out.data() + static_cast<std::size_t>(o) * hw;
        const T bias = b.data()[static_cast<std::size_t>(o)];
        for (std::size_t p = 0; p < hw; ++p) op[p] = bias;
        for (int i = 0; i < cin; ++i) {
            const T wv = w.data()[static_cast<std::size_t>(o) * cin + i];
            const T* xp = x.data().data() + static_cast<std::size_t>(i) * hw;
            for (std::size_t p = 0; p < hw; ++p) op[p] += wv * xp[p];
        }
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return detail::make_result<T>({cout, h, ww}, std::move(out), {x, w, b},
                                  [xn, wn, bn, cin, cout, hw](detail::Node<T>& o) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int i = 0; i < cin; ++i) {
                T* gx = xn->grad.data() + static_cast<std::size_t>(i) * hw;
                for (int oc = 0; oc < cout; ++oc) {
                    const T wv = wn->data[static_cast<std::size_t>(oc) * cin + i];
                    const T* gp = o.grad.data() + static_cast<std::size_t>(oc) * hw;
                    for (std::size_t p = 0; p < hw; ++p) gx[p] += wv * gp[p];
                }
            }
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            for (int oc = 0; oc < cout; ++oc) {
                const T* gp = o.grad.data() + static_cast<std::size_t>(oc) * hw;
                for (int i = 0; i < cin; ++i) {
                    const T* xp = xn->data.data() + static_cast<std::size_t>(i) * hw;
                    T acc = 0;
                    for (std::size_t p = 0; p < hw; ++p) acc += gp[p] * xp[p];
                    wn->grad[static_cast<std::size_t>(oc) * cin + i] += acc;
                }
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int oc = 0; oc < cout; ++oc) {
                const T* gp = o.grad.data() + static_cast<std::size_t>(oc) * hw;
                T acc = 0;
                for (std::size_t p = 0; p < hw; ++p) acc += gp[p];
                bn->grad[static_cast<std::size_t>(oc)] += acc;
            }
        }
    });
}

// General convolution for the backbone: x[Cin,H,W], w[Cout,Cin,k,k], stride, zero pad.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                  int pad) {
    if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
        throw InputError("conv2d: expects x[Cin,H,W], w[Cout,Cin,kh,kw], b[Cout]");
    const int cin = x.dim(0), h = x.dim(1), ww = x.dim(2);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin || b.dim(0) != cout)
        throw InputError("conv2d: shape mismatch");
    if (stride < 1 || pad < 0) throw InputError("conv2d: bad stride/pad");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (ww + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw InputError("conv2d: empty output");
    std::vector<T> out(static_cast<std::size_t>(cout) * ho * wo);
    for (int oc = 0; oc < cout; ++oc) {
        T* op = out.data() + static_cast<std::size_t>(oc) * ho * wo;
        const T bias = b.data()[static_cast<std::size_t>(oc)];
        for (int y = 0; y < ho; ++y)
            for (int xcol = 0; xcol < wo; ++xcol) {
                T acc = bias;
                for (int ic = 0; ic < cin; ++ic) {
                    const T* xp = x.data().data() + static_cast<std::size_t>(ic) * h * ww;
                    const T* kp = w.data().data() +
                                  (static_cast<std::size_t>(oc) * cin + ic) * kh * kw;
                    for (int dy = 0; dy < kh; ++dy) {
                        const int sy = y * stride + dy - pad;
                        if (sy < 0 || sy >= h) continue;
                        for (int dx = 0; dx < kw; ++dx) {
                            const int sx = xcol * stride + dx - pad;
                            if (sx < 0 || sx >= ww) continue;
                            acc += xp[static_cast<std::size_t>(sy) * ww + sx] *
                                   kp[static_cast<std::size_t>(dy) * kw + dx];
                        }
                    }
                }
                op[static_cast<std::size_t>(y) * wo + xcol] = acc;
            }
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return detail::make_result<T>(
        {cout, ho, wo}, std::move(out), {x, w, b},
        [xn, wn, bn, cin, h, ww, cout, kh, kw, stride, pad, ho, wo](detail::Node<T>& o) {
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int oc = 0; oc < cout; ++oc) {
                const T* gp = o.grad.data() + static_cast<std::size_t>(oc) * ho * wo;
                if (bn->requires_grad) {
                    T acc = 0;
                    for (std::size_t p = 0; p < static_cast<std::size_t>(ho) * wo; ++p)
                        acc += gp[p];
                    bn->grad[static_cast<std::size_t>(oc)] += acc;
                }
                for (int y = 0; y < ho; ++y)
                    for (int xcol = 0; xcol < wo; ++xcol) {
                        const T g = gp[static_cast<std::size_t>(y) * wo + xcol];
                        if (g == T(0)) continue;
                        for (int ic = 0; ic < cin; ++ic) {
                            const std::size_t xoff = static_cast<std::size_t>(ic) * h * ww;
                            const std::size_t koff =
                                (static_cast<std::size_t>(oc) * cin + ic) * kh * kw;
                            for (int dy = 0; dy < kh; ++dy) {
                                const int sy = y * stride + dy - pad;
                                if (sy < 0 || sy >= h) continue;
                                for (int dx = 0; dx < kw; ++dx) {
                                    const int sx = xcol * stride + dx - pad;
                                    if (sx < 0 || sx >= ww) continue;
                                    const std::size_t xi =
                                        xoff + static_cast<std::size_t>(sy) * ww + sx;
                                    const std::size_t ki =
                                        koff + static_cast<std::size_t>(dy) * kw + dx;
                                    if (xn->requires_grad) xn->grad[xi] += g * wn->data[ki];
                                    if (wn->requires_grad) wn->grad[ki] += g * xn->data[xi];
                                }
                            }
                        }
                    }
            }
        });
}

// Nearest-neighbor 2x upsampling.
template <typename T>
TensorT<T> upsample2x(const TensorT<T>& x) {
    if (x.rank() != 3) throw InputError("upsample2x: expects x[C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<T> out(static_cast<std::size_t>(c) * 4 * h * w);
    for (int ch = 0; ch < c; ++ch) {
        const T* xp = x.data().data() + static_cast<std::size_t>(ch) * h * w;
        T* op = out.data() + static_cast<std::size_t>(ch) * 4 * h * w;
        for (int y = 0; y < 2 * h; ++y)
            for (int xc = 0; xc < 2 * w; ++xc)
                op[static_cast<std::size_t>(y) * 2 * w + xc] =
                    xp[static_cast<std::size_t>(y / 2) * w + xc / 2];
    }
    auto xn = x.node();
    return detail::make_result<T>({c, 2 * h, 2 * w}, std::move(out), {x},
                                  [xn, c, h, w](detail::Node<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int ch = 0; ch < c; ++ch) {
            T* gx = xn->grad.data() + static_cast<std::size_t>(ch) * h * w;
            const T* gp = o.grad.data() + static_cast<std::size_t>(ch) * 4 * h * w;
            for (int y = 0; y < 2 * h; ++y)
                for (int xc = 0; xc < 2 * w; ++xc)
                    gx[static_cast<std::size_t>(y / 2) * w + xc / 2] +=
                        gp[static_cast<std::size_t>(y) * 2 * w + xc];
        }
    });
}

// ---------------------------------------------------------------------------
// Layout conversions and slicing

// seq row n maps to image location (y, x) = (n div W, n mod W).
template <typename T>
TensorT<T> seq_to_image(const TensorT<T>& x, int h, int w) {
    if (x.rank() != 2) throw InputError("seq_to_image: expects x[N,C]");
    const int n = x.dim(0), c = x.dim(1);
    if (n != h * w)
        throw InputError("seq_to_image: N=" + std::to_string(n) + " != " + std::to_string(h) +
                         "*" + std::to_string(w));
    std::vector<T> out(x.size());
    for (int ch = 0; ch < c; ++ch)
        for (int r = 0; r < n; ++r)
            out[static_cast<std::size_t>(ch) * n + r] = x.data()[static_cast<std::size_t>(r) * c + ch];
    auto xn = x.node();
    return detail::make_result<T>({c, h, w}, std::move(out), {x}, [xn, n, c](detail::Node<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int r = 0; r < n; ++r)
                xn->grad[static_cast<std::size_t>(r) * c + ch] +=
                    o.grad[static_cast<std::size_t>(ch) * n + r];
    });
}

template <typename T>
TensorT<T> image_to_seq(const TensorT<T>& x) {
    if (x.rank() != 3) throw InputError("image_to_seq: expects x[C,H,W]");
    const int c = x.dim(0), n = x.dim(1) * x.dim(2);
    std::vector<T> out(x.size());
    for (int r = 0; r < n; ++r)
        for (int ch = 0; ch < c; ++ch)
            out[static_cast<std::size_t>(r) * c + ch] = x.data()[static_cast<std::size_t>(ch) * n + r];
    auto xn = x.node();
    return detail::make_result<T>({n, c}, std::move(out), {x}, [xn, n, c](detail::Node<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int ch = 0; ch < c; ++ch)
                xn->grad[static_cast<std::size_t>(ch) * n + r] +=
                    o.grad[static_cast<std::size_t>(r) * c + ch];
    });
}

template <typename T>
TensorT<T> concat_cols(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw InputError("concat_cols: expects [N,C1] and [N,C2]");
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    std::vector<T> out(static_cast<std::size_t>(n) * (ca + cb));
    for (int r = 0; r < n; ++r) {
        std::copy_n(a.data().data() + static_cast<std::size_t>(r) * ca, ca,
                    out.data() + static_cast<std::size_t>(r) * (ca + cb));
        std::copy_n(b.data().data() + static_cast<std::size_t>(r) * cb, cb,
                    out.data() + static_cast<std::size_t>(r) * (ca + cb) + ca);
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>({n, ca + cb}, std::move(out), {a, b},
                                  [an, bn, n, ca, cb](detail::Node<T>& o) {
        for (int r = 0; r < n; ++r) {
            const T* g = o.grad.data() + static_cast<std::size_t>(r) * (ca + cb);
            if (an->requires_grad) {
                an->ensure_grad();
                for (int j = 0; j < ca; ++j)
                    an->grad[static_cast<std::size_t>(r) * ca + j] += g[j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int j = 0; j < cb; ++j)
                    bn->grad[static_cast<std::size_t>(r) * cb + j] += g[ca + j];
            }
        }
    });
}

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw InputError("concat_channels: expects [C1,H,W] and [C2,H,W]");
    const int ca = a.dim(0), cb = b.dim(0);
    std::vector<T> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    auto an = a.node();
    auto bn = b.node();
    const std::size_t na = a.size();
    return detail::make_result<T>({ca + cb, a.dim(1), a.dim(2)}, std::move(out), {a, b},
                                  [an, bn, na](detail::Node<T>& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < na; ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size() - na; ++i) bn->grad[i] += o.grad[na + i];
        }
    });
}

template <typename T>
TensorT<T> slice_rows(const TensorT<T>& x, int start, int len) {
    if (x.rank() != 2) throw InputError("slice_rows: expects x[N,C]");
    const int n = x.dim(0), c = x.dim(1);
    if (start < 0 || len < 1 || start + len > n) throw InputError("slice_rows: out of range");
    std::vector<T> out(static_cast<std::size_t>(len) * c);
    std::copy_n(x.data().data() + static_cast<std::size_t>(start) * c, out.size(), out.data());
    auto xn = x.node();
    return detail::make_result<T>({len, c}, std::move(out), {x},
                                  [xn, start, c](detail::Node<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            xn->grad[static_cast<std::size_t>(start) * c + i] += o.grad[i];
    });
}

template <typename T>
TensorT<T> slice_cols(const TensorT<T>& x, int start, int len) {
    if (x.rank() != 2) throw InputError("slice_cols: expects x[N,C]");
    const int n = x.dim(0), c = x.dim(1);
    if (start < 0 || len < 1 || start + len > c) throw InputError("slice_cols: out of range");
    std::vector<T> out(static_cast<std::size_t>(n) * len);
    for (int r = 0; r < n; ++r)
        std::copy_n(x.data().data() + static_cast<std::size_t>(r) * c + start, len,
                    out.data() + static_cast<std::size_t>(r) * len);
    auto xn = x.node();
    return detail::make_result<T>({n, len}, std::move(out), {x},
                                  [xn, n, c, start, len](detail::Node<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < len; ++j)
                xn->grad[static_cast<std::size_t>(r) * c + start + j] +=
                    o.grad[static_cast<std::size_t>(r) * len + j];
    });
}

// Crop a w-by-w window centered at (cy, cx); the window must lie inside.
template <typename T>
TensorT<T> crop2d(const TensorT<T>& x, int cy, int cx, int w) {
    if (x.rank() != 3) throw InputError("crop2d: expects x[C,H,W]");
    const int c = x.dim(0), h = x.dim(1), ww = x.dim(2);
    const int half = (w - 1) / 2;
    if (w % 2 == 0 || w < 1) throw InputError("crop2d: window must be odd");
    if (cy - half < 0 || cx - half < 0 || cy + half >= h || cx + half >= ww)
        throw InputError("crop2d: window out of bounds");
    std::vector<T> out(static_cast<std::size_t>(c) * w * w);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < w; ++y)
            std::copy_n(x.data().data() + (static_cast<std::size_t>(ch) * h + cy - half + y) * ww +
                            cx - half,
                        w, out.data() + (static_cast<std::size_t>(ch) * w + y) * w);
    auto xn = x.node();
    return detail::make_result<T>({c, w, w}, std::move(out), {x},
                                  [xn, c, h, ww, cy, cx, w, half](detail::Node<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < w; ++y)
                for (int xc = 0; xc < w; ++xc)
                    xn->grad[(static_cast<std::size_t>(ch) * h + cy - half + y) * ww + cx - half +
                             xc] += o.grad[(static_cast<std::size_t>(ch) * w + y) * w + xc];
    });
}

// out[c,y,x] = fy[c,y] + fx[c,x] — the additively separable positional map.
template <typename T>
TensorT<T> axis_outer_sum(const TensorT<T>& fy, const TensorT<T>& fx) {
    if (fy.rank() != 2 || fx.rank() != 2 || fy.dim(0) != fx.dim(0))
        throw InputError("axis_outer_sum: expects fy[C,H], fx[C,W]");
    const int c = fy.dim(0), h = fy.dim(1), w = fx.dim(1);
    std::vector<T> out(static_cast<std::size_t>(c) * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y) {
            const T fyv = fy.data()[static_cast<std::size_t>(ch) * h + y];
            const T* fxp = fx.data().data() + static_cast<std::size_t>(ch) * w;
            T* op = out.data() + (static_cast<std::size_t>(ch) * h + y) * w;
            for (int xc = 0; xc < w; ++xc) op[xc] = fyv + fxp[xc];
        }
    auto yn = fy.node();
    auto xn = fx.node();
    return detail::make_result<T>({c, h, w}, std::move(out), {fy, fx},
                                  [yn, xn, c, h, w](detail::Node<T>& o) {
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y) {
                const T* gp = o.grad.data() + (static_cast<std::size_t>(ch) * h + y) * w;
                if (yn->requires_grad) {
                    yn->ensure_grad();
                    T acc = 0;
                    for (int xc = 0; xc < w; ++xc) acc += gp[xc];
                    yn->grad[static_cast<std::size_t>(ch) * h + y] += acc;
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    for (int xc = 0; xc < w; ++xc)
                        xn->grad[static_cast<std::size_t>(ch) * w + xc] += gp[xc];
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Row-wise helpers and reductions

// Scale each row of x by s[n,0].
template <typename T>
TensorT<T> mul_rows(const TensorT<T>& x, const TensorT<T>& s) {
    if (x.rank() != 2 || s.rank() != 2 || s.dim(1) != 1 || s.dim(0) != x.dim(0))
        throw InputError("mul_rows: expects x[N,D], s[N,1]");
    const int n = x.dim(0), dd = x.dim(1);
    std::vector<T> out(x.size());
    for (int r = 0; r < n; ++r) {
        const T sv = s.data()[static_cast<std::size_t>(r)];
        for (int j = 0; j < dd; ++j)
            out[static_cast<std::size_t>(r) * dd + j] =
                x.data()[static_cast<std::size_t>(r) * dd + j] * sv;
    }
    auto xn = x.node();
    auto sn = s.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x, s},
                                  [xn, sn, n, dd](detail::Node<T>& o) {
        for (int r = 0; r < n; ++r) {
            const T sv = sn->data[static_cast<std::size_t>(r)];
            const T* g = o.grad.data() + static_cast<std::size_t>(r) * dd;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int j = 0; j < dd; ++j)
                    xn->grad[static_cast<std::size_t>(r) * dd + j] += g[j] * sv;
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                T acc = 0;
                for (int j = 0; j < dd; ++j)
                    acc += g[j] * xn->data[static_cast<std::size_t>(r) * dd + j];
                sn->grad[static_cast<std::size_t>(r)] += acc;
            }
        }
    });
}

// Divide each row of x by z[n,0].
template <typename T>
TensorT<T> div_rows(const TensorT<T>& x, const TensorT<T>& z) {
    if (x.rank() != 2 || z.rank() != 2 || z.dim(1) != 1 || z.dim(0) != x.dim(0))
        throw InputError("div_rows: expects x[N,D], z[N,1]");
    const int n = x.dim(0), dd = x.dim(1);
    std::vector<T> out(x.size());
    for (int r = 0; r < n; ++r) {
        const T inv = T(1) / z.data()[static_cast<std::size_t>(r)];
        for (int j = 0; j < dd; ++j)
            out[static_cast<std::size_t>(r) * dd + j] =
                x.data()[static_cast<std::size_t>(r) * dd + j] * inv;
    }
    auto xn = x.node();
    auto zn = z.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x, z},
                                  [xn, zn, n, dd](detail::Node<T>& o) {
        for (int r = 0; r < n; ++r) {
            const T zv = zn->data[static_cast<std::size_t>(r)];
            const T inv = T(1) / zv;
            const T* g = o.grad.data() + static_cast<std::size_t>(r) * dd;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int j = 0; j < dd; ++j)
                    xn->grad[static_cast<std::size_t>(r) * dd + j] += g[j] * inv;
            }
            if (zn->requires_grad) {
                zn->ensure_grad();
                T acc = 0;
                for (int j = 0; j < dd; ++j)
                    acc += g[j] * xn->data[static_cast<std::size_t>(r) * dd + j];
                zn->grad[static_cast<std::size_t>(r)] -= acc * inv * inv;
            }
        }
    });
}

template <typename T>
TensorT<T> row_sum(const TensorT<T>& x) {
    if (x.rank() != 2) throw InputError("row_sum: expects x[N,D]");
    const int n = x.dim(0), dd = x.dim(1);
    std::vector<T> out(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) {
        T acc = 0;
        for (int j = 0; j < dd; ++j) acc += x.data()[static_cast<std::size_t>(r) * dd + j];
        out[static_cast<std::size_t>(r)] = acc;
    }
    auto xn = x.node();
    return detail::make_result<T>({n, 1}, std::move(out), {x}, [xn, n, dd](detail::Node<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int r = 0; r < n; ++r) {
            const T g = o.grad[static_cast<std::size_t>(r)];
            for (int j = 0; j < dd; ++j) xn->grad[static_cast<std::size_t>(r) * dd + j] += g;
        }
    });
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
    T acc = 0;
    for (const T v : x.data()) acc += v;
    auto xn = x.node();
    return detail::make_result<T>({1}, {acc}, {x}, [xn](detail::Node<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T g = o.grad[0];
        for (auto& gv : xn->grad) gv += g;
    });
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw InputError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
    std::vector<T> d = x.data();
    auto xn = x.node();
    return detail::make_result<T>(std::move(shape), std::move(d), {x}, [xn](detail::Node<T>& o) {
        if (!xn->requires_grad) return;
        detail::accumulate(*xn, o.grad);
    });
}

// ---------------------------------------------------------------------------
// Reverse-mode differentiation

// Gradients of `loss` with respect to every reachable requires_grad tensor.
// Gradients accumulate additively; call zero_grad on leaves between passes.
template <typename T>
void backward(const TensorT<T>& loss) {
    if (loss.size() != 1)
        throw InputError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    using NodeT = detail::Node<T>;
    // Iterative post-order DFS; recursion would overflow on deep graphs.
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            NodeT* next = node->parents[child].get();
            ++child;
            if (next->requires_grad && visited.insert(next).second)
                stack.emplace_back(next, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    auto* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* node = *it;
        if (node->backprop) {
            node->ensure_grad();
            node->backprop(*node);
        }
    }
}

}  // namespace fmrt
