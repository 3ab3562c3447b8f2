#pragma once

// Brute-force reference implementations used by the unit and acceptance
// suites. Everything here is straight-line double-precision code that stays
// independent of the library's compute paths.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

// Per-channel 2-D cross-correlation with zero padding, nested loops.
inline std::vector<double> dw_conv2d(const std::vector<double>& x, int c, int h, int w,
                                     const std::vector<double>& k, int ks) {
    const int pad = (ks - 1) / 2;
    std::vector<double> out(x.size(), 0.0);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xc = 0; xc < w; ++xc) {
                double acc = 0.0;
                for (int dy = 0; dy < ks; ++dy)
                    for (int dx = 0; dx < ks; ++dx) {
                        const int sy = y + dy - pad;
                        const int sx = xc + dx - pad;
                        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                        acc += x[(static_cast<std::size_t>(ch) * h + sy) * w + sx] *
                               k[(static_cast<std::size_t>(ch) * ks + dy) * ks + dx];
                    }
                out[(static_cast<std::size_t>(ch) * h + y) * w + xc] = acc;
            }
    return out;
}

inline std::vector<double> matmul(const std::vector<double>& a, int n, int k,
                                  const std::vector<double>& b, int m) {
    std::vector<double> out(static_cast<std::size_t>(n) * m, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p)
                acc += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * m + j];
            out[static_cast<std::size_t>(i) * m + j] = acc;
        }
    return out;
}

inline std::vector<double> row_softmax(const std::vector<double>& x, int rows, int d) {
    std::vector<double> out(x.size());
    for (int r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (int j = 0; j < d; ++j) sum += std::exp(x[static_cast<std::size_t>(r) * d + j]);
        for (int j = 0; j < d; ++j)
            out[static_cast<std::size_t>(r) * d + j] =
                std::exp(x[static_cast<std::size_t>(r) * d + j]) / sum;
    }
    return out;
}

// Dual softmax: row softmax times column softmax, elementwise.
inline std::vector<double> dual_softmax(const std::vector<double>& s, int n, int m) {
    std::vector<double> rows = row_softmax(s, n, m);
    std::vector<double> st(static_cast<std::size_t>(n) * m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            st[static_cast<std::size_t>(j) * n + i] = s[static_cast<std::size_t>(i) * m + j];
    std::vector<double> colsT = row_softmax(st, m, n);
    std::vector<double> out(static_cast<std::size_t>(n) * m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out[static_cast<std::size_t>(i) * m + j] =
                rows[static_cast<std::size_t>(i) * m + j] * colsT[static_cast<std::size_t>(j) * n + i];
    return out;
}

// Mutual argmax pairs, ties broken toward the smallest index.
inline std::vector<std::pair<int, int>> mutual_nearest(const std::vector<double>& g, int n,
                                                       int m) {
    std::vector<std::pair<int, int>> out;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            bool row_best = true;
            for (int j2 = 0; j2 < m; ++j2) {
                const double v = g[static_cast<std::size_t>(i) * m + j2];
                const double c = g[static_cast<std::size_t>(i) * m + j];
                if (v > c || (v == c && j2 < j)) {
                    row_best = false;
                    break;
                }
            }
            if (!row_best) continue;
            bool col_best = true;
            for (int i2 = 0; i2 < n; ++i2) {
                const double v = g[static_cast<std::size_t>(i2) * m + j];
                const double c = g[static_cast<std::size_t>(i) * m + j];
                if (v > c || (v == c && i2 < i)) {
                    col_best = false;
                    break;
                }
            }
            if (col_best) out.emplace_back(i, j);
        }
    return out;
}

// Expectation of window-grid offsets under a probability map.
inline std::pair<double, double> heatmap_expectation(const std::vector<double>& p, int w) {
    const int half = (w - 1) / 2;
    double ex = 0.0, ey = 0.0;
    for (int y = 0; y < w; ++y)
        for (int x = 0; x < w; ++x) {
            const double pv = p[static_cast<std::size_t>(y) * w + x];
            ex += pv * (x - half);
            ey += pv * (y - half);
        }
    return {ex, ey};
}

// Binary cross entropy over a confidence matrix with explicit positive set.
inline double coarse_loss(const std::vector<double>& g, int n,
                          const std::vector<std::pair<int, int>>& gt, bool paper_denominator) {
    const double eps = 1e-6;
    std::vector<char> is_gt(static_cast<std::size_t>(n) * n, 0);
    for (auto& [i, j] : gt) is_gt[static_cast<std::size_t>(i) * n + j] = 1;
    double pos = 0.0, neg = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double v =
                std::min(std::max(g[static_cast<std::size_t>(i) * n + j], eps), 1.0 - eps);
            if (is_gt[static_cast<std::size_t>(i) * n + j])
                pos += std::log(v);
            else
                neg += std::log(1.0 - v);
        }
    double loss = 0.0;
    if (!gt.empty()) loss -= pos / static_cast<double>(gt.size());
    const double denom = paper_denominator ? static_cast<double>(n) - static_cast<double>(gt.size())
                                           : static_cast<double>(n) * n - static_cast<double>(gt.size());
    if (denom > 0) loss -= neg / denom;
    return loss;
}

inline double fine_loss(const std::vector<std::pair<double, double>>& sigma,
                        const std::vector<std::pair<double, double>>& sigma_gt) {
    if (sigma.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < sigma.size(); ++i) {
        const double dx = sigma_gt[i].first - sigma[i].first;
        const double dy = sigma_gt[i].second - sigma[i].second;
        acc += std::sqrt(dx * dx + dy * dy);
    }
    return acc / static_cast<double>(sigma.size());
}

// Fraction of errors strictly below each threshold.
inline std::vector<double> mma(const std::vector<double>& errors,
                               const std::vector<double>& thresholds) {
    std::vector<double> out;
    for (double t : thresholds) {
        int count = 0;
        for (double e : errors)
            if (e < t) ++count;
        out.push_back(static_cast<double>(count) / static_cast<double>(errors.size()));
    }
    return out;
}

// AUC of the cumulative accuracy curve via the integral identity
// (1/t) * mean_i max(0, t - e_i).
inline std::vector<double> auc(const std::vector<double>& errors,
                               const std::vector<double>& thresholds) {
    std::vector<double> out;
    for (double t : thresholds) {
        double acc = 0.0;
        for (double e : errors) acc += std::max(0.0, t - e);
        out.push_back(acc / (t * static_cast<double>(errors.size())));
    }
    return out;
}

}  // namespace oracle
