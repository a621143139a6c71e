#ifndef KDX_TENSOR_HPP
#define KDX_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "kdx/common.hpp"

namespace kdx {

// Dense row-major [rows x cols] matrix of doubles. Batches of logits,
// probabilities and one-hot labels all use this shape (rows = batch,
// cols = classes).
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// [channels x height x width], one image or one activation stack.
struct Tensor3 {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<double> data;

    Tensor3() = default;
    Tensor3(int c_, int h_, int w_, double fill = 0.0)
        : c(c_), h(h_), w(w_),
          data(static_cast<std::size_t>(c_) * h_ * w_, fill) {}

    double& at(int ch, int y, int x) {
        return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
    }
    double at(int ch, int y, int x) const {
        return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
    }
    std::size_t plane_size() const { return static_cast<std::size_t>(h) * w; }
};

// [batch x channels x height x width].
struct Tensor4 {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<double> data;

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_, double fill = 0.0)
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

    double* item(int i) { return data.data() + static_cast<std::size_t>(i) * c * h * w; }
    const double* item(int i) const { return data.data() + static_cast<std::size_t>(i) * c * h * w; }
    std::size_t item_size() const { return static_cast<std::size_t>(c) * h * w; }

    Tensor3 slice(int i) const {
        Tensor3 t(c, h, w);
        const double* src = item(i);
        std::copy(src, src + item_size(), t.data.begin());
        return t;
    }
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* who) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(who) + ": shape mismatch (" + std::to_string(a.rows) + "x" +
                         std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                         std::to_string(b.cols) + ")");
    }
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace kdx

#endif  // KDX_TENSOR_HPP
