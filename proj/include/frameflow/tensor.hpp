#pragma once

// Dense row-major 64-bit float tensor. Rank ≤ 2 is all this library needs:
// scalars are 1x1, column vectors are n x 1, matrices are r x c.

#include <cstring>
#include <initializer_list>
#include <vector>

#include "common.hpp"

namespace frameflow {

class Tensor {
public:
    Tensor() : rows_(0), cols_(0) {}
    Tensor(int rows, int cols = 1) : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, 0.0) {
        require(rows >= 0 && cols >= 0, "Tensor: negative dimension");
    }
    Tensor(std::initializer_list<double> v) : rows_(static_cast<int>(v.size())), cols_(1), data_(v) {}

    static Tensor zeros(int rows, int cols = 1) { return Tensor(rows, cols); }

    static Tensor scalar(double v) {
        Tensor t(1, 1);
        t.data_[0] = v;
        return t;
    }

    static Tensor from(int rows, int cols, const double* src) {
        Tensor t(rows, cols);
        std::memcpy(t.data_.data(), src, sizeof(double) * t.size());
        return t;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    double& operator()(int i, int j) { return data_[static_cast<size_t>(i) * cols_ + j]; }
    double operator()(int i, int j) const { return data_[static_cast<size_t>(i) * cols_ + j]; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double norm() const {
        double s = 0.0;
        for (double v : data_) s += v * v;
        return std::sqrt(s);
    }

    double dot(const Tensor& o) const {
        require(size() == o.size(), "Tensor::dot: size mismatch");
        double s = 0.0;
        for (size_t i = 0; i < size(); ++i) s += data_[i] * o.data_[i];
        return s;
    }

    // Column j as a vector (for frame matrices F with fields in columns).
    Tensor col(int j) const {
        require(j >= 0 && j < cols_, "Tensor::col: index out of range");
        Tensor out(rows_, 1);
        for (int i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
        return out;
    }

private:
    int rows_, cols_;
    std::vector<double> data_;
};

inline Tensor operator-(const Tensor& a, const Tensor& b) {
    require(a.size() == b.size(), "Tensor: size mismatch in subtraction");
    Tensor out(a.rows(), a.cols());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    require(a.size() == b.size(), "Tensor: size mismatch in addition");
    Tensor out(a.rows(), a.cols());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

inline Tensor operator*(double c, const Tensor& a) {
    Tensor out(a.rows(), a.cols());
    for (size_t i = 0; i < a.size(); ++i) out[i] = c * a[i];
    return out;
}

} // namespace frameflow
