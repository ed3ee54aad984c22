#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace gep {

/// Row-major dense matrix of doubles (dataset-side numerics).
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
    std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
};

/// Row-major dense matrix of floats (model-side numerics).
struct MatrixF {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> values;

    MatrixF() = default;
    MatrixF(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), values(r * c, fill) {}

    float& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    std::span<const float> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
    std::span<float> row(std::size_t r) { return {values.data() + r * cols, cols}; }
};

}  // namespace gep
