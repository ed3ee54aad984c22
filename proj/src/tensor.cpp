#include "gep/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace gep::nn {

namespace {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) {
            throw std::invalid_argument("tensor dimensions must be positive");
        }
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

[[noreturn]] void shape_error(const char* op) {
    throw std::invalid_argument(fmt::format("{}: unsupported or mismatched shapes", op));
}

bool want_grad(Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (tape == nullptr) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) {
            return true;
        }
    }
    return false;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    auto data = std::make_shared<TensorData>();
    data->shape = std::move(shape);
    data->values.assign(n, 0.0f);
    data->requires_grad = requires_grad;
    if (requires_grad) {
        data->grad.assign(n, 0.0f);
    }
    Tensor t;
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw std::invalid_argument("tensor value count does not match shape");
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    t.data_->values = std::move(values);
    return t;
}

void Tensor::zero_grad() {
    std::fill(data_->grad.begin(), data_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
    Tensor t = zeros(data_->shape, data_->requires_grad);
    t.data_->values = data_->values;
    return t;
}

void Tape::backward(Tensor& loss) {
    if (loss.numel() != 1 || !loss.requires_grad()) {
        throw std::invalid_argument("backward expects a scalar tensor that requires gradients");
    }
    loss.grad()[0] += 1.0f;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        (*it)();
    }
}

// ---- matmul ----------------------------------------------------------------

namespace {

Tensor matmul_impl(Tape* tape, const Tensor& a, const Tensor& b, bool trans_b) {
    const char* opname = trans_b ? "matmul_nt" : "matmul";
    Tensor out;
    const bool rg = want_grad(tape, {&a, &b});

    if (a.rank() == 2 && b.rank() == 2) {
        const int m = a.dim(0), k = a.dim(1);
        const int n = trans_b ? b.dim(0) : b.dim(1);
        if ((trans_b ? b.dim(1) : b.dim(0)) != k) {
            shape_error(opname);
        }
        out = Tensor::zeros({m, n}, rg);
        CMap A(a.data(), m, k);
        CMap B(b.data(), b.dim(0), b.dim(1));
        Map C(out.data(), m, n);
        if (trans_b) {
            C.noalias() = A * B.transpose();
        } else {
            C.noalias() = A * B;
        }
    } else if (a.rank() == 3 && b.rank() == 2) {
        const int bs = a.dim(0), m = a.dim(1), k = a.dim(2);
        const int n = trans_b ? b.dim(0) : b.dim(1);
        if ((trans_b ? b.dim(1) : b.dim(0)) != k) {
            shape_error(opname);
        }
        out = Tensor::zeros({bs, m, n}, rg);
        CMap A(a.data(), bs * m, k);
        CMap B(b.data(), b.dim(0), b.dim(1));
        Map C(out.data(), bs * m, n);
        if (trans_b) {
            C.noalias() = A * B.transpose();
        } else {
            C.noalias() = A * B;
        }
    } else if (a.rank() == 3 && b.rank() == 3) {
        const int bs = a.dim(0), m = a.dim(1), k = a.dim(2);
        if (b.dim(0) != bs || (trans_b ? b.dim(2) : b.dim(1)) != k) {
            shape_error(opname);
        }
        const int n = trans_b ? b.dim(1) : b.dim(2);
        out = Tensor::zeros({bs, m, n}, rg);
        const int bk = b.dim(1), bn = b.dim(2);
        for (int i = 0; i < bs; ++i) {
            CMap A(a.data() + static_cast<std::size_t>(i) * m * k, m, k);
            CMap B(b.data() + static_cast<std::size_t>(i) * bk * bn, bk, bn);
            Map C(out.data() + static_cast<std::size_t>(i) * m * n, m, n);
            if (trans_b) {
                C.noalias() = A * B.transpose();
            } else {
                C.noalias() = A * B;
            }
        }
    } else {
        shape_error(opname);
    }

    if (rg) {
        Tensor av = a, bv = b, ov = out;
        tape->record([av, bv, ov, trans_b]() mutable {
            if (av.rank() == 3 && bv.rank() == 3) {
                const int bs = av.dim(0), m = av.dim(1), k = av.dim(2);
                const int bk = bv.dim(1), bn = bv.dim(2);
                const int n = ov.dim(2);
                for (int i = 0; i < bs; ++i) {
                    CMap A(av.data() + static_cast<std::size_t>(i) * m * k, m, k);
                    CMap B(bv.data() + static_cast<std::size_t>(i) * bk * bn, bk, bn);
                    CMap dC(ov.grad() + static_cast<std::size_t>(i) * m * n, m, n);
                    if (av.requires_grad()) {
                        Map dA(av.grad() + static_cast<std::size_t>(i) * m * k, m, k);
                        if (trans_b) {
                            dA.noalias() += dC * B;
                        } else {
                            dA.noalias() += dC * B.transpose();
                        }
                    }
                    if (bv.requires_grad()) {
                        Map dB(bv.grad() + static_cast<std::size_t>(i) * bk * bn, bk, bn);
                        if (trans_b) {
                            dB.noalias() += dC.transpose() * A;
                        } else {
                            dB.noalias() += A.transpose() * dC;
                        }
                    }
                }
                return;
            }
            const int k = av.dim(av.rank() - 1);
            const int rows = static_cast<int>(av.numel()) / k;
            const int n = ov.dim(ov.rank() - 1);
            CMap A(av.data(), rows, k);
            CMap B(bv.data(), bv.dim(0), bv.dim(1));
            CMap dC(ov.grad(), rows, n);
            if (av.requires_grad()) {
                Map dA(av.grad(), rows, k);
                if (trans_b) {
                    dA.noalias() += dC * B;
                } else {
                    dA.noalias() += dC * B.transpose();
                }
            }
            if (bv.requires_grad()) {
                Map dB(bv.grad(), bv.dim(0), bv.dim(1));
                if (trans_b) {
                    dB.noalias() += dC.transpose() * A;
                } else {
                    dB.noalias() += A.transpose() * dC;
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    return matmul_impl(tape, a, b, false);
}

Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b) {
    return matmul_impl(tape, a, b, true);
}

Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (bias.rank() != 1 || bias.dim(0) != w.dim(1) || w.rank() != 2 ||
        x.dim(x.rank() - 1) != w.dim(0)) {
        shape_error("linear");
    }
    const int k = w.dim(0);
    const int n = w.dim(1);
    const int rows = static_cast<int>(x.numel()) / k;
    const bool rg = want_grad(tape, {&x, &w, &bias});
    std::vector<int> out_shape = x.shape();
    out_shape.back() = n;
    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    {
        CMap A(x.data(), rows, k);
        CMap W(w.data(), k, n);
        CMap B(bias.data(), 1, n);
        Map C(out.data(), rows, n);
        C.noalias() = A * W;
        C.rowwise() += B.row(0);
    }
    if (rg) {
        Tensor xv = x, wv = w, bv = bias, ov = out;
        tape->record([xv, wv, bv, ov, rows, k, n]() mutable {
            CMap A(xv.data(), rows, k);
            CMap W(wv.data(), k, n);
            CMap dC(ov.grad(), rows, n);
            if (xv.requires_grad()) {
                Map dA(xv.grad(), rows, k);
                dA.noalias() += dC * W.transpose();
            }
            if (wv.requires_grad()) {
                Map dW(wv.grad(), k, n);
                dW.noalias() += A.transpose() * dC;
            }
            if (bv.requires_grad()) {
                Map dB(bv.grad(), 1, n);
                dB.row(0) += dC.colwise().sum();
            }
        });
    }
    return out;
}

Tensor conv1d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
    return linear(tape, x, w, bias);
}

Tensor relu(Tape* tape, const Tensor& x) {
    const bool rg = want_grad(tape, {&x});
    Tensor out = Tensor::zeros(x.shape(), rg);
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        out.data()[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
    }
    if (rg) {
        Tensor xv = x, ov = out;
        tape->record([xv, ov]() mutable {
            const std::size_t n = xv.numel();
            for (std::size_t i = 0; i < n; ++i) {
                if (xv.data()[i] > 0.0f) {  // gradient at exactly 0 is 0
                    xv.grad()[i] += ov.grad()[i];
                }
            }
        });
    }
    return out;
}

Tensor silu(Tape* tape, const Tensor& x) {
    const bool rg = want_grad(tape, {&x});
    Tensor out = Tensor::zeros(x.shape(), rg);
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const float v = x.data()[i];
        out.data()[i] = v / (1.0f + std::exp(-v));
    }
    if (rg) {
        Tensor xv = x, ov = out;
        tape->record([xv, ov]() mutable {
            const std::size_t n = xv.numel();
            for (std::size_t i = 0; i < n; ++i) {
                const float v = xv.data()[i];
                const float s = 1.0f / (1.0f + std::exp(-v));
                xv.grad()[i] += ov.grad()[i] * (s + v * s * (1.0f - s));
            }
        });
    }
    return out;
}

Tensor hadamard(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_error("hadamard");
    }
    const bool rg = want_grad(tape, {&a, &b});
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) {
        out.data()[i] = a.data()[i] * b.data()[i];
    }
    if (rg) {
        Tensor av = a, bv = b, ov = out;
        tape->record([av, bv, ov]() mutable {
            const std::size_t n = av.numel();
            for (std::size_t i = 0; i < n; ++i) {
                if (av.requires_grad()) {
                    av.grad()[i] += ov.grad()[i] * bv.data()[i];
                }
                if (bv.requires_grad()) {
                    bv.grad()[i] += ov.grad()[i] * av.data()[i];
                }
            }
        });
    }
    return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    const bool broadcast = a.rank() == 3 && b.rank() == 2 && a.dim(1) == b.dim(0) &&
                           a.dim(2) == b.dim(1);
    if (!broadcast && a.shape() != b.shape()) {
        shape_error("add");
    }
    const bool rg = want_grad(tape, {&a, &b});
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    const std::size_t bn = b.numel();
    for (std::size_t i = 0; i < n; ++i) {
        out.data()[i] = a.data()[i] + b.data()[i % bn];
    }
    if (rg) {
        Tensor av = a, bv = b, ov = out;
        tape->record([av, bv, ov]() mutable {
            const std::size_t n = av.numel();
            const std::size_t bn = bv.numel();
            for (std::size_t i = 0; i < n; ++i) {
                if (av.requires_grad()) {
                    av.grad()[i] += ov.grad()[i];
                }
                if (bv.requires_grad()) {
                    bv.grad()[i % bn] += ov.grad()[i];
                }
            }
        });
    }
    return out;
}

Tensor scale(Tape* tape, const Tensor& x, float c) {
    const bool rg = want_grad(tape, {&x});
    Tensor out = Tensor::zeros(x.shape(), rg);
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        out.data()[i] = x.data()[i] * c;
    }
    if (rg) {
        Tensor xv = x, ov = out;
        tape->record([xv, ov, c]() mutable {
            const std::size_t n = xv.numel();
            for (std::size_t i = 0; i < n; ++i) {
                xv.grad()[i] += ov.grad()[i] * c;
            }
        });
    }
    return out;
}

void RunningStats::update(const BatchNormStats& observed, float momentum) {
    for (std::size_t i = 0; i < mean.size(); ++i) {
        mean[i] = momentum * mean[i] + (1.0f - momentum) * observed.mean[i];
        var[i] = momentum * var[i] + (1.0f - momentum) * observed.var[i];
    }
}

Tensor batchnorm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 const RunningStats& running, bool training, BatchNormStats* observed) {
    constexpr float kEps = 1e-5f;
    const int c = x.dim(x.rank() - 1);
    const int rows = static_cast<int>(x.numel()) / c;
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c ||
        static_cast<int>(running.mean.size()) != c) {
        shape_error("batchnorm");
    }

    std::vector<float> mean(static_cast<std::size_t>(c));
    std::vector<float> var(static_cast<std::size_t>(c));
    CMap X(x.data(), rows, c);
    if (training) {
        Eigen::Map<Eigen::VectorXf> M(mean.data(), c);
        Eigen::Map<Eigen::VectorXf> V(var.data(), c);
        M = X.colwise().mean().transpose();
        V = (X.rowwise() - M.transpose()).array().square().colwise().mean().transpose();
        if (observed != nullptr) {
            observed->mean = mean;
            observed->var = var;
        }
    } else {
        mean = running.mean;
        var = running.var;
    }

    const bool rg = want_grad(tape, {&x, &gamma, &beta});
    Tensor out = Tensor::zeros(x.shape(), rg);
    Map Y(out.data(), rows, c);
    std::vector<float> inv_std(static_cast<std::size_t>(c));
    for (int j = 0; j < c; ++j) {
        inv_std[static_cast<std::size_t>(j)] = 1.0f / std::sqrt(var[static_cast<std::size_t>(j)] + kEps);
    }
    for (int j = 0; j < c; ++j) {
        Y.col(j) = (X.col(j).array() - mean[static_cast<std::size_t>(j)]) *
                       inv_std[static_cast<std::size_t>(j)] * gamma.data()[j] +
                   beta.data()[j];
    }

    if (rg) {
        Tensor xv = x, gv = gamma, bv = beta, ov = out;
        auto mean_c = mean;
        auto inv_c = inv_std;
        tape->record([xv, gv, bv, ov, mean_c, inv_c, rows, c, training]() mutable {
            CMap X(xv.data(), rows, c);
            CMap dY(ov.grad(), rows, c);
            const float inv_n = 1.0f / static_cast<float>(rows);
            for (int j = 0; j < c; ++j) {
                const float mu = mean_c[static_cast<std::size_t>(j)];
                const float is = inv_c[static_cast<std::size_t>(j)];
                const float g = gv.data()[j];
                Eigen::ArrayXf xhat = (X.col(j).array() - mu) * is;
                Eigen::ArrayXf dy = dY.col(j).array();
                if (gv.requires_grad()) {
                    gv.grad()[j] += (dy * xhat).sum();
                }
                if (bv.requires_grad()) {
                    bv.grad()[j] += dy.sum();
                }
                if (xv.requires_grad()) {
                    Map dX(xv.grad(), rows, c);
                    if (training) {
                        const float sum_dy = dy.sum();
                        const float sum_dy_xhat = (dy * xhat).sum();
                        dX.col(j).array() +=
                            g * is * (dy - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
                    } else {
                        dX.col(j).array() += g * is * dy;
                    }
                }
            }
        });
    }
    return out;
}

Tensor rmsnorm(Tape* tape, const Tensor& x, const Tensor& gain) {
    constexpr float kEps = 1e-6f;
    const int c = x.dim(x.rank() - 1);
    const int rows = static_cast<int>(x.numel()) / c;
    if (gain.rank() != 1 || gain.dim(0) != c) {
        shape_error("rmsnorm");
    }
    const bool rg = want_grad(tape, {&x, &gain});
    Tensor out = Tensor::zeros(x.shape(), rg);
    std::vector<float> inv_rms(static_cast<std::size_t>(rows));
    CMap X(x.data(), rows, c);
    Map Y(out.data(), rows, c);
    CMap G(gain.data(), 1, c);
    for (int r = 0; r < rows; ++r) {
        const float ms = X.row(r).squaredNorm() / static_cast<float>(c);
        const float ir = 1.0f / std::sqrt(ms + kEps);
        inv_rms[static_cast<std::size_t>(r)] = ir;
        Y.row(r) = X.row(r).array() * G.row(0).array() * ir;
    }
    if (rg) {
        Tensor xv = x, gv = gain, ov = out;
        auto inv_c = inv_rms;
        tape->record([xv, gv, ov, inv_c, rows, c]() mutable {
            CMap X(xv.data(), rows, c);
            CMap dY(ov.grad(), rows, c);
            CMap G(gv.data(), 1, c);
            for (int r = 0; r < rows; ++r) {
                const float ir = inv_c[static_cast<std::size_t>(r)];
                Eigen::ArrayXf dyg = dY.row(r).array() * G.row(0).array();
                if (gv.requires_grad()) {
                    Map dG(gv.grad(), 1, c);
                    dG.row(0).array() += dY.row(r).array() * X.row(r).array() * ir;
                }
                if (xv.requires_grad()) {
                    Map dX(xv.grad(), rows, c);
                    const float dot = (dyg * X.row(r).array()).sum();
                    dX.row(r).array() +=
                        dyg * ir - X.row(r).array() * (dot * ir * ir * ir / static_cast<float>(c));
                }
            }
        });
    }
    return out;
}

Tensor swiglu(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& v, const Tensor& w2) {
    Tensor gate = silu(tape, matmul(tape, x, w));
    Tensor val = matmul(tape, x, v);
    return matmul(tape, hadamard(tape, gate, val), w2);
}

Tensor softmax(Tape* tape, const Tensor& x, int axis) {
    if (axis < 0) {
        axis += x.rank();
    }
    if (axis < 0 || axis >= x.rank()) {
        shape_error("softmax");
    }
    const bool rg = want_grad(tape, {&x});
    Tensor out = Tensor::zeros(x.shape(), rg);

    // lane iteration: outer x inner strided views along `axis`
    const std::size_t len = static_cast<std::size_t>(x.dim(axis));
    std::size_t inner = 1;
    for (int i = axis + 1; i < x.rank(); ++i) {
        inner *= static_cast<std::size_t>(x.dim(i));
    }
    const std::size_t outer = x.numel() / (len * inner);
    auto for_each_lane = [outer, len, inner](auto&& fn) {
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                fn(o * len * inner + i, inner);
            }
        }
    };

    for_each_lane([&](std::size_t base, std::size_t stride) {
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
            mx = std::max(mx, x.data()[base + j * stride]);
        }
        float sum = 0.0f;
        for (std::size_t j = 0; j < len; ++j) {
            const float e = std::exp(x.data()[base + j * stride] - mx);
            out.data()[base + j * stride] = e;
            sum += e;
        }
        for (std::size_t j = 0; j < len; ++j) {
            out.data()[base + j * stride] /= sum;
        }
    });

    if (rg) {
        Tensor xv = x, ov = out;
        tape->record([xv, ov, for_each_lane, len]() mutable {
            for_each_lane([&](std::size_t base, std::size_t stride) {
                float dot = 0.0f;
                for (std::size_t j = 0; j < len; ++j) {
                    dot += ov.grad()[base + j * stride] * ov.data()[base + j * stride];
                }
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t k = base + j * stride;
                    xv.grad()[k] += (ov.grad()[k] - dot) * ov.data()[k];
                }
            });
        });
    }
    return out;
}

namespace {

void rotary_tables(int t, int d, int offset, std::vector<float>& cos_t, std::vector<float>& sin_t) {
    const int half = d / 2;
    cos_t.resize(static_cast<std::size_t>(t) * half);
    sin_t.resize(static_cast<std::size_t>(t) * half);
    for (int p = 0; p < t; ++p) {
        for (int j = 0; j < half; ++j) {
            const double theta = static_cast<double>(p + offset) *
                                 std::pow(10000.0, -2.0 * j / static_cast<double>(d));
            cos_t[static_cast<std::size_t>(p) * half + j] = static_cast<float>(std::cos(theta));
            sin_t[static_cast<std::size_t>(p) * half + j] = static_cast<float>(std::sin(theta));
        }
    }
}

}  // namespace

Tensor rotary(Tape* tape, const Tensor& x, int position_offset) {
    const int d = x.dim(x.rank() - 1);
    if (d % 2 != 0) {
        throw std::invalid_argument("rotary requires an even last dimension");
    }
    const int t = x.dim(x.rank() - 2);
    const int batches = static_cast<int>(x.numel()) / (t * d);
    const int half = d / 2;

    std::vector<float> cos_t, sin_t;
    rotary_tables(t, d, position_offset, cos_t, sin_t);

    const bool rg = want_grad(tape, {&x});
    Tensor out = Tensor::zeros(x.shape(), rg);
    for (int b = 0; b < batches; ++b) {
        for (int p = 0; p < t; ++p) {
            const std::size_t row = (static_cast<std::size_t>(b) * t + p) * d;
            for (int j = 0; j < half; ++j) {
                const float c = cos_t[static_cast<std::size_t>(p) * half + j];
                const float s = sin_t[static_cast<std::size_t>(p) * half + j];
                const float x0 = x.data()[row + 2 * j];
                const float x1 = x.data()[row + 2 * j + 1];
                out.data()[row + 2 * j] = x0 * c - x1 * s;
                out.data()[row + 2 * j + 1] = x0 * s + x1 * c;
            }
        }
    }
    if (rg) {
        Tensor xv = x, ov = out;
        tape->record([xv, ov, cos_t, sin_t, batches, t, d, half]() mutable {
            for (int b = 0; b < batches; ++b) {
                for (int p = 0; p < t; ++p) {
                    const std::size_t row = (static_cast<std::size_t>(b) * t + p) * d;
                    for (int j = 0; j < half; ++j) {
                        const float c = cos_t[static_cast<std::size_t>(p) * half + j];
                        const float s = sin_t[static_cast<std::size_t>(p) * half + j];
                        const float g0 = ov.grad()[row + 2 * j];
                        const float g1 = ov.grad()[row + 2 * j + 1];
                        xv.grad()[row + 2 * j] += g0 * c + g1 * s;
                        xv.grad()[row + 2 * j + 1] += -g0 * s + g1 * c;
                    }
                }
            }
        });
    }
    return out;
}

Tensor cross_entropy_sum(Tape* tape, const Tensor& logits, std::span<const int> targets,
                         int ignore_id, std::size_t* counted) {
    const int v = logits.dim(logits.rank() - 1);
    const int rows = static_cast<int>(logits.numel()) / v;
    if (targets.size() != static_cast<std::size_t>(rows)) {
        shape_error("cross_entropy");
    }
    const bool rg = want_grad(tape, {&logits});
    Tensor out = Tensor::zeros({1}, rg);

    Tensor probs = Tensor::zeros(logits.shape(), false);
    double total = 0.0;
    std::size_t count = 0;
    for (int r = 0; r < rows; ++r) {
        const float* lr = logits.data() + static_cast<std::size_t>(r) * v;
        float* pr = probs.data() + static_cast<std::size_t>(r) * v;
        float mx = lr[0];
        for (int j = 1; j < v; ++j) {
            mx = std::max(mx, lr[j]);
        }
        double sum = 0.0;
        for (int j = 0; j < v; ++j) {
            const double e = std::exp(static_cast<double>(lr[j]) - mx);
            pr[j] = static_cast<float>(e);
            sum += e;
        }
        for (int j = 0; j < v; ++j) {
            pr[j] = static_cast<float>(pr[j] / sum);
        }
        const int tgt = targets[static_cast<std::size_t>(r)];
        if (tgt == ignore_id) {
            continue;
        }
        if (tgt < 0 || tgt >= v) {
            throw std::out_of_range("cross_entropy target out of range");
        }
        total += std::log(sum) + mx - lr[tgt];
        ++count;
    }
    if (!std::isfinite(total)) {
        throw std::runtime_error("cross entropy is not finite; aborting step");
    }
    out.data()[0] = static_cast<float>(total);
    if (counted != nullptr) {
        *counted = count;
    }

    if (rg) {
        Tensor lv = logits, ov = out;
        std::vector<int> tv(targets.begin(), targets.end());
        tape->record([lv, ov, probs, tv, ignore_id, rows, v]() mutable {
            const float g = ov.grad()[0];
            for (int r = 0; r < rows; ++r) {
                const int tgt = tv[static_cast<std::size_t>(r)];
                if (tgt == ignore_id) {
                    continue;
                }
                const float* pr = probs.data() + static_cast<std::size_t>(r) * v;
                float* dl = lv.grad() + static_cast<std::size_t>(r) * v;
                for (int j = 0; j < v; ++j) {
                    dl[j] += g * (pr[j] - (j == tgt ? 1.0f : 0.0f));
                }
            }
        });
    }
    return out;
}

Tensor cross_entropy(Tape* tape, const Tensor& logits, std::span<const int> targets,
                     int ignore_id) {
    std::size_t count = 0;
    Tensor sum = cross_entropy_sum(tape, logits, targets, ignore_id, &count);
    if (count == 0) {
        throw std::invalid_argument("cross_entropy: every position is ignored");
    }
    return scale(tape, sum, 1.0f / static_cast<float>(count));
}

Tensor embedding(Tape* tape, const Tensor& table, std::span<const int> ids, int b, int t) {
    const int v = table.dim(0);
    const int d = table.dim(1);
    const std::size_t rows = b > 0 ? static_cast<std::size_t>(b) * t : static_cast<std::size_t>(t);
    if (ids.size() != rows) {
        shape_error("embedding");
    }
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw std::out_of_range(fmt::format("embedding id {} out of range", id));
        }
    }
    const bool rg = want_grad(tape, {&table});
    Tensor out = b > 0 ? Tensor::zeros({b, t, d}, rg) : Tensor::zeros({t, d}, rg);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(table.data() + static_cast<std::size_t>(ids[r]) * d, d,
                    out.data() + r * static_cast<std::size_t>(d));
    }
    if (rg) {
        Tensor tv = table, ov = out;
        std::vector<int> idv(ids.begin(), ids.end());
        tape->record([tv, ov, idv, d]() mutable {
            for (std::size_t r = 0; r < idv.size(); ++r) {
                const float* src = ov.grad() + r * static_cast<std::size_t>(d);
                float* dst = tv.grad() + static_cast<std::size_t>(idv[r]) * d;
                for (int j = 0; j < d; ++j) {
                    dst[j] += src[j];
                }
            }
        });
    }
    return out;
}

Tensor max_rows(Tape* tape, const Tensor& x) {
    if (x.rank() != 3) {
        shape_error("max_rows");
    }
    const int b = x.dim(0), n = x.dim(1), c = x.dim(2);
    const bool rg = want_grad(tape, {&x});
    Tensor out = Tensor::zeros({b, c}, rg);
    std::vector<int> argmax(static_cast<std::size_t>(b) * c, 0);
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < c; ++j) {
            float best = x.data()[(static_cast<std::size_t>(i) * n) * c + j];
            int best_r = 0;
            for (int r = 1; r < n; ++r) {
                const float val = x.data()[(static_cast<std::size_t>(i) * n + r) * c + j];
                if (val > best) {
                    best = val;
                    best_r = r;
                }
            }
            out.data()[static_cast<std::size_t>(i) * c + j] = best;
            argmax[static_cast<std::size_t>(i) * c + j] = best_r;
        }
    }
    if (rg) {
        Tensor xv = x, ov = out;
        tape->record([xv, ov, argmax, b, n, c]() mutable {
            for (int i = 0; i < b; ++i) {
                for (int j = 0; j < c; ++j) {
                    const int r = argmax[static_cast<std::size_t>(i) * c + j];
                    xv.grad()[(static_cast<std::size_t>(i) * n + r) * c + j] +=
                        ov.grad()[static_cast<std::size_t>(i) * c + j];
                }
            }
        });
    }
    return out;
}

namespace {

Tensor permute_heads(Tape* tape, const Tensor& x, int n_heads, bool to_heads) {
    if (x.rank() != 3) {
        shape_error("split/merge_heads");
    }
    int b, t, hd;
    Tensor out;
    const bool rg = want_grad(tape, {&x});
    if (to_heads) {
        b = x.dim(0);
        t = x.dim(1);
        const int c = x.dim(2);
        if (c % n_heads != 0) {
            shape_error("split_heads");
        }
        hd = c / n_heads;
        out = Tensor::zeros({b * n_heads, t, hd}, rg);
    } else {
        if (x.dim(0) % n_heads != 0) {
            shape_error("merge_heads");
        }
        b = x.dim(0) / n_heads;
        t = x.dim(1);
        hd = x.dim(2);
        out = Tensor::zeros({b, t, hd * n_heads}, rg);
    }
    auto idx_btc = [&](int bi, int ti, int h, int k) {
        return (static_cast<std::size_t>(bi) * t + ti) * (n_heads * hd) +
               static_cast<std::size_t>(h) * hd + k;
    };
    auto idx_bht = [&](int bi, int ti, int h, int k) {
        return ((static_cast<std::size_t>(bi) * n_heads + h) * t + ti) * hd +
               static_cast<std::size_t>(k);
    };
    for (int bi = 0; bi < b; ++bi) {
        for (int h = 0; h < n_heads; ++h) {
            for (int ti = 0; ti < t; ++ti) {
                for (int k = 0; k < hd; ++k) {
                    if (to_heads) {
                        out.data()[idx_bht(bi, ti, h, k)] = x.data()[idx_btc(bi, ti, h, k)];
                    } else {
                        out.data()[idx_btc(bi, ti, h, k)] = x.data()[idx_bht(bi, ti, h, k)];
                    }
                }
            }
        }
    }
    if (rg) {
        Tensor xv = x, ov = out;
        tape->record([xv, ov, idx_btc, idx_bht, b, t, hd, n_heads, to_heads]() mutable {
            for (int bi = 0; bi < b; ++bi) {
                for (int h = 0; h < n_heads; ++h) {
                    for (int ti = 0; ti < t; ++ti) {
                        for (int k = 0; k < hd; ++k) {
                            if (to_heads) {
                                xv.grad()[idx_btc(bi, ti, h, k)] += ov.grad()[idx_bht(bi, ti, h, k)];
                            } else {
                                xv.grad()[idx_bht(bi, ti, h, k)] += ov.grad()[idx_btc(bi, ti, h, k)];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor split_heads(Tape* tape, const Tensor& x, int n_heads) {
    return permute_heads(tape, x, n_heads, true);
}

Tensor merge_heads(Tape* tape, const Tensor& x, int n_heads) {
    return permute_heads(tape, x, n_heads, false);
}

Tensor reshape(Tape* tape, const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel()) {
        shape_error("reshape");
    }
    const bool rg = want_grad(tape, {&x});
    Tensor out = Tensor::zeros(std::move(shape), rg);
    std::copy_n(x.data(), x.numel(), out.data());
    if (rg) {
        Tensor xv = x, ov = out;
        tape->record([xv, ov]() mutable {
            for (std::size_t i = 0; i < xv.numel(); ++i) {
                xv.grad()[i] += ov.grad()[i];
            }
        });
    }
    return out;
}

Tensor causal_mask(int t) {
    Tensor m = Tensor::zeros({t, t}, false);
    const float ninf = -std::numeric_limits<float>::infinity();
    for (int i = 0; i < t; ++i) {
        for (int j = i + 1; j < t; ++j) {
            m.data()[static_cast<std::size_t>(i) * t + j] = ninf;
        }
    }
    return m;
}

void adam_step(std::vector<Parameter>& params, const AdamConfig& cfg) {
    for (Parameter& p : params) {
        if (p.m.size() != p.value.numel()) {
            p.m.assign(p.value.numel(), 0.0f);
            p.v.assign(p.value.numel(), 0.0f);
        }
        p.step += 1;
        const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(p.step));
        const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(p.step));
        float* w = p.value.data();
        const float* g = p.value.grad();
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            p.m[i] = cfg.beta1 * p.m[i] + (1.0f - cfg.beta1) * g[i];
            p.v[i] = cfg.beta2 * p.v[i] + (1.0f - cfg.beta2) * g[i] * g[i];
            const float mhat = static_cast<float>(p.m[i] / bc1);
            const float vhat = static_cast<float>(p.v[i] / bc2);
            w[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[i]);
        }
    }
}

}  // namespace gep::nn
