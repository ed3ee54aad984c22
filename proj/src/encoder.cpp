#include "gep/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace gep::nn {

void EncoderConfig::validate() const {
    if (d_emb <= 0) {
        throw std::invalid_argument("encoder d_emb must be positive");
    }
    if (m < 2) {
        throw std::invalid_argument("encoder m must be >= 2");
    }
    if (n_max < 1) {
        throw std::invalid_argument("encoder n_max must be >= 1");
    }
}

namespace {

BatchNormLayer make_bn(int channels) {
    BatchNormLayer bn;
    bn.gamma = Tensor::from({channels}, std::vector<float>(static_cast<std::size_t>(channels), 1.0f),
                            true);
    bn.beta = Tensor::zeros({channels}, true);
    bn.running = RunningStats(channels);
    return bn;
}

Tensor he_init(int in, int out, Rng& rng) {
    std::vector<float> w(static_cast<std::size_t>(in) * out);
    const float stddev = std::sqrt(2.0f / static_cast<float>(in));
    for (float& v : w) {
        v = rng.normal_float(0.0f, stddev);
    }
    return Tensor::from({in, out}, std::move(w), true);
}

}  // namespace

EncoderWeights EncoderWeights::init(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const int d = cfg.d_emb;
    EncoderWeights w;
    w.bn0 = make_bn(cfg.m);
    w.conv1_w = he_init(cfg.m, d, rng);
    w.conv1_b = Tensor::zeros({d}, true);
    w.bn1 = make_bn(d);
    w.conv2_w = he_init(d, 2 * d, rng);
    w.conv2_b = Tensor::zeros({2 * d}, true);
    w.bn2 = make_bn(2 * d);
    w.conv3_w = he_init(2 * d, 4 * d, rng);
    w.conv3_b = Tensor::zeros({4 * d}, true);
    w.bn3 = make_bn(4 * d);
    w.ffn1_w = he_init(4 * d, 2 * d, rng);
    w.ffn1_b = Tensor::zeros({2 * d}, true);
    w.bn4 = make_bn(2 * d);
    w.ffn2_w = he_init(2 * d, d, rng);
    w.ffn2_b = Tensor::zeros({d}, true);
    w.bn5 = make_bn(d);
    return w;
}

MatrixF pad_features(const Matrix& X, std::span<const double> y, int m) {
    if (!y.empty() && y.size() != X.rows) {
        throw std::invalid_argument("pad_features: y length must match X rows");
    }
    const std::size_t used = X.cols + (y.empty() ? 0 : 1);
    if (used > static_cast<std::size_t>(m)) {
        throw std::invalid_argument(
            fmt::format("pad_features: {} columns exceed m = {}", used, m));
    }
    MatrixF out(X.rows, static_cast<std::size_t>(m), 0.0f);
    for (std::size_t r = 0; r < X.rows; ++r) {
        for (std::size_t c = 0; c < X.cols; ++c) {
            out.at(r, c) = static_cast<float>(X.at(r, c));
        }
        if (!y.empty()) {
            out.at(r, X.cols) = static_cast<float>(y[r]);
        }
    }
    return out;
}

MatrixF pad_features(const Matrix& X, int m) {
    return pad_features(X, std::span<const double>{}, m);
}

void standardize(MatrixF& d, const ColumnStats& stats) {
    if (stats.mean.size() != d.cols || stats.std.size() != d.cols) {
        throw std::invalid_argument("standardize: column stats do not match matrix width");
    }
    for (std::size_t r = 0; r < d.rows; ++r) {
        for (std::size_t c = 0; c < d.cols; ++c) {
            d.at(r, c) = (d.at(r, c) - stats.mean[c]) / stats.std[c];
        }
    }
}

Tensor encoder_forward(Tape* tape, const Tensor& x, const EncoderConfig& cfg, EncoderWeights& w,
                       bool training, EncoderBatchStats* observed) {
    if (x.rank() != 3 || x.dim(2) != cfg.m) {
        throw std::invalid_argument("encoder_forward expects (b, n, m) input");
    }
    if (observed != nullptr) {
        observed->layers.assign(6, BatchNormStats{});
    }
    auto bn_stats = [&](int i) {
        return observed != nullptr ? &observed->layers[static_cast<std::size_t>(i)] : nullptr;
    };

    Tensor h = batchnorm(tape, x, w.bn0.gamma, w.bn0.beta, w.bn0.running, training, bn_stats(0));
    h = conv1d(tape, h, w.conv1_w, w.conv1_b);
    h = relu(tape, batchnorm(tape, h, w.bn1.gamma, w.bn1.beta, w.bn1.running, training, bn_stats(1)));
    h = conv1d(tape, h, w.conv2_w, w.conv2_b);
    h = relu(tape, batchnorm(tape, h, w.bn2.gamma, w.bn2.beta, w.bn2.running, training, bn_stats(2)));
    h = conv1d(tape, h, w.conv3_w, w.conv3_b);
    h = relu(tape, batchnorm(tape, h, w.bn3.gamma, w.bn3.beta, w.bn3.running, training, bn_stats(3)));
    h = max_rows(tape, h);  // (b, 4d)
    h = linear(tape, h, w.ffn1_w, w.ffn1_b);
    h = relu(tape, batchnorm(tape, h, w.bn4.gamma, w.bn4.beta, w.bn4.running, training, bn_stats(4)));
    h = linear(tape, h, w.ffn2_w, w.ffn2_b);
    h = relu(tape, batchnorm(tape, h, w.bn5.gamma, w.bn5.beta, w.bn5.running, training, bn_stats(5)));
    return h;  // (b, d)
}

void merge_running_stats(EncoderWeights& w, const EncoderBatchStats& observed, float momentum) {
    if (observed.layers.size() != 6) {
        throw std::invalid_argument("expected stats for six batchnorm layers");
    }
    w.bn0.running.update(observed.layers[0], momentum);
    w.bn1.running.update(observed.layers[1], momentum);
    w.bn2.running.update(observed.layers[2], momentum);
    w.bn3.running.update(observed.layers[3], momentum);
    w.bn4.running.update(observed.layers[4], momentum);
    w.bn5.running.update(observed.layers[5], momentum);
}

LatentVector encode(const MatrixF& d, const EncoderConfig& cfg, EncoderWeights& w,
                    const ColumnStats& stats, std::uint64_t subsample_seed) {
    cfg.validate();
    if (d.rows < 1) {
        throw std::invalid_argument("encode requires at least one row");
    }
    if (d.cols != static_cast<std::size_t>(cfg.m)) {
        throw std::invalid_argument("encode input width must equal cfg.m");
    }

    MatrixF sample = d;
    if (d.rows > static_cast<std::size_t>(cfg.n_max)) {
        // seeded uniform subsample without replacement, order-preserving
        Rng rng(subsample_seed);
        std::vector<std::size_t> idx(d.rows);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        rng.shuffle(idx);
        idx.resize(static_cast<std::size_t>(cfg.n_max));
        std::sort(idx.begin(), idx.end());
        MatrixF sub(idx.size(), d.cols);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::size_t c = 0; c < d.cols; ++c) {
                sub.at(r, c) = d.at(idx[r], c);
            }
        }
        sample = std::move(sub);
    }
    standardize(sample, stats);

    Tensor x = Tensor::from({1, static_cast<int>(sample.rows), cfg.m}, std::move(sample.values));
    Tensor z = encoder_forward(nullptr, x, cfg, w, /*training=*/false);
    LatentVector out;
    out.values = z.values();
    return out;
}

}  // namespace gep::nn
