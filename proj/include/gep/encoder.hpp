#pragma once

#include <optional>
#include <span>
#include <vector>

#include "gep/data.hpp"
#include "gep/rng.hpp"
#include "gep/tensor.hpp"

namespace gep::nn {

struct EncoderConfig {
    int d_emb = 32;
    int m = 9;        // feature columns including the target
    int n_max = 256;  // max data rows consumed per task

    void validate() const;
};

struct LatentVector {
    std::vector<float> values;  // length d_emb
};

/// Per-column standardization statistics, estimated on the source corpus.
struct ColumnStats {
    std::vector<float> mean;
    std::vector<float> std;  // never zero; degenerate columns get 1
};

struct BatchNormLayer {
    Tensor gamma;
    Tensor beta;
    RunningStats running;
};

/// T-Net style order-invariant encoder: BNorm0, three pointwise conv+BN+ReLU
/// stages of width d, 2d, 4d, max pool over rows, then two FFN+BN+ReLU stages
/// down to d.
struct EncoderWeights {
    BatchNormLayer bn0;
    Tensor conv1_w, conv1_b;
    BatchNormLayer bn1;
    Tensor conv2_w, conv2_b;
    BatchNormLayer bn2;
    Tensor conv3_w, conv3_b;
    BatchNormLayer bn3;
    Tensor ffn1_w, ffn1_b;
    BatchNormLayer bn4;
    Tensor ffn2_w, ffn2_b;
    BatchNormLayer bn5;

    static EncoderWeights init(const EncoderConfig& cfg, Rng& rng);

    /// Visits every learnable tensor with a stable name.
    template <typename Fn>
    void visit(Fn&& fn) {
        fn("enc.bn0.gamma", bn0.gamma);
        fn("enc.bn0.beta", bn0.beta);
        fn("enc.conv1.w", conv1_w);
        fn("enc.conv1.b", conv1_b);
        fn("enc.bn1.gamma", bn1.gamma);
        fn("enc.bn1.beta", bn1.beta);
        fn("enc.conv2.w", conv2_w);
        fn("enc.conv2.b", conv2_b);
        fn("enc.bn2.gamma", bn2.gamma);
        fn("enc.bn2.beta", bn2.beta);
        fn("enc.conv3.w", conv3_w);
        fn("enc.conv3.b", conv3_b);
        fn("enc.bn3.gamma", bn3.gamma);
        fn("enc.bn3.beta", bn3.beta);
        fn("enc.ffn1.w", ffn1_w);
        fn("enc.ffn1.b", ffn1_b);
        fn("enc.bn4.gamma", bn4.gamma);
        fn("enc.bn4.beta", bn4.beta);
        fn("enc.ffn2.w", ffn2_w);
        fn("enc.ffn2.b", ffn2_b);
        fn("enc.bn5.gamma", bn5.gamma);
        fn("enc.bn5.beta", bn5.beta);
    }

    template <typename Fn>
    void visit_running(Fn&& fn) {
        fn("enc.bn0.running", bn0.running);
        fn("enc.bn1.running", bn1.running);
        fn("enc.bn2.running", bn2.running);
        fn("enc.bn3.running", bn3.running);
        fn("enc.bn4.running", bn4.running);
        fn("enc.bn5.running", bn5.running);
    }
};

/// Observed batch statistics of one training forward, in layer order.
struct EncoderBatchStats {
    std::vector<BatchNormStats> layers;  // bn0..bn5
};

/// Concatenates X and Y column-wise and zero-fills up to m columns.
MatrixF pad_features(const Matrix& X, std::span<const double> y, int m);
MatrixF pad_features(const Matrix& X, int m);

/// Z-scores every column in place using corpus statistics.
void standardize(MatrixF& d, const ColumnStats& stats);

/// Full network on a stacked batch (b, n, m). Training mode uses batch
/// statistics (reported via `observed`), eval mode uses running stats.
Tensor encoder_forward(Tape* tape, const Tensor& x, const EncoderConfig& cfg, EncoderWeights& w,
                       bool training, EncoderBatchStats* observed = nullptr);

void merge_running_stats(EncoderWeights& w, const EncoderBatchStats& observed,
                         float momentum = 0.9f);

/// Inference entry point: subsamples to n_max rows when needed (seeded),
/// standardizes, and runs the network in eval mode with batch 1.
LatentVector encode(const MatrixF& d, const EncoderConfig& cfg, EncoderWeights& w,
                    const ColumnStats& stats, std::uint64_t subsample_seed);

}  // namespace gep::nn
