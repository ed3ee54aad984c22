#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gep::nn {

struct TensorData {
    std::vector<int> shape;
    std::vector<float> values;
    std::vector<float> grad;  // allocated iff requires_grad
    bool requires_grad = false;
};

/// Shared handle to a dense row-major float tensor of rank 1..3.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<float> values,
                       bool requires_grad = false);

    bool defined() const { return data_ != nullptr; }
    int rank() const { return static_cast<int>(data_->shape.size()); }
    int dim(int i) const { return data_->shape[static_cast<std::size_t>(i)]; }
    const std::vector<int>& shape() const { return data_->shape; }
    std::size_t numel() const { return data_->values.size(); }

    float* data() { return data_->values.data(); }
    const float* data() const { return data_->values.data(); }
    std::vector<float>& values() { return data_->values; }
    const std::vector<float>& values() const { return data_->values; }

    bool requires_grad() const { return data_->requires_grad; }
    float* grad() { return data_->grad.data(); }
    const float* grad() const { return data_->grad.data(); }
    std::vector<float>& grad_vec() { return data_->grad; }
    void zero_grad();

    /// Deep copy of the values; fresh zero gradient buffer.
    Tensor clone() const;

private:
    std::shared_ptr<TensorData> data_;
};

/// Records backward closures in execution order; backward() replays them in
/// reverse. A tape is confined to one thread.
class Tape {
public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
    std::size_t size() const { return ops_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be a scalar.
    void backward(Tensor& loss);

private:
    std::vector<std::function<void()>> ops_;
};

// ---- operations ------------------------------------------------------------
// Every op takes an optional tape; with a null tape (or when no input requires
// gradients) only the forward value is computed. Supported shapes are the ones
// the encoder and decoder need; anything else throws.

/// (M,K)x(K,N), (B,M,K)x(K,N), or (B,M,K)x(B,K,N).
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
/// Same contractions with the last two axes of `b` transposed.
Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b);

/// y = x W + bias (bias broadcast over rows). x rank 2 or 3.
Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias);

/// Kernel-size-1 convolution over channels: pointwise mixing of the last axis.
Tensor conv1d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor relu(Tape* tape, const Tensor& x);
Tensor silu(Tape* tape, const Tensor& x);
Tensor hadamard(Tape* tape, const Tensor& a, const Tensor& b);

/// Same-shape addition, or rank3 + rank2 broadcast over the leading axis.
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& x, float c);

struct BatchNormStats {
    std::vector<float> mean;
    std::vector<float> var;  // biased
};

struct RunningStats {
    std::vector<float> mean;
    std::vector<float> var;

    explicit RunningStats(int channels = 0)
        : mean(static_cast<std::size_t>(channels), 0.0f),
          var(static_cast<std::size_t>(channels), 1.0f) {}

    /// running = momentum*running + (1-momentum)*observed
    void update(const BatchNormStats& observed, float momentum = 0.9f);
};

/// Per-channel normalization over all leading axes (channels = last axis).
/// Training mode uses batch statistics and reports them through `observed`;
/// eval mode uses `running`. Never mutates `running` itself.
Tensor batchnorm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 const RunningStats& running, bool training, BatchNormStats* observed = nullptr);

/// y = x / RMS(x) * gain, RMS over the last axis.
Tensor rmsnorm(Tape* tape, const Tensor& x, const Tensor& gain);

/// silu(x W) * (x V), then W2.
Tensor swiglu(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& v, const Tensor& w2);

Tensor softmax(Tape* tape, const Tensor& x, int axis);

/// Rotary position embedding over the last axis (must be even), positions
/// position_offset + t along the second-to-last axis.
Tensor rotary(Tape* tape, const Tensor& x, int position_offset);

/// Sum of per-position cross entropies; positions with target == ignore_id are
/// skipped and their count excluded. logits (T,V) or (B,T,V); targets row-major.
Tensor cross_entropy_sum(Tape* tape, const Tensor& logits, std::span<const int> targets,
                         int ignore_id, std::size_t* counted = nullptr);

/// Mean cross entropy over non-ignored positions.
Tensor cross_entropy(Tape* tape, const Tensor& logits, std::span<const int> targets, int ignore_id);

/// Row gather: out[t] = table[ids[t]]. Output (B,T,C) when b > 0, else (T,C).
Tensor embedding(Tape* tape, const Tensor& table, std::span<const int> ids, int b, int t);

/// Global max pooling over the middle axis: (B,N,C) -> (B,C). Ties route the
/// gradient to the first maximal row.
Tensor max_rows(Tape* tape, const Tensor& x);

/// (B,T,H*D) -> (B*H,T,D) and back.
Tensor split_heads(Tape* tape, const Tensor& x, int n_heads);
Tensor merge_heads(Tape* tape, const Tensor& x, int n_heads);

/// Copy-reshape to an equal-numel shape.
Tensor reshape(Tape* tape, const Tensor& x, std::vector<int> shape);

/// (T,T) additive causal mask: 0 on and below the diagonal, -inf above.
Tensor causal_mask(int t);

struct Parameter {
    std::string name;
    Tensor value;
    std::vector<float> m;
    std::vector<float> v;
    std::int64_t step = 0;
};

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;  // decoupled
};

void adam_step(std::vector<Parameter>& params, const AdamConfig& cfg);

}  // namespace gep::nn
