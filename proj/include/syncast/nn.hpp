#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "syncast/rng.hpp"
#include "syncast/tensor.hpp"

namespace syncast {

struct LinearParams {
    Tensor weight;  // [out, in]
    Tensor bias;    // [out] or empty

    static LinearParams make(std::size_t out, std::size_t in, bool with_bias);
    std::size_t out_features() const { return weight.shape.at(0); }
    std::size_t in_features() const { return weight.shape.at(1); }
    bool has_bias() const { return !bias.data.empty(); }
};

struct LoraConfig {
    int rank = 8;
    double alpha = 16.0;
    double dropout = 0.1;
    bool scale_enabled = true;  // false: strict W + BA without alpha/r

    double scaling() const { return scale_enabled ? alpha / rank : 1.0; }
};

/// Low-rank pair for one adapted map W [d, k]: A [r, k], B [d, r].
struct LoraPair {
    Tensor A;
    Tensor B;
};

/// Saved activations of one linear application.
struct LinearCache {
    Mat input;
    Mat lora_input;   // dropped-out input fed to A (empty without adapter)
    Mat lora_mask;    // dropout scale per entry (0 or 1/keep); empty when inactive
    Mat lora_hidden;  // lora_input * A^T
};

struct LoraUse {
    const LoraPair* pair = nullptr;
    double scale = 1.0;
    double dropout = 0.0;
    Rng* rng = nullptr;  // dropout is active only when set
};

Mat linear_forward(const Mat& x, const LinearParams& p, const LoraUse& lora, LinearCache* cache);

struct LinearGrads {
    LinearParams* base = nullptr;  // accumulates dW, db when set
    LoraPair* lora = nullptr;      // accumulates dA, dB when set
};

Mat linear_backward(const Mat& dy, const LinearCache& cache, const LinearParams& p, const LoraUse& lora,
                    const LinearGrads& grads);

struct LayerNormCache {
    Mat xhat;
    Eigen::VectorXd rstd;
};

Mat layer_norm_forward(const Mat& x, const Tensor& gamma, const Tensor& beta, LayerNormCache* cache);
Mat layer_norm_backward(const Mat& dy, const LayerNormCache& cache, const Tensor& gamma, Tensor* dgamma,
                        Tensor* dbeta);

Mat gelu(const Mat& x);
Mat gelu_backward(const Mat& dy, const Mat& x);

/// Named view of one trainable tensor and its gradient.
struct ParamSlot {
    std::string name;
    Tensor* value = nullptr;
    const Tensor* grad = nullptr;
    bool frozen = false;
};

struct AdamConfig {
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adaptive-moment optimizer state keyed by parameter name.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// One update over `slots`. Throws FrozenViolation if any slot is
    /// frozen; frozen tensors must not be offered to the optimizer.
    void step(const std::vector<ParamSlot>& slots);

    long steps() const { return step_; }
    void set_steps(long s) { step_ = s; }
    const AdamConfig& config() const { return cfg_; }
    std::map<std::string, Tensor>& first_moments() { return m_; }
    std::map<std::string, Tensor>& second_moments() { return v_; }
    const std::map<std::string, Tensor>& first_moments() const { return m_; }
    const std::map<std::string, Tensor>& second_moments() const { return v_; }

private:
    AdamConfig cfg_;
    long step_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

void fill_normal(Tensor& t, Rng& rng, double std);
void fill_uniform(Tensor& t, Rng& rng, double bound);

}  // namespace syncast
