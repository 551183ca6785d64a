#include "syncast/nn.hpp"

#include <cmath>
#include <numbers>

namespace syncast {

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t k = 0; k < shape.size(); ++k) s += (k ? ", " : "") + std::to_string(shape[k]);
    return s + "]";
}

LinearParams LinearParams::make(std::size_t out, std::size_t in, bool with_bias) {
    LinearParams p;
    p.weight = Tensor({out, in});
    if (with_bias) p.bias = Tensor({out});
    return p;
}

Mat linear_forward(const Mat& x, const LinearParams& p, const LoraUse& lora, LinearCache* cache) {
    if (static_cast<std::size_t>(x.cols()) != p.in_features())
        fail(ErrorCode::Shape, "linear input width " + std::to_string(x.cols()) + " != " +
                                   std::to_string(p.in_features()));
    Mat y = x * p.weight.mat().transpose();
    if (p.has_bias()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(p.bias.data.data(), p.bias.size());
    if (cache) cache->input = x;
    if (lora.pair) {
        const bool drop = lora.rng && lora.dropout > 0.0;
        Mat mask;
        if (drop) {
            mask.resize(x.rows(), x.cols());
            const double keep = 1.0 - lora.dropout;
            for (Eigen::Index k = 0; k < mask.size(); ++k)
                mask.data()[k] = lora.rng->uniform() < lora.dropout ? 0.0 : 1.0 / keep;
        }
        Mat src = drop ? Mat(x.cwiseProduct(mask)) : x;
        Mat hidden = src * lora.pair->A.mat().transpose();
        y.noalias() += lora.scale * (hidden * lora.pair->B.mat().transpose());
        if (cache) {
            cache->lora_input = std::move(src);
            cache->lora_mask = std::move(mask);
            cache->lora_hidden = std::move(hidden);
        }
    }
    return y;
}

Mat linear_backward(const Mat& dy, const LinearCache& cache, const LinearParams& p, const LoraUse& lora,
                    const LinearGrads& grads) {
    Mat dx = dy * p.weight.mat();
    if (grads.base) {
        grads.base->weight.mat().noalias() += dy.transpose() * cache.input;
        if (p.has_bias()) {
            Eigen::Map<Eigen::RowVectorXd> db(grads.base->bias.data.data(), grads.base->bias.size());
            db += dy.colwise().sum();
        }
    }
    if (lora.pair) {
        // y += s * (xd A^T) B^T
        const Mat dhidden = lora.scale * (dy * lora.pair->B.mat());  // [N, r]
        if (grads.lora) {
            grads.lora->B.mat().noalias() += lora.scale * dy.transpose() * cache.lora_hidden;
            grads.lora->A.mat().noalias() += dhidden.transpose() * cache.lora_input;
        }
        Mat dxd = dhidden * lora.pair->A.mat();
        if (cache.lora_mask.size() > 0) dxd = dxd.cwiseProduct(cache.lora_mask);
        dx += dxd;
    }
    return dx;
}

Mat layer_norm_forward(const Mat& x, const Tensor& gamma, const Tensor& beta, LayerNormCache* cache) {
    constexpr double eps = 1e-5;
    const Eigen::Index n = x.rows(), c = x.cols();
    Mat y(n, c);
    Mat xhat(n, c);
    Eigen::VectorXd rstd(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        rstd[r] = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.row(r).array() - mean) * rstd[r];
        for (Eigen::Index k = 0; k < c; ++k) y(r, k) = xhat(r, k) * gamma.data[k] + beta.data[k];
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

Mat layer_norm_backward(const Mat& dy, const LayerNormCache& cache, const Tensor& gamma, Tensor* dgamma,
                        Tensor* dbeta) {
    const Eigen::Index n = dy.rows(), c = dy.cols();
    Mat dx(n, c);
    for (Eigen::Index r = 0; r < n; ++r) {
        Eigen::RowVectorXd g(c);
        for (Eigen::Index k = 0; k < c; ++k) {
            g[k] = dy(r, k) * gamma.data[k];
            if (dgamma) dgamma->data[k] += dy(r, k) * cache.xhat(r, k);
            if (dbeta) dbeta->data[k] += dy(r, k);
        }
        const double mean_g = g.mean();
        const double mean_gx = (g.array() * cache.xhat.row(r).array()).mean();
        dx.row(r) = cache.rstd[r] * (g.array() - mean_g - cache.xhat.row(r).array() * mean_gx);
    }
    return dx;
}

Mat gelu(const Mat& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); });
}

Mat gelu_backward(const Mat& dy, const Mat& x) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index k = 0; k < dy.size(); ++k) {
        const double v = x.data()[k];
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        dx.data()[k] = dy.data()[k] * (cdf + v * pdf);
    }
    return dx;
}

void Adam::step(const std::vector<ParamSlot>& slots) {
    for (const auto& s : slots)
        if (s.frozen) fail(ErrorCode::FrozenViolation, "optimizer asked to update frozen tensor '" + s.name + "'");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& s : slots) {
        if (!s.value->same_shape(*s.grad)) fail(ErrorCode::Shape, "gradient shape mismatch for '" + s.name + "'");
        auto [mit, m_new] = m_.try_emplace(s.name, s.value->shape);
        auto [vit, v_new] = v_.try_emplace(s.name, s.value->shape);
        auto& m = mit->second.data;
        auto& v = vit->second.data;
        auto& w = s.value->data;
        const auto& g = s.grad->data;
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            w[k] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void fill_normal(Tensor& t, Rng& rng, double std) {
    for (auto& v : t.data) v = std * rng.normal();
}

void fill_uniform(Tensor& t, Rng& rng, double bound) {
    for (auto& v : t.data) v = bound * (2.0 * rng.uniform() - 1.0);
}

}  // namespace syncast
