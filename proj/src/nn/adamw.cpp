#include "nn/adamw.h"

#include <cmath>

namespace ipc::nn {

adamw::adamw(param_list params) : params_(std::move(params)) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (param * p : params_) {
        m_.emplace_back(p->w.shape);
        v_.emplace_back(p->w.shape);
    }
}

void adamw::step(float lr) {
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1, (float) t_);
    const float bc2 = 1.0f - std::pow(beta2, (float) t_);
    for (size_t i = 0; i < params_.size(); ++i) {
        param * p = params_[i];
        if (!p->has_grad()) continue;
        float * w = p->w.data();
        const float * g = p->g.data();
        float * m = m_[i].data();
        float * v = v_[i].data();
        const int64_t n = p->w.numel();
        for (int64_t j = 0; j < n; ++j) {
            m[j] = beta1 * m[j] + (1.0f - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0f - beta2) * g[j] * g[j];
            const float mh = m[j] / bc1;
            const float vh = v[j] / bc2;
            w[j] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * w[j]);
        }
    }
}

void adamw::zero_grad() {
    for (param * p : params_) p->zero_grad();
}

float cosine_lr(float lr0, int64_t step, int64_t total) {
    if (total <= 0) return lr0;
    const double x = (double) step / (double) total;
    return (float) (lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, x))));
}

} // namespace ipc::nn
