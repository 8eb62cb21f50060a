#pragma once

#include "nn/nn.h"

namespace ipc::nn {

// Adam with decoupled weight decay. Only the params handed to the constructor
// are ever touched; everything else in the model stays bit-identical.
struct adamw {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;

    explicit adamw(param_list params);

    void step(float lr);
    void zero_grad();
    int64_t t() const { return t_; }

  private:
    param_list params_;
    std::vector<tensor> m_, v_;
    int64_t t_ = 0;
};

// cosine decay from lr0 to 0 over total steps
float cosine_lr(float lr0, int64_t step, int64_t total);

} // namespace ipc::nn
