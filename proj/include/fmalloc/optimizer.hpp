#pragma once

#include "fmalloc/common.hpp"

#include <vector>

namespace fmalloc {

// A trainable tensor paired with its gradient buffer.
struct TensorSlot {
    Mat* value = nullptr;
    Mat* grad = nullptr;
};

// Adam with zero weight decay. A parameter whose gradient is exactly zero at
// every step since construction receives exactly zero update, which the
// engine relies on for bit-exact read-only preservation; moments are
// discarded at task boundaries by constructing a fresh optimizer.
class AdamOptimizer {
public:
    explicit AdamOptimizer(std::vector<TensorSlot> slots, double lr, double beta1 = 0.9,
                           double beta2 = 0.999, double eps = 1e-8);

    void step();
    int step_count() const { return t_; }
    double learning_rate() const { return lr_; }

private:
    std::vector<TensorSlot> slots_;
    std::vector<Mat> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
};

}  // namespace fmalloc
