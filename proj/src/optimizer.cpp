#include "fmalloc/optimizer.hpp"

#include <cmath>

namespace fmalloc {

AdamOptimizer::AdamOptimizer(std::vector<TensorSlot> slots, double lr, double beta1, double beta2,
                             double eps)
    : slots_(std::move(slots)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0.0) throw ConfigError("AdamOptimizer: lr must be positive");
    m_.reserve(slots_.size());
    v_.reserve(slots_.size());
    for (const auto& slot : slots_) {
        m_.push_back(Mat::Zero(slot.value->rows(), slot.value->cols()));
        v_.push_back(Mat::Zero(slot.value->rows(), slot.value->cols()));
    }
}

void AdamOptimizer::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < slots_.size(); ++i) {
        const Mat& g = *slots_[i].grad;
        Mat& m = m_[i];
        Mat& v = v_[i];
        m = beta1_ * m + (1.0 - beta1_) * g;
        v.array() = beta2_ * v.array() + (1.0 - beta2_) * g.array().square();
        // With g == 0 and zero moments the update is exactly zero, so the
        // parameter bits stay untouched.
        slots_[i].value->array() -=
            lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
    }
}

}  // namespace fmalloc
