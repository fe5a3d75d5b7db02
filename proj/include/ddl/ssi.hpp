#pragma once

#include <cstdint>
#include <vector>

#include "ddl/image.hpp"
#include "ddl/ops.hpp"

namespace ddl {

// Least-squares scale and shift aligning a prediction to a target.
struct AffineParams {
    real s = 1;
    real b = 0;
    bool degenerate = false; // constant prediction: shift-only fallback
};

// argmin_{s,b} sum_mask (s*pred + b - target)^2 via the 2x2 normal
// equations, solved in recentered form. Constant predictions make the
// system singular; the fallback keeps s = 1 and matches the means.
inline AffineParams affine_align(const std::vector<real>& pred, const std::vector<real>& target,
                                 const std::vector<std::uint8_t>& mask) {
    check_dims(pred.size() == target.size() && pred.size() == mask.size(), "affine_align: size mismatch");
    i64 n = 0;
    real sum_p = 0, sum_t = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        ++n;
        sum_p += pred[i];
        sum_t += target[i];
    }
    check(n >= 2, "affine_align: need at least 2 valid pixels");
    real mean_p = sum_p / static_cast<real>(n);
    real mean_t = sum_t / static_cast<real>(n);
    real var_p = 0, cov = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        real dp = pred[i] - mean_p;
        var_p += dp * dp;
        cov += dp * (target[i] - mean_t);
    }
    AffineParams out;
    if (var_p <= real{1e-20} * static_cast<real>(n) * (real{1} + mean_p * mean_p)) {
        out.s = 1;
        out.b = mean_t - mean_p;
        out.degenerate = true;
        return out;
    }
    out.s = cov / var_p;
    out.b = mean_t - out.s * mean_p;
    return out;
}

inline AffineParams affine_align(const InverseDepthMap& pred, const InverseDepthMap& target,
                                 const std::vector<std::uint8_t>& mask) {
    return affine_align(pred.values, target.values, mask);
}

inline std::vector<std::uint8_t> combined_valid(const InverseDepthMap& a, const InverseDepthMap& b) {
    check_dims(a.values.size() == b.values.size(), "combined_valid: size mismatch");
    std::vector<std::uint8_t> m(a.values.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (a.valid[i] && b.valid[i]) ? 1 : 0;
    return m;
}

// ---------------------------------------------------------------------------
// Scale-and-shift-invariant loss: (1/2M) sum_mask |aligned_pred - label|
// ---------------------------------------------------------------------------

struct SsiValue {
    real value = 0;
    AffineParams align;
    i64 valid_count = 0;
};

// Array form, used by evaluation paths and property tests.
inline SsiValue ssi_loss(const std::vector<real>& pred, const std::vector<real>& label,
                         const std::vector<std::uint8_t>& mask) {
    SsiValue out;
    out.align = affine_align(pred, label, mask);
    real total = 0;
    i64 n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        total += std::fabs(out.align.s * pred[i] + out.align.b - label[i]);
        ++n;
    }
    out.valid_count = n;
    out.value = total / (real{2} * static_cast<real>(n));
    return out;
}

inline SsiValue ssi_loss(const InverseDepthMap& pred, const InverseDepthMap& label,
                         const std::vector<std::uint8_t>& mask) {
    return ssi_loss(pred.values, label.values, mask);
}

struct SsiLossTensor {
    Tensor loss;
    AffineParams align;
};

// Taped form, differentiable w.r.t. `pred`. The alignment is computed from
// detached values and enters the residual as a constant, so gradients see
// a frozen (s, b).
inline SsiLossTensor ssi_loss_tensor(const Tensor& pred, const std::vector<real>& label,
                                     const std::vector<std::uint8_t>& mask) {
    check_dims(pred.data().size() == label.size() && label.size() == mask.size(),
               "ssi_loss_tensor: size mismatch");
    AffineParams ap = affine_align(pred.data(), label, mask);
    i64 m = 0;
    for (auto v : mask)
        if (v) ++m;
    check(m >= 2, "ssi_loss_tensor: need at least 2 valid pixels");

    std::vector<real> label_data(label);
    std::vector<real> mask_data(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask_data[i] = mask[i] ? real{1} : real{0};
    Tensor label_t = Tensor::from_data(pred.shape(), std::move(label_data));
    Tensor mask_t = Tensor::from_data(pred.shape(), std::move(mask_data));

    Tensor resid = sub(add_scalar(scale(pred, ap.s), ap.b), label_t);
    Tensor loss = scale(sum_all(abs(mul(resid, mask_t))), real{1} / (real{2} * static_cast<real>(m)));
    return {loss, ap};
}

} // namespace ddl
