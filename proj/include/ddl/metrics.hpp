#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddl/image.hpp"
#include "ddl/ssi.hpp"

namespace ddl {

// Aligned-prediction error statistics for one split x category x model.
struct MetricsReport {
    std::string model;
    std::string split;
    std::string category; // All | ToM | Other
    std::string alignment = "lse";
    i64 n = 0;
    real absrel = 0;
    real sqrel = 0;
    real rmse = 0;
    real mae = 0;
    std::vector<std::pair<real, real>> delta; // (tau, percent)
    i64 clamped = 0;
    bool degenerate_alignment = false;

    real delta_at(real tau) const {
        for (const auto& [t, v] : delta)
            if (t == tau) return v;
        throw value_error("report has no delta for requested tau");
    }
};

// Pixel-pooled accumulation: metrics over a split are computed on the
// concatenated pixel vector, not by averaging per-image numbers.
class MetricAccumulator {
public:
    explicit MetricAccumulator(std::vector<real> taus) : taus_(std::move(taus)) {
        counts_.assign(taus_.size(), 0);
    }

    void add(real gt, real p) {
        ++n_;
        real d = gt - p;
        sum_abs_ += std::fabs(d);
        sum_sq_ += d * d;
        sum_absrel_ += std::fabs(d) / gt;
        sum_sqrel_ += d * d / gt;
        // non-positive predictions fail every tau
        real ratio = p > 0 ? std::max(p / gt, gt / p) : std::numeric_limits<real>::infinity();
        for (std::size_t k = 0; k < taus_.size(); ++k)
            if (ratio < taus_[k]) ++counts_[k];
    }

    i64 count() const { return n_; }

    MetricsReport finalize(std::string model, std::string split, std::string category,
                           std::string alignment) const {
        check(n_ > 0, "metrics: empty split (no valid pixels)");
        MetricsReport r;
        r.model = std::move(model);
        r.split = std::move(split);
        r.category = std::move(category);
        r.alignment = std::move(alignment);
        r.n = n_;
        real inv = real{1} / static_cast<real>(n_);
        r.absrel = sum_absrel_ * inv;
        r.sqrel = sum_sqrel_ * inv;
        r.rmse = std::sqrt(sum_sq_ * inv);
        r.mae = sum_abs_ * inv;
        for (std::size_t k = 0; k < taus_.size(); ++k)
            r.delta.emplace_back(taus_[k], real{100} * static_cast<real>(counts_[k]) * inv);
        return r;
    }

private:
    std::vector<real> taus_;
    std::vector<i64> counts_;
    i64 n_ = 0;
    real sum_abs_ = 0, sum_sq_ = 0, sum_absrel_ = 0, sum_sqrel_ = 0;
};

// Single-call form used by tests and small tools.
inline MetricsReport compute_metrics(const std::vector<real>& pred_depth, const DepthMap& gt,
                                     const std::vector<std::uint8_t>& mask, const std::vector<real>& taus,
                                     const std::string& model = "model", const std::string& split = "split",
                                     const std::string& category = "All",
                                     const std::string& alignment = "none") {
    check_dims(pred_depth.size() == gt.values.size() && mask.size() == gt.values.size(),
               "compute_metrics: size mismatch");
    MetricAccumulator acc(taus);
    for (std::size_t i = 0; i < pred_depth.size(); ++i) {
        if (!mask[i] || !gt.valid[i]) continue;
        acc.add(gt.values[i], pred_depth[i]);
    }
    return acc.finalize(model, split, category, alignment);
}

// ---------------------------------------------------------------------------
// Prediction-to-ground-truth alignment
// ---------------------------------------------------------------------------

struct RescaleResult {
    std::vector<real> depth;  // metric-comparable depth
    AffineParams params;
    i64 clamped_lo = 0; // aligned inverse below 1/d_max
    i64 clamped_hi = 0; // aligned inverse above 1/d_min
};

// LSE criterion: least-squares scale and shift in inverse-depth space, then
// inversion to depth clamped into [d_min, d_max].
inline RescaleResult lse_rescale(const InverseDepthMap& pred, const DepthMap& gt,
                                 const std::vector<std::uint8_t>& mask, real d_min, real d_max) {
    check_dims(pred.values.size() == gt.values.size(), "lse_rescale: size mismatch");
    check(d_min > 0 && d_max > d_min, "lse_rescale: bad depth range");
    std::vector<real> target(gt.values.size(), real{0});
    std::vector<std::uint8_t> m(mask);
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (m[i] && gt.valid[i] && pred.valid[i]) {
            target[i] = real{1} / gt.values[i];
        } else {
            m[i] = 0;
        }
    }
    RescaleResult out;
    out.params = affine_align(pred.values, target, m);
    out.depth.assign(pred.values.size(), d_max);
    real inv_hi = real{1} / d_min;
    real inv_lo = real{1} / d_max;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        real inv = out.params.s * pred.values[i] + out.params.b;
        if (inv < inv_lo) {
            out.depth[i] = d_max;
            ++out.clamped_lo;
        } else if (inv > inv_hi) {
            out.depth[i] = d_min;
            ++out.clamped_hi;
        } else {
            out.depth[i] = real{1} / inv;
        }
    }
    return out;
}

// Median scaling: single positive factor, no shift.
inline RescaleResult median_rescale(const InverseDepthMap& pred, const DepthMap& gt,
                                    const std::vector<std::uint8_t>& mask) {
    check_dims(pred.values.size() == gt.values.size(), "median_rescale: size mismatch");
    std::vector<real> pd, gd;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        if (!mask[i] || !gt.valid[i] || !pred.valid[i]) continue;
        pd.push_back(pred.values[i] > 0 ? real{1} / pred.values[i] : std::numeric_limits<real>::infinity());
        gd.push_back(gt.values[i]);
    }
    check(!pd.empty(), "median_rescale: no valid pixels");
    auto median = [](std::vector<real> v) {
        std::sort(v.begin(), v.end());
        std::size_t n = v.size();
        return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / real{2};
    };
    real med_p = median(pd);
    real med_g = median(gd);
    if (!(med_p > 0) || !std::isfinite(med_p))
        throw numeric_error("median_rescale: degenerate prediction median");
    real factor = med_g / med_p;
    RescaleResult out;
    out.params.s = factor;
    out.depth.assign(pred.values.size(), real{0});
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        real d = pred.values[i] > 0 ? real{1} / pred.values[i] : std::numeric_limits<real>::infinity();
        out.depth[i] = d * factor;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-category evaluation
// ---------------------------------------------------------------------------

struct EvalImage {
    std::vector<real> pred_depth;    // already aligned
    const DepthMap* gt = nullptr;
    const PixelMask* material = nullptr;
};

// Pools pixels across images into All / ToM / Other reports. Alignment has
// already happened (once per image, on all valid pixels). An empty ToM
// category is omitted rather than zero-filled.
inline std::vector<MetricsReport> masked_eval(const std::vector<EvalImage>& images, const std::string& model,
                                              const std::string& split, const std::string& alignment,
                                              const std::vector<real>& taus) {
    check(!images.empty(), "masked_eval: no images");
    MetricAccumulator all(taus), tom(taus), other(taus);
    for (const auto& im : images) {
        check(im.gt != nullptr && im.material != nullptr, "masked_eval: missing ground truth");
        check_dims(im.pred_depth.size() == im.gt->values.size() &&
                       im.material->values.size() == im.gt->values.size(),
                   "masked_eval: size mismatch");
        for (std::size_t i = 0; i < im.pred_depth.size(); ++i) {
            if (!im.gt->valid[i]) continue;
            real g = im.gt->values[i];
            real p = im.pred_depth[i];
            all.add(g, p);
            if (im.material->values[i] == kMaterialToM)
                tom.add(g, p);
            else
                other.add(g, p);
        }
    }
    std::vector<MetricsReport> out;
    out.push_back(all.finalize(model, split, "All", alignment));
    if (tom.count() > 0) out.push_back(tom.finalize(model, split, "ToM", alignment));
    if (other.count() > 0) out.push_back(other.finalize(model, split, "Other", alignment));
    return out;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_real(real v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

} // namespace detail

inline std::string report_csv(const std::vector<MetricsReport>& reports) {
    check(!reports.empty(), "report_csv: no reports");
    std::string out = "model,split,category,alignment,n,absrel,sqrel,rmse,mae";
    for (const auto& [tau, v] : reports.front().delta) out += ",delta_" + detail::fmt_real(tau, 2);
    out += ",clamped,degenerate\n";
    for (const auto& r : reports) {
        out += r.model + "," + r.split + "," + r.category + "," + r.alignment + "," + std::to_string(r.n);
        out += "," + detail::fmt_real(r.absrel) + "," + detail::fmt_real(r.sqrel) + "," +
               detail::fmt_real(r.rmse) + "," + detail::fmt_real(r.mae);
        for (const auto& [tau, v] : r.delta) out += "," + detail::fmt_real(v, 4);
        out += "," + std::to_string(r.clamped) + "," + (r.degenerate_alignment ? std::string("1") : std::string("0"));
        out += "\n";
    }
    return out;
}

inline nlohmann::json report_json(const std::vector<MetricsReport>& reports, const nlohmann::json& provenance) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : reports) {
        nlohmann::json row{{"model", r.model},       {"split", r.split},
                           {"category", r.category}, {"alignment", r.alignment},
                           {"n", r.n},               {"absrel", r.absrel},
                           {"sqrel", r.sqrel},       {"rmse", r.rmse},
                           {"mae", r.mae},           {"clamped", r.clamped},
                           {"degenerate", r.degenerate_alignment}};
        nlohmann::json deltas = nlohmann::json::object();
        for (const auto& [tau, v] : r.delta) deltas[detail::fmt_real(tau, 2)] = v;
        row["delta"] = deltas;
        rows.push_back(row);
    }
    return nlohmann::json{{"provenance", provenance}, {"reports", rows}};
}

// Byte-stable CSV + JSON emission.
inline void emit_report(const std::vector<MetricsReport>& reports, const nlohmann::json& provenance,
                        const std::string& csv_path, const std::string& json_path) {
    check(!reports.empty(), "emit_report: no reports");
    {
        std::ofstream os(csv_path, std::ios::trunc);
        if (!os) throw io_error("cannot write " + csv_path);
        os << report_csv(reports);
        if (!os) throw io_error("write failed: " + csv_path);
    }
    {
        std::ofstream os(json_path, std::ios::trunc);
        if (!os) throw io_error("cannot write " + json_path);
        os << report_json(reports, provenance).dump(2) << "\n";
        if (!os) throw io_error("write failed: " + json_path);
    }
}

} // namespace ddl
