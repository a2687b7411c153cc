// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "attnsteer/ars.hpp"
#include "attnsteer/model.hpp"

namespace attnsteer {

enum class Scope { Global, SensitiveOnly };

inline const char* to_string(Scope s) {
    return s == Scope::Global ? "global" : "sensitive-only";
}

struct RVEConfig {
    int k = 5;
    double alpha = 0.05;
    double beta = 1.0;
    // Explicit layer list, or empty optional for "auto" = layers whose mean
    // ARS exceeds the across-layer median.
    std::optional<std::vector<int>> target_layers;
    Scope scope = Scope::Global;
    bool denoise = true;
    bool frozen_masks = true;

    void validate(int num_layers, int num_heads) const {
        if (!(alpha > 0.0 && alpha <= 1.0)) throw config_error("rve config: alpha must be in (0, 1]");
        if (beta < 0.0) throw config_error("rve config: beta must be nonnegative");
        if (k <= 0 || 2 * k > num_heads) throw config_error("rve config: requires 1 <= 2K <= num_heads");
        if (target_layers)
            for (int l : *target_layers)
                if (l < 0 || l >= num_layers) throw config_error("rve config: target layer out of range");
    }
};

// Paper presets: alpha 0.05 suits long image-token sequences, 0.5 suits
// Q-Former-style 32-token inputs.
inline RVEConfig preset_llava() { return RVEConfig{}; }
inline RVEConfig preset_instructblip() {
    RVEConfig c;
    c.alpha = 0.5;
    return c;
}

// Enhancement, denoising, and composed target masks for one layer. When
// m = 0 the masks are all-zero and the thresholds are NaN (serialized null).
struct MaskSet {
    int layer = -1;
    std::vector<std::uint8_t> enh, den, target;
    int m = 0;
    double tau_sens = std::numeric_limits<double>::quiet_NaN();
    double tau_non = std::numeric_limits<double>::quiet_NaN();
};

// Elementwise mean of pre-softmax image scores over a head set.
inline VectorXd mean_scores(const ForwardTrace& trace, int layer, const std::vector<int>& heads) {
    if (heads.empty()) throw input_error("mean_scores: empty head set");
    VectorXd mean = trace.at(layer, heads.front()).image_scores;
    for (std::size_t i = 1; i < heads.size(); ++i) mean += trace.at(layer, heads[i]).image_scores;
    return mean / static_cast<double>(heads.size());
}

namespace detail {
// Indices of the m largest values, ties resolved toward lower index.
inline std::vector<int> top_m_indices(const VectorXd& values, int m) {
    std::vector<int> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (values[a] != values[b]) return values[a] > values[b];
        return a < b;
    });
    order.resize(m);
    return order;
}

inline std::vector<std::uint8_t> mask_from_indices(int n, const std::vector<int>& idx) {
    std::vector<std::uint8_t> mask(n, 0);
    for (int i : idx) mask[i] = 1;
    return mask;
}
}  // namespace detail

// Builds the top-m masks from the sensitive and non-sensitive mean scores.
// m = floor(alpha * N_I); each mask selects exactly m positions, and the
// stored threshold is the m-th largest value of its vector.
inline MaskSet build_masks(const VectorXd& s_sens, const VectorXd& s_non, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw config_error("build_masks: alpha must be in (0, 1]");
    if (s_sens.size() != s_non.size() || s_sens.size() < 1)
        throw input_error("build_masks: score vectors must be nonempty and equal length");
    const int n = static_cast<int>(s_sens.size());
    const int m = static_cast<int>(std::floor(alpha * n));

    MaskSet masks;
    masks.m = m;
    if (m == 0) {
        masks.enh.assign(n, 0);
        masks.den.assign(n, 0);
        masks.target.assign(n, 0);
        return masks;
    }
    const auto enh_idx = detail::top_m_indices(s_sens, m);
    const auto den_idx = detail::top_m_indices(s_non, m);
    masks.enh = detail::mask_from_indices(n, enh_idx);
    masks.den = detail::mask_from_indices(n, den_idx);
    masks.tau_sens = s_sens[enh_idx.back()];
    masks.tau_non = s_non[den_idx.back()];
    masks.target.resize(n);
    for (int i = 0; i < n; ++i) masks.target[i] = masks.enh[i] & static_cast<std::uint8_t>(1 - masks.den[i]);
    return masks;
}

// M_enh with denoised positions removed.
inline std::vector<std::uint8_t> compose_target(const std::vector<std::uint8_t>& enh,
                                                const std::vector<std::uint8_t>& den) {
    if (enh.size() != den.size()) throw input_error("compose_target: length mismatch");
    std::vector<std::uint8_t> target(enh.size());
    for (std::size_t i = 0; i < enh.size(); ++i) {
        if (enh[i] > 1 || den[i] > 1) throw input_error("compose_target: masks must be binary");
        target[i] = enh[i] & static_cast<std::uint8_t>(1 - den[i]);
    }
    return target;
}

// Additive amplification of masked scores. Unmasked positions and the
// beta = 0 case pass values through bit-exactly.
inline VectorXd enhance_scores(const VectorXd& scores, const std::vector<std::uint8_t>& target,
                               double beta) {
    if (static_cast<std::size_t>(scores.size()) != target.size())
        throw input_error("enhance_scores: length mismatch");
    if (beta < 0.0) throw input_error("enhance_scores: beta must be nonnegative");
    VectorXd out = scores;
    if (beta == 0.0) return out;
    for (Eigen::Index i = 0; i < scores.size(); ++i)
        if (target[i]) out[i] = scores[i] + beta * std::abs(scores[i]);
    return out;
}

struct InterventionPlan {
    RVEConfig config;
    std::vector<int> target_layers;
    std::vector<HeadSelection> selections;  // one per target layer
    std::vector<MaskSet> masks;             // one per target layer
    Intervention intervention;              // ready to hand to Model::forward
    std::vector<std::string> warnings;
};

namespace detail {
inline std::vector<int> auto_target_layers(const std::vector<double>& profile) {
    std::vector<double> sorted(profile);
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median =
        n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    std::vector<int> layers;
    for (std::size_t l = 0; l < profile.size(); ++l)
        if (profile[l] > median) layers.push_back(static_cast<int>(l));
    return layers;
}
}  // namespace detail

// Assembles the full plan: per target layer, rank heads by ARS, average the
// vanilla trace's pre-softmax scores over each set, build masks, and emit
// one enhancement per layer. The vanilla trace is the prompt-final-token
// trace; masks stay frozen across decoding steps unless config says otherwise.
inline InterventionPlan plan_intervention(const ARSMatrix& matrix, const ForwardTrace& trace,
                                          const RVEConfig& config) {
    config.validate(matrix.num_layers(), matrix.num_heads());
    if (trace.num_layers != matrix.num_layers() || trace.num_heads != matrix.num_heads())
        throw input_error("plan_intervention: trace and ARS matrix shapes disagree");

    InterventionPlan plan;
    plan.config = config;
    plan.target_layers = config.target_layers
                             ? *config.target_layers
                             : detail::auto_target_layers(layer_profile(matrix));

    const int ni = static_cast<int>(trace.at(0, 0).image_scores.size());
    if (std::floor(config.alpha * ni) < 1.0)
        plan.warnings.push_back("alpha * N_I < 1: masks are empty and enhancement is a no-op");

    for (int layer : plan.target_layers) {
        HeadSelection sel = rank_heads(matrix, layer, config.k);
        const VectorXd s_sens = mean_scores(trace, layer, sel.sensitive);
        const VectorXd s_non = mean_scores(trace, layer, sel.non_sensitive);
        MaskSet masks = build_masks(s_sens, s_non, config.alpha);
        masks.layer = layer;
        if (!config.denoise) {
            // Table-6 ablation: zero the denoising mask, keep the one code path.
            std::fill(masks.den.begin(), masks.den.end(), std::uint8_t{0});
            masks.tau_non = std::numeric_limits<double>::quiet_NaN();
            masks.target = compose_target(masks.enh, masks.den);
        }

        LayerIntervention li;
        li.layer = layer;
        li.target_mask = masks.target;
        li.beta = config.beta;
        if (config.scope == Scope::SensitiveOnly) li.heads = sel.sensitive;
        plan.intervention.layers.push_back(std::move(li));
        plan.selections.push_back(std::move(sel));
        plan.masks.push_back(std::move(masks));
    }
    return plan;
}

}  // namespace attnsteer
