// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "attnsteer/model.hpp"

namespace attnsteer {

// Modality-imbalance report. The number ratios are kept as exact integer
// counts so r_num_t + r_num_v = 1 holds in rational arithmetic; the double
// accessors divide on demand.
struct RatioReport {
    std::vector<double> r_att_t;  // per layer
    std::vector<double> r_att_v;  // per layer
    int num_text = 0;
    int num_image = 0;

    int total() const { return num_text + num_image; }
    double r_num_t() const { return static_cast<double>(num_text) / total(); }
    double r_num_v() const { return static_cast<double>(num_image) / total(); }
};

// Arithmetic mean over heads of the last token's full attention rows.
inline VectorXd head_average(const ForwardTrace& trace, int layer) {
    if (layer < 0 || layer >= trace.num_layers) throw index_error("head_average: layer out of range");
    VectorXd mean = trace.at(layer, 0).full_row;
    for (int h = 1; h < trace.num_heads; ++h) mean += trace.at(layer, h).full_row;
    return mean / trace.num_heads;
}

// Attention allocation ratios per layer plus the layout's number ratios.
// Denominators are computed from the rows rather than assumed to be 1.
inline RatioReport attention_ratios(const ForwardTrace& trace, const TokenLayout& layout) {
    RatioReport report;
    report.num_text = layout.num_text();
    report.num_image = layout.num_image();
    report.r_att_t.reserve(trace.num_layers);
    report.r_att_v.reserve(trace.num_layers);
    for (int l = 0; l < trace.num_layers; ++l) {
        const VectorXd mean = head_average(trace, l);
        if (mean.size() != layout.total())
            throw input_error("attention_ratios: trace and layout disagree on sequence length");
        double text_mass = 0.0, image_mass = 0.0;
        for (int i : layout.text_indices()) text_mass += mean[i];
        for (int i : layout.image_indices()) image_mass += mean[i];
        const double denom = mean.sum();
        report.r_att_t.push_back(text_mass / denom);
        report.r_att_v.push_back(image_mass / denom);
    }
    return report;
}

// One row of the log-space attention export.
struct LogAttentionRow {
    int layer = 0;
    int position = 0;
    bool is_image = false;
    double weight = 0.0;
    double log10_weight = 0.0;
};

inline constexpr double kLogClamp = 1e-12;

// Head-averaged per-position weights in log10 space, clamped at 1e-12 so
// hard-masked zeros stay plottable.
inline std::vector<LogAttentionRow> log_attention_summary(const ForwardTrace& trace,
                                                          const TokenLayout& layout) {
    std::vector<LogAttentionRow> rows;
    rows.reserve(static_cast<std::size_t>(trace.num_layers) * layout.total());
    std::vector<bool> image_at(layout.total(), false);
    for (int i : layout.image_indices()) image_at[i] = true;
    for (int l = 0; l < trace.num_layers; ++l) {
        const VectorXd mean = head_average(trace, l);
        for (int i = 0; i < layout.total(); ++i) {
            LogAttentionRow row;
            row.layer = l;
            row.position = i;
            row.is_image = image_at[i];
            row.weight = mean[i];
            row.log10_weight = std::log10(std::max(mean[i], kLogClamp));
            rows.push_back(row);
        }
    }
    return rows;
}

// Per-layer gap between mean text and mean image log10 weights.
inline std::vector<double> log_gap_per_layer(const std::vector<LogAttentionRow>& rows,
                                             int num_layers) {
    std::vector<double> text_sum(num_layers, 0.0), image_sum(num_layers, 0.0);
    std::vector<int> text_n(num_layers, 0), image_n(num_layers, 0);
    for (const auto& r : rows) {
        if (r.is_image) {
            image_sum[r.layer] += r.log10_weight;
            ++image_n[r.layer];
        } else {
            text_sum[r.layer] += r.log10_weight;
            ++text_n[r.layer];
        }
    }
    std::vector<double> gap(num_layers, 0.0);
    for (int l = 0; l < num_layers; ++l)
        gap[l] = text_sum[l] / text_n[l] - image_sum[l] / image_n[l];
    return gap;
}

}  // namespace attnsteer
