// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "attnsteer/common.hpp"
#include "attnsteer/model.hpp"

namespace attnsteer {

inline constexpr double kArsDenominatorEps = 1e-12;

// Two inputs differing only in the action verb, sharing image tokens.
struct ContrastivePair {
    std::string pair_id;
    std::vector<int> tokens_original;
    std::vector<int> tokens_contrastive;
    TokenLayout layout = TokenLayout::image_prefix(1, 1);
    std::string verb_original;
    std::string verb_contrastive;

    void validate() const {
        if (tokens_original.size() != tokens_contrastive.size())
            throw input_error("contrastive pair " + pair_id + ": sequences differ in length");
        if (static_cast<int>(tokens_original.size()) != layout.total())
            throw input_error("contrastive pair " + pair_id + ": layout does not cover the sequence");
        for (int i : layout.image_indices())
            if (tokens_original[i] != tokens_contrastive[i])
                throw input_error("contrastive pair " + pair_id + ": image tokens differ");
    }
};

// Sensitivity of one head: normalized distance between its image-attention
// vectors under the original and verb-swapped inputs. For single-row inputs
// the Frobenius norm is the Euclidean norm. Result lies in [0, 2].
inline double ars_score(const VectorXd& a, const VectorXd& a_hat) {
    if (a.size() != a_hat.size()) throw input_error("ars_score: length mismatch");
    const double denom = 0.5 * (a.norm() + a_hat.norm());
    if (denom <= kArsDenominatorEps)
        throw degenerate_error("ars_score: both attention vectors are numerically zero");
    return (a - a_hat).norm() / denom;
}

struct ARSMatrix {
    MatrixXd scores;  // L x H
    int pair_count = 0;
    int skipped_pairs = 0;
    static constexpr const char* aggregation = "mean-over-pairs";

    int num_layers() const { return static_cast<int>(scores.rows()); }
    int num_heads() const { return static_cast<int>(scores.cols()); }
};

// Streaming mean of per-pair score grids. Pairs must be fed in a fixed order
// (sort by pair_id) so the float reassociation is reproducible.
class ArsAccumulator {
  public:
    ArsAccumulator(int num_layers, int num_heads)
        : sum_(MatrixXd::Zero(num_layers, num_heads)) {}

    // Scores for one pair from per-head attention rows; throws degenerate_error
    // if any head has a vanishing denominator.
    void add_pair(const std::function<void(int, int, VectorXd&, VectorXd&)>& fetch) {
        MatrixXd pair_scores(sum_.rows(), sum_.cols());
        VectorXd a, a_hat;
        for (int l = 0; l < sum_.rows(); ++l)
            for (int h = 0; h < sum_.cols(); ++h) {
                fetch(l, h, a, a_hat);
                pair_scores(l, h) = ars_score(a, a_hat);
            }
        sum_ += pair_scores;
        ++used_;
    }

    void skip_pair() { ++skipped_; }

    ARSMatrix finalize() const {
        if (used_ == 0) throw input_error("ars matrix: every pair was degenerate or the dataset was empty");
        ARSMatrix m;
        m.scores = sum_ / used_;
        m.pair_count = used_;
        m.skipped_pairs = skipped_;
        return m;
    }

  private:
    MatrixXd sum_;
    int used_ = 0;
    int skipped_ = 0;
};

// Dataset-level ARS: forward both sequences of every pair without
// intervention, score each head, average elementwise over pairs. Degenerate
// pairs are skipped and counted; an all-degenerate dataset is an error.
// Forwards run in parallel (bounded by ATTNSTEER_THREADS); the reduction is
// sequential in pair_id order, so results do not depend on the worker count.
inline ARSMatrix ars_matrix(const Model& model, const std::vector<ContrastivePair>& pairs) {
    if (pairs.empty()) throw input_error("ars matrix: empty dataset");
    const int L = model.config().num_layers;
    const int H = model.config().num_heads;

    std::vector<int> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return pairs[i].pair_id < pairs[j].pair_id; });

    std::vector<std::pair<ForwardTrace, ForwardTrace>> traces(pairs.size());
    parallel_for(static_cast<int>(pairs.size()), [&](int i) {
        const ContrastivePair& p = pairs[order[i]];
        p.validate();
        traces[i].first = model.forward(p.tokens_original, p.layout);
        traces[i].second = model.forward(p.tokens_contrastive, p.layout);
    });

    ArsAccumulator acc(L, H);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        try {
            acc.add_pair([&](int l, int h, VectorXd& a, VectorXd& a_hat) {
                a = traces[i].first.at(l, h).image_row;
                a_hat = traces[i].second.at(l, h).image_row;
            });
        } catch (const degenerate_error&) {
            acc.skip_pair();
        }
    }
    return acc.finalize();
}

// Top-K / bottom-K heads of one layer. Ordering is a single descending rank
// by (score, then lower head index); the non-sensitive set is the tail of
// that rank, which keeps the two sets disjoint even under ties.
struct HeadSelection {
    int layer = 0;
    std::vector<int> sensitive;      // most sensitive first
    std::vector<int> non_sensitive;  // least sensitive first
    int k = 0;
};

inline HeadSelection rank_heads(const ARSMatrix& matrix, int layer, int k) {
    const int H = matrix.num_heads();
    if (layer < 0 || layer >= matrix.num_layers()) throw index_error("rank_heads: layer out of range");
    if (k <= 0 || 2 * k > H) throw input_error("rank_heads: requires 1 <= 2K <= num_heads");

    std::vector<int> order(H);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double sa = matrix.scores(layer, a), sb = matrix.scores(layer, b);
        if (sa != sb) return sa > sb;
        return a < b;
    });

    HeadSelection sel;
    sel.layer = layer;
    sel.k = k;
    sel.sensitive.assign(order.begin(), order.begin() + k);
    sel.non_sensitive.assign(order.rbegin(), order.rbegin() + k);
    return sel;
}

// Mean ARS per layer; used to pick enhancement target layers.
inline std::vector<double> layer_profile(const ARSMatrix& matrix) {
    std::vector<double> profile(matrix.num_layers());
    for (int l = 0; l < matrix.num_layers(); ++l) profile[l] = matrix.scores.row(l).mean();
    return profile;
}

}  // namespace attnsteer
