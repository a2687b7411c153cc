// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "attnsteer/common.hpp"

namespace attnsteer {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct ModelConfig {
    int num_layers = 2;
    int num_heads = 4;
    int embed_dim = 32;
    int vocab_size = 64;
    int max_seq_len = 64;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_layers <= 0 || num_heads <= 0 || embed_dim <= 0 || vocab_size <= 0)
            throw config_error("model config: all dimensions must be positive");
        if (embed_dim % num_heads != 0)
            throw config_error("model config: embed_dim must be divisible by num_heads");
        if (max_seq_len < 2) throw config_error("model config: max_seq_len must be >= 2");
    }
    int head_dim() const { return embed_dim / num_heads; }
};

// Partition of sequence positions into text and image index sets.
class TokenLayout {
  public:
    TokenLayout(std::vector<int> text_indices, std::vector<int> image_indices)
        : text_(std::move(text_indices)), image_(std::move(image_indices)) {
        const int n = static_cast<int>(text_.size() + image_.size());
        if (text_.empty() || image_.empty())
            throw input_error("token layout: both text and image sets must be nonempty");
        std::vector<bool> seen(n, false);
        for (int i : text_) mark(seen, i, n);
        for (int i : image_) mark(seen, i, n);
        // Disjointness plus full coverage follows from n positions each seen once.
    }

    // The standard layout used by pair files: image tokens first, text after.
    static TokenLayout image_prefix(int num_image, int num_text) {
        std::vector<int> img(num_image), txt(num_text);
        for (int i = 0; i < num_image; ++i) img[i] = i;
        for (int i = 0; i < num_text; ++i) txt[i] = num_image + i;
        return TokenLayout(std::move(txt), std::move(img));
    }

    const std::vector<int>& text_indices() const { return text_; }
    const std::vector<int>& image_indices() const { return image_; }
    int num_text() const { return static_cast<int>(text_.size()); }
    int num_image() const { return static_cast<int>(image_.size()); }
    int total() const { return num_text() + num_image(); }

    bool operator==(const TokenLayout&) const = default;

  private:
    static void mark(std::vector<bool>& seen, int i, int n) {
        if (i < 0 || i >= n) throw input_error("token layout: position out of range");
        if (seen[i]) throw input_error("token layout: position listed twice");
        seen[i] = true;
    }
    std::vector<int> text_;
    std::vector<int> image_;
};

// Score enhancement for one layer: applied to the last token's image-position
// scores before softmax, for the heads in scope (all heads when unset).
struct LayerIntervention {
    int layer = 0;
    std::vector<std::uint8_t> target_mask;
    double beta = 1.0;
    std::optional<std::vector<int>> heads;
};

struct Intervention {
    std::vector<LayerIntervention> layers;
    // Ablation switch: heads whose last-row attention is zeroed after softmax.
    std::vector<std::pair<int, int>> masked_heads;
};

// Per-head record of the last token's attention.
struct HeadTrace {
    VectorXd full_row;          // post-softmax over all N positions
    VectorXd image_row;         // full_row restricted to image positions
    VectorXd image_scores;      // pre-softmax image scores (post-enhancement)
    VectorXd image_scores_raw;  // pre-softmax image scores before enhancement
};

struct ForwardTrace {
    int num_layers = 0;
    int num_heads = 0;
    std::vector<HeadTrace> heads;  // indexed layer * num_heads + head
    VectorXd logits;
    std::chrono::duration<double> elapsed{0.0};

    const HeadTrace& at(int layer, int head) const {
        if (layer < 0 || layer >= num_layers || head < 0 || head >= num_heads)
            throw index_error("trace: layer/head index out of range");
        return heads[static_cast<std::size_t>(layer) * num_heads + head];
    }
};

// Equality of everything the forward computes; elapsed is timing metadata
// and takes no part in determinism claims.
inline bool bit_identical(const ForwardTrace& a, const ForwardTrace& b) {
    if (a.num_layers != b.num_layers || a.num_heads != b.num_heads) return false;
    if (a.logits.size() != b.logits.size()) return false;
    for (Eigen::Index i = 0; i < a.logits.size(); ++i)
        if (a.logits[i] != b.logits[i]) return false;
    for (std::size_t k = 0; k < a.heads.size(); ++k) {
        const auto& x = a.heads[k];
        const auto& y = b.heads[k];
        auto eq = [](const VectorXd& u, const VectorXd& v) {
            if (u.size() != v.size()) return false;
            for (Eigen::Index i = 0; i < u.size(); ++i)
                if (u[i] != v[i]) return false;
            return true;
        };
        if (!eq(x.full_row, y.full_row) || !eq(x.image_row, y.image_row) ||
            !eq(x.image_scores, y.image_scores) || !eq(x.image_scores_raw, y.image_scores_raw))
            return false;
    }
    return true;
}

// Optional activation capture used by the synthetic-planting harness.
struct ProbeCapture {
    int layer = -1;           // which layer's normalized attention input to record
    MatrixXd attn_input;      // N x d, LayerNorm output feeding that layer's QKV
    VectorXd final_hidden;    // final-LayerNorm output of the last position
};

// Sparse weight edits; Model::patched applies them to a copy.
struct WeightPatch {
    struct HeadQK {
        int layer = 0;
        int head = 0;
        MatrixXd wq_block;  // head_dim x d
        MatrixXd wk_block;  // head_dim x d
    };
    std::vector<HeadQK> qk;
    std::vector<std::pair<int, VectorXd>> unembed_cols;  // token id -> column of W_out
    std::vector<std::pair<int, VectorXd>> embed_rows;    // token id -> embedding row
};

// Deterministic, seedable toy decoder. Weights are untrained: they are drawn
// from mt19937_64(seed) as Xavier-uniform values in a fixed fill order, so
// identical configs produce bit-identical models. Immutable after
// construction; forward allocates per-call state only.
class Model {
  public:
    explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(cfg_.seed, 0x6d6f64656cULL));
        const int d = cfg_.embed_dim;
        tok_emb_ = draw(rng, cfg_.vocab_size, d, 0.5);
        pos_emb_ = draw(rng, cfg_.max_seq_len, d, 0.5);
        layers_.resize(cfg_.num_layers);
        for (auto& layer : layers_) {
            layer.wq = xavier(rng, d, d);
            layer.wk = xavier(rng, d, d);
            layer.wv = xavier(rng, d, d);
            layer.wo = xavier(rng, d, d);
            layer.w1 = xavier(rng, d, 4 * d);
            layer.w2 = xavier(rng, 4 * d, d);
        }
        w_out_ = xavier(rng, d, cfg_.vocab_size);
    }

    const ModelConfig& config() const { return cfg_; }

    Model patched(const WeightPatch& patch) const {
        Model m = *this;
        const int d = cfg_.embed_dim;
        const int hd = cfg_.head_dim();
        for (const auto& p : patch.qk) {
            if (p.layer < 0 || p.layer >= cfg_.num_layers || p.head < 0 || p.head >= cfg_.num_heads)
                throw index_error("weight patch: layer/head out of range");
            if (p.wq_block.rows() != hd || p.wq_block.cols() != d || p.wk_block.rows() != hd ||
                p.wk_block.cols() != d)
                throw input_error("weight patch: q/k block shape mismatch");
            // Weight layout: row i of W maps input dim i, columns are output
            // dims; head h owns output columns [h*hd, (h+1)*hd).
            m.layers_[p.layer].wq.middleCols(p.head * hd, hd) = p.wq_block.transpose();
            m.layers_[p.layer].wk.middleCols(p.head * hd, hd) = p.wk_block.transpose();
        }
        for (const auto& [tok, col] : patch.unembed_cols) {
            if (tok < 0 || tok >= cfg_.vocab_size) throw index_error("weight patch: token id out of range");
            if (col.size() != d) throw input_error("weight patch: unembed column size mismatch");
            m.w_out_.col(tok) = col;
        }
        for (const auto& [tok, row] : patch.embed_rows) {
            if (tok < 0 || tok >= cfg_.vocab_size) throw index_error("weight patch: token id out of range");
            if (row.size() != d) throw input_error("weight patch: embedding row size mismatch");
            m.tok_emb_.row(tok) = row.transpose();
        }
        return m;
    }

    // FNV-1a over the raw weight bytes, for determinism checks.
    std::uint64_t weight_checksum() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto mix = [&h](const MatrixXd& m) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
            const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(double);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= bytes[i];
                h *= 1099511628211ULL;
            }
        };
        mix(tok_emb_);
        mix(pos_emb_);
        for (const auto& layer : layers_) {
            mix(layer.wq);
            mix(layer.wk);
            mix(layer.wv);
            mix(layer.wo);
            mix(layer.w1);
            mix(layer.w2);
        }
        mix(w_out_);
        return h;
    }

    // Single-step causal forward. Records the last token's attention rows for
    // every (layer, head). An intervention rewrites the last row's image
    // scores per the enhancement rule before softmax; masked heads get their
    // last attention row zeroed after softmax. Only the last position's
    // downstream state is affected by either, so earlier positions match the
    // vanilla computation exactly.
    ForwardTrace forward(std::span<const int> tokens, const TokenLayout& layout,
                         const Intervention* intervention = nullptr,
                         ProbeCapture* probe = nullptr) const {
        const auto t0 = std::chrono::steady_clock::now();
        const int n = static_cast<int>(tokens.size());
        const int d = cfg_.embed_dim;
        const int hd = cfg_.head_dim();
        const int H = cfg_.num_heads;
        const int L = cfg_.num_layers;
        if (n != layout.total()) throw input_error("forward: token count does not match layout");
        if (n < 1 || n > cfg_.max_seq_len) throw input_error("forward: sequence length out of range");
        for (int t : tokens)
            if (t < 0 || t >= cfg_.vocab_size) throw input_error("forward: token id out of vocab range");
        validate_intervention(intervention, layout);

        const auto& image_idx = layout.image_indices();
        const int ni = layout.num_image();

        MatrixXd x(n, d);
        for (int i = 0; i < n; ++i) x.row(i) = tok_emb_.row(tokens[i]) + pos_emb_.row(i);

        ForwardTrace trace;
        trace.num_layers = L;
        trace.num_heads = H;
        trace.heads.resize(static_cast<std::size_t>(L) * H);

        MatrixXd z(n, d), q(n, d), k(n, d), v(n, d), ctx(n, d);
        MatrixXd scores;  // per-head N x N scratch, reused
        for (int l = 0; l < L; ++l) {
            const auto& layer = layers_[l];
            layer_norm(x, z);
            if (probe && probe->layer == l) probe->attn_input = z;
            q.noalias() = z * layer.wq;
            k.noalias() = z * layer.wk;
            v.noalias() = z * layer.wv;
            const LayerIntervention* li = find_layer(intervention, l);

            const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
            for (int h = 0; h < H; ++h) {
                auto qh = q.middleCols(h * hd, hd);
                auto kh = k.middleCols(h * hd, hd);
                scores.noalias() = qh * kh.transpose() * inv_scale;

                HeadTrace& ht = trace.heads[static_cast<std::size_t>(l) * H + h];
                ht.image_scores_raw.resize(ni);
                for (int j = 0; j < ni; ++j) ht.image_scores_raw[j] = scores(n - 1, image_idx[j]);
                ht.image_scores = ht.image_scores_raw;

                if (li && head_in_scope(*li, h)) {
                    for (int j = 0; j < ni; ++j) {
                        if (li->target_mask[j] && li->beta != 0.0) {
                            const double s = ht.image_scores_raw[j];
                            const double boosted = s + li->beta * std::abs(s);
                            ht.image_scores[j] = boosted;
                            scores(n - 1, image_idx[j]) = boosted;
                        }
                    }
                }

                // Causal softmax, row by row over the admissible prefix.
                for (int i = 0; i < n; ++i) {
                    auto row = scores.row(i).head(i + 1);
                    const double mx = row.maxCoeff();
                    row = (row.array() - mx).exp();
                    row /= row.sum();
                    if (i + 1 < n) scores.row(i).tail(n - i - 1).setZero();
                }
                if (is_masked(intervention, l, h)) scores.row(n - 1).setZero();

                ht.full_row = scores.row(n - 1).transpose();
                ht.image_row.resize(ni);
                for (int j = 0; j < ni; ++j) ht.image_row[j] = ht.full_row[image_idx[j]];

                ctx.middleCols(h * hd, hd).noalias() = scores * v.middleCols(h * hd, hd);
            }
            x.noalias() += ctx * layer.wo;

            layer_norm(x, z);
            MatrixXd hidden = (z * layer.w1).cwiseMax(0.0);
            x.noalias() += hidden * layer.w2;
        }

        VectorXd z_final = norm_row(x.row(n - 1));
        if (probe) probe->final_hidden = z_final;
        trace.logits = w_out_.transpose() * z_final;
        trace.elapsed = std::chrono::steady_clock::now() - t0;
        return trace;
    }

  private:
    struct Layer {
        MatrixXd wq, wk, wv, wo, w1, w2;
    };

    static MatrixXd draw(Rng& rng, int rows, int cols, double scale) {
        MatrixXd m(rows, cols);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform(-scale, scale);
        return m;
    }
    static MatrixXd xavier(Rng& rng, int rows, int cols) {
        return draw(rng, rows, cols, std::sqrt(6.0 / (rows + cols)));
    }

    static void layer_norm(const MatrixXd& x, MatrixXd& out) {
        const VectorXd mean = x.rowwise().mean();
        out = x.colwise() - mean;
        const Eigen::ArrayXd inv =
            1.0 / (out.array().square().rowwise().mean() + 1e-5).sqrt();
        out.array().colwise() *= inv;
    }
    static VectorXd norm_row(const Eigen::RowVectorXd& row) {
        const double mean = row.mean();
        const double var = (row.array() - mean).square().mean();
        return ((row.array() - mean) / std::sqrt(var + 1e-5)).transpose();
    }

    void validate_intervention(const Intervention* iv, const TokenLayout& layout) const {
        if (!iv) return;
        for (const auto& li : iv->layers) {
            if (li.layer < 0 || li.layer >= cfg_.num_layers)
                throw index_error("intervention: layer out of range");
            if (static_cast<int>(li.target_mask.size()) != layout.num_image())
                throw input_error("intervention: target mask length must equal image token count");
            for (auto b : li.target_mask)
                if (b != 0 && b != 1) throw input_error("intervention: mask entries must be 0 or 1");
            if (li.beta < 0.0) throw input_error("intervention: beta must be nonnegative");
            if (li.heads)
                for (int h : *li.heads)
                    if (h < 0 || h >= cfg_.num_heads) throw index_error("intervention: head out of range");
        }
        for (const auto& [l, h] : iv->masked_heads)
            if (l < 0 || l >= cfg_.num_layers || h < 0 || h >= cfg_.num_heads)
                throw index_error("intervention: masked head out of range");
    }

    static const LayerIntervention* find_layer(const Intervention* iv, int l) {
        if (!iv) return nullptr;
        for (const auto& li : iv->layers)
            if (li.layer == l) return &li;
        return nullptr;
    }
    static bool head_in_scope(const LayerIntervention& li, int h) {
        if (!li.heads) return true;
        for (int s : *li.heads)
            if (s == h) return true;
        return false;
    }
    static bool is_masked(const Intervention* iv, int l, int h) {
        if (!iv) return false;
        for (const auto& [ml, mh] : iv->masked_heads)
            if (ml == l && mh == h) return true;
        return false;
    }

    ModelConfig cfg_;
    MatrixXd tok_emb_, pos_emb_, w_out_;
    std::vector<Layer> layers_;
};

// Reads one head's image attention and scores out of a trace; pure accessor.
inline std::pair<VectorXd, VectorXd> extract_image_attention(const ForwardTrace& trace, int layer,
                                                             int head) {
    const HeadTrace& ht = trace.at(layer, head);
    return {ht.image_row, ht.image_scores};
}

}  // namespace attnsteer
