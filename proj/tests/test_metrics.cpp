// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "attnsteer/metrics.hpp"
#include "test_util.hpp"

using namespace attnsteer;

namespace {

// Trace filled directly with synthetic rows; metrics only read the rows.
ForwardTrace synthetic_trace(const std::vector<std::vector<Eigen::VectorXd>>& rows, int num_image) {
    ForwardTrace trace;
    trace.num_layers = static_cast<int>(rows.size());
    trace.num_heads = static_cast<int>(rows[0].size());
    for (const auto& layer : rows)
        for (const auto& row : layer) {
            HeadTrace ht;
            ht.full_row = row;
            ht.image_row.resize(num_image);
            for (int j = 0; j < num_image; ++j) ht.image_row[j] = row[j];
            ht.image_scores = Eigen::VectorXd::Zero(num_image);
            ht.image_scores_raw = ht.image_scores;
            trace.heads.push_back(std::move(ht));
        }
    return trace;
}

Eigen::VectorXd one_hot(int n, int i) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
    v[i] = 1.0;
    return v;
}

}  // namespace

TEST_CASE("head_average basics") {
    const int n = 4;
    Eigen::VectorXd u = Eigen::VectorXd::Constant(n, 0.25);

    SECTION("identical heads average to themselves") {
        const auto trace = synthetic_trace({{u, u, u}}, 2);
        CHECK(test_util::vec_equal(head_average(trace, 0), u));
    }
    SECTION("two opposite one-hot heads average to a coin flip") {
        Eigen::VectorXd a(2), b(2);
        a << 1.0, 0.0;
        b << 0.0, 1.0;
        const auto trace = synthetic_trace({{a, b}}, 1);
        const auto mean = head_average(trace, 0);
        CHECK(mean[0] == 0.5);
        CHECK(mean[1] == 0.5);
    }
    SECTION("mean of distributions is a distribution") {
        Eigen::VectorXd a(3), b(3);
        a << 0.2, 0.3, 0.5;
        b << 0.6, 0.1, 0.3;
        const auto trace = synthetic_trace({{a, b}}, 2);
        CHECK_THAT(head_average(trace, 0).sum(), Catch::Matchers::WithinAbs(1.0, 1e-15));
    }
    SECTION("layer bounds") {
        const auto trace = synthetic_trace({{u}}, 2);
        CHECK_THROWS_AS(head_average(trace, 1), index_error);
    }
}

TEST_CASE("attention_ratios") {
    SECTION("uniform weights reduce ratios to counting") {
        const int ni = 6, nt = 4;
        const auto layout = TokenLayout::image_prefix(ni, nt);
        Eigen::VectorXd u = Eigen::VectorXd::Constant(ni + nt, 1.0 / (ni + nt));
        const auto trace = synthetic_trace({{u, u}}, ni);
        const auto report = attention_ratios(trace, layout);
        CHECK_THAT(report.r_att_v[0], Catch::Matchers::WithinAbs(double(ni) / (ni + nt), 1e-12));
        CHECK_THAT(report.r_att_t[0], Catch::Matchers::WithinAbs(double(nt) / (ni + nt), 1e-12));
    }
    SECTION("all mass on one text position") {
        const auto layout = TokenLayout::image_prefix(3, 2);
        const auto trace = synthetic_trace({{one_hot(5, 4)}}, 3);
        const auto report = attention_ratios(trace, layout);
        CHECK(report.r_att_t[0] == 1.0);
        CHECK(report.r_att_v[0] == 0.0);
    }
    SECTION("number ratios match the Figure-3 layout") {
        const auto layout = TokenLayout::image_prefix(576, 80);
        const auto trace = synthetic_trace({{one_hot(656, 0)}}, 576);
        const auto report = attention_ratios(trace, layout);
        CHECK_THAT(report.r_num_v(), Catch::Matchers::WithinAbs(0.878, 1e-3));
        CHECK(report.num_text + report.num_image == 656);
    }
}

TEST_CASE("ratio partition identity on random traces") {
    Rng rng(404);
    for (int trial = 0; trial < 50; ++trial) {
        const int ni = 1 + static_cast<int>(rng.uniform_int(12));
        const int nt = 1 + static_cast<int>(rng.uniform_int(12));
        const int n = ni + nt;
        std::vector<std::vector<Eigen::VectorXd>> rows(2);
        for (auto& layer : rows)
            for (int h = 0; h < 3; ++h) {
                Eigen::VectorXd row(n);
                for (int i = 0; i < n; ++i) row[i] = rng.uniform() + 1e-9;
                layer.push_back(row / row.sum());
            }
        const auto layout = TokenLayout::image_prefix(ni, nt);
        const auto report = attention_ratios(synthetic_trace(rows, ni), layout);
        for (int l = 0; l < 2; ++l)
            CHECK_THAT(report.r_att_t[l] + report.r_att_v[l], Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
}

TEST_CASE("image ratio is invariant under image-position permutation") {
    Rng rng(77);
    const int ni = 5, nt = 3, n = ni + nt;
    Eigen::VectorXd row(n);
    for (int i = 0; i < n; ++i) row[i] = rng.uniform() + 0.01;
    row /= row.sum();

    const auto base_layout = TokenLayout::image_prefix(ni, nt);
    const auto base = attention_ratios(synthetic_trace({{row}}, ni), base_layout);

    // Swap two image positions in both the row and the layout.
    Eigen::VectorXd permuted = row;
    std::swap(permuted[1], permuted[3]);
    const auto perm = attention_ratios(synthetic_trace({{permuted}}, ni), base_layout);
    CHECK_THAT(perm.r_att_v[0], Catch::Matchers::WithinAbs(base.r_att_v[0], 1e-15));
}

TEST_CASE("log attention summary") {
    const auto layout = TokenLayout::image_prefix(2, 2);
    Eigen::VectorXd row(4);
    row << 0.01, 0.0, 0.09, 0.9;
    const auto rows = log_attention_summary(synthetic_trace({{row}}, 2), layout);
    REQUIRE(rows.size() == 4);
    CHECK_THAT(rows[0].log10_weight, Catch::Matchers::WithinAbs(-2.0, 1e-12));
    CHECK_THAT(rows[1].log10_weight, Catch::Matchers::WithinAbs(-12.0, 1e-12));
    CHECK(rows[0].is_image);
    CHECK_FALSE(rows[3].is_image);

    // Text/image mean gap recomputed from the emitted rows.
    const auto gap = log_gap_per_layer(rows, 1);
    const double text_mean = (std::log10(0.09) + std::log10(0.9)) / 2.0;
    const double image_mean = (std::log10(0.01) + -12.0) / 2.0;
    CHECK_THAT(gap[0], Catch::Matchers::WithinAbs(text_mean - image_mean, 1e-12));
}
