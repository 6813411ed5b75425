#include <gtest/gtest.h>

#include <cmath>

#include "retrobm25/analytics.hpp"
#include "retrobm25/random.hpp"

using namespace retrobm25;

namespace {

double textbook_pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
    }
    const double mx = sx / n, my = sy / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> brute_ranks(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double less = 0, equal = 0;
        for (double w : v) {
            less += w < v[i] ? 1 : 0;
            equal += w == v[i] ? 1 : 0;
        }
        r[i] = less + (equal + 1) / 2.0;
    }
    return r;
}

TEST(UnigramOverlap, Examples) {
    std::vector<TokenId> q{2, 3, 4, 5, kPad};
    std::vector<TokenId> copy{9, 2, 3, 4, 5, 7};
    EXPECT_EQ(unigram_overlap(q, copy), 1.0);
    std::vector<TokenId> disjoint{10, 11, kPad};
    EXPECT_EQ(unigram_overlap(q, disjoint), 0.0);
    std::vector<TokenId> half{3, 5, 99, 3};
    EXPECT_EQ(unigram_overlap(q, half), 0.5);
    EXPECT_DOUBLE_EQ(unigram_overlap(q, half, OverlapMetric::jaccard), 2.0 / 5.0);
    std::vector<TokenId> pad{kPad, kPad};
    EXPECT_THROW(unigram_overlap(pad, copy), Error);
}

TEST(Pearson, AffineAndNegation) {
    std::vector<double> x{1, 2, 3, 5, 8};
    std::vector<double> y, z;
    for (double v : x) {
        y.push_back(2 * v + 1);
        z.push_back(-v);
    }
    EXPECT_NEAR(pearson(x, y), 1.0, 1e-15);
    EXPECT_NEAR(pearson(x, z), -1.0, 1e-15);
}

TEST(Pearson, Errors) {
    std::vector<double> x{1, 2, 3}, c{4, 4, 4}, shortv{1, 2};
    try {
        pearson(x, c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::zero_variance);
    }
    EXPECT_THROW(pearson(shortv, shortv), Error);
    EXPECT_THROW(pearson(x, shortv), Error);
}

TEST(Pearson, MatchesTextbookOracle) {
    Rng rng(1);
    std::vector<double> x(100), y(100);
    for (std::size_t i = 0; i < 100; ++i) {
        x[i] = rng.normal();
        y[i] = 0.5 * x[i] + rng.normal();
    }
    EXPECT_NEAR(pearson(x, y), textbook_pearson(x, y), 1e-12);
}

TEST(Spearman, TieRanks) {
    std::vector<double> x{1, 2, 2, 3};
    EXPECT_EQ(average_ranks(x), (std::vector<double>{1, 2.5, 2.5, 4}));
}

TEST(Spearman, MonotoneTransformGivesOne) {
    std::vector<double> x{0.3, -1, 4, 2.5, 9};
    std::vector<double> y;
    for (double v : x) y.push_back(std::exp(v));
    EXPECT_NEAR(spearman(x, y), 1.0, 1e-15);
}

TEST(Spearman, MatchesBruteForceWithTies) {
    Rng rng(2);
    std::vector<double> x(100), y(100);
    for (std::size_t i = 0; i < 100; ++i) {
        x[i] = static_cast<double>(rng.below(10));
        y[i] = static_cast<double>(rng.below(7)) + 0.1 * x[i];
    }
    EXPECT_NEAR(spearman(x, y), textbook_pearson(brute_ranks(x), brute_ranks(y)), 1e-12);
}

TEST(Bpb, ReferenceRows) {
    EXPECT_NEAR(bpb(std::log(21.44)), 1.142, 1e-3);
    EXPECT_NEAR(bpb(std::log(12.55)), 0.943, 1e-3);
    EXPECT_EQ(bpb(0.0), 0.0);
    EXPECT_DOUBLE_EQ(bpb(2.0, BpbConfig{0.5}), 1.0 / std::log(2.0));
}

TEST(ReductionFraction, Examples) {
    EXPECT_NEAR(reduction_fraction(21.44, 15.30), 0.286, 1e-3);
    EXPECT_EQ(reduction_fraction(7.0, 7.0), 0.0);
    EXPECT_NEAR(reduction_fraction(10, 12), -0.2, 1e-15);
}

TEST(RerankGain, Examples) {
    EXPECT_NEAR(rerank_gain_fraction(15.30, 14.62, 12.55), 0.247, 1e-3);
    EXPECT_EQ(rerank_gain_fraction(15.0, 15.0, 12.0), 0.0);
    EXPECT_EQ(rerank_gain_fraction(15.0, 12.0, 12.0), 1.0);
    try {
        rerank_gain_fraction(12.0, 13.0, 12.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::degenerate);
    }
}

EvalRecord record(double on, double off, double l2, double ov) {
    EvalRecord r;
    r.sequence_id = "s";
    r.chunk_index = 2;
    r.ppl_on = on;
    r.ppl_off = off;
    r.neg_sq_l2 = l2;
    r.overlap = ov;
    return r;
}

TEST(CorrelationStudy, ShapeAndPlantedOrder) {
    std::vector<EvalRecord> recs;
    for (int i = 0; i < 10; ++i) {
        double ov = 0.1 * i;
        recs.push_back(record(20.0 - ov * ov, 20.0, -static_cast<double>((i * 7) % 10), ov));
    }
    auto rep = correlation_study(recs);
    ASSERT_EQ(rep.rows.size(), 3u);
    EXPECT_EQ(rep.rows[0].x, "neg_sq_l2");
    EXPECT_EQ(rep.rows[0].y, "delta_ppl");
    EXPECT_EQ(rep.rows[1].x, "overlap");
    EXPECT_EQ(rep.rows[2].y, "overlap");
    EXPECT_NEAR(rep.rows[1].spearman, 1.0, 1e-15);
    for (const auto& r : rep.rows) {
        EXPECT_EQ(r.n, 10u);
        EXPECT_LE(std::abs(r.spearman), 1.0);
        EXPECT_LE(std::abs(r.pearson), 1.0);
    }
    EXPECT_EQ(rep.to_tsv().substr(0, 25), "X\tY\tspearman\tpearson\tn\nne");
}

TEST(CorrelationStudy, ColumnwiseOracles) {
    Rng rng(3);
    std::vector<EvalRecord> recs;
    std::vector<double> l2, delta, ov;
    for (int i = 0; i < 50; ++i) {
        double o = rng.uniform();
        double d = -rng.uniform() * 4;
        double on = 30 - 5 * o + rng.normal();
        recs.push_back(record(on, 30, d, o));
        l2.push_back(d);
        delta.push_back(30 - on);
        ov.push_back(o);
    }
    auto rep = correlation_study(recs);
    EXPECT_NEAR(rep.rows[0].pearson, pearson(l2, delta), 1e-15);
    EXPECT_NEAR(rep.rows[1].spearman, spearman(ov, delta), 1e-15);
    EXPECT_NEAR(rep.rows[2].pearson, pearson(l2, ov), 1e-15);
}

TEST(CorrelationStudy, TooFewRecordsThrows) {
    std::vector<EvalRecord> recs{record(1, 2, -1, 0.5), record(2, 3, -2, 0.4)};
    EXPECT_THROW(correlation_study(recs), Error);
}

TEST(SummarizePpl, RowsAndFractions) {
    std::vector<std::pair<std::string, double>> rows{{"off", 21.44}, {"dense", 15.30}, {"rerank", 14.62}, {"bm25", 12.55}};
    auto s = summarize_ppl(rows);
    ASSERT_EQ(s.rows.size(), 4u);
    const double bpbs[] = {1.142, 1.017, 1.000, 0.943};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(s.rows[i].bpb, bpbs[i], 1e-3);
        EXPECT_NEAR(s.rows[i].bpb, bpb(std::log(s.rows[i].ppl)), 1e-6);
    }
    EXPECT_NEAR(*s.dense_vs_off, 0.286, 1e-3);
    EXPECT_NEAR(*s.rerank_gain, 0.247, 1e-3);
}

}  // namespace
