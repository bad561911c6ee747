// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "razor/kv_cache.hpp"
#include "razor/rng.hpp"

using namespace razor;

namespace {

std::vector<double> random_vector(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

struct Rows {
    std::vector<std::vector<double>> keys;
    std::vector<std::vector<double>> values;
};

// Appends `n` random rows to `cache` and returns what was appended.
Rows fill(HeadKvCache<double>& cache, Rng& rng, std::size_t n) {
    Rows rows;
    for (std::size_t i = 0; i < n; ++i) {
        rows.keys.push_back(random_vector(rng, cache.dim()));
        rows.values.push_back(random_vector(rng, cache.dim()));
        cache.append(rows.keys.back(), rows.values.back());
    }
    return rows;
}

Rows kept_rows(const HeadKvCache<double>& cache) {
    Rows rows;
    for (std::size_t i = 0; i < cache.stored(); ++i) {
        rows.keys.emplace_back(cache.key(i).begin(), cache.key(i).end());
        rows.values.emplace_back(cache.value(i).begin(), cache.value(i).end());
    }
    return rows;
}

void expect_conserved(const HeadKvCache<double>& c) {
    EXPECT_EQ(c.comp().count + c.stored() + c.discarded(), c.total_seen());
}

}  // namespace

TEST(BufferLength, ThresholdDominates) {
    EXPECT_EQ(buffer_length(1000, HeadPolicy::compressed(4, 5.0, 4000)), 4000u);
}

TEST(BufferLength, RatioDominates) {
    EXPECT_EQ(buffer_length(30000, HeadPolicy::compressed(4, 5.0, 4000)), 6000u);
}

TEST(BufferLength, Boundary) {
    EXPECT_EQ(buffer_length(20000, HeadPolicy::compressed(4, 5.0, 4000)), 4000u);
    EXPECT_EQ(buffer_length(20001, HeadPolicy::compressed(4, 5.0, 4000)), 4001u);
}

TEST(BufferLength, NonIntegerRatioRoundsUp) {
    EXPECT_EQ(buffer_length(10, HeadPolicy::compressed(0, 2.5, 1)), 4u);
    EXPECT_EQ(buffer_length(11, HeadPolicy::compressed(0, 2.5, 1)), 5u);
}

TEST(BufferLength, RejectsOtherKinds) {
    EXPECT_THROW(buffer_length(10, HeadPolicy::retrieval()), std::invalid_argument);
    EXPECT_THROW(buffer_length(10, HeadPolicy::windowed(0, 4)), std::invalid_argument);
}

TEST(HeadPolicyType, Invariants) {
    EXPECT_THROW(HeadPolicy::compressed(4, 1.0, 100), std::invalid_argument);
    EXPECT_THROW(HeadPolicy::compressed(4, 5.0, 4), std::invalid_argument);
    EXPECT_NO_THROW(HeadPolicy::compressed(4, 5.0, 5));
    EXPECT_THROW(HeadPolicy::windowed(4, 0), std::invalid_argument);
    EXPECT_EQ(HeadPolicy::retrieval(), HeadPolicy::retrieval());
    EXPECT_NE(HeadPolicy::compressed(4, 5.0, 100), HeadPolicy::compressed(4, 5.0, 101));
}

TEST(Fold, SingleToken) {
    CompensationToken<double> c(3);
    const std::vector<double> k{1, 2, 3}, v{4, 5, 6};
    const auto out = fold_dropped<double>(c, k, v, 1);
    EXPECT_EQ(out.key, k);
    EXPECT_EQ(out.value, v);
    EXPECT_EQ(out.count, 1u);
    EXPECT_TRUE(c.inert());
}

TEST(Fold, TwoTokens) {
    CompensationToken<double> c(2);
    const std::vector<double> k{1, 2, 3, 6}, v{0, 0, 2, 2};
    const auto out = fold_dropped<double>(c, k, v, 2);
    EXPECT_DOUBLE_EQ(out.key[0], 2.0);
    EXPECT_DOUBLE_EQ(out.key[1], 4.0);
    EXPECT_DOUBLE_EQ(out.value[0], 1.0);
    EXPECT_EQ(out.count, 2u);
}

TEST(Fold, DimensionMismatch) {
    CompensationToken<double> c(3);
    EXPECT_THROW(c.fold(std::vector<double>(4), std::vector<double>(3), 1), std::invalid_argument);
}

TEST(Fold, IncrementalEqualsBatchMean) {
    Rng rng(41);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t dim = 1 + rng.below(16);
        const std::size_t n = 1 + rng.below(1000);
        std::vector<std::vector<double>> ks, vs;
        CompensationToken<double> c(dim);
        std::size_t done = 0;
        while (done < n) {
            const std::size_t chunk = std::min<std::size_t>(n - done, 1 + rng.below(7));
            std::vector<double> kb, vb;
            for (std::size_t r = 0; r < chunk; ++r) {
                ks.push_back(random_vector(rng, dim));
                vs.push_back(random_vector(rng, dim));
                kb.insert(kb.end(), ks.back().begin(), ks.back().end());
                vb.insert(vb.end(), vs.back().begin(), vs.back().end());
            }
            c.fold(kb, vb, chunk);
            done += chunk;
        }
        const auto km = oracle::batch_mean(ks);
        const auto vm = oracle::batch_mean(vs);
        ASSERT_EQ(c.count, n);
        for (std::size_t j = 0; j < dim; ++j) {
            EXPECT_NEAR(c.key[j], km[j], 1e-9);
            EXPECT_NEAR(c.value[j], vm[j], 1e-9);
        }
    }
}

TEST(Evict, UnderThresholdUnchanged) {
    Rng rng(42);
    HeadKvCache<double> c(4, 2);
    fill(c, rng, 50);
    EXPECT_EQ(evict(c, HeadPolicy::compressed(2, 5.0, 100)), 0u);
    EXPECT_EQ(c.stored(), 50u);
    EXPECT_TRUE(c.comp().inert());
}

TEST(Evict, TenThousandTokens) {
    Rng rng(43);
    const auto policy = HeadPolicy::compressed(4, 5.0, 100);
    HeadKvCache<double> c(4, 4);
    const auto rows = fill(c, rng, 10000);
    evict(c, policy);
    EXPECT_EQ(c.sink_size(), 4u);
    EXPECT_EQ(c.recent_size(), 2000u);
    EXPECT_EQ(c.comp().count, 7996u);
    expect_conserved(c);
    // Sinks are the first four tokens, the recent block the last 2000 in order.
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(std::vector<double>(c.key(i).begin(), c.key(i).end()), rows.keys[i]);
    for (std::size_t i = 0; i < 2000; ++i) {
        EXPECT_EQ(c.position(4 + i), 8000u + i);
        EXPECT_EQ(c.value(4 + i)[0], rows.values[8000 + i][0]);
    }
    std::vector<std::vector<double>> dropped(rows.keys.begin() + 4, rows.keys.begin() + 8000);
    const auto mean = oracle::batch_mean(dropped);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(c.comp().key[j], mean[j], 1e-9);
}

TEST(Evict, Idempotent) {
    Rng rng(44);
    const auto policy = HeadPolicy::compressed(3, 4.0, 20);
    HeadKvCache<double> c(5, 3);
    fill(c, rng, 300);
    evict(c, policy);
    const auto stored = c.stored();
    const auto comp = c.comp();
    EXPECT_EQ(evict(c, policy), 0u);
    EXPECT_EQ(c.stored(), stored);
    EXPECT_EQ(c.comp().key, comp.key);
    EXPECT_EQ(c.comp().count, comp.count);
}

TEST(Evict, WindowDiscards) {
    Rng rng(45);
    HeadKvCache<double> c(2, 2);
    fill(c, rng, 30);
    evict(c, HeadPolicy::windowed(2, 5));
    EXPECT_EQ(c.stored(), 7u);
    EXPECT_EQ(c.discarded(), 23u);
    EXPECT_TRUE(c.comp().inert());
    EXPECT_EQ(c.position(2), 25u);
    expect_conserved(c);
}

TEST(Evict, ConservationFuzz) {
    Rng rng(46);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t sinks = rng.below(5);
        const bool window = rng.below(4) == 0;
        const HeadPolicy policy = window ? HeadPolicy::windowed(sinks, 1 + rng.below(40))
                                         : HeadPolicy::compressed(sinks, rng.uniform(1.5, 8.0),
                                                                  sinks + 1 + rng.below(60));
        HeadKvCache<double> c(3, sinks);
        for (int op = 0; op < 200; ++op) {
            if (rng.below(3) == 0) {
                evict(c, policy);
            } else {
                fill(c, rng, 1 + rng.below(10));
            }
            expect_conserved(c);
            EXPECT_EQ(c.sink_size(), std::min<std::uint64_t>(sinks, c.total_seen()));
        }
    }
}

TEST(CompressedAttention, InertEqualsExact) {
    Rng rng(47);
    HeadKvCache<double> c(8, 0);
    const auto rows = fill(c, rng, 20);
    const auto q = random_vector(rng, 8);
    const auto out = compressed_attention<double>(q, c, 0.35);
    const auto ref = oracle::exact_attention(q, rows.keys, rows.values, 0.35);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out[j], ref[j], 1e-9);
}

TEST(CompressedAttention, SingleTokenReturnsValue) {
    HeadKvCache<double> c(3, 0);
    const std::vector<double> k{1, -1, 2}, v{0.5, 0.25, -3};
    c.append(k, v);
    const auto out = compressed_attention<double>(std::vector<double>{3, 1, 4}, c, 1.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(out[j], v[j]);
}

TEST(CompressedAttention, EmptyCacheRejected) {
    HeadKvCache<double> c(3, 0);
    EXPECT_THROW(compressed_attention<double>(std::vector<double>(3), c, 1.0), std::invalid_argument);
    c.append(std::vector<double>(3), std::vector<double>(3));
    EXPECT_THROW(compressed_attention<double>(std::vector<double>(4), c, 1.0), std::invalid_argument);
}

TEST(CompressedAttention, EightKeptFiveDropped) {
    Rng rng(48);
    HeadKvCache<double> c(6, 0);
    fill(c, rng, 13);
    c.drop_oldest(5, true);
    ASSERT_EQ(c.stored(), 8u);
    ASSERT_EQ(c.comp().count, 5u);
    const auto q = random_vector(rng, 6);
    const auto kept = kept_rows(c);
    const auto out = compressed_attention<double>(q, c, 1.0);
    const auto ref = oracle::duplicate_token_attention(q, kept.keys, kept.values, c.comp().key, c.comp().value, 5, 1.0);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(out[j], ref[j], 1e-9);
}

TEST(CompressedAttention, MatchesDuplicateOracleRandom) {
    Rng rng(49);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t dim = 4 + rng.below(61);
        const std::size_t kept = 1 + rng.below(256);
        const std::size_t dropped = rng.below(257);
        const double scale = rng.below(2) ? 1.0 / std::sqrt(static_cast<double>(dim)) : 1.0;
        HeadKvCache<double> c(dim, 0);
        fill(c, rng, kept + dropped);
        c.drop_oldest(dropped, true);
        const auto q = random_vector(rng, dim);
        const auto rows = kept_rows(c);
        const auto out = compressed_attention<double>(q, c, scale);
        const auto ref = oracle::duplicate_token_attention(q, rows.keys, rows.values, c.comp().key,
                                                           c.comp().value, dropped, scale);
        for (std::size_t j = 0; j < dim; ++j) ASSERT_NEAR(out[j], ref[j], 1e-9) << "trial " << trial;
    }
}

TEST(CompressedAttention, ConvexHull) {
    Rng rng(50);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t dim = 1 + rng.below(8);
        HeadKvCache<double> c(dim, rng.below(3));
        fill(c, rng, 2 + rng.below(60));
        c.drop_oldest(rng.below(c.recent_size() + 1), true);
        if (c.stored() == 0 && c.comp().inert()) continue;
        const auto q = random_vector(rng, dim);
        const auto out = compressed_attention<double>(q, c, 1.0);
        for (std::size_t j = 0; j < dim; ++j) {
            double lo = INFINITY, hi = -INFINITY;
            for (std::size_t i = 0; i < c.stored(); ++i) {
                lo = std::min(lo, c.value(i)[j]);
                hi = std::max(hi, c.value(i)[j]);
            }
            if (!c.comp().inert()) {
                lo = std::min(lo, c.comp().value[j]);
                hi = std::max(hi, c.comp().value[j]);
            }
            EXPECT_GE(out[j], lo - 1e-12);
            EXPECT_LE(out[j], hi + 1e-12);
        }
    }
}

TEST(CompressedAttention, NeverCompressEqualsFullAttention) {
    Rng rng(51);
    HeadPolicy never = HeadPolicy::compressed(4, 5.0, 100);
    never.threshold = HeadPolicy::kNever;
    EXPECT_EQ(buffer_length(1'000'000, never), HeadPolicy::kNever);
    HeadKvCache<double> c(8, 4);
    const auto rows = fill(c, rng, 600);
    EXPECT_EQ(evict(c, never), 0u);
    const auto q = random_vector(rng, 8);
    const auto out = compressed_attention<double>(q, c, 0.5);
    const auto ref = oracle::exact_attention(q, rows.keys, rows.values, 0.5);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out[j], ref[j], 1e-9);
}

TEST(Snapshot, RoundTrip) {
    Rng rng(52);
    HeadKvCache<float> c(4, 2);
    for (int i = 0; i < 40; ++i) {
        std::vector<float> k(4), v(4);
        for (auto& x : k) x = static_cast<float>(rng.normal());
        for (auto& x : v) x = static_cast<float>(rng.normal());
        c.append(k, v);
    }
    evict(c, HeadPolicy::compressed(2, 4.0, 10));
    std::stringstream ss;
    write_snapshot(ss, c);
    const auto r = read_snapshot(ss);
    EXPECT_EQ(r.stored(), c.stored());
    EXPECT_EQ(r.sink_size(), c.sink_size());
    EXPECT_EQ(r.total_seen(), c.total_seen());
    EXPECT_EQ(r.comp().count, c.comp().count);
    EXPECT_EQ(r.comp().key, c.comp().key);
    for (std::size_t i = 0; i < c.stored(); ++i) {
        EXPECT_TRUE(std::equal(r.key(i).begin(), r.key(i).end(), c.key(i).begin()));
        EXPECT_TRUE(std::equal(r.value(i).begin(), r.value(i).end(), c.value(i).begin()));
    }
}

TEST(Snapshot, HeaderLayout) {
    HeadKvCache<float> c(2, 1);
    c.append(std::vector<float>{1, 2}, std::vector<float>{3, 4});
    std::stringstream ss;
    write_snapshot(ss, c);
    const std::string s = ss.str();
    // magic, version, dim, N_0, kept, N_d, one row pair, compensation pair
    EXPECT_EQ(s.size(), 4u + 4 + 4 + 4 + 8 + 8 + 4 * 4 + 4 * 4);
    EXPECT_EQ(s.substr(0, 4), "RZKV");
}

TEST(Snapshot, Errors) {
    std::stringstream bad("RZKX\x01\x00\x00\x00");
    EXPECT_THROW(read_snapshot(bad), FormatError);

    HeadKvCache<float> c(2, 0);
    c.append(std::vector<float>{1, 2}, std::vector<float>{3, 4});
    std::stringstream ss;
    write_snapshot(ss, c);
    std::string s = ss.str();
    std::stringstream truncated(s.substr(0, s.size() - 3));
    EXPECT_THROW(read_snapshot(truncated), TruncationError);

    s[4] = 9;
    std::stringstream version(s);
    EXPECT_THROW(read_snapshot(version), FormatError);
}
