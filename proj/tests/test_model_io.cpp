// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "razor/fixtures.hpp"
#include "razor/model_io.hpp"

using namespace razor;

namespace {

const std::filesystem::path kFixtures = RAZOR_FIXTURE_DIR;

void put_u32(std::vector<char>& bytes, std::size_t offset, std::uint32_t v) {
    std::memcpy(bytes.data() + offset, &v, 4);
}

}  // namespace

TEST(ModelSpecType, Validation) {
    EXPECT_NO_THROW(toy_rope_spec().validate());
    EXPECT_NO_THROW(toy_alibi_spec().validate());
    EXPECT_NO_THROW(toy_gqa_spec().validate());
    auto s = toy_rope_spec();
    s.num_kv_heads = 3;
    EXPECT_THROW(s.validate(), ShapeError);
    s = toy_rope_spec();
    s.hidden_dim += 1;
    EXPECT_THROW(s.validate(), ShapeError);
    s = toy_alibi_spec();
    s.alibi_slopes = {0.5};
    EXPECT_THROW(s.validate(), ShapeError);
}

TEST(ModelSpecType, GroupHelpers) {
    const auto s = toy_gqa_spec();
    EXPECT_EQ(s.group_size(), 4u);
    EXPECT_EQ(s.kv_head_of(3), 0u);
    EXPECT_EQ(s.kv_head_of(4), 1u);
    EXPECT_EQ(s.kv_width(), 2 * s.head_dim);
    EXPECT_EQ(toy_alibi_spec().slopes().size(), 8u);
}

TEST(ModelContainer, RoundTripIsExact) {
    for (const char* kind : {"toy-rope", "toy-alibi", "toy-gqa"}) {
        const Model m = make_fixture(kind, 11);
        const auto bytes = serialize_model(m);
        const Model r = deserialize_model(bytes);
        EXPECT_EQ(r.spec, m.spec);
        const auto a = list_tensors(m), b = list_tensors(r);
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            EXPECT_EQ(a[i].name, b[i].name);
            EXPECT_EQ(a[i].dims, b[i].dims);
            EXPECT_EQ(*a[i].data, *b[i].data) << a[i].name;
        }
        EXPECT_EQ(serialize_model(r), bytes);
        EXPECT_EQ(model_id(r), model_id(m));
    }
}

TEST(ModelContainer, FileRoundTrip) {
    const auto dir = std::filesystem::path(RAZOR_SCRATCH_DIR);
    std::filesystem::create_directories(dir);
    const Model m = make_fixture("toy-rope", 2);
    save_model(dir / "m.rzmd", m);
    EXPECT_EQ(model_id(load_model(dir / "m.rzmd")), model_id(m));
    EXPECT_THROW(load_model(dir / "missing.rzmd"), Error);
}

TEST(ModelContainer, TruncationDetected) {
    const auto bytes = serialize_model(make_fixture("toy-rope", 1));
    for (std::size_t cut : {std::size_t{2}, std::size_t{30}, bytes.size() / 2, bytes.size() - 1}) {
        EXPECT_THROW(deserialize_model(std::vector<char>(bytes.begin(), bytes.begin() + cut)), TruncationError) << cut;
    }
}

TEST(ModelContainer, HeaderErrors) {
    auto bytes = serialize_model(make_fixture("toy-rope", 1));
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(deserialize_model(bad), FormatError);
    bad = bytes;
    put_u32(bad, 4, 99);
    EXPECT_THROW(deserialize_model(bad), FormatError);
    bad = bytes;
    bad.push_back(0);
    EXPECT_THROW(deserialize_model(bad), FormatError);
    bad = bytes;
    put_u32(bad, 8 + 4 * 8, 7);  // embedding kind
    EXPECT_THROW(deserialize_model(bad), FormatError);
}

TEST(ModelContainer, ShapeErrors) {
    Model m = make_fixture("toy-rope", 1);
    m.weights.layers[1].wq = Matrix<float>(3, 3);
    EXPECT_THROW(serialize_model(m), ShapeError);
    EXPECT_THROW(validate_weights(m), ShapeError);

    // A declared geometry that disagrees with the stored tensors.
    auto bytes = serialize_model(make_fixture("toy-rope", 1));
    put_u32(bytes, 8 + 4 * 5, 65);  // ffn_dim
    EXPECT_THROW(deserialize_model(bytes), ShapeError);
}

TEST(Checksum, Fnv1aReferenceValues) {
    EXPECT_EQ(fnv1a64("", 0), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64("a", 1), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(fnv1a64("foobar", 6), 0x85944171f73967e8ULL);
}

TEST(Fixtures, CommittedFilesMatchGenerators) {
    for (const char* kind : {"induction", "toy-rope", "toy-alibi", "toy-gqa"}) {
        const Model loaded = load_model(kFixtures / (std::string(kind) + ".rzmd"));
        EXPECT_EQ(model_id(loaded), model_id(make_fixture(kind, 7))) << kind;
    }
}

TEST(Fixtures, FrozenIdentifiers) {
    const std::pair<const char*, const char*> frozen[] = {
        {"induction", "fnv1a64:11a1ea044e2040c0"},
        {"toy-rope", "fnv1a64:0daa3ef9590a2993"},
        {"toy-alibi", "fnv1a64:d1e1d8f40eb4cbc5"},
        {"toy-gqa", "fnv1a64:b54737a92c8c3f53"},
    };
    for (const auto& [kind, id] : frozen) {
        EXPECT_EQ(model_id(load_model(kFixtures / (std::string(kind) + ".rzmd"))), id) << kind;
    }
}

TEST(Fixtures, InductionGeometry) {
    const Model m = make_induction_fixture();
    EXPECT_EQ(m.spec.num_layers, 2u);
    EXPECT_EQ(m.spec.num_heads, 4u);
    EXPECT_NO_THROW(validate_weights(m));
    EXPECT_THROW(make_fixture("nope", 0), std::invalid_argument);
}
