#include <doctest.h>

#include <cstring>
#include <fstream>

#include "fencepipe/error.hpp"
#include "fencepipe/io.hpp"
#include "fencepipe/weights.hpp"
#include "helpers.hpp"

using namespace fencepipe;
using testutil::random_tensor;

namespace {

// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
std::uint32_t crc32_ref(const std::string& s, std::size_t n) {
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) {
        crc ^= static_cast<unsigned char>(s[i]);
        for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
    }
    return ~crc;
}

std::uint32_t u32_at(const std::string& s, std::size_t pos) {
    std::uint32_t v;
    std::memcpy(&v, s.data() + pos, 4);
    return v;
}

void set_u32(std::string& s, std::size_t pos, std::uint32_t v) { std::memcpy(s.data() + pos, &v, 4); }

void reseal(std::string& s) { set_u32(s, s.size() - 4, crc32_ref(s, s.size() - 4)); }

std::vector<ModelGraph> sample_models() {
    std::vector<ModelGraph> out;
    out.push_back(build_unet({3, 1, 2, 2, Padding::same}, 1));
    out.push_back(build_unet({1, 1, 1, 3, Padding::valid}, 2));
    out.push_back(build_classifier({ClassifierKind::cnn, 3, 2, 2, 3, 16}, 3));
    out.push_back(build_classifier({ClassifierKind::residual, 1, 2, 3, 2, 16}, 4));
    return out;
}

}  // namespace

TEST_CASE("weights round trip") {
    for (ModelGraph& m : sample_models()) {
        m.epoch = 7;
        const std::string bytes = serialize_weights(m);
        CHECK(bytes.substr(0, 4) == "WFPV");
        CHECK(u32_at(bytes, 4) == kWeightsVersion);
        CHECK(u32_at(bytes, bytes.size() - 4) == crc32_ref(bytes, bytes.size() - 4));
        const ModelGraph back = deserialize_weights(bytes);
        CHECK(serialize_weights(back) == bytes);
        CHECK(back.epoch == 7);
        CHECK(back.weight_names() == m.weight_names());
        for (const auto& name : m.weight_names()) {
            const auto x = m.weight(name).data(), y = back.weight(name).data();
            CHECK(std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0);
        }
    }
}

TEST_CASE("loaded model reproduces forward outputs bit for bit") {
    const auto dir = testutil::scratch_dir("weights");
    for (const ModelGraph& m : sample_models()) {
        save_weights(dir / "w.bin", m);
        const ModelGraph back = load_weights(dir / "w.bin");
        const bool unet = std::holds_alternative<UNetConfig>(m.config);
        const std::size_t in_ch = unet ? static_cast<std::size_t>(std::get<UNetConfig>(m.config).in_channels)
                                       : static_cast<std::size_t>(std::get<ClassifierConfig>(m.config).in_channels);
        const std::size_t side = unet && std::get<UNetConfig>(m.config).padding == Padding::valid ? 20 : 16;
        const Tensor x = random_tensor({side, side, in_ch}, 9, 0.0, 1.0);
        const Tensor ya = forward(m, x), yb = forward(back, x);
        const auto a = ya.data(), b = yb.data();
        REQUIRE(a.size() == b.size());
        CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
        // save -> load -> save is byte-identical on disk.
        save_weights(dir / "w2.bin", back);
        CHECK(read_file(dir / "w.bin") == read_file(dir / "w2.bin"));
    }
}

TEST_CASE("damaged weights are rejected") {
    const std::string good = serialize_weights(build_classifier({ClassifierKind::cnn, 1, 2, 2, 2, 8}, 5));
    SUBCASE("truncated") {
        for (std::size_t n : {std::size_t{0}, std::size_t{3}, std::size_t{10}, good.size() / 2, good.size() - 1})
            CHECK_THROWS_AS(deserialize_weights(good.substr(0, n)), CorruptionError);
    }
    SUBCASE("flipped byte") {
        for (std::size_t pos : {std::size_t{20}, good.size() / 2, good.size() - 10}) {
            std::string bad = good;
            bad[pos] = static_cast<char>(bad[pos] ^ 0x40);
            CHECK_THROWS_AS(deserialize_weights(bad), CorruptionError);
        }
    }
    SUBCASE("wrong magic") {
        std::string bad = good;
        bad[0] = 'X';
        reseal(bad);
        CHECK_THROWS_AS(deserialize_weights(bad), CorruptionError);
    }
    SUBCASE("unknown version") {
        std::string bad = good;
        set_u32(bad, 4, kWeightsVersion + 1);
        reseal(bad);
        CHECK_THROWS_AS(deserialize_weights(bad), VersionError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_weights(testutil::scratch_dir("weights_missing") / "none.bin"), IoError);
    }
    SUBCASE("a failed save leaves the old file") {
        const auto dir = testutil::scratch_dir("weights_atomic");
        write_file_atomic(dir / "w.bin", good);
        CHECK(read_file(dir / "w.bin") == good);
        std::filesystem::create_directories(dir / "blocked");
        CHECK_THROWS_AS(write_file_atomic(dir / "blocked", "x"), IoError);
        CHECK(std::filesystem::is_directory(dir / "blocked"));
    }
}

TEST_CASE("model config json") {
    const ModelGraph m = build_unet({3, 1, 3, 8, Padding::same}, 11);
    const auto j = to_json(m.config);
    CHECK(std::get<UNetConfig>(model_config_from_json(j)).base_filters == 8);
    auto bad = j;
    bad["kind"] = "transformer";
    CHECK_THROWS_AS(model_config_from_json(bad), ConfigError);
}
