#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pepdiff/codec.hpp"

using namespace pepdiff;
using namespace pepdiff::codec;

namespace {

std::string random_sequence(std::size_t len, Rng& rng) {
    std::string s;
    for (std::size_t i = 0; i < len; ++i)
        s.push_back(kAlphabet[rng.uniform_index(kResidueCount)]);
    return s;
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("pepdiff_codec_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("codebook construction") {
    const auto cb = ResidueCodebook::make(32, 7);

    SECTION("unit norms") {
        for (std::size_t i = 0; i <= kResidueCount; ++i) {
            double n = 0;
            for (std::size_t k = 0; k < 32; ++k)
                n += double(cb.vectors.at(i, k)) * double(cb.vectors.at(i, k));
            CHECK_THAT(std::sqrt(n), Catch::Matchers::WithinAbs(1.0, 1e-6));
        }
    }

    SECTION("near-orthogonal pairs when d_emb >= 21") {
        for (std::size_t i = 0; i <= kResidueCount; ++i)
            for (std::size_t j = i + 1; j <= kResidueCount; ++j) {
                double dot = 0;
                for (std::size_t k = 0; k < 32; ++k)
                    dot += double(cb.vectors.at(i, k)) * double(cb.vectors.at(j, k));
                CHECK(std::abs(dot) < 0.15);
            }
    }

    SECTION("deterministic per seed") {
        CHECK(ResidueCodebook::make(32, 7).vectors == cb.vectors);
        CHECK_FALSE(ResidueCodebook::make(32, 8).vectors == cb.vectors);
    }

    CHECK_THROWS_AS(ResidueCodebook::make(0, 7), InvalidArgument);
}

TEST_CASE("sequence validation") {
    CHECK_NOTHROW(PeptideSequence("ACDEFGHIKLMNPQRSTVWY"));
    CHECK_THROWS_AS(PeptideSequence(""), InvalidArgument);
    CHECK_THROWS_MATCHES(PeptideSequence("ACX"), AlphabetError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("position 2")));
    CHECK_THROWS_AS(PeptideSequence("acd"), AlphabetError);  // lowercase rejected
}

TEST_CASE("encode layout") {
    const auto cb = ResidueCodebook::make(32, 7);
    const auto m = encode(PeptideSequence("A"), cb);
    REQUIRE(m.rows == 2);
    REQUIRE(m.cols == 32);
    for (std::size_t k = 0; k < 32; ++k) {
        CHECK(m.at(0, k) == cb.vectors.at(0, k));                         // 'A' row
        CHECK(m.at(1, k) == cb.vectors.at(ResidueCodebook::kTerminal, k));  // terminal
    }

    SECTION("single-residue substitution changes exactly one non-terminal row") {
        const auto a = encode(PeptideSequence("ACDEF"), cb);
        const auto b = encode(PeptideSequence("ACREF"), cb);
        int diff_rows = 0;
        for (std::size_t r = 0; r < a.rows; ++r) {
            bool differs = false;
            for (std::size_t k = 0; k < a.cols; ++k)
                if (a.at(r, k) != b.at(r, k)) differs = true;
            if (differs) ++diff_rows;
        }
        CHECK(diff_rows == 1);
    }
}

TEST_CASE("decode") {
    const auto cb = ResidueCodebook::make(32, 7);

    SECTION("round trip, exhaustive through length 3") {
        for (std::size_t len = 1; len <= 3; ++len) {
            // walk a systematic subset when the full product is large: all of
            // length 1 and 2, every 7th of length 3
            std::size_t total = 1;
            for (std::size_t i = 0; i < len; ++i) total *= kResidueCount;
            const std::size_t stride = len < 3 ? 1 : 7;
            for (std::size_t code = 0; code < total; code += stride) {
                std::string s;
                std::size_t c = code;
                for (std::size_t i = 0; i < len; ++i) {
                    s.push_back(kAlphabet[c % kResidueCount]);
                    c /= kResidueCount;
                }
                const PeptideSequence seq(s);
                auto back = decode(encode(seq, cb), cb);
                REQUIRE(back.has_value());
                CHECK(*back == seq);
            }
        }
    }

    SECTION("round trip for random length-15 sequences") {
        Rng rng(99);
        for (int i = 0; i < 1000; ++i) {
            const PeptideSequence seq(random_sequence(15, rng));
            auto back = decode(encode(seq, cb), cb);
            REQUIRE(back.has_value());
            CHECK(*back == seq);
        }
    }

    SECTION("all-zero matrix fails at tau 0.5") {
        EmbeddingMatrix zero(4, 32);
        CHECK_FALSE(decode(zero, cb, 0.5).has_value());
    }

    SECTION("argmax is scale invariant") {
        const PeptideSequence seq("MKTV");
        auto x = encode(seq, cb);
        for (auto& v : x.data) v *= 37.5f;
        auto back = decode(x, cb);
        REQUIRE(back.has_value());
        CHECK(*back == seq);
    }

    SECTION("small perturbations survive decoding") {
        Rng rng(123);
        const PeptideSequence seq(random_sequence(15, rng));
        for (int trial = 0; trial < 50; ++trial) {
            auto x = encode(seq, cb);
            // codebook rows are unit norm, so 0.05 * row-norm = 0.05
            for (auto& v : x.data) v += static_cast<float>(0.05 * rng.normal());
            auto back = decode(x, cb);
            REQUIRE(back.has_value());
            CHECK(*back == seq);
        }
    }

    SECTION("shape errors") {
        CHECK_THROWS_AS(decode(EmbeddingMatrix(1, 32), cb), InvalidArgument);
        CHECK_THROWS_AS(decode(EmbeddingMatrix(4, 16), cb), ShapeError);
    }
}

TEST_CASE("embedding container round trip") {
    TempDir dir;
    const auto path = (dir.path / "embs.pepe").string();

    std::map<std::string, EmbeddingMatrix> records;
    Rng rng(5);
    for (int i = 0; i < 4; ++i) {
        EmbeddingMatrix m(3 + i, 8);
        rng.fill_normal(m);
        records["1ab" + std::to_string(i)] = m;
    }
    write_embeddings(path, records);
    const auto loaded = load_embeddings(path);

    REQUIRE(loaded.size() == records.size());
    for (const auto& [id, m] : records) {
        REQUIRE(loaded.count(id) == 1);
        CHECK(loaded.at(id) == m);  // bit-exact
    }
}

TEST_CASE("embedding container rejects malformed files") {
    TempDir dir;

    SECTION("bad magic") {
        const auto path = (dir.path / "bad.pepe").string();
        std::ofstream os(path, std::ios::binary);
        os << "NOPE, not a container";
        os.close();
        CHECK_THROWS_AS(load_embeddings(path), FormatError);
    }

    SECTION("payload shorter than the declared shape") {
        const auto path = (dir.path / "trunc.pepe").string();
        std::map<std::string, EmbeddingMatrix> records{{"x", EmbeddingMatrix(4, 8, 1.0f)}};
        write_embeddings(path, records);
        // chop the last 8 bytes off
        auto size = std::filesystem::file_size(path);
        std::filesystem::resize_file(path, size - 8);
        CHECK_THROWS_MATCHES(load_embeddings(path), FormatError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("payload")));
    }

    SECTION("missing file") {
        CHECK_THROWS_AS(load_embeddings((dir.path / "absent.pepe").string()), FormatError);
    }
}
