#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pepdiff/autodiff.hpp"

using namespace pepdiff;
using namespace pepdiff::ad;

namespace {

Matrix<double> randn(std::size_t r, std::size_t c, std::uint64_t seed) {
    Matrix<double> m(r, c);
    Rng rng(seed);
    rng.fill_normal(m);
    return m;
}

// fd check for a single-input primitive wrapped into mean_all(mul(y, w)) so
// the loss depends on every output entry with distinct weights.
template <typename Op>
double primitive_max_err(std::size_t r, std::size_t c, Op&& op, std::uint64_t seed = 7) {
    std::map<std::string, Matrix<double>> params{{"x", randn(r, c, seed)}};
    auto report = grad_check<double>(
        params,
        [&](Tape<double>& t, const std::map<std::string, std::size_t>& ids) {
            auto y = op(t, ids.at("x"));
            // weights drawn with a fixed seed so every rebuild sees the same loss
            const auto& yv = t.value(y);
            return t.mean_all(t.mul(y, t.constant(randn(yv.rows, yv.cols, seed + 1))));
        },
        1e-5);
    return report.worst();
}

}  // namespace

TEST_CASE("forward values of basic primitives") {
    Tape<double> t;

    SECTION("row softmax of zeros is uniform") {
        auto x = t.constant(Matrix<double>(1, 3, 0.0));
        auto y = t.softmax_rows(x);
        for (int c = 0; c < 3; ++c)
            CHECK_THAT(t.value(y).at(0, c), Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
    }

    SECTION("softmax rows are normalized and non-negative") {
        auto x = t.constant(randn(5, 7, 3));
        auto y = t.softmax_rows(x);
        for (std::size_t r = 0; r < 5; ++r) {
            double sum = 0;
            for (std::size_t c = 0; c < 7; ++c) {
                CHECK(t.value(y).at(r, c) >= 0.0);
                sum += t.value(y).at(r, c);
            }
            CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
        }
    }

    SECTION("layer norm of a constant row is zero before affine") {
        Matrix<double> row(1, 8, 4.2);
        auto x = t.constant(row);
        auto g = t.constant(Matrix<double>(1, 8, 1.0));
        auto b = t.constant(Matrix<double>(1, 8, 0.0));
        auto y = t.layer_norm(x, g, b);
        for (std::size_t c = 0; c < 8; ++c)
            CHECK_THAT(t.value(y).at(0, c), Catch::Matchers::WithinAbs(0.0, 1e-9));
    }

    SECTION("matmul identity") {
        Matrix<double> eye(3, 3);
        for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
        const auto a = randn(3, 4, 11);
        auto y = t.matmul(t.constant(eye), t.constant(a));
        CHECK(t.value(y) == a);
    }

    SECTION("gelu at 0 is 0, large positive passes through") {
        Matrix<double> x(1, 2);
        x.at(0, 0) = 0.0;
        x.at(0, 1) = 10.0;
        auto y = t.gelu(t.constant(x));
        CHECK(t.value(y).at(0, 0) == 0.0);
        CHECK_THAT(t.value(y).at(0, 1), Catch::Matchers::WithinAbs(10.0, 1e-9));
    }

    SECTION("dropout in eval mode is the identity") {
        auto x = t.constant(randn(4, 4, 5));
        auto y = t.dropout(x, 0.5, 99, /*train=*/false);
        CHECK(y == x);
    }

    SECTION("dropout train mode: entries are zero or scaled, mask is seeded") {
        const auto in = randn(16, 16, 6);
        auto x = t.constant(in);
        auto y1 = t.dropout(x, 0.25, 42, true);
        auto y2 = t.dropout(x, 0.25, 42, true);
        CHECK(t.value(y1) == t.value(y2));
        std::size_t zeros = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
            const double v = t.value(y1).data[i];
            if (v == 0.0)
                ++zeros;
            else
                CHECK_THAT(v, Catch::Matchers::WithinRel(in.data[i] / 0.75, 1e-12));
        }
        CHECK(zeros > 20);
        CHECK(zeros < 110);
    }
}

TEST_CASE("simple analytic gradients") {
    SECTION("loss = mean(x): grad is 1/n") {
        Tape<double> t;
        auto x = t.param(randn(3, 4, 1));
        auto loss = t.mean_all(x);
        t.backward(loss);
        for (double g : t.grad(x).data) CHECK_THAT(g, Catch::Matchers::WithinAbs(1.0 / 12, 1e-12));
    }

    SECTION("loss = sum(x^2)/2: grad is x") {
        Tape<double> t;
        const auto xv = randn(3, 4, 2);
        auto x = t.param(xv);
        auto loss = t.scale(t.mean_all(t.mul(x, x)), 12.0 / 2.0);  // sum/2 via mean*numel
        t.backward(loss);
        for (std::size_t i = 0; i < xv.size(); ++i)
            CHECK_THAT(t.grad(x).data[i], Catch::Matchers::WithinRel(xv.data[i], 1e-9));
    }

    SECTION("gelu derivative at 0 is 0.5") {
        Tape<double> t;
        auto x = t.param(Matrix<double>(1, 1, 0.0));
        auto loss = t.mean_all(t.gelu(x));
        t.backward(loss);
        CHECK_THAT(t.grad(x).at(0, 0), Catch::Matchers::WithinAbs(0.5, 1e-12));
    }

    SECTION("backward rejects non-scalar loss") {
        Tape<double> t;
        auto x = t.param(randn(2, 2, 3));
        CHECK_THROWS_AS(t.backward(x), InvalidArgument);
    }
}

TEST_CASE("finite-difference agreement per primitive") {
    auto below = [](double err) {
        CAPTURE(err);
        CHECK(err < 1e-4);
    };

    below(primitive_max_err(3, 4, [](auto& t, auto x) { return t.scale(x, 1.7); }));
    below(primitive_max_err(3, 4, [](auto& t, auto x) { return t.transpose(x); }));
    below(primitive_max_err(4, 5, [](auto& t, auto x) { return t.softmax_rows(x); }));
    below(primitive_max_err(3, 6, [](auto& t, auto x) { return t.gelu(x); }));
    below(primitive_max_err(4, 6, [](auto& t, auto x) { return t.row_sum(x); }));
    below(primitive_max_err(4, 6, [](auto& t, auto x) { return t.slice_cols(x, 1, 4); }));
    below(primitive_max_err(5, 3, [](auto& t, auto x) {
        // squares keep a + shift positive
        return t.rsqrt_shift(t.mul(x, x), 0.1);
    }));
    below(primitive_max_err(4, 4, [](auto& t, auto x) { return t.dropout(x, 0.3, 123, true); }));
    below(primitive_max_err(4, 4, [](auto& t, auto x) {
        return t.layer_norm(x, t.constant(Matrix<double>(1, 4, 1.3)),
                            t.constant(Matrix<double>(1, 4, -0.2)));
    }));
}

TEST_CASE("finite-difference agreement for multi-input primitives") {
    std::map<std::string, Matrix<double>> params{
        {"a", randn(3, 4, 21)}, {"b", randn(4, 5, 22)}, {"bias", randn(1, 5, 23)},
        {"g", randn(1, 5, 24)}, {"c", randn(3, 5, 25)},
    };
    auto report = grad_check<double>(
        params,
        [&](Tape<double>& t, const std::map<std::string, std::size_t>& ids) {
            auto y = t.matmul(ids.at("a"), ids.at("b"));
            y = t.add(y, ids.at("bias"));  // broadcast add
            y = t.layer_norm(y, ids.at("g"), ids.at("bias"));
            y = t.mul(y, ids.at("c"));
            y = t.add(y, ids.at("c"));
            y = t.concat_cols(y, ids.at("c"));
            return t.mean_all(t.mul(y, t.constant(randn(3, 10, 27))));
        },
        1e-5);
    for (const auto& e : report.entries) {
        CAPTURE(e.name, e.max_rel_err);
        CHECK(e.max_rel_err < 1e-4);
    }
}

TEST_CASE("pure linear graph has near-exact finite differences") {
    std::map<std::string, Matrix<double>> params{{"a", randn(3, 3, 31)}, {"b", randn(3, 3, 32)}};
    // a linear map has no truncation error, so a wide step isolates roundoff
    auto report = grad_check<double>(
        params,
        [](Tape<double>& t, const std::map<std::string, std::size_t>& ids) {
            return t.mean_all(t.add(t.matmul(ids.at("a"), ids.at("b")), ids.at("a")));
        },
        1e-2);
    CHECK(report.worst() < 1e-10);
}

TEST_CASE("softmax attention block gradient") {
    // single-head attention on small matrices
    std::map<std::string, Matrix<double>> params{
        {"q", randn(4, 6, 41)}, {"k", randn(5, 6, 42)}, {"v", randn(5, 6, 43)}};
    const auto w = randn(4, 6, 44);
    auto report = grad_check<double>(
        params,
        [&](Tape<double>& t, const std::map<std::string, std::size_t>& ids) {
            auto scores = t.scale(t.matmul(ids.at("q"), t.transpose(ids.at("k"))),
                                  1.0 / std::sqrt(6.0));
            auto attn = t.softmax_rows(scores);
            auto out = t.matmul(attn, ids.at("v"));
            return t.mean_all(t.mul(out, t.constant(w)));
        },
        1e-5);
    for (const auto& e : report.entries) {
        CAPTURE(e.name, e.max_rel_err);
        CHECK(e.max_rel_err < 1e-4);
    }
}

TEST_CASE("random small graph matches finite differences") {
    // ~500 parameters through a mixed pipeline of primitives
    std::map<std::string, Matrix<double>> params{
        {"w1", randn(8, 16, 51)}, {"w2", randn(16, 8, 52)}, {"g", randn(1, 16, 53)},
        {"b", randn(1, 16, 54)},  {"x", randn(6, 8, 55)},
    };
    auto report = grad_check<double>(
        params,
        [](Tape<double>& t, const std::map<std::string, std::size_t>& ids) {
            auto h = t.matmul(ids.at("x"), ids.at("w1"));
            h = t.layer_norm(h, ids.at("g"), ids.at("b"));
            h = t.gelu(h);
            h = t.dropout(h, 0.2, 77, true);
            auto y = t.matmul(h, ids.at("w2"));
            y = t.add(y, ids.at("x"));  // residual
            return t.mean_all(t.mul(y, y));
        },
        1e-5);
    for (const auto& e : report.entries) {
        CAPTURE(e.name, e.max_rel_err);
        CHECK(e.max_rel_err < 1e-4);
    }
}

TEST_CASE("32-bit mode: looser finite-difference agreement") {
    std::map<std::string, Matrix<float>> params;
    {
        Matrix<float> w(6, 6);
        Rng rng(61);
        rng.fill_normal(w);
        params["w"] = w;
    }
    // shifted so every gradient entry is O(1); float roundoff would otherwise
    // swamp near-zero derivatives
    auto report = grad_check<float>(
        params,
        [](Tape<float>& t, const std::map<std::string, std::size_t>& ids) {
            auto y = t.gelu(t.add(ids.at("w"), t.constant(Matrix<float>(6, 6, 3.0f))));
            return t.scale(t.mean_all(y), 36.0);
        },
        1e-2);
    CHECK(report.worst() < 1e-2);
}

TEST_CASE("determinism: identical seeds give bit-identical forwards") {
    auto run = [](std::uint64_t seed) {
        Tape<float> t;
        Matrix<float> x(5, 8);
        Rng rng(seed);
        rng.fill_normal(x);
        auto h = t.dropout(t.constant(x), 0.3, seed + 1, true);
        auto y = t.softmax_rows(t.gelu(h));
        return t.value(y);
    };
    CHECK(run(9) == run(9));
    CHECK_FALSE(run(9) == run(10));
}
