#include <doctest.h>

#include <cmath>
#include <complex>

#include "pelab/pe.hpp"
#include "pelab/rng.hpp"
#include "pelab/toeplitz.hpp"

using namespace pelab;

TEST_CASE("sinusoidal table basics") {
    Mat t = sinusoidal_table(16, 8);
    // position 0: sin 0 = 0, cos 0 = 1, alternating
    for (std::size_t c = 0; c < 8; ++c) {
        CHECK(t(0, c) == doctest::Approx(c % 2 == 0 ? 0.0 : 1.0));
    }
    CHECK(t(1, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
    CHECK(t(1, 0) == doctest::Approx(0.84147).epsilon(1e-4));
    for (double v : t.a) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(sinusoidal_table(16, 7), DimensionError);
}

TEST_CASE("alibi slopes geometric rule") {
    auto slopes = alibi_slopes_geometric(8);
    REQUIRE(slopes.size() == 8);
    CHECK(slopes[0] == doctest::Approx(0.5));
    CHECK(slopes[7] == doctest::Approx(1.0 / 256.0));
    for (std::size_t h = 0; h < 8; ++h) {
        CHECK(slopes[h] > 0.0);
        if (h > 0) CHECK(slopes[h] < slopes[h - 1]);
    }
}

TEST_CASE("alibi bias matrix") {
    std::vector<double> slopes{0.25};
    auto bias = alibi_bias(1, 8, slopes);
    REQUIRE(bias.size() == 1);
    const Mat& b = bias[0];
    for (std::size_t i = 0; i < 8; ++i) CHECK(b(i, i) == 0.0);
    CHECK(b(5, 1) == doctest::Approx(-1.0));  // m=0.25, distance 4
    CHECK(std::isinf(b(0, 5)));
    auto chk = check_toeplitz(b, 0.0);
    CHECK(chk.deviation == 0.0);
    CHECK(chk.is_toeplitz);
    CHECK_THROWS_AS(alibi_bias(1, 0, slopes), DimensionError);
}

TEST_CASE("rope rotation identity at position zero and isometry") {
    RopeKernel kernel = RopeKernel::build(8, 64);
    Rng rng(3);
    std::vector<double> x(8);
    for (auto& v : x) v = rng.uniform(-2, 2);
    auto x0 = rope_rotate(x, 0, kernel);
    for (std::size_t i = 0; i < 8; ++i) CHECK(x0[i] == doctest::Approx(x[i]).epsilon(1e-12));
    for (std::size_t pos : {1, 7, 33, 63}) {
        auto y = rope_rotate(x, pos, kernel);
        CHECK(norm2(y) == doctest::Approx(norm2(x)).epsilon(1e-6));
    }
    std::vector<double> odd(7);
    CHECK_THROWS_AS(rope_rotate(odd, 1, kernel), DimensionError);
}

TEST_CASE("rope relative identity over random draws") {
    RopeKernel kernel = RopeKernel::build(16, 128);
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> q(16), k(16);
        for (auto& v : q) v = rng.uniform(-1, 1);
        for (auto& v : k) v = rng.uniform(-1, 1);
        const auto i = rng.uniform_int(128);
        const auto j = rng.uniform_int(128);
        const double lhs = dot(rope_rotate(q, i, kernel), rope_rotate(k, j, kernel));
        const double rhs =
            dot(q, rope_rotate_signed(k, static_cast<long long>(j) - static_cast<long long>(i),
                                      kernel));
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-6));
    }
}

TEST_CASE("additive logits: degenerate and exact-sum cases") {
    Rng rng(7);
    const std::size_t L = 6, d = 4;
    Mat qc(L, d), kc(L, d), zero(L, d);
    for (auto& v : qc.a) v = rng.uniform(-1, 1);
    for (auto& v : kc.a) v = rng.uniform(-1, 1);

    AdditiveLogits pure = build_logits_additive(qc, zero, kc, zero);
    GramDecomposition g = gram_decompose(qc, zero, kc, zero);
    for (std::size_t i = 0; i < L * L; ++i) {
        CHECK(pure.total.a[i] == doctest::Approx(g.g_cc.a[i]).epsilon(1e-12));
    }

    Mat qp(L, d), kp(L, d);
    for (auto& v : qp.a) v = rng.uniform(-1, 1);
    for (auto& v : kp.a) v = rng.uniform(-1, 1);
    AdditiveLogits full = build_logits_additive(qc, qp, kc, kp);
    for (std::size_t i = 0; i < L * L; ++i) {
        const double sum = full.g_cc.a[i] + full.g_cp.a[i] + full.g_pc.a[i] + full.g_pp.a[i];
        CHECK(std::abs(sum - full.total.a[i]) < 1e-12);
    }
}

TEST_CASE("additive logits reject a non-Toeplitz bias") {
    Mat qc(3, 2), qp(3, 2), kc(3, 2), kp(3, 2);
    Mat bad(3, 3);
    bad(0, 0) = 1.0;  // single perturbed entry breaks the main diagonal
    CHECK_THROWS_AS(build_logits_additive(qc, qp, kc, kp, &bad), ContractError);
}

TEST_CASE("sinusoidal position Gram is quasi-Toeplitz") {
    const std::size_t L = 32, d = 32;
    Mat table = sinusoidal_table(L, d);
    Mat positions(L, d);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < d; ++c) positions(i, c) = table(i, c);
    Mat zero(L, d);
    AdditiveLogits lg = build_logits_additive(zero, positions, zero, positions);
    DiagonalStats st = diagonal_stats(lg.g_pp);
    CHECK(st.mean_abs > 0.0);
    CHECK(st.max_stddev < 0.05 * st.mean_abs);
}

TEST_CASE("rope logits: zero angles give the plain Gram") {
    RopeKernel kernel = RopeKernel::build(6, 8);
    std::fill(kernel.theta.begin(), kernel.theta.end(), 0.0);
    std::fill(kernel.cos_table.begin(), kernel.cos_table.end(), 1.0);
    std::fill(kernel.sin_table.begin(), kernel.sin_table.end(), 0.0);
    Rng rng(5);
    Mat q(8, 6), k(8, 6);
    for (auto& v : q.a) v = rng.uniform(-1, 1);
    for (auto& v : k.a) v = rng.uniform(-1, 1);
    Mat logits = build_logits_rope(q, k, kernel);
    GramDecomposition g = gram_decompose(q, Mat(8, 6), k, Mat(8, 6));
    for (std::size_t i = 0; i < logits.a.size(); ++i) {
        CHECK(logits.a[i] == doctest::Approx(g.g_cc.a[i]).epsilon(1e-12));
    }
}

TEST_CASE("rope logits match the complex-exponential form") {
    RopeKernel kernel = RopeKernel::build(8, 16);
    Rng rng(6);
    Mat q(10, 8), k(10, 8);
    for (auto& v : q.a) v = rng.uniform(-1, 1);
    for (auto& v : k.a) v = rng.uniform(-1, 1);
    Mat logits = build_logits_rope(q, k, kernel);
    // independent complex route: Re{ sum_t q~_t conj(k~_t) e^{i(i-j)theta_t} }
    for (std::size_t i = 0; i < 10; ++i) {
        for (std::size_t j = 0; j < 10; ++j) {
            std::complex<double> acc = 0.0;
            for (std::size_t t = 0; t < 4; ++t) {
                const std::complex<double> qt(q(i, 2 * t), q(i, 2 * t + 1));
                const std::complex<double> kt(k(j, 2 * t), k(j, 2 * t + 1));
                const double ang =
                    (static_cast<double>(i) - static_cast<double>(j)) * kernel.theta[t];
                acc += qt * std::conj(kt) * std::exp(std::complex<double>(0.0, ang));
            }
            CHECK(logits(i, j) == doctest::Approx(acc.real()).epsilon(1e-6));
        }
    }
}

TEST_CASE("rope logits with constant rows are Toeplitz") {
    RopeKernel kernel = RopeKernel::build(8, 32);
    Rng rng(8);
    std::vector<double> qrow(8), krow(8);
    for (auto& v : qrow) v = rng.uniform(-1, 1);
    for (auto& v : krow) v = rng.uniform(-1, 1);
    Mat q(24, 8), k(24, 8);
    for (std::size_t i = 0; i < 24; ++i)
        for (std::size_t c = 0; c < 8; ++c) {
            q(i, c) = qrow[c];
            k(i, c) = krow[c];
        }
    Mat logits = build_logits_rope(q, k, kernel);
    auto chk = check_toeplitz(logits, 1e-6);
    CHECK(chk.is_toeplitz);
}

TEST_CASE("mla logit splits and degenerate halves") {
    Rng rng(9);
    const std::size_t d_model = 10, dn = 3, dr = 4;
    RopeKernel kernel = RopeKernel::build(dr, 32);
    MlaQkWeights w;
    w.w_uq = Mat(dn, d_model);
    w.w_uk = Mat(dn, d_model);
    w.w_ur = Mat(dr, d_model);
    for (auto* m : {&w.w_uq, &w.w_uk, &w.w_ur})
        for (auto& v : m->a) v = rng.uniform(-1, 1);
    std::vector<double> xi(d_model), xj(d_model);
    for (auto& v : xi) v = rng.uniform(-1, 1);
    for (auto& v : xj) v = rng.uniform(-1, 1);

    const std::size_t i = 5, j = 2;
    const double split = mla_qk(xi, xj, w, i, j, kernel);

    // independent: materialize the concatenated vectors and dot them
    auto qn = matvec(w.w_uq, xi);
    auto kn = matvec(w.w_uk, xj);
    auto qr = rope_rotate(matvec(w.w_ur, xi), i, kernel);
    auto kr = rope_rotate(matvec(w.w_ur, xj), j, kernel);
    std::vector<double> qcat(qn), kcat(kn);
    qcat.insert(qcat.end(), qr.begin(), qr.end());
    kcat.insert(kcat.end(), kr.begin(), kr.end());
    CHECK(split == doctest::Approx(dot(qcat, kcat)).epsilon(1e-10));

    // d_rope = 0 reduces to the pure content logit
    MlaQkWeights w_nope = w;
    w_nope.w_ur = Mat(0, d_model);
    RopeKernel k0;
    k0.d_head = 0;
    CHECK(mla_qk(xi, xj, w_nope, i, j, k0) == doctest::Approx(dot(qn, kn)).epsilon(1e-12));

    // d_nope = 0 reduces to the pure rotary logit
    MlaQkWeights w_rope = w;
    w_rope.w_uq = Mat(0, d_model);
    w_rope.w_uk = Mat(0, d_model);
    CHECK(mla_qk(xi, xj, w_rope, i, j, kernel) ==
          doctest::Approx(dot(qr, kr)).epsilon(1e-12));
}

TEST_CASE("pe spec validation") {
    PeSpec spec;
    spec.kind = PeKind::PartialRope;
    spec.partial_rope_heads = {2, 2};
    CHECK_NOTHROW(spec.validate(2, 4, 8));
    spec.partial_rope_heads = {2};
    CHECK_THROWS_AS(spec.validate(2, 4, 8), ConfigError);
    spec.partial_rope_heads = {5, 2};
    CHECK_THROWS_AS(spec.validate(2, 4, 8), ConfigError);

    PeSpec rope;
    rope.kind = PeKind::Rope;
    CHECK_THROWS_AS(rope.validate(2, 4, 7), ConfigError);  // odd head dim

    PeSpec alibi;
    alibi.kind = PeKind::Alibi;
    alibi.alibi_slopes = {0.5, 0.5};
    CHECK_THROWS_AS(alibi.validate(2, 2, 8), ConfigError);  // not strictly decreasing
    alibi.alibi_slopes = {0.5, -0.1};
    CHECK_THROWS_AS(alibi.validate(2, 2, 8), ConfigError);  // not positive
}

TEST_CASE("pe spec json round trip") {
    PeSpec spec;
    spec.kind = PeKind::Mla;
    spec.mla = {16, 8, 64};
    spec.rope_theta_base = 5000.0;
    PeSpec back = PeSpec::from_json(spec.to_json());
    CHECK(back.kind == PeKind::Mla);
    CHECK(back.mla.d_nope == 16);
    CHECK(back.mla.d_rope == 8);
    CHECK(back.mla.d_compress == 64);
    CHECK(back.rope_theta_base == doctest::Approx(5000.0));

    PeSpec partial;
    partial.kind = PeKind::PartialRope;
    partial.partial_rope_heads = {1, 0, 3};
    PeSpec back2 = PeSpec::from_json(partial.to_json());
    CHECK(back2.partial_rope_heads == std::vector<std::size_t>{1, 0, 3});
}
