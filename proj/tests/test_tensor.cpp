#include <doctest.h>

#include <cmath>
#include <cstring>

#include "gradcheck.hpp"
#include "pelab/tensor.hpp"

using namespace pelab;
using pelab::testing::gradcheck;
using pelab::testing::random_tensor;

namespace {

// Brute-force triple loop, the independent oracle for matmul.
template <typename S>
std::vector<S> matmul_oracle(const Tensor<S>& a, const Tensor<S>& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<S> c(m * n, S(0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t t = 0; t < k; ++t)
                c[i * n + j] += a.value()[i * k + t] * b.value()[t * n + j];
    return c;
}

template <typename S>
Tensor<S> weighted_sum(Tape<S>* tape, const Tensor<S>& x, Rng& wrng) {
    Tensor<S> w(x.shape(), S(0), false);
    for (auto& v : w.mutable_value()) v = static_cast<S>(wrng.uniform(-1.0, 1.0));
    return sum_all(tape, mul(tape, x, w));
}

}  // namespace

TEST_CASE("tensor invariants") {
    Tensor64 t({2, 3}, 0.5);
    CHECK(t.size() == 6);
    CHECK(t.shape() == std::vector<std::size_t>{2, 3});
    CHECK_THROWS_AS(Tensor64::from_data({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
    CHECK_THROWS_AS(t.item(), ContractError);
    CHECK_THROWS_AS(t.grad(), ContractError);
}

TEST_CASE("matmul identity and scalar cases") {
    auto i2 = Tensor64::from_data({2, 2}, {1, 0, 0, 1});
    auto b = Tensor64::from_data({2, 2}, {3, -1, 2, 7});
    auto c = matmul<double>(nullptr, i2, b);
    for (std::size_t i = 0; i < 4; ++i) CHECK(c.value()[i] == doctest::Approx(b.value()[i]));

    auto x = Tensor64::from_data({1, 1}, {2});
    auto y = Tensor64::from_data({1, 1}, {3});
    CHECK(matmul<double>(nullptr, x, y).value()[0] == doctest::Approx(6.0));
}

TEST_CASE("matmul against triple-loop oracle") {
    Rng rng(11);
    auto a = random_tensor<double>({5, 4}, rng);
    auto b = random_tensor<double>({4, 3}, rng);
    auto c = matmul<double>(nullptr, a, b);
    auto ref = matmul_oracle(a, b);
    double max_diff = 0;
    for (std::size_t i = 0; i < ref.size(); ++i)
        max_diff = std::max(max_diff, std::abs(ref[i] - c.value()[i]));
    CHECK(max_diff < 1e-12);
}

TEST_CASE("matmul shape error and gradients") {
    Rng rng(12);
    auto a = random_tensor<double>({3, 4}, rng);
    auto bad = random_tensor<double>({3, 2}, rng);
    CHECK_THROWS_AS(matmul<double>(nullptr, a, bad), DimensionError);

    auto b = random_tensor<double>({4, 2}, rng);
    Rng wrng(5);
    auto res = gradcheck<double>({&a, &b},
                                 [&](Tape64* t) {
                                     Rng w(99);
                                     return weighted_sum(t, matmul(t, a, b), w);
                                 },
                                 1e-6);
    CHECK(res.passed);
}

TEST_CASE("matmul_nt matches matmul of transpose") {
    Rng rng(13);
    auto a = random_tensor<double>({4, 3}, rng);
    auto b = random_tensor<double>({5, 3}, rng);
    auto nt = matmul_nt<double>(nullptr, a, b);
    auto bt = transpose<double>(nullptr, b);
    auto ref = matmul<double>(nullptr, a, bt);
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(nt.value()[i] == doctest::Approx(ref.value()[i]));

    auto res = gradcheck<double>({&a, &b},
                                 [&](Tape64* t) {
                                     Rng w(98);
                                     return weighted_sum(t, matmul_nt(t, a, b), w);
                                 },
                                 1e-6);
    CHECK(res.passed);
}

TEST_CASE("softmax uniform row") {
    auto s = Tensor64::from_data({1, 4}, {2.5, 2.5, 2.5, 2.5});
    auto a = softmax_rows<double>(nullptr, s);
    for (double v : a.value()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax against direct exp/normalize oracle") {
    auto s = Tensor64::from_data({1, 3}, {10, 0, 0});
    auto a = softmax_rows<double>(nullptr, s);
    // independent: direct evaluation
    const double d = std::exp(10.0) + 2.0;
    CHECK(a.value()[0] == doctest::Approx(std::exp(10.0) / d).epsilon(1e-9));
    CHECK(a.value()[1] == doctest::Approx(1.0 / d).epsilon(1e-9));
    CHECK(a.value()[0] == doctest::Approx(0.99991).epsilon(1e-4));
    CHECK(a.value()[1] == doctest::Approx(4.5e-5).epsilon(0.01));
}

TEST_CASE("softmax rows are probability vectors") {
    Rng rng(21);
    auto s = random_tensor<double>({20, 13}, rng, false, -8.0, 8.0);
    auto a = softmax_rows<double>(nullptr, s);
    for (std::size_t i = 0; i < 20; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < 13; ++j) {
            const double v = a.at(i, j);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("softmax rejects non-finite input") {
    auto s = Tensor64::from_data({1, 2}, {1.0, std::nan("")});
    CHECK_THROWS_AS(softmax_rows<double>(nullptr, s), NumericError);
    auto inf = Tensor64::from_data({1, 2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(softmax_rows<double>(nullptr, inf), NumericError);
}

TEST_CASE("softmax jacobian vs central finite differences") {
    Rng rng(22);
    auto s = random_tensor<double>({6, 9}, rng, true, -2.0, 2.0);
    auto res = gradcheck<double>({&s},
                                 [&](Tape64* t) {
                                     Rng w(97);
                                     return weighted_sum(t, softmax_rows(t, s), w);
                                 },
                                 1e-5);
    CHECK(res.passed);
}

TEST_CASE("layer_norm basics") {
    auto gain = Tensor64::from_data({2}, {1, 1});
    auto bias = Tensor64::from_data({2}, {0, 0});
    auto x = Tensor64::from_data({1, 2}, {1, 3});
    auto y = layer_norm<double>(nullptr, x, gain, bias, 0.0);
    CHECK(y.value()[0] == doctest::Approx(-1.0));
    CHECK(y.value()[1] == doctest::Approx(1.0));

    // constant row: zero before affine, variance guarded by eps
    auto c = Tensor64::from_data({1, 2}, {4, 4});
    auto yc = layer_norm<double>(nullptr, c, gain, bias, 1e-5);
    CHECK(yc.value()[0] == doctest::Approx(0.0));
    CHECK(yc.value()[1] == doctest::Approx(0.0));
}

TEST_CASE("layer_norm zero feature dim is a dimension error") {
    Tensor64 x({3, 0});
    Tensor64 g({0});
    Tensor64 b({0});
    CHECK_THROWS_AS(layer_norm<double>(nullptr, x, g, b, 1e-5), DimensionError);
}

TEST_CASE("layer_norm gradient vs finite differences") {
    Rng rng(23);
    auto x = random_tensor<double>({4, 7}, rng);
    auto gain = random_tensor<double>({7}, rng, true, 0.5, 1.5);
    auto bias = random_tensor<double>({7}, rng);
    auto res = gradcheck<double>({&x, &gain, &bias},
                                 [&](Tape64* t) {
                                     Rng w(96);
                                     return weighted_sum(t, layer_norm(t, x, gain, bias, 1e-5), w);
                                 },
                                 1e-5);
    CHECK(res.passed);
}

TEST_CASE("cross entropy uniform logits gives ln C") {
    auto logits = Tensor64::from_data({2, 5}, std::vector<double>(10, 0.7));
    auto loss = cross_entropy_loss<double>(nullptr, logits, {0, 3});
    CHECK(loss.item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy saturated case") {
    std::vector<double> v(4, 0.0);
    v[2] = 1e6;
    auto logits = Tensor64::from_data({1, 4}, v);
    auto loss = cross_entropy_loss<double>(nullptr, logits, {2});
    CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cross entropy gradient equals (p - onehot)/B") {
    Rng rng(24);
    auto logits = random_tensor<double>({4, 7}, rng, true, -2.0, 2.0);
    std::vector<int> labels{1, 6, 0, 3};
    Tape64 tape;
    auto loss = cross_entropy_loss(&tape, logits, labels);
    tape.backward(loss);
    // analytic oracle computed independently
    for (std::size_t i = 0; i < 4; ++i) {
        double mx = -1e300, denom = 0;
        for (std::size_t j = 0; j < 7; ++j) mx = std::max(mx, logits.value()[i * 7 + j]);
        for (std::size_t j = 0; j < 7; ++j) denom += std::exp(logits.value()[i * 7 + j] - mx);
        for (std::size_t j = 0; j < 7; ++j) {
            const double p = std::exp(logits.value()[i * 7 + j] - mx) / denom;
            const double expected =
                (p - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0)) / 4.0;
            CHECK(std::abs(logits.grad()[i * 7 + j] - expected) < 1e-10);
        }
    }
}

TEST_CASE("cross entropy label range error") {
    auto logits = Tensor64::from_data({1, 3}, {0.0, 0.0, 0.0});
    CHECK_THROWS_AS(cross_entropy_loss<double>(nullptr, logits, {3}), IndexError);
    CHECK_THROWS_AS(cross_entropy_loss<double>(nullptr, logits, {-1}), IndexError);
}

TEST_CASE("backward on scalar product") {
    Tape64 tape;
    auto x = Tensor64::scalar(3.0, true);
    auto y = Tensor64::scalar(-2.0, true);
    auto loss = mul(&tape, x, y);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(-2.0));
    CHECK(y.grad()[0] == doctest::Approx(3.0));
}

TEST_CASE("backward twice without reset is a contract error") {
    Tape64 tape;
    auto x = Tensor64::scalar(3.0, true);
    auto loss = scale(&tape, x, 2.0);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
}

TEST_CASE("backward rejects non-scalar and foreign tensors") {
    Tape64 tape;
    Rng rng(1);
    auto x = random_tensor<double>({2, 2}, rng);
    auto y = add(&tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
    auto leaf = Tensor64::scalar(1.0, true);
    CHECK_THROWS_AS(tape.backward(leaf), ContractError);
}

TEST_CASE("tape topological order and single-visit replay") {
    Tape64 tape;
    Rng rng(31);
    auto a = random_tensor<double>({3, 3}, rng);
    auto b = random_tensor<double>({3, 3}, rng);
    auto c = matmul(&tape, a, b);
    auto d = add(&tape, c, c);
    auto e = sum_all(&tape, d);
    for (std::size_t i = 0; i < tape.num_nodes(); ++i) {
        for (int in : tape.node(i).inputs) {
            CHECK(in < static_cast<int>(i));  // inputs precede their consumers
        }
    }
    tape.backward(e);
    for (std::size_t i = 0; i < tape.num_nodes(); ++i) CHECK(tape.node(i).visits == 1);
}

TEST_CASE("elementwise and structural op gradients") {
    Rng rng(41);
    auto a = random_tensor<double>({3, 5}, rng);
    auto b = random_tensor<double>({3, 5}, rng);
    auto v = random_tensor<double>({5}, rng);

    auto res = gradcheck<double>({&a, &b, &v},
                                 [&](Tape64* t) {
                                     Rng w(95);
                                     auto s1 = add(t, mul(t, a, b), sub(t, a, b));
                                     auto s2 = add_rowvec(t, s1, v);
                                     auto s3 = relu(t, s2);
                                     return weighted_sum(t, s3, w);
                                 },
                                 1e-6);
    CHECK(res.passed);
}

TEST_CASE("transpose and gather gradients") {
    Rng rng(42);
    auto a = random_tensor<double>({4, 6}, rng);
    auto res = gradcheck<double>({&a},
                                 [&](Tape64* t) {
                                     Rng w(94);
                                     auto tr = transpose(t, a);
                                     auto g = gather_rows(t, tr, {1, 3, 3});
                                     return weighted_sum(t, g, w);
                                 },
                                 1e-6);
    CHECK(res.passed);
}

TEST_CASE("embedding lookup gradients and index error") {
    Rng rng(43);
    auto table = random_tensor<double>({7, 4}, rng);
    std::vector<int> ids{0, 3, 3, 6, 1};
    auto res = gradcheck<double>({&table},
                                 [&](Tape64* t) {
                                     Rng w(93);
                                     return weighted_sum(t, embedding_lookup(t, table, ids), w);
                                 },
                                 1e-6);
    CHECK(res.passed);
    CHECK_THROWS_AS(embedding_lookup<double>(nullptr, table, {7}), IndexError);
}

TEST_CASE("concat_head_slices layout and gradients") {
    Rng rng(44);
    auto a = random_tensor<double>({2, 4}, rng);  // 2 heads x 2
    auto b = random_tensor<double>({2, 2}, rng);  // 2 heads x 1
    auto c = concat_head_slices<double>(nullptr, a, b, 2);
    CHECK(c.dim(1) == 6);
    CHECK(c.at(0, 0) == a.at(0, 0));
    CHECK(c.at(0, 1) == a.at(0, 1));
    CHECK(c.at(0, 2) == b.at(0, 0));
    CHECK(c.at(0, 3) == a.at(0, 2));
    CHECK(c.at(0, 5) == b.at(0, 1));
    auto res = gradcheck<double>({&a, &b},
                                 [&](Tape64* t) {
                                     Rng w(92);
                                     return weighted_sum(t, concat_head_slices(t, a, b, 2), w);
                                 },
                                 1e-6);
    CHECK(res.passed);
}

TEST_CASE("dropout keeps expectation and masks gradients") {
    Rng rng(45);
    auto a = random_tensor<double>({20, 20}, rng, true, 0.5, 1.5);
    auto res = gradcheck<double>({&a},
                                 [&](Tape64* t) {
                                     Rng w(91);
                                     Rng drop(1234);  // same masks on every call
                                     auto d = dropout(t, a, 0.3, &drop);
                                     return weighted_sum(t, d, w);
                                 },
                                 1e-6);
    CHECK(res.passed);
    CHECK_THROWS_AS(dropout<double>(nullptr, a, 1.0, nullptr), ConfigError);
}

TEST_CASE("rope_rotate_rows preserves norms and gradchecks") {
    Rng rng(46);
    const std::size_t B = 2, L = 3, H = 2, D = 4;
    auto x = random_tensor<double>({B * L, H * D}, rng);
    std::vector<double> cos_t(L * D / 2), sin_t(L * D / 2);
    Rng arng(9);
    for (std::size_t i = 0; i < cos_t.size(); ++i) {
        const double ang = arng.uniform(-2.0, 2.0);
        cos_t[i] = std::cos(ang);
        sin_t[i] = std::sin(ang);
    }
    std::vector<std::uint8_t> enabled{1, 0};
    auto y = rope_rotate_rows<double>(nullptr, x, B, L, H, D, cos_t, sin_t, D / 2, enabled);
    for (std::size_t r = 0; r < B * L; ++r) {
        double nx = 0, ny = 0;
        for (std::size_t c = 0; c < D; ++c) {
            nx += x.at(r, c) * x.at(r, c);
            ny += y.at(r, c) * y.at(r, c);
        }
        CHECK(std::sqrt(ny) == doctest::Approx(std::sqrt(nx)).epsilon(1e-9));
        // disabled head passes through untouched
        for (std::size_t c = D; c < 2 * D; ++c) CHECK(y.at(r, c) == x.at(r, c));
    }
    auto res = gradcheck<double>(
        {&x},
        [&](Tape64* t) {
            Rng w(90);
            return weighted_sum(
                t, rope_rotate_rows(t, x, B, L, H, D, cos_t, sin_t, D / 2, enabled), w);
        },
        1e-6);
    CHECK(res.passed);
}

TEST_CASE("attention_core plain gradient check (f64)") {
    Rng rng(47);
    const std::size_t B = 2, H = 2, L = 4, DQK = 3, DV = 2;
    auto q = random_tensor<double>({B * L, H * DQK}, rng);
    auto k = random_tensor<double>({B * L, H * DQK}, rng);
    auto v = random_tensor<double>({B * L, H * DV}, rng);
    AttnOptions<double> opts;
    opts.batch = B;
    opts.heads = H;
    opts.len = L;
    opts.d_qk = DQK;
    opts.d_v = DV;
    opts.scale = 1.0 / std::sqrt(static_cast<double>(DQK));
    auto res = gradcheck<double>({&q, &k, &v},
                                 [&](Tape64* t) {
                                     Rng w(89);
                                     return weighted_sum(t, attention_core(t, q, k, v, opts), w);
                                 },
                                 1e-6);
    CHECK(res.passed);
}

TEST_CASE("attention_core with ALiBi bias and learned table gradients") {
    Rng rng(48);
    const std::size_t B = 1, H = 2, L = 5, D = 3;
    auto q = random_tensor<double>({B * L, H * D}, rng);
    auto k = random_tensor<double>({B * L, H * D}, rng);
    auto v = random_tensor<double>({B * L, H * D}, rng);

    SUBCASE("alibi") {
        AttnBias<double> bias;
        bias.kind = AttnBiasKind::Alibi;
        bias.alibi_slopes = {0.5, 0.25};
        AttnOptions<double> opts;
        opts.batch = B;
        opts.heads = H;
        opts.len = L;
        opts.d_qk = D;
        opts.d_v = D;
        opts.scale = 0.57;
        opts.bias = &bias;
        auto res = gradcheck<double>({&q, &k, &v},
                                     [&](Tape64* t) {
                                         Rng w(88);
                                         return weighted_sum(t, attention_core(t, q, k, v, opts),
                                                             w);
                                     },
                                     1e-6);
        CHECK(res.passed);
    }
    SUBCASE("learned table") {
        Rng trng(3);
        auto table = random_tensor<double>({H, 4}, trng, true, -0.3, 0.3);
        AttnBias<double> bias;
        bias.kind = AttnBiasKind::LearnedTable;
        bias.table = table;
        bias.max_offset = 3;
        AttnOptions<double> opts;
        opts.batch = B;
        opts.heads = H;
        opts.len = L;
        opts.d_qk = D;
        opts.d_v = D;
        opts.scale = 0.57;
        opts.bias = &bias;
        auto res = gradcheck<double>({&q, &k, &v, &table},
                                     [&](Tape64* t) {
                                         Rng w(87);
                                         return weighted_sum(t, attention_core(t, q, k, v, opts),
                                                             w);
                                     },
                                     1e-6);
        CHECK(res.passed);
    }
    SUBCASE("head mask zeroes output slice and gradients") {
        std::vector<std::uint8_t> mask{1, 0};
        AttnOptions<double> opts;
        opts.batch = B;
        opts.heads = H;
        opts.len = L;
        opts.d_qk = D;
        opts.d_v = D;
        opts.scale = 1.0;
        opts.head_mask = &mask;
        auto out = attention_core<double>(nullptr, q, k, v, opts);
        for (std::size_t r = 0; r < B * L; ++r)
            for (std::size_t c = 0; c < D; ++c) CHECK(out.at(r, c) == 0.0);
        auto res = gradcheck<double>({&q, &k, &v},
                                     [&](Tape64* t) {
                                         Rng w(86);
                                         return weighted_sum(t, attention_core(t, q, k, v, opts),
                                                             w);
                                     },
                                     1e-6);
        CHECK(res.passed);
    }
    SUBCASE("attention dropout path") {
        AttnOptions<double> opts;
        opts.batch = B;
        opts.heads = H;
        opts.len = L;
        opts.d_qk = D;
        opts.d_v = D;
        opts.scale = 1.0;
        opts.dropout_p = 0.25;
        auto res = gradcheck<double>({&q, &k, &v},
                                     [&](Tape64* t) {
                                         Rng w(85);
                                         Rng drop(777);
                                         AttnOptions<double> o = opts;
                                         o.dropout_rng = &drop;
                                         return weighted_sum(t, attention_core(t, q, k, v, o), w);
                                     },
                                     1e-6);
        CHECK(res.passed);
    }
}

TEST_CASE("attention causality: future tokens never influence earlier rows") {
    Rng rng(49);
    const std::size_t B = 1, H = 2, L = 6, D = 4;
    auto q = random_tensor<double>({B * L, H * D}, rng, false);
    auto k = random_tensor<double>({B * L, H * D}, rng, false);
    auto v = random_tensor<double>({B * L, H * D}, rng, false);
    AttnOptions<double> opts;
    opts.batch = B;
    opts.heads = H;
    opts.len = L;
    opts.d_qk = D;
    opts.d_v = D;
    opts.scale = 0.5;
    auto base = attention_core<double>(nullptr, q, k, v, opts);
    // perturb position t = 3 in k and v
    const std::size_t t = 3;
    for (std::size_t c = 0; c < H * D; ++c) {
        k.mutable_value()[t * H * D + c] += 0.7;
        v.mutable_value()[t * H * D + c] -= 1.3;
    }
    auto pert = attention_core<double>(nullptr, q, k, v, opts);
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < H * D; ++c)
            CHECK(pert.at(r, c) == base.at(r, c));  // exact: rows before t untouched
    bool changed = false;
    for (std::size_t r = t; r < L; ++r)
        for (std::size_t c = 0; c < H * D; ++c)
            if (pert.at(r, c) != base.at(r, c)) changed = true;
    CHECK(changed);
}

TEST_CASE("tape replay is deterministic: bit-identical f64 gradients") {
    auto run = [](std::vector<double>& grads_out) {
        Rng rng(1234);
        auto a = random_tensor<double>({6, 6}, rng);
        auto b = random_tensor<double>({6, 6}, rng);
        Tape64 tape;
        auto c = matmul(&tape, a, b);
        auto s = softmax_rows(&tape, c);
        Rng w(55);
        Tensor64 wt({6, 6});
        for (auto& x : wt.mutable_value()) x = w.uniform(-1, 1);
        auto loss = sum_all(&tape, mul(&tape, s, wt));
        tape.backward(loss);
        grads_out = a.grad();
        std::vector<double> gb = b.grad();
        grads_out.insert(grads_out.end(), gb.begin(), gb.end());
    };
    std::vector<double> g1, g2;
    run(g1);
    run(g2);
    REQUIRE(g1.size() == g2.size());
    CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}
