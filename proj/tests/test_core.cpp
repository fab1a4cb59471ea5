#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dpnet/gradcheck.hpp"
#include "dpnet/ops.hpp"
#include "oracles.hpp"

using namespace dpnet;

namespace {

Tensor4 rand_tensor(Dims4 d, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor4 t(d);
    for (std::int64_t i = 0; i < t.size(); ++i) t.flat(i) = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("tensor invariants") {
    Tensor4 t(Dims4{2, 3, 4, 5}, 1.5);
    CHECK(t.size() == 120);
    CHECK(t.at(1, 2, 3, 4) == 1.5);
    CHECK_THROWS_AS(Tensor4(Dims4{0, 1, 1, 1}), ShapeError);
    CHECK_THROWS_AS(Tensor4(Dims4{1, 1, 2, 2}, std::vector<double>{1.0}), ShapeError);
    CHECK(t.all_finite());
}

TEST_CASE("conv2d matches frozen 3x3 all-ones example") {
    // 1x1x3x3 ones, 3x3 ones kernel, pad 1: [[4,6,4],[6,9,6],[4,6,4]].
    Tensor4 x(Dims4{1, 1, 3, 3}, 1.0);
    Tensor4 w(Dims4{1, 1, 3, 3}, 1.0);
    Tensor4 y = conv2d_forward(x, w, Conv2dGeom{1, 1, 1});
    const double expected[9] = {4, 6, 4, 6, 9, 6, 4, 6, 4};
    for (int i = 0; i < 9; ++i) CHECK(y.flat(i) == doctest::Approx(expected[i]).epsilon(1e-15));
}

TEST_CASE("conv2d identity kernel") {
    Rng rng(3);
    Tensor4 x = rand_tensor(Dims4{2, 1, 4, 4}, rng);
    Tensor4 w(Dims4{1, 1, 1, 1});
    w.flat(0) = 1.0;
    Tensor4 y = conv2d_forward(x, w, Conv2dGeom{1, 0, 1});
    CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("grouped conv doubles channels independently") {
    Tensor4 x(Dims4{1, 2, 2, 2});
    for (int i = 0; i < 8; ++i) x.flat(i) = i + 1;
    Tensor4 w(Dims4{2, 1, 1, 1}, 2.0);
    Tensor4 y = conv2d_forward(x, w, Conv2dGeom{1, 0, 2});
    for (int i = 0; i < 8; ++i) CHECK(y.flat(i) == doctest::Approx(2.0 * (i + 1)));
}

TEST_CASE("conv2d equals naive loop oracle on random instances") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const int groups = 1 << rng.uniform_int(3);  // 1,2,4
        const int cin = groups * (1 + static_cast<int>(rng.uniform_int(2)));
        const int cout_g = 1 + static_cast<int>(rng.uniform_int(2));
        const int cout = groups * cout_g;
        const int k = 1 + 2 * static_cast<int>(rng.uniform_int(3));  // 1,3,5
        const int stride = 1 + static_cast<int>(rng.uniform_int(2));
        const int pad = static_cast<int>(rng.uniform_int(3));
        const int h = k + static_cast<int>(rng.uniform_int(5));
        const int w = k + static_cast<int>(rng.uniform_int(5));
        if (h > 8 || w > 8) continue;
        Tensor4 x = rand_tensor(Dims4{1 + static_cast<int>(rng.uniform_int(2)), cin, h, w}, rng);
        Tensor4 wt = rand_tensor(Dims4{cout, cin / groups, k, k}, rng);
        Conv2dGeom geom{stride, pad, groups};
        Tensor4 fast = conv2d_forward(x, wt, geom);
        Tensor4 naive = testing::conv2d_naive(x, wt, geom);
        CHECK(max_abs_diff(fast, naive) <= 1e-12);
    }
}

TEST_CASE("grouped conv with groups=1 equals ungrouped bit-for-bit") {
    Rng rng(23);
    Tensor4 x = rand_tensor(Dims4{2, 3, 6, 6}, rng);
    Tensor4 w = rand_tensor(Dims4{4, 3, 3, 3}, rng);
    Tensor4 a = conv2d_forward(x, w, Conv2dGeom{1, 1, 1});
    Tensor4 b = conv2d_forward(x, w, Conv2dGeom{1, 1, 1});
    CHECK(a == b);
}

TEST_CASE("conv2d shape and config errors") {
    Tensor4 x(Dims4{1, 3, 5, 5});
    Tensor4 w(Dims4{4, 2, 3, 3});
    CHECK_THROWS_AS(conv2d_forward(x, w, Conv2dGeom{1, 1, 1}), ShapeError);
    Tensor4 w2(Dims4{4, 3, 3, 3});
    CHECK_THROWS_AS(conv2d_forward(x, w2, Conv2dGeom{1, 1, 2}), ConfigError);
    Tensor4 big(Dims4{1, 3, 2, 2});
    CHECK_THROWS_AS(conv2d_forward(big, w2, Conv2dGeom{1, 0, 1}), ShapeError);
}

TEST_CASE("ConvParams validation") {
    ConvParams p;
    p.weights = Tensor4(Dims4{4, 2, 3, 3});
    p.groups = 2;
    CHECK_NOTHROW(p.validate());
    p.weights = Tensor4(Dims4{4, 2, 4, 4});
    CHECK_THROWS_AS(p.validate(), ConfigError);  // even kernel
    p.weights = Tensor4(Dims4{3, 2, 3, 3});
    CHECK_THROWS_AS(p.validate(), ConfigError);  // groups do not divide c_out
}

TEST_CASE("global_avg_pool examples") {
    Tensor4 c(Dims4{2, 3, 4, 4}, 0.7);
    Tape tape;
    Value out = global_avg_pool(tape.leaf(c));
    for (std::int64_t i = 0; i < out.val().size(); ++i) {
        CHECK(out.val().flat(i) == doctest::Approx(0.7).epsilon(1e-15));
    }

    Tensor4 q(Dims4{1, 1, 2, 2});
    q.flat(0) = 1;
    q.flat(1) = 2;
    q.flat(2) = 3;
    q.flat(3) = 4;
    Tape tape2;
    CHECK(global_avg_pool(tape2.leaf(q)).val().flat(0) == doctest::Approx(2.5));

    Tensor4 z(Dims4{1, 2, 3, 3});
    Tape tape3;
    CHECK(global_avg_pool(tape3.leaf(z)).val().max_abs() == 0.0);
}

TEST_CASE("linear examples") {
    Tape tape;
    // Identity weight, zero bias.
    Tensor4 x(Dims4{1, 2, 1, 1});
    x.flat(0) = 2.0;
    x.flat(1) = 3.0;
    Tensor4 eye(Dims4{2, 2, 1, 1});
    eye.at(0, 0, 0, 0) = 1.0;
    eye.at(1, 1, 0, 0) = 1.0;
    Value out = linear(tape.leaf(x), tape.leaf(eye));
    CHECK(out.val().flat(0) == 2.0);
    CHECK(out.val().flat(1) == 3.0);

    // Zero weight, bias b.
    Tensor4 zero_w(Dims4{2, 2, 1, 1});
    Tensor4 b(Dims4{1, 2, 1, 1});
    b.flat(0) = -1.5;
    b.flat(1) = 4.0;
    Value out2 = linear(tape.leaf(x), tape.leaf(zero_w), tape.leaf(b));
    CHECK(out2.val().flat(0) == -1.5);
    CHECK(out2.val().flat(1) == 4.0);

    // [[1,1],[1,-1]] * (2,3) = (5,-1).
    Tensor4 w(Dims4{2, 2, 1, 1});
    w.at(0, 0, 0, 0) = 1.0;
    w.at(0, 1, 0, 0) = 1.0;
    w.at(1, 0, 0, 0) = 1.0;
    w.at(1, 1, 0, 0) = -1.0;
    Value out3 = linear(tape.leaf(x), tape.leaf(w));
    CHECK(out3.val().flat(0) == 5.0);
    CHECK(out3.val().flat(1) == -1.0);

    Tensor4 bad(Dims4{2, 3, 1, 1});
    CHECK_THROWS_AS(linear(tape.leaf(x), tape.leaf(bad)), ShapeError);
}

TEST_CASE("activation examples and relu subgradient") {
    Tape tape;
    Tensor4 x(Dims4{1, 1, 1, 3});
    x.flat(0) = -1.0;
    x.flat(1) = 2.0;
    x.flat(2) = 0.0;
    Value v = tape.leaf(x, true);
    Value y = relu(v);
    CHECK(y.val().flat(0) == 0.0);
    CHECK(y.val().flat(1) == 2.0);

    tape.backward(sum_all(y));
    CHECK(v.grad().flat(0) == 0.0);  // x = -1
    CHECK(v.grad().flat(1) == 1.0);  // x = 2
    CHECK(v.grad().flat(2) == 0.0);  // subgradient at 0 is 0

    Tape tape2;
    Tensor4 zero(Dims4{1, 1, 1, 1});
    CHECK(sigmoid(tape2.leaf(zero)).val().flat(0) == doctest::Approx(0.5));
}

TEST_CASE("relu gradient at +-3") {
    Tape tape;
    Tensor4 x(Dims4{1, 1, 1, 2});
    x.flat(0) = 3.0;
    x.flat(1) = -3.0;
    Value v = tape.leaf(x, true);
    tape.backward(sum_all(relu(v)));
    CHECK(v.grad().flat(0) == 1.0);
    CHECK(v.grad().flat(1) == 0.0);
}

TEST_CASE("softmax segment examples") {
    Tape tape;
    Tensor4 equal(Dims4{1, 4, 1, 1}, 0.37);
    Value y = softmax_segments(tape.leaf(equal), 4);
    for (int i = 0; i < 4; ++i) CHECK(y.val().flat(i) == doctest::Approx(0.25).epsilon(1e-14));

    Tensor4 two(Dims4{1, 2, 1, 1});
    two.flat(0) = std::log(1.0);
    two.flat(1) = std::log(3.0);
    Value y2 = softmax_segments(tape.leaf(two), 2);
    CHECK(y2.val().flat(0) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(y2.val().flat(1) == doctest::Approx(0.75).epsilon(1e-14));

    Tensor4 bad(Dims4{1, 5, 1, 1});
    CHECK_THROWS_AS(softmax_segments(tape.leaf(bad), 2), ShapeError);
}

TEST_CASE("softmax properties: simplex, positivity, shift invariance") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int m = 2 + static_cast<int>(rng.uniform_int(4));
        const int slots = 1 + static_cast<int>(rng.uniform_int(4));
        Tensor4 x = rand_tensor(Dims4{2, m * slots, 1, 1}, rng, -5.0, 5.0);
        Tape tape;
        Value y = softmax_segments(tape.leaf(x), m);
        for (int n = 0; n < 2; ++n) {
            for (int s = 0; s < slots; ++s) {
                double sum = 0.0;
                for (int j = 0; j < m; ++j) {
                    double v = y.val().at(n, s * m + j, 0, 0);
                    CHECK(v > 0.0);
                    CHECK(v < 1.0);
                    sum += v;
                }
                CHECK(std::abs(sum - 1.0) <= 1e-12);
            }
        }
        // Shift invariance within each segment.
        Tensor4 shifted = x;
        const double c = rng.uniform(-3.0, 3.0);
        for (std::int64_t i = 0; i < shifted.size(); ++i) shifted.flat(i) += c;
        Tape tape2;
        Value y2 = softmax_segments(tape2.leaf(shifted), m);
        CHECK(max_abs_diff(y.val(), y2.val()) <= 1e-12);
    }
}

TEST_CASE("resize_bilinear examples") {
    Rng rng(5);
    Tensor4 x = rand_tensor(Dims4{1, 2, 3, 4}, rng);
    Tensor4 same = resize_bilinear_forward(x, 3, 4);
    CHECK(max_abs_diff(x, same) == 0.0);

    Tensor4 c(Dims4{1, 1, 2, 2}, 0.3);
    Tensor4 big = resize_bilinear_forward(c, 5, 7);
    for (std::int64_t i = 0; i < big.size(); ++i) {
        CHECK(big.flat(i) == doctest::Approx(0.3).epsilon(1e-14));
    }

    // (0,1) widened to 4 columns under half-pixel centers: (0, .25, .75, 1).
    Tensor4 pair(Dims4{1, 1, 1, 2});
    pair.flat(1) = 1.0;
    Tensor4 wide = resize_bilinear_forward(pair, 1, 4);
    CHECK(wide.flat(0) == doctest::Approx(0.0));
    CHECK(wide.flat(1) == doctest::Approx(0.25));
    CHECK(wide.flat(2) == doctest::Approx(0.75));
    CHECK(wide.flat(3) == doctest::Approx(1.0));
}

TEST_CASE("backward basics") {
    Rng rng(7);
    Tensor4 x = rand_tensor(Dims4{1, 2, 3, 3}, rng);

    Tape tape;
    Value v = tape.leaf(x, true);
    tape.backward(sum_all(v));
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(v.grad().flat(i) == 1.0);

    Tape tape2;
    Value v2 = tape2.leaf(x, true);
    Value half_sq = scale_const(sum_all(mul(v2, v2)), 0.5);
    tape2.backward(half_sq);
    CHECK(max_abs_diff(v2.grad(), x) <= 1e-15);

    Tape tape3;
    Value v3 = tape3.leaf(x, true);
    CHECK_THROWS_AS(tape3.backward(relu(v3)), ShapeError);  // non-scalar seed
}

TEST_CASE("grad_check: linear map is exact") {
    Rng rng(9);
    Tensor4 x = rand_tensor(Dims4{1, 2, 3, 3}, rng);
    Tensor4 r = rand_tensor(Dims4{1, 2, 3, 3}, rng, 0.3, 1.0);
    double err = grad_check(
        [&](Tape& t, Value v) { return sum_all(mul(v, t.leaf(r))); }, x);
    CHECK(err < 1e-10);
}

TEST_CASE("grad_check: conv2d on random 1x2x5x5") {
    Rng rng(13);
    Tensor4 x = rand_tensor(Dims4{1, 2, 5, 5}, rng);
    Tensor4 w = rand_tensor(Dims4{2, 2, 3, 3}, rng);
    Tensor4 r = rand_tensor(Dims4{1, 2, 5, 5}, rng, 0.2, 1.0);
    double err = grad_check(
        [&](Tape& t, Value v) {
            return sum_all(mul(conv2d(v, t.leaf(w), Conv2dGeom{1, 1, 1}), t.leaf(r)));
        },
        x);
    CHECK(err < 1e-6);
}

TEST_CASE("composite op matches finite differences") {
    Rng rng(15);
    Tensor4 x = rand_tensor(Dims4{1, 4, 4, 4}, rng, -0.8, 0.8);
    Tensor4 w = rand_tensor(Dims4{4, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor4 b = rand_tensor(Dims4{1, 4, 1, 1}, rng, -0.2, 0.2);
    Tensor4 r = rand_tensor(Dims4{1, 4, 1, 1}, rng, 0.3, 1.0);
    double err = grad_check(
        [&](Tape& t, Value v) {
            // Smooth chain: kink-free so central differences are clean.
            Value y = sigmoid(bias_channels(conv2d(v, t.leaf(w), Conv2dGeom{1, 1, 2}), t.leaf(b)));
            Value z = global_avg_pool(mul(y, sigmoid(y)));
            return sum_all(mul(softmax_segments(z, 2), t.leaf(r)));
        },
        x);
    CHECK(err < 1e-6);
}

TEST_CASE("gap + broadcast multiply preserves batch independence") {
    Rng rng(19);
    Tensor4 x = rand_tensor(Dims4{3, 2, 4, 4}, rng);
    auto run = [](const Tensor4& input) {
        Tape tape;
        Value v = tape.leaf(input);
        return scale_channels(v, global_avg_pool(v)).val();
    };
    Tensor4 base = run(x);

    // Permute batch entries (rotate by one) and compare permuted outputs.
    Tensor4 rotated(x.dims());
    const std::int64_t per = x.size() / 3;
    for (int n = 0; n < 3; ++n) {
        for (std::int64_t i = 0; i < per; ++i) {
            rotated.flat(((n + 1) % 3) * per + i) = x.flat(n * per + i);
        }
    }
    Tensor4 rot_out = run(rotated);
    for (int n = 0; n < 3; ++n) {
        for (std::int64_t i = 0; i < per; ++i) {
            CHECK(rot_out.flat(((n + 1) % 3) * per + i) == base.flat(n * per + i));
        }
    }
}

TEST_CASE("every forward/backward output stays finite") {
    Rng rng(21);
    Tensor4 x = rand_tensor(Dims4{2, 4, 6, 6}, rng, -3.0, 3.0);
    Tensor4 w = rand_tensor(Dims4{4, 2, 3, 3}, rng, -2.0, 2.0);
    Tape tape;
    Value v = tape.leaf(x, true);
    Value y = conv2d(v, tape.leaf(w), Conv2dGeom{2, 1, 2});
    Value z = sum_all(sigmoid(relu(y)));
    tape.backward(z);
    CHECK(y.val().all_finite());
    CHECK(v.grad().all_finite());
}

TEST_CASE("deliberately corrupted backward rule is caught by grad_check") {
    Rng rng(25);
    Tensor4 x = rand_tensor(Dims4{1, 1, 3, 3}, rng, 0.5, 1.5);
    // A "times two" op whose backward claims the factor is three.
    auto corrupted = [](Tape& t, Value v) {
        Tensor4 out = v.val();
        for (std::int64_t i = 0; i < out.size(); ++i) out.flat(i) *= 2.0;
        Value doubled = t.make_node(std::move(out), {v}, [](const BackwardCtx& ctx) {
            if (Tensor4* g = ctx.in_grads[0]) {
                for (std::int64_t i = 0; i < g->size(); ++i) {
                    g->flat(i) += 3.0 * ctx.out_grad.flat(i);
                }
            }
        });
        return sum_all(doubled);
    };
    double err = grad_check(corrupted, x);
    CHECK(err > 1e-2);
}
