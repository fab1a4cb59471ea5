#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dpnet/dpconv.hpp"
#include "dpnet/gradcheck.hpp"

using namespace dpnet;

namespace {

Tensor4 rand_tensor(Dims4 d, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor4 t(d);
    for (std::int64_t i = 0; i < t.size(); ++i) t.flat(i) = rng.uniform(lo, hi);
    return t;
}

DPConvSpec worked_spec() {
    DPConvSpec spec;
    spec.c_in = 64;
    spec.c_out = 64;
    spec.kernel_sizes = {3, 5, 7, 9};
    spec.groups = {4, 4, 8, 16};
    return spec;
}

}  // namespace

TEST_CASE("spec validation catches bad configurations") {
    DPConvSpec spec = worked_spec();
    CHECK_NOTHROW(spec.validate());

    DPConvSpec bad = spec;
    bad.kernel_sizes = {3, 5, 5, 9};
    CHECK_THROWS_AS(bad.validate(), ConfigError);  // not strictly increasing
    bad = spec;
    bad.kernel_sizes = {3, 4, 7, 9};
    CHECK_THROWS_AS(bad.validate(), ConfigError);  // even kernel
    bad = spec;
    bad.c_out = 62;
    CHECK_THROWS_AS(bad.validate(), ConfigError);  // m does not divide c_out
    bad = spec;
    bad.groups = {4, 4, 8, 32};
    CHECK_THROWS_AS(bad.validate(), ConfigError);  // g does not divide branch channels
}

TEST_CASE("count_params_standard") {
    CHECK(count_params_standard(64, 64, 3) == 36864);
    CHECK(count_params_standard(1, 1, 1) == 1);
    // Matches the element count of an instantiated weight tensor.
    Tensor4 w(Dims4{64, 64, 3, 3});
    CHECK(count_params_standard(64, 64, 3) == w.size());
    CHECK_THROWS_AS(count_params_standard(0, 1, 3), ConfigError);
}

TEST_CASE("count_params_pyramid on the worked instance") {
    DPConvSpec spec = worked_spec();
    // Per-branch: 16*16*9 + 16*16*25 + 16*8*49 + 16*4*81.
    CHECK(count_params_pyramid(spec) == 2304 + 6400 + 6272 + 5184);
    CHECK(count_params_pyramid(spec) == 20160);

    // Degenerate m=1 equals the standard count.
    DPConvSpec single;
    single.c_in = 8;
    single.c_out = 8;
    single.kernel_sizes = {5};
    single.groups = {1};
    CHECK(count_params_pyramid(single) == count_params_standard(8, 8, 5));

    // Doubling every group halves every branch term.
    DPConvSpec doubled = worked_spec();
    doubled.groups = {8, 8, 16, 32};
    doubled.c_in = 128;
    doubled.c_out = 128;
    DPConvSpec base = doubled;
    base.groups = {4, 4, 8, 16};
    CHECK(count_params_pyramid(base) == 2 * count_params_pyramid(doubled));
}

TEST_CASE("count matches enumerated weight buffers of an instantiated block") {
    ParamSet params;
    Rng rng(5);
    DPConvBlock block(params, rng, "blk", worked_spec());
    CHECK(block.enumerated_branch_params() == count_params_pyramid(worked_spec()));
}

TEST_CASE("check_lightweight") {
    // K=3 reference, K_i=9 requires g > 9.
    DPConvSpec spec;
    spec.c_in = 144;
    spec.c_out = 144;
    spec.kernel_sizes = {9};
    spec.groups = {16};
    CHECK(check_lightweight(spec).lightweight);
    spec.groups = {9};
    CHECK_FALSE(check_lightweight(spec).lightweight);

    DPConvSpec worked = worked_spec();
    LightweightReport report = check_lightweight(worked);
    CHECK(report.lightweight);
    CHECK(count_params_pyramid(worked) <= count_params_standard(64, 64, 3));
    CHECK(report.margins.size() == 4);
    CHECK(report.margins[0] == doctest::Approx(4.0 - 1.0));
    CHECK(report.margins[3] == doctest::Approx(16.0 - 9.0));

    DPConvSpec ungrouped = worked_spec();
    ungrouped.groups = {1, 1, 1, 1};
    CHECK_FALSE(check_lightweight(ungrouped).lightweight);  // g_2 = 1 <= 25/9
}

TEST_CASE("Proposition 1 as an executable theorem: 1000 random specs") {
    Rng rng(0x505);
    int tested = 0;
    while (tested < 1000) {
        DPConvSpec spec;
        const int m = 1 + static_cast<int>(rng.uniform_int(4));
        spec.reference_k = 1 + 2 * static_cast<int>(rng.uniform_int(3));  // 1,3,5
        // Strictly increasing odd kernels above the reference.
        int k = spec.reference_k;
        spec.kernel_sizes.clear();
        spec.groups.clear();
        for (int i = 0; i < m; ++i) {
            k += 2 * (1 + static_cast<int>(rng.uniform_int(2)));
            spec.kernel_sizes.push_back(k);
        }
        int max_g = 1;
        for (int ki : spec.kernel_sizes) {
            const double need = static_cast<double>(ki) * ki /
                                (spec.reference_k * spec.reference_k);
            int g = 1;
            while (g <= need) g *= 2;
            g <<= rng.uniform_int(2);  // extra slack keeps Eq. (7) satisfied
            spec.groups.push_back(g);
            max_g = std::max(max_g, g);
        }
        spec.c_out = (m * max_g) << rng.uniform_int(2);
        spec.c_in = max_g << rng.uniform_int(2);
        spec.validate();
        REQUIRE(check_lightweight(spec).lightweight);
        CHECK(count_params_pyramid(spec) <=
              count_params_standard(spec.c_in, spec.c_out, spec.reference_k));
        ++tested;
    }
}

TEST_CASE("pyramid_forward shapes and degenerate cases") {
    Rng rng(7);

    // m=1 degenerates to one standard grouped conv.
    DPConvSpec single;
    single.c_in = 4;
    single.c_out = 4;
    single.kernel_sizes = {3};
    single.groups = {2};
    ParamSet params;
    DPConvBlock block(params, rng, "single", single);
    Tensor4 x = rand_tensor(Dims4{1, 4, 6, 6}, rng);
    Tape tape;
    auto ys = block.pyramid_forward(tape, tape.leaf(x));
    CHECK(ys.size() == 1);
    Tensor4 direct = conv2d_forward(x, params.find("single.branch0.w")->value,
                                    Conv2dGeom{1, 1, 2});
    CHECK(max_abs_diff(ys[0].val(), direct) == 0.0);

    // Zero input -> all branch outputs zero.
    Tape tape2;
    auto zeros = block.pyramid_forward(tape2, tape2.leaf(Tensor4(Dims4{1, 4, 6, 6})));
    CHECK(zeros[0].val().max_abs() == 0.0);

    // m=2, K={3,5}, c_out=4: branch outputs have 2 channels and equal h,w.
    DPConvSpec two;
    two.c_in = 4;
    two.c_out = 4;
    two.kernel_sizes = {3, 5};
    two.groups = {1, 2};
    ParamSet params2;
    DPConvBlock block2(params2, rng, "two", two);
    Tape tape3;
    auto pair = block2.pyramid_forward(tape3, tape3.leaf(x));
    REQUIRE(pair.size() == 2);
    CHECK(pair[0].dims() == Dims4{1, 2, 6, 6});
    CHECK(pair[1].dims() == Dims4{1, 2, 6, 6});

    Tensor4 wrong(Dims4{1, 3, 6, 6});
    Tape tape4;
    CHECK_THROWS_AS(block2.pyramid_forward(tape4, tape4.leaf(wrong)), ShapeError);
}

TEST_CASE("routing weights: uniform for zero MLP, permutation invariant, simplex") {
    Rng rng(11);
    DPConvSpec spec;
    spec.c_in = 8;
    spec.c_out = 8;
    spec.kernel_sizes = {3, 5};
    spec.groups = {1, 2};
    ParamSet params;
    DPConvBlock block(params, rng, "blk", spec);

    // Zero MLP -> every slot is uniform 1/m.
    for (const char* name : {"blk.mlp.fc1.w", "blk.mlp.fc1.b", "blk.mlp.fc2.w", "blk.mlp.fc2.b"}) {
        params.find(name)->value.fill(0.0);
    }
    Tensor4 x = rand_tensor(Dims4{2, 8, 5, 5}, rng);
    RoutingWeights uniform = block.routing_weights(x);
    CHECK(uniform.branches == 2);
    for (std::int64_t i = 0; i < uniform.alpha.size(); ++i) {
        CHECK(uniform.alpha.flat(i) == doctest::Approx(0.5).epsilon(1e-14));
    }

    // Random MLP again.
    Rng rng2(13);
    params.find("blk.mlp.fc1.w")->value.init_uniform(rng2, 0.8);
    params.find("blk.mlp.fc2.w")->value.init_uniform(rng2, 0.8);

    // Spatial permutation of pixels leaves alpha unchanged (GAP invariance).
    Tensor4 permuted = x;
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 8; ++c)
            for (int y = 0; y < 5; ++y)
                for (int xx = 0; xx < 5; ++xx) {
                    permuted.at(n, c, y, xx) = x.at(n, c, 4 - y, 4 - xx);
                }
    CHECK(max_abs_diff(block.routing_weights(x).alpha, block.routing_weights(permuted).alpha) <=
          1e-12);

    // Slots sum to one.
    RoutingWeights rw = block.routing_weights(x);
    for (int n = 0; n < 2; ++n)
        for (int s = 0; s < rw.slots(); ++s) {
            double sum = 0.0;
            for (int j = 0; j < rw.branches; ++j) {
                double a = rw.at(n, s, j);
                CHECK(a > 0.0);
                CHECK(a < 1.0);
                sum += a;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
}

TEST_CASE("routing is input dependent") {
    Rng rng(17);
    DPConvSpec spec;
    spec.c_in = 8;
    spec.c_out = 8;
    spec.kernel_sizes = {3, 5};
    spec.groups = {1, 2};
    ParamSet params;
    DPConvBlock block(params, rng, "blk", spec);

    Tensor4 a(Dims4{1, 8, 5, 5});
    Tensor4 b(Dims4{1, 8, 5, 5});
    for (int c = 0; c < 8; ++c)
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 5; ++x) {
                a.at(0, c, y, x) = c < 4 ? 3.0 : -3.0;
                b.at(0, c, y, x) = c < 4 ? -3.0 : 3.0;
            }
    Tensor4 wa = block.routing_weights(a).alpha;
    Tensor4 wb = block.routing_weights(b).alpha;
    CHECK(max_abs_diff(wa, wb) > 0.1);
}

TEST_CASE("forward: saturated routing keeps only the winning branch") {
    Rng rng(19);
    DPConvSpec spec;
    spec.c_in = 4;
    spec.c_out = 4;
    spec.kernel_sizes = {3, 5};
    spec.groups = {1, 2};
    ParamSet params;
    DPConvBlock block(params, rng, "blk", spec);

    // Saturate routing: slot entries for branch 0 at +40, branch 1 at -40.
    params.find("blk.mlp.fc2.w")->value.fill(0.0);
    Parameter* bias = params.find("blk.mlp.fc2.b");
    for (int c = 0; c < 4; ++c) bias->value.flat(c) = (c % 2 == 0) ? 40.0 : -40.0;

    Tensor4 x = rand_tensor(Dims4{1, 4, 5, 5}, rng);
    Tape tape;
    auto det = block.forward_detail(tape, tape.leaf(x));

    // Y - x equals the branch-0 contribution; branch-1 channels are ~0.
    Tensor4 branch0 = conv2d_forward(x, params.find("blk.branch0.w")->value, Conv2dGeom{1, 1, 1});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 5; ++y)
            for (int xx = 0; xx < 5; ++xx) {
                CHECK(std::abs(det.y.val().at(0, c, y, xx) - x.at(0, c, y, xx) -
                               branch0.at(0, c, y, xx)) <= 1e-9);
                CHECK(std::abs(det.y.val().at(0, c + 2, y, xx) - x.at(0, c + 2, y, xx)) <= 1e-9);
            }
}

TEST_CASE("forward: zero branch weights reduce to the shortcut") {
    Rng rng(23);
    DPConvSpec spec;
    spec.c_in = 4;
    spec.c_out = 4;
    spec.kernel_sizes = {3, 5};
    spec.groups = {2, 2};
    ParamSet params;
    DPConvBlock block(params, rng, "blk", spec);
    params.find("blk.branch0.w")->value.fill(0.0);
    params.find("blk.branch1.w")->value.fill(0.0);

    Tensor4 x = rand_tensor(Dims4{2, 4, 5, 5}, rng);
    Tape tape;
    Value y = block.forward(tape, tape.leaf(x));
    CHECK(max_abs_diff(y.val(), x) == 0.0);  // identity shortcut, no projection
    CHECK_FALSE(block.has_shortcut());
}

TEST_CASE("degeneracy: m=1 forward equals shortcut(x) + conv exactly") {
    Rng rng(29);
    DPConvSpec spec;
    spec.c_in = 4;
    spec.c_out = 8;  // forces a projection shortcut
    spec.kernel_sizes = {3};
    spec.groups = {2};
    ParamSet params;
    DPConvBlock block(params, rng, "blk", spec);
    CHECK(block.has_shortcut());

    Tensor4 x = rand_tensor(Dims4{1, 4, 6, 6}, rng);
    Tape tape;
    Value y = block.forward(tape, tape.leaf(x));
    Tensor4 body = conv2d_forward(x, params.find("blk.branch0.w")->value, Conv2dGeom{1, 1, 2});
    Tensor4 shortcut = conv2d_forward(x, params.find("blk.shortcut.w")->value, Conv2dGeom{1, 0, 1});
    for (std::int64_t i = 0; i < body.size(); ++i) {
        CHECK(y.val().flat(i) == shortcut.flat(i) + body.flat(i));
    }
}

TEST_CASE("whole-vector softmax variant normalizes across the full vector") {
    Rng rng(31);
    DPConvSpec spec;
    spec.c_in = 8;
    spec.c_out = 8;
    spec.kernel_sizes = {3, 5};
    spec.groups = {1, 2};
    spec.softmax_axis = SoftmaxAxis::kWholeVector;
    ParamSet params;
    DPConvBlock block(params, rng, "blk", spec);
    Tensor4 x = rand_tensor(Dims4{1, 8, 5, 5}, rng);
    Tensor4 alpha = block.routing_weights(x).alpha;
    double total = 0.0;
    for (std::int64_t i = 0; i < alpha.size(); ++i) total += alpha.flat(i);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("block gradcheck below 1e-5") {
    Rng rng(37);
    DPConvSpec spec;
    spec.c_in = 8;
    spec.c_out = 8;
    spec.kernel_sizes = {3, 5};
    spec.groups = {1, 2};
    ParamSet params;
    DPConvBlock block(params, rng, "blk", spec);

    Parameter input;
    input.name = "input";
    input.value = rand_tensor(Dims4{1, 8, 5, 5}, rng);
    input.grad = Tensor4::zeros(input.value.dims());
    input.momentum = Tensor4::zeros(input.value.dims());

    Tensor4 proj = rand_tensor(Dims4{1, 8, 5, 5}, rng, 0.2, 1.0);
    std::vector<Parameter*> check;
    for (std::size_t i = 0; i < params.count(); ++i) check.push_back(&params.at(i));
    check.push_back(&input);

    auto report = grad_check_params(
        [&](Tape& t) { return sum_all(mul(block.forward(t, t.param(input)), t.leaf(proj))); },
        check, 1e-4);
    CHECK(report.max_rel_err < 1e-5);
    CHECK(report.checked > 0);
}

TEST_CASE("default group rule") {
    // Kernels {3,5,7,9} at reference 3 with wide channels: 2,4,8,16.
    auto gs = default_groups({3, 5, 7, 9}, 3, 64, 16);
    REQUIRE(gs.size() == 4);
    CHECK(gs[0] == 2);
    CHECK(gs[1] == 4);
    CHECK(gs[2] == 8);
    CHECK(gs[3] == 16);
    // Narrow stages clamp to keep divisibility.
    auto clamped = default_groups({3, 5, 7, 9}, 3, 16, 4);
    CHECK(clamped[0] == 2);
    CHECK(clamped[1] == 4);
    CHECK(clamped[2] == 4);
    CHECK(clamped[3] == 4);
}
