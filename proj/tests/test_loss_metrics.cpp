#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "dpnet/loss.hpp"
#include "dpnet/metrics.hpp"
#include "oracles.hpp"

using namespace dpnet;

namespace {

Tensor4 rand_tensor(Dims4 d, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor4 t(d);
    for (std::int64_t i = 0; i < t.size(); ++i) t.flat(i) = rng.uniform(lo, hi);
    return t;
}

Tensor4 random_mask(Dims4 d, Rng& rng, double p = 0.4) {
    Tensor4 t(d);
    for (std::int64_t i = 0; i < t.size(); ++i) t.flat(i) = rng.bernoulli(p) ? 1.0 : 0.0;
    return t;
}

Tensor4 saturated_logits(const Tensor4& gt, double magnitude = 40.0) {
    Tensor4 t = gt;
    for (std::int64_t i = 0; i < t.size(); ++i) t.flat(i) = t.flat(i) != 0.0 ? magnitude : -magnitude;
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pixel weights
// ---------------------------------------------------------------------------

TEST_CASE("pixel_weights: constant masks give weight 1 everywhere") {
    Tensor4 zeros(Dims4{1, 1, 9, 9});
    Tensor4 w0 = pixel_weights(zeros);
    for (std::int64_t i = 0; i < w0.size(); ++i) CHECK(w0.flat(i) == 1.0);

    Tensor4 ones(Dims4{1, 1, 9, 9}, 1.0);
    Tensor4 w1 = pixel_weights(ones);
    for (std::int64_t i = 0; i < w1.size(); ++i) CHECK(w1.flat(i) == 1.0);
}

TEST_CASE("pixel_weights: step edge peaks next to the edge, matches box-mean oracle") {
    Tensor4 gt(Dims4{1, 1, 12, 12});
    for (int y = 0; y < 12; ++y)
        for (int x = 6; x < 12; ++x) gt.at(0, 0, y, x) = 1.0;

    const int window = 5;
    Tensor4 w = pixel_weights(gt, window);
    Tensor4 mean = testing::box_mean_naive(gt, window);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            const double expect = 1.0 + 5.0 * std::abs(mean.at(0, 0, y, x) - gt.at(0, 0, y, x));
            CHECK(w.at(0, 0, y, x) == doctest::Approx(expect).epsilon(1e-13));
        }
    // Peak adjacent to the edge, weight 1 far from it.
    CHECK(w.at(0, 0, 6, 5) > w.at(0, 0, 6, 0));
    CHECK(w.at(0, 0, 6, 6) > w.at(0, 0, 6, 11));
    CHECK(w.at(0, 0, 6, 0) == 1.0);

    Tensor4 bad(Dims4{1, 1, 4, 4}, 0.5);
    CHECK_THROWS_AS(pixel_weights(bad), ValidationError);
}

// ---------------------------------------------------------------------------
// Weighted BCE
// ---------------------------------------------------------------------------

TEST_CASE("weighted_bce: saturated correct prediction is ~0") {
    Rng rng(3);
    Tensor4 gt = random_mask(Dims4{1, 1, 8, 8}, rng);
    Tensor4 w = pixel_weights(gt, 5);
    Tape tape;
    Value loss = weighted_bce(tape.leaf(saturated_logits(gt)), gt, w);
    CHECK(loss.val().flat(0) < 1e-10);
}

TEST_CASE("weighted_bce: zero logits with unit weights give ln 2") {
    Tensor4 gt(Dims4{2, 1, 5, 5});
    gt.at(0, 0, 1, 1) = 1.0;
    Tensor4 w(Dims4{2, 1, 5, 5}, 1.0);
    Tape tape;
    Value loss = weighted_bce(tape.leaf(Tensor4(Dims4{2, 1, 5, 5})), gt, w);
    CHECK(loss.val().flat(0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("weighted_bce matches the naive per-pixel loop oracle") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor4 gt = random_mask(Dims4{2, 1, 7, 7}, rng);
        Tensor4 w = pixel_weights(gt, 5);
        Tensor4 logits = rand_tensor(Dims4{2, 1, 7, 7}, rng, -3.0, 3.0);
        Tape tape;
        Value loss = weighted_bce(tape.leaf(logits), gt, w);
        CHECK(std::abs(loss.val().flat(0) - testing::weighted_bce_naive(logits, gt, w)) <= 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Weighted IoU
// ---------------------------------------------------------------------------

TEST_CASE("weighted_iou: saturated perfect prediction is ~0, inverted is ~1") {
    Rng rng(7);
    Tensor4 gt = random_mask(Dims4{1, 1, 8, 8}, rng);
    Tensor4 w = pixel_weights(gt, 5);
    Tape tape;
    Value perfect = weighted_iou(tape.leaf(saturated_logits(gt)), gt, w);
    CHECK(perfect.val().flat(0) < 1e-9);

    Tensor4 inverted = saturated_logits(gt);
    for (std::int64_t i = 0; i < inverted.size(); ++i) inverted.flat(i) = -inverted.flat(i);
    Value opposite = weighted_iou(tape.leaf(inverted), gt, w);
    CHECK(opposite.val().flat(0) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("weighted_iou matches the naive loop oracle") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor4 gt = random_mask(Dims4{2, 1, 6, 6}, rng);
        Tensor4 w = pixel_weights(gt, 5);
        Tensor4 logits = rand_tensor(Dims4{2, 1, 6, 6}, rng, -3.0, 3.0);
        Tape tape;
        Value loss = weighted_iou(tape.leaf(logits), gt, w);
        CHECK(std::abs(loss.val().flat(0) - testing::weighted_iou_naive(logits, gt, w)) <= 1e-12);
    }
}

TEST_CASE("weighted_iou: doubly-empty case defined as zero loss") {
    Tensor4 gt(Dims4{1, 1, 4, 4});          // empty ground truth
    Tensor4 logits(Dims4{1, 1, 4, 4}, -800.0);  // sigmoid underflows to exactly 0
    Tensor4 w(Dims4{1, 1, 4, 4}, 1.0);
    Tape tape;
    Value loss = weighted_iou(tape.leaf(logits), gt, w);
    CHECK(loss.val().flat(0) == 0.0);
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

TEST_CASE("total_loss: auxiliary coefficients are exactly 1/2,1/4,1/8,1/16") {
    Rng rng(11);
    Tensor4 gt = random_mask(Dims4{1, 1, 6, 6}, rng);
    Tensor4 w = pixel_weights(gt, 5);

    // Perfect finals isolate the auxiliary sum; perturb one aux map at a time.
    for (int j = 0; j < 4; ++j) {
        Tape tape;
        std::vector<Value> finals{tape.leaf(saturated_logits(gt))};
        std::vector<Value> aux;
        for (int k = 0; k < 4; ++k) {
            aux.push_back(tape.leaf(k == j ? Tensor4(Dims4{1, 1, 6, 6}) : saturated_logits(gt)));
        }
        TotalLoss total = total_loss(finals, aux, gt, w);

        Tape ref_tape;
        Value bce = weighted_bce(ref_tape.leaf(Tensor4(Dims4{1, 1, 6, 6})), gt, w);
        Value iou = weighted_iou(ref_tape.leaf(Tensor4(Dims4{1, 1, 6, 6})), gt, w);
        const double coeff = 1.0 / (1 << (j + 1));
        CHECK(total.total.val().flat(0) ==
              doctest::Approx(coeff * (bce.val().flat(0) + iou.val().flat(0))).epsilon(1e-9));
    }
}

TEST_CASE("total_loss: all maps perfect gives loss below 1e-8") {
    Rng rng(13);
    Tensor4 gt = random_mask(Dims4{1, 1, 8, 8}, rng);
    Tensor4 w = pixel_weights(gt, 5);
    Tape tape;
    std::vector<Value> finals{tape.leaf(saturated_logits(gt)), tape.leaf(saturated_logits(gt))};
    std::vector<Value> aux(4, tape.leaf(saturated_logits(gt)));
    TotalLoss total = total_loss(finals, aux, gt, w);
    CHECK(total.total.val().flat(0) < 1e-8);
}

TEST_CASE("total_loss: N=2 equal final losses average, not add") {
    Rng rng(15);
    Tensor4 gt = random_mask(Dims4{1, 1, 6, 6}, rng);
    Tensor4 w = pixel_weights(gt, 5);
    Tensor4 logits = rand_tensor(Dims4{1, 1, 6, 6}, rng, -2.0, 2.0);

    Tape tape;
    std::vector<Value> aux(4, tape.leaf(saturated_logits(gt)));
    std::vector<Value> one{tape.leaf(logits)};
    std::vector<Value> two{tape.leaf(logits), tape.leaf(logits)};
    const double l1 = total_loss(one, aux, gt, w).total.val().flat(0);
    const double l2 = total_loss(two, aux, gt, w).total.val().flat(0);
    CHECK(l1 == doctest::Approx(l2).epsilon(1e-12));

    std::vector<Value> empty;
    CHECK_THROWS_AS(total_loss(empty, aux, gt, w), ConfigError);
    std::vector<Value> aux3(3, tape.leaf(saturated_logits(gt)));
    CHECK_THROWS_AS(total_loss(one, aux3, gt, w), ConfigError);
}

TEST_CASE("total_loss: every supervised map receives gradient") {
    Rng rng(17);
    Tensor4 gt = random_mask(Dims4{1, 1, 6, 6}, rng);
    Tensor4 w = pixel_weights(gt, 5);
    Tape tape;
    std::vector<Value> finals;
    std::vector<Value> aux;
    std::vector<Value> leaves;
    for (int i = 0; i < 2; ++i) {
        Value v = tape.leaf(rand_tensor(Dims4{1, 1, 6, 6}, rng, -1.0, 1.0), true);
        finals.push_back(v);
        leaves.push_back(v);
    }
    for (int i = 0; i < 4; ++i) {
        Value v = tape.leaf(rand_tensor(Dims4{1, 1, 6, 6}, rng, -1.0, 1.0), true);
        aux.push_back(v);
        leaves.push_back(v);
    }
    TotalLoss total = total_loss(finals, aux, gt, w);
    tape.backward(total.total);
    for (const Value& v : leaves) CHECK(v.grad().max_abs() > 0.0);
}

TEST_CASE("losses are non-negative on random inputs") {
    Rng rng(19);
    for (int trial = 0; trial < 30; ++trial) {
        Tensor4 gt = random_mask(Dims4{1, 1, 6, 6}, rng);
        Tensor4 w = pixel_weights(gt, 5);
        Tensor4 logits = rand_tensor(Dims4{1, 1, 6, 6}, rng, -5.0, 5.0);
        Tape tape;
        CHECK(weighted_bce(tape.leaf(logits), gt, w).val().flat(0) >= 0.0);
        CHECK(weighted_iou(tape.leaf(logits), gt, w).val().flat(0) >= 0.0);
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

TEST_CASE("mae examples") {
    Rng rng(21);
    Tensor4 gt = random_mask(Dims4{1, 1, 8, 8}, rng);
    CHECK(mae(gt, gt) == 0.0);

    Tensor4 inverted = gt;
    for (std::int64_t i = 0; i < inverted.size(); ++i) inverted.flat(i) = 1.0 - inverted.flat(i);
    CHECK(mae(inverted, gt) == 1.0);

    Tensor4 half(Dims4{1, 1, 8, 8}, 0.5);
    CHECK(mae(half, gt) == doctest::Approx(0.5));
}

TEST_CASE("mae symmetry: mae(p,gt) == mae(1-p,1-gt)") {
    Rng rng(23);
    Tensor4 gt = random_mask(Dims4{1, 1, 8, 8}, rng);
    Tensor4 pred = rand_tensor(Dims4{1, 1, 8, 8}, rng, 0.0, 1.0);
    Tensor4 ip = pred, ig = gt;
    for (std::int64_t i = 0; i < ip.size(); ++i) {
        ip.flat(i) = 1.0 - ip.flat(i);
        ig.flat(i) = 1.0 - ig.flat(i);
    }
    CHECK(mae(pred, gt) == doctest::Approx(mae(ip, ig)).epsilon(1e-15));
}

TEST_CASE("f_measure_curve: perfect prediction has max_f 1") {
    Rng rng(25);
    Tensor4 gt = random_mask(Dims4{1, 1, 8, 8}, rng);
    MetricAccumulator acc;
    acc.add(gt, gt);
    MetricReport report = acc.finalize();
    CHECK(report.max_f == doctest::Approx(1.0));
    CHECK(report.mae == 0.0);
}

TEST_CASE("f_measure_curve: inverted prediction scores 0 wherever positives exist") {
    Rng rng(27);
    Tensor4 gt = random_mask(Dims4{1, 1, 8, 8}, rng, 0.5);
    Tensor4 pred = gt;
    for (std::int64_t i = 0; i < pred.size(); ++i) pred.flat(i) = 1.0 - pred.flat(i);
    MetricAccumulator acc;
    acc.add(pred, gt);
    MetricReport report = acc.finalize();
    // Thresholds above 0 predict only true negatives: F = 0. At t=0 every
    // pixel is predicted positive and recall is 1.
    for (int k = 1; k < kThresholds; ++k) CHECK(report.f[static_cast<std::size_t>(k)] == 0.0);
}

TEST_CASE("f_measure_curve: 4-pixel toy case matches threshold enumeration") {
    Tensor4 gt(Dims4{1, 1, 1, 4});
    gt.flat(0) = 1.0;
    gt.flat(1) = 1.0;
    Tensor4 pred(Dims4{1, 1, 1, 4});
    pred.flat(0) = 0.9;
    pred.flat(1) = 0.4;
    pred.flat(2) = 0.6;
    pred.flat(3) = 0.1;

    MetricAccumulator acc;
    acc.add(pred, gt);
    MetricReport report = acc.finalize();

    double expect_max_f = 0.0;
    for (int k = 0; k < kThresholds; ++k) {
        auto pr = testing::pr_at_threshold_naive(pred, gt, k / 255.0);
        CHECK(report.precision[static_cast<std::size_t>(k)] == doctest::Approx(pr.precision));
        CHECK(report.recall[static_cast<std::size_t>(k)] == doctest::Approx(pr.recall));
        const double denom = kFBetaSquared * pr.precision + pr.recall;
        if (denom > 0.0) {
            expect_max_f = std::max(expect_max_f,
                                    (1.0 + kFBetaSquared) * pr.precision * pr.recall / denom);
        }
    }
    CHECK(report.max_f == doctest::Approx(expect_max_f));
    // Frozen spot values: t <= 0.1 keeps all 4 pixels, P = 0.5, R = 1.
    CHECK(report.precision[0] == doctest::Approx(0.5));
    CHECK(report.recall[0] == doctest::Approx(1.0));
    // Best threshold keeps only the 0.9 pixel: P = 1, R = 0.5.
    CHECK(report.max_f == doctest::Approx(1.3 * 0.5 / (0.3 + 0.5)));
}

TEST_CASE("f_measure_curve invariant under monotone bin-preserving remap") {
    Rng rng(29);
    Tensor4 gt = random_mask(Dims4{1, 1, 8, 8}, rng);
    Tensor4 pred(Dims4{1, 1, 8, 8});
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        pred.flat(i) = static_cast<double>(rng.uniform_int(256)) / 255.0;
    }
    // Remap every value inside its threshold bin: v -> v + 0.4/255 stays in
    // [k/255, (k+1)/255) for v = k/255.
    Tensor4 remapped = pred;
    for (std::int64_t i = 0; i < remapped.size(); ++i) {
        remapped.flat(i) = std::min(remapped.flat(i) + 0.4 / 255.0, 1.0);
    }
    MetricAccumulator a, b;
    a.add(pred, gt);
    b.add(remapped, gt);
    MetricReport ra = a.finalize(), rb = b.finalize();
    for (int k = 0; k < kThresholds; ++k) {
        CHECK(ra.precision[static_cast<std::size_t>(k)] ==
              doctest::Approx(rb.precision[static_cast<std::size_t>(k)]));
        CHECK(ra.recall[static_cast<std::size_t>(k)] ==
              doctest::Approx(rb.recall[static_cast<std::size_t>(k)]));
    }
}

TEST_CASE("empty ground truth is excluded from PR aggregation but kept in MAE") {
    Tensor4 gt(Dims4{1, 1, 4, 4});
    Tensor4 pred(Dims4{1, 1, 4, 4}, 0.25);
    MetricAccumulator acc;
    acc.add(pred, gt);
    MetricReport report = acc.finalize();
    CHECK(report.images_total == 1);
    CHECK(report.images_in_pr == 0);
    CHECK(report.mae == doctest::Approx(0.25));
}

TEST_CASE("metric CSV serialization shape") {
    Rng rng(31);
    Tensor4 gt = random_mask(Dims4{1, 1, 8, 8}, rng);
    MetricAccumulator acc;
    acc.add(gt, gt);
    std::ostringstream os;
    write_metric_csv(os, acc.finalize());
    std::istringstream is(os.str());
    std::string line;
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 1 + kThresholds + 1);  // header + 256 thresholds + summary
    CHECK(os.str().rfind("summary,mae=") != std::string::npos);
}
