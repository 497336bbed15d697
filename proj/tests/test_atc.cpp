#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "delag/atc.hpp"
#include "delag/error.hpp"
#include "delag/rng.hpp"
#include "delag/synth.hpp"
#include "support.hpp"

using namespace delag;

namespace {

/// Tiny noiseless scene used by several fitting tests.
SynthData noiseless_scene(std::uint64_t seed, int side = 8) {
    SynthConfig cfg;
    cfg.shape = {0, side, side};
    cfg.seed = seed;
    cfg.residual_sd = 0.0;
    cfg.obs_noise_sd = 0.0;
    cfg.cloud_fraction_target = 0.0;
    return generate(cfg);
}

double snapshot_mean(const AtcEnsemble& ens, int pixel,
                     std::vector<float> AtcParams::*field) {
    double s = 0.0;
    for (const auto& snap : ens.snapshots) s += (snap.*field)[static_cast<std::size_t>(pixel)];
    return s / ens.count();
}

} // namespace

TEST_CASE("atc_forward closed-form anchors") {
    CHECK(atc_forward(290, 10, 5, 0, 5, 281.0) == doctest::Approx(300.0).epsilon(1e-12));
    CHECK(atc_forward(290, 10, 5, 0, 5 + 365.0 / 2.0, 281.0) ==
          doctest::Approx(280.0).epsilon(1e-12));
    CHECK(atc_forward(0, 0, 0, 1, 100, 288.5) == doctest::Approx(288.5).epsilon(1e-12));
}

TEST_CASE("objective is invariant to phi + 365k") {
    for (int k : {-2, -1, 1, 3}) {
        const double a = atc_forward(290, 8, 40, 0.1, 123, 285);
        const double b = atc_forward(290, 8, 40 + 365.0 * k, 0.1, 123, 285);
        CHECK(a == doctest::Approx(b).epsilon(1e-12));
    }
}

TEST_CASE("L1 gradient matches central finite differences away from kinks") {
    Rng rng(2024);
    int checked = 0;
    while (checked < 100) {
        const double c = rng.uniform(260, 300);
        const double a = rng.uniform(2, 15);
        const double phi = rng.uniform(0, 365);
        const double b = rng.uniform(-0.2, 0.2);
        const double day = 1 + static_cast<double>(rng.below(365));
        const double e5 = rng.uniform(260, 310);
        const double obs = rng.uniform(230, 340);
        const double pred = atc_forward(c, a, phi, b, day, e5);
        if (std::fabs(pred - obs) < 0.5) continue; // stay away from the kink
        ++checked;

        const Eigen::Vector4d g = atc_l1_gradient(c, a, phi, b, day, e5, obs);
        const double h = 1e-4;
        auto loss = [&](double cc, double aa, double pp, double bb) {
            return std::fabs(atc_forward(cc, aa, pp, bb, day, e5) - obs);
        };
        const Eigen::Vector4d fd{
            (loss(c + h, a, phi, b) - loss(c - h, a, phi, b)) / (2 * h),
            (loss(c, a + h, phi, b) - loss(c, a - h, phi, b)) / (2 * h),
            (loss(c, a, phi + h, b) - loss(c, a, phi - h, b)) / (2 * h),
            (loss(c, a, phi, b + h) - loss(c, a, phi, b - h)) / (2 * h)};
        for (int i = 0; i < 4; ++i) {
            const double denom = std::max({std::fabs(g[i]), std::fabs(fd[i]), 1e-8});
            CHECK(std::fabs(g[i] - fd[i]) / denom <= 1e-4);
        }
    }
}

TEST_CASE("zero-residual subgradient is zero") {
    const double pred = atc_forward(290, 10, 5, 0, 5, 281);
    const Eigen::Vector4d g = atc_l1_gradient(290, 10, 5, 0, 5, 281, pred);
    CHECK(g.norm() == 0.0);
}

TEST_CASE("init_params follows the stated rules") {
    SceneStack s;
    s.shape = {3, 1, 3};
    s.days = {50, 150, 250};
    const float nan = std::numeric_limits<float>::quiet_NaN();
    // pixel 0: {280, 290, 300} -> C=290, A=10, warmest day 250
    // pixel 1: constant 290 -> A=0
    // pixel 2: all NaN -> deficiency fallback
    s.temps = {280.f, 290.f, nan, 290.f, 290.f, nan, 300.f, 290.f, nan};
    Era5Series e;
    e.days = {50, 150, 250};
    e.rows = e.cols = 1;
    e.pixel_height = 1;
    e.pixel_width = 3;
    e.values = {280.f, 290.f, 285.f};

    const InitResult init = init_params(s, e, 2);
    CHECK(init.params.c[0] == 290.f);
    CHECK(init.params.a[0] == 10.f);
    CHECK(init.params.phi[0] == 250.f);
    CHECK(init.params.b[0] == 0.f);
    CHECK(init.params.c[1] == 290.f);
    CHECK(init.params.a[1] == 0.f);
    REQUIRE(init.deficient_pixels == std::vector<int>{2});
    // medians over the two qualifying pixels
    CHECK(init.params.c[2] == 290.f);
    CHECK(init.params.a[2] == 5.f);

    SceneStack empty = s;
    for (auto& v : empty.temps) v = nan;
    CHECK_THROWS_AS(init_params(empty, e, 2), ValidationError);
}

TEST_CASE("fit config invariants") {
    FitConfig c;
    CHECK(c.snapshot_count() == 200);
    c.snapshot_window = 801;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = FitConfig{};
    c.epochs = 700; // < window
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("noiseless fit recovers the planted parameters") {
    const SynthData data = noiseless_scene(42);
    FitConfig fc;
    AtcFitDiagnostics diag;
    const AtcEnsemble ens = fit_atc(data.stack, data.era5, fc, 1, 1, &diag);
    REQUIRE(ens.count() == 200);
    CHECK(diag.final_loss <= diag.initial_loss);

    const int pixels = data.stack.shape.pixels();
    std::vector<double> ec, ea, ephi, eb;
    for (int p = 0; p < pixels; ++p) {
        ec.push_back(std::fabs(snapshot_mean(ens, p, &AtcParams::c) - data.truth.true_params.c[p]));
        ea.push_back(std::fabs(snapshot_mean(ens, p, &AtcParams::a) - data.truth.true_params.a[p]));
        double dphi =
            std::fabs(snapshot_mean(ens, p, &AtcParams::phi) - data.truth.true_params.phi[p]);
        dphi = std::fmod(dphi, 365.0);
        if (dphi > 182.5) dphi = 365.0 - dphi;
        ephi.push_back(dphi);
        eb.push_back(std::fabs(snapshot_mean(ens, p, &AtcParams::b) - data.truth.true_params.b[p]));
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    CHECK(median(ec) <= 0.1);
    CHECK(median(ea) <= 0.1);
    CHECK(median(ephi) <= 1.0);
    CHECK(median(eb) <= 0.02);
}

TEST_CASE("fixed point: observations equal to the initial model keep loss at zero") {
    // A constant-valued pixel is an exact fixed point of the initialization
    // rules (C = mean = value, A = half-range = 0, b = 0), so the initial
    // model reproduces the observations and every L1 subgradient is zero.
    const SynthData base = noiseless_scene(7, 4);
    SceneStack s = base.stack;
    for (int p = 0; p < s.shape.pixels(); ++p) {
        const float value = 270.f + static_cast<float>(p);
        for (int d = 0; d < s.shape.n_days; ++d) s.at(d, p) = value;
    }
    const InitResult init = init_params(s, base.era5, 8);
    for (int p = 0; p < s.shape.pixels(); ++p) {
        const double pred = atc_forward(init.params.c[p], init.params.a[p], init.params.phi[p],
                                        init.params.b[p], s.days[0],
                                        base.era5.value(0, base.era5.cell_for_pixel(p)));
        CHECK(pred == doctest::Approx(270.0 + p).epsilon(1e-12));
    }
    FitConfig fc;
    AtcFitDiagnostics diag;
    fit_atc(s, base.era5, fc, 1, 1, &diag);
    CHECK(diag.initial_loss <= 1e-5);
    CHECK(diag.final_loss <= diag.initial_loss + 1e-9);
}

TEST_CASE("identical seeds and differing worker counts give identical snapshots") {
    const SynthData data = noiseless_scene(11, 6);
    FitConfig fc;
    fc.epochs = 300;
    fc.snapshot_window = 200;
    fc.snapshot_stride = 4;
    const AtcEnsemble a = fit_atc(data.stack, data.era5, fc, 5, 1);
    const AtcEnsemble b = fit_atc(data.stack, data.era5, fc, 5, 4);
    REQUIRE(a.count() == b.count());
    for (int j = 0; j < a.count(); ++j) {
        CHECK(a.snapshots[j].c == b.snapshots[j].c);
        CHECK(a.snapshots[j].a == b.snapshots[j].a);
        CHECK(a.snapshots[j].phi == b.snapshots[j].phi);
        CHECK(a.snapshots[j].b == b.snapshots[j].b);
    }
}

TEST_CASE("per-pixel fits are independent: sub-grid fit is bitwise identical") {
    const SynthData data = noiseless_scene(13, 6);
    FitConfig fc;
    fc.epochs = 300;
    fc.snapshot_window = 200;

    // Crop the left 6x3 half. Pixels keep their observation history; the
    // era5 coarse grid for a 6x6 scene is a single cell, so cropping does
    // not change any pixel's forcing.
    SceneStack crop;
    crop.shape = {data.stack.shape.n_days, 6, 3};
    crop.days = data.stack.days;
    crop.temps.resize(crop.shape.cells());
    for (int d = 0; d < crop.shape.n_days; ++d)
        for (int r = 0; r < 6; ++r)
            for (int c = 0; c < 3; ++c) crop.at(d, r * 3 + c) = data.stack.at(d, r * 6 + c);
    Era5Series era5_crop = data.era5;
    era5_crop.pixel_width = 3;

    const AtcEnsemble full = fit_atc(data.stack, data.era5, fc, 5, 1);
    const AtcEnsemble sub = fit_atc(crop, era5_crop, fc, 5, 1);
    for (int j = 0; j < full.count(); ++j) {
        for (int r = 0; r < 6; ++r) {
            for (int c = 0; c < 3; ++c) {
                CHECK(sub.snapshots[j].c[r * 3 + c] == full.snapshots[j].c[r * 6 + c]);
                CHECK(sub.snapshots[j].b[r * 3 + c] == full.snapshots[j].b[r * 6 + c]);
            }
        }
    }
}

TEST_CASE("loss flattens across the snapshot window on noisy data") {
    SynthConfig cfg;
    cfg.shape = {0, 6, 6};
    cfg.seed = 31;
    cfg.cloud_fraction_target = 0.2;
    const SynthData data = generate(cfg);
    FitConfig fc;
    AtcFitDiagnostics diag;
    fit_atc(data.stack, data.era5, fc, 1, 1, &diag);
    const int start = fc.epochs - fc.snapshot_window;
    double wmin = std::numeric_limits<double>::infinity(), wsum = 0.0;
    for (int e = start; e < fc.epochs; ++e) {
        wmin = std::min(wmin, diag.epoch_mean_loss[e]);
        wsum += diag.epoch_mean_loss[e];
    }
    const double wmean = wsum / fc.snapshot_window;
    CHECK(wmean <= 1.05 * wmin);
}

TEST_CASE("day-axis mismatch is an error") {
    const SynthData data = noiseless_scene(3, 4);
    Era5Series short_era5 = data.era5;
    short_era5.days.resize(10);
    short_era5.values.resize(10 * static_cast<std::size_t>(short_era5.n_cells()));
    CHECK_THROWS_WITH_AS(fit_atc(data.stack, short_era5, FitConfig{}, 1, 1),
                         doctest::Contains("day-axis mismatch"), ValidationError);
}

TEST_CASE("ensemble_predict statistics") {
    Era5Series e;
    e.days = {100};
    e.rows = e.cols = 1;
    e.pixel_height = e.pixel_width = 1;
    e.values = {290.f};

    AtcEnsemble ens;
    SUBCASE("identical snapshots have zero spread") {
        AtcParams p = AtcParams::zeros(1, 1);
        p.c[0] = 290.f;
        p.a[0] = 5.f;
        p.phi[0] = 10.f;
        ens.snapshots = {p, p, p};
        ens.snapshot_epochs = {1, 2, 3};
        Eigen::ArrayXd mean, spread;
        ensemble_predict(ens, 100, e, mean, spread);
        CHECK(spread[0] == 0.0);
        CHECK(mean[0] == doctest::Approx(atc_forward(290, 5, 10, 0, 100, 290)).epsilon(1e-12));
    }
    SUBCASE("two-point statistics") {
        AtcParams p1 = AtcParams::zeros(1, 1), p2 = AtcParams::zeros(1, 1);
        p1.c[0] = 289.f;
        p2.c[0] = 291.f;
        ens.snapshots = {p1, p2};
        ens.snapshot_epochs = {1, 2};
        Eigen::ArrayXd mean, spread;
        ensemble_predict(ens, 100, e, mean, spread);
        CHECK(mean[0] == doctest::Approx(290.0).epsilon(1e-9)); // A=0, b=0
        CHECK(spread[0] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12)); // sample sd {289,291}
    }
}

TEST_CASE("interval percentiles follow the linear interpolation rule") {
    Era5Series e;
    e.days = {100};
    e.rows = e.cols = 1;
    e.pixel_height = e.pixel_width = 1;
    e.values = {290.f};

    AtcEnsemble ens;
    std::vector<double> values;
    for (int j = 1; j <= 200; ++j) {
        AtcParams p = AtcParams::zeros(1, 1);
        p.c[0] = static_cast<float>(j); // A=0, b=0: prediction = C
        ens.snapshots.push_back(p);
        ens.snapshot_epochs.push_back(j);
        values.push_back(j);
    }
    Eigen::ArrayXd lower, upper;
    atc_interval(ens, 100, e, 0.95, lower, upper);
    CHECK(lower[0] ==
          doctest::Approx(testsupport::oracle_percentile(values, 0.025)).epsilon(1e-12));
    CHECK(upper[0] ==
          doctest::Approx(testsupport::oracle_percentile(values, 0.975)).epsilon(1e-12));
    CHECK(lower[0] == doctest::Approx(5.975).epsilon(1e-9));
    CHECK(upper[0] == doctest::Approx(195.025).epsilon(1e-9));

    SUBCASE("identical snapshots collapse the interval") {
        AtcEnsemble same;
        AtcParams p = AtcParams::zeros(1, 1);
        p.c[0] = 77.f;
        same.snapshots.assign(50, p);
        same.snapshot_epochs.assign(50, 1);
        Eigen::ArrayXd lo, hi, mean, spread;
        atc_interval(same, 100, e, 0.95, lo, hi);
        ensemble_predict(same, 100, e, mean, spread);
        CHECK(lo[0] == hi[0]);
        CHECK(lo[0] == mean[0]);
    }
    SUBCASE("level validation") {
        CHECK_THROWS_AS(atc_interval(ens, 100, e, 1.5, lower, upper), ValidationError);
        CHECK_THROWS_AS(atc_interval(ens, 100, e, 0.0, lower, upper), ValidationError);
        AtcEnsemble tiny;
        AtcParams p = AtcParams::zeros(1, 1);
        tiny.snapshots.assign(10, p); // < 40 snapshots for a 95% level
        tiny.snapshot_epochs.assign(10, 1);
        CHECK_THROWS_AS(atc_interval(tiny, 100, e, 0.95, lower, upper), ValidationError);
    }
}

TEST_CASE("random ensembles keep lower <= mean <= upper") {
    Era5Series e;
    e.days = {42};
    e.rows = e.cols = 1;
    e.pixel_height = 2;
    e.pixel_width = 2;
    e.values = {285.f};
    Rng rng(55);
    for (int trial = 0; trial < 10; ++trial) {
        AtcEnsemble ens;
        for (int j = 0; j < 60; ++j) {
            AtcParams p = AtcParams::zeros(2, 2);
            for (int px = 0; px < 4; ++px) {
                p.c[px] = static_cast<float>(rng.uniform(260, 320));
                p.a[px] = static_cast<float>(rng.uniform(0, 15));
                p.phi[px] = static_cast<float>(rng.uniform(0, 365));
                p.b[px] = static_cast<float>(rng.uniform(-0.1, 0.1));
            }
            ens.snapshots.push_back(p);
            ens.snapshot_epochs.push_back(j);
        }
        Eigen::ArrayXd mean, spread, lo, hi;
        ensemble_predict(ens, 42, e, mean, spread);
        atc_interval(ens, 42, e, 0.95, lo, hi);
        for (int px = 0; px < 4; ++px) {
            CHECK(lo[px] <= hi[px]);
            CHECK(lo[px] <= mean[px]);
            CHECK(mean[px] <= hi[px]);
        }
    }
}

TEST_CASE("ensemble save/load round-trip") {
    const SynthData data = noiseless_scene(19, 4);
    FitConfig fc;
    fc.epochs = 120;
    fc.snapshot_window = 80;
    fc.snapshot_stride = 4;
    const AtcEnsemble ens = fit_atc(data.stack, data.era5, fc, 1, 1);
    const auto dir = testsupport::temp_dir("ens");
    save_ensemble(ens, dir.string());
    const AtcEnsemble loaded = load_ensemble(dir.string());
    REQUIRE(loaded.count() == ens.count());
    CHECK(loaded.snapshot_epochs == ens.snapshot_epochs);
    for (int j = 0; j < ens.count(); ++j) {
        CHECK(loaded.snapshots[j].c == ens.snapshots[j].c);
        CHECK(loaded.snapshots[j].phi == ens.snapshots[j].phi);
    }
    std::filesystem::remove_all(dir);
}
