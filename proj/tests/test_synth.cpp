#include <doctest.h>

#include "delag/atc.hpp"
#include "delag/error.hpp"
#include "delag/synth.hpp"
#include "support.hpp"

using namespace delag;

namespace {

SynthConfig small_config(std::uint64_t seed) {
    SynthConfig cfg;
    cfg.shape = {0, 12, 12};
    cfg.seed = seed;
    return cfg;
}

} // namespace

TEST_CASE("cadence day lists") {
    CHECK(cadence_days(Cadence::FourPer16).size() == 92);
    CHECK(cadence_days(Cadence::TwoPer16).size() == 46);
    CHECK(cadence_days(Cadence::OnePer16).size() == 23);
    const auto four = cadence_days(Cadence::FourPer16);
    CHECK(four.front() == 4);
    CHECK(four.back() == 365);
}

TEST_CASE("same config and seed give identical output") {
    const SynthData a = generate(small_config(99));
    const SynthData b = generate(small_config(99));
    CHECK(a.stack.temps.size() == b.stack.temps.size());
    for (std::size_t i = 0; i < a.stack.temps.size(); ++i) {
        if (std::isnan(a.stack.temps[i]))
            CHECK(std::isnan(b.stack.temps[i]));
        else
            CHECK(a.stack.temps[i] == b.stack.temps[i]);
    }
    CHECK(a.era5.values == b.era5.values);
    CHECK(a.features.values == b.features.values);
    CHECK(a.truth.true_params.c == b.truth.true_params.c);
}

TEST_CASE("noise and masks come from independent substreams") {
    // Same seed, different cloud fraction: observed values agree wherever
    // both stacks have them.
    SynthConfig clear = small_config(5);
    clear.cloud_fraction_target = 0.0;
    SynthConfig cloudy = small_config(5);
    cloudy.cloud_fraction_target = 0.5;
    const SynthData a = generate(clear);
    const SynthData b = generate(cloudy);
    for (std::size_t i = 0; i < a.stack.temps.size(); ++i) {
        if (!std::isnan(b.stack.temps[i])) CHECK(b.stack.temps[i] == a.stack.temps[i]);
    }
}

TEST_CASE("noiseless degenerate case equals the eATC closed form") {
    SynthConfig cfg = small_config(3);
    cfg.residual_sd = 0.0;
    cfg.obs_noise_sd = 0.0;
    cfg.cloud_fraction_target = 0.0;
    const SynthData data = generate(cfg);
    const int pixels = data.stack.shape.pixels();
    for (int d = 0; d < data.stack.shape.n_days; ++d) {
        const int day = data.stack.days[d];
        const int pos = data.era5.day_pos(day);
        for (int p = 0; p < pixels; ++p) {
            // independent closed-form evaluation
            const double e5 = data.era5.value(pos, data.era5.cell_for_pixel(p));
            const double expected =
                data.truth.true_params.c[p] +
                data.truth.true_params.a[p] *
                    std::cos(2.0 * M_PI / 365.0 * (day - data.truth.true_params.phi[p])) +
                data.truth.true_params.b[p] * e5;
            CHECK(data.stack.at(d, p) == doctest::Approx(expected).epsilon(1e-6));
        }
    }
}

TEST_CASE("ground truth self-consistency holds to machine precision") {
    const SynthData data = generate(small_config(17));
    const int pixels = data.stack.shape.pixels();
    for (int d = 0; d < data.stack.shape.n_days; ++d) {
        const int pos = data.era5.day_pos(data.stack.days[d]);
        for (int p = 0; p < pixels; ++p) {
            const double e5 = data.era5.value(pos, data.era5.cell_for_pixel(p));
            const double atc = atc_forward(data.truth.true_params.c[p], data.truth.true_params.a[p],
                                           data.truth.true_params.phi[p],
                                           data.truth.true_params.b[p], data.stack.days[d], e5);
            const double lhs = data.truth.lst_at(d, p, pixels);
            const double rhs = atc + data.truth.residual_at(d, p, pixels);
            CHECK(lhs == rhs);
        }
    }
}

TEST_CASE("cloud masks hit the target fraction on a 64x64 grid") {
    SynthConfig cfg;
    cfg.shape = {0, 64, 64};
    cfg.seed = 21;
    cfg.cloud_fraction_target = 0.5;
    const SynthData data = generate(cfg);
    for (int d = 0; d < data.stack.shape.n_days; ++d) {
        const double vf = valid_fraction(data.stack, d);
        CHECK(vf >= 0.45);
        CHECK(vf <= 0.55);
    }
}

TEST_CASE("no day is fully valid when clouds are requested") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
        SynthConfig cfg = small_config(seed);
        cfg.cloud_fraction_target = 0.3;
        const SynthData data = generate(cfg);
        for (int d = 0; d < data.stack.shape.n_days; ++d)
            CHECK(valid_fraction(data.stack, d) < 1.0);
    }
}

TEST_CASE("full cloud cover is a config error") {
    SynthConfig cfg = small_config(1);
    cfg.cloud_fraction_target = 1.0;
    CHECK_THROWS_AS(generate(cfg), ConfigError);
}

TEST_CASE("thin_cadence") {
    SynthConfig cfg = small_config(8);
    const SynthData data = generate(cfg);
    REQUIRE(data.stack.shape.n_days == 92);

    SUBCASE("4-per-16 to 2-per-16 keeps exactly half the days") {
        const SceneStack thinned = thin_cadence(data.stack, Cadence::TwoPer16);
        CHECK(thinned.shape.n_days == 46);
        // untouched data on kept days
        const int day = thinned.days.front();
        int src_index = -1;
        for (std::size_t i = 0; i < data.stack.days.size(); ++i)
            if (data.stack.days[i] == day) src_index = static_cast<int>(i);
        REQUIRE(src_index >= 0);
        for (int p = 0; p < thinned.shape.pixels(); ++p) {
            const float a = thinned.at(0, p);
            const float b = data.stack.at(src_index, p);
            if (std::isnan(a))
                CHECK(std::isnan(b));
            else
                CHECK(a == b);
        }
    }
    SUBCASE("thinning to own cadence is the identity") {
        const SceneStack same = thin_cadence(data.stack, Cadence::FourPer16);
        CHECK(same.days == data.stack.days);
        CHECK(same.temps.size() == data.stack.temps.size());
    }
    SUBCASE("NYC-like schedule thinned to 1-per-16 keeps 23 days") {
        const SceneStack one = thin_cadence(data.stack, Cadence::OnePer16);
        CHECK(one.shape.n_days == 23);
    }
    SUBCASE("impossible thinning is an error") {
        const SceneStack one = thin_cadence(data.stack, Cadence::OnePer16);
        CHECK_THROWS_AS(thin_cadence(one, Cadence::FourPer16), ValidationError);
    }
}

TEST_CASE("synth config json round-trip") {
    SynthConfig cfg = small_config(123);
    cfg.cadence = Cadence::TwoPer16;
    cfg.residual_sd = 1.75;
    nlohmann::json j;
    to_json(j, cfg);
    const SynthConfig back = j.get<SynthConfig>();
    CHECK(back.seed == cfg.seed);
    CHECK(back.residual_sd == cfg.residual_sd);
    CHECK(back.cadence == cfg.cadence);
    CHECK(back.shape.height == cfg.shape.height);
}
