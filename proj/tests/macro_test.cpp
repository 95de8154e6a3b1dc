#include <doctest.h>
#include <nlohmann/json.hpp>

#include "cim/macro.hpp"

using namespace cim;
using nlohmann::json;

TEST_SUITE("macro") {

TEST_CASE("channels per bitline") {
    MacroConfig m;
    CHECK(channels_per_bitline(m, 3) == 28);
    CHECK(channels_per_bitline(m, 1) == 256);
    MacroConfig m128 = m;
    m128.wordlines = 128;
    CHECK(channels_per_bitline(m128, 5) == 5);
    CHECK_THROWS_WITH_AS(channels_per_bitline(m128, 12), doctest::Contains("kernel exceeds macro depth"),
                         std::runtime_error);
}

TEST_CASE("channels per bitline monotonicity") {
    MacroConfig m;
    for (int k = 1; k < 15; ++k)
        CHECK(channels_per_bitline(m, k) >= channels_per_bitline(m, k + 1));
    MacroConfig small = m;
    small.wordlines = 128;
    for (int k = 1; k <= 11; ++k)
        CHECK(channels_per_bitline(small, k) <= channels_per_bitline(m, k));
}

TEST_CASE("clip bounds") {
    CHECK(clip_bounds(4).q_p == 7);
    CHECK(clip_bounds(4).q_n == 7);
    CHECK(clip_bounds(5).q_p == 15);
    CHECK(clip_bounds(2).q_p == 1);
    for (int b = 2; b <= 8; ++b) CHECK(clip_bounds(b).q_n == clip_bounds(b).q_p);
    CHECK_THROWS_AS(clip_bounds(1), std::runtime_error);
}

TEST_CASE("mux ratio derived and json round trip") {
    MacroConfig m;
    CHECK(m.mux_ratio() == 4);
    const json j = m.to_json();
    const MacroConfig m2 = MacroConfig::from_json(j);
    CHECK(m2.adc_count == m.adc_count);
    CHECK(m2.mux_ratio() == 4);

    json bad = j;
    bad["mux_ratio"] = 8;  // inconsistent with bitlines/adc_count
    CHECK_THROWS_AS(MacroConfig::from_json(bad), std::runtime_error);
    json ok = j;
    ok["mux_ratio"] = 4;
    CHECK_NOTHROW(MacroConfig::from_json(ok));
}

TEST_CASE("validate rejects nonsense") {
    MacroConfig m;
    m.wordlines = 0;
    CHECK_THROWS_AS(m.validate(), std::runtime_error);
    m = MacroConfig{};
    m.adc_count = 100;  // does not divide bitlines
    CHECK_THROWS_AS(m.validate(), std::runtime_error);
}

}
