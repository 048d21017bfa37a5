#include <doctest.h>

#include "spf/config.hpp"

using namespace spf::config;

TEST_CASE("parser reads scalars, arrays and tables") {
    const Table t = parse(R"(
seed = 3
name = "cycle"   # trailing comment
[mdp]
gamma = 0.9
flags = [true, false]
rows = [
  [1.0, 2],
  [3, 4.5],
]
[train]
lr = 1e-3
)");
    CHECK(get_int(t, "seed") == 3);
    CHECK(get_string(t, "name") == "cycle");
    CHECK(get_number(t, "mdp.gamma") == doctest::Approx(0.9));
    CHECK(get_number(t, "train.lr") == doctest::Approx(1e-3));
    CHECK(get_numbers(t, "mdp.rows") == std::vector<double>{1.0, 2.0, 3.0, 4.5});
    CHECK(get_count(t, "missing.key", 7) == 7);
    CHECK(lookup(t, "mdp.flags") != nullptr);
}

TEST_CASE("parse errors carry the line number") {
    try {
        parse("a = 1\nb = [1,\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.line() == 2);
    }
    CHECK_THROWS_AS(parse("a = 1\na = 2\n"), ConfigError);
    CHECK_THROWS_AS(parse("x = {a = 1}\n"), ConfigError);
}

TEST_CASE("typed accessors reject wrong types and negative counts") {
    const Table t = parse("n = -2\ns = \"text\"\n");
    CHECK_THROWS_AS(get_count(t, "n", 0), ConfigError);
    CHECK_THROWS_AS(get_number(t, "s"), ConfigError);
    CHECK_THROWS_AS(get_number(t, "absent"), ConfigError);
}
