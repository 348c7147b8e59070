#include <doctest.h>
TEST_CASE("placeholder cli") { CHECK(true); }
