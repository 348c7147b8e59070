#include <doctest.h>
TEST_CASE("A0 placeholder") { CHECK(true); }
