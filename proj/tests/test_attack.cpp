#include <catch_amalgamated.hpp>
TEST_CASE("pending") { SUCCEED(); }
