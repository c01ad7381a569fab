#include <doctest.h>

#include <cstring>
#include <mutex>
#include <vector>

#include "mus/common.hpp"

using namespace mus;

TEST_SUITE_BEGIN("common");

TEST_CASE("parallel_chunks covers every index exactly once, in order per chunk") {
  for (int threads : {1, 2, 5}) {
    set_thread_count(threads);
    for (int64_t n : {0, 1, 7, 64}) {
      std::vector<int> hits(static_cast<size_t>(n), 0);
      std::mutex m;
      parallel_chunks(n, [&](int64_t b, int64_t e) {
        CHECK(b <= e);
        std::lock_guard<std::mutex> lock(m);
        for (int64_t i = b; i < e; ++i) hits[static_cast<size_t>(i)]++;
      });
      for (int h : hits) CHECK(h == 1);
    }
  }
  set_thread_count(1);
}

TEST_CASE("fnv1a64 matches reference values") {
  // Reference digests of the FNV-1a 64-bit test vectors.
  CHECK(fnv1a64("", 0) == 14695981039346656037ull);
  CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar", 6) == 0x85944171f73967e8ull);
}

TEST_CASE("hex64 is zero-padded lowercase") {
  CHECK(hex64(0) == "0000000000000000");
  CHECK(hex64(0xdeadbeefull) == "00000000deadbeef");
  CHECK(hex64(~0ull) == "ffffffffffffffff");
}

TEST_CASE("require throws invalid_argument with the given message") {
  CHECK_THROWS_AS(require(false, "boom"), std::invalid_argument);
  CHECK_NOTHROW(require(true, "fine"));
}

TEST_SUITE_END();
