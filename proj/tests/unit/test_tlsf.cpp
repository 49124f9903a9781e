#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <thread>

#include "oracles.hpp"
#include "sdrad/tlsf.hpp"

using namespace sdrad;
using namespace sdrad::tlsf;

namespace {

Capability window(const Capability& root, std::size_t base, std::size_t len) {
  return *cap_bounds_set(*cap_address_set(root, base), len);
}

struct Heap {
  explicit Heap(std::size_t arena_size, std::size_t first_pool, std::size_t max_pool = kDefaultMaxPoolSize)
      : pair(arena_create(arena_size)),
        ctl(pair.first, window(pair.second, 0, arena_size), first_pool, max_pool) {}

  MemoryArena& arena() { return pair.first; }
  Capability pool_cap(std::size_t base, std::size_t len) { return window(pair.second, base, len); }

  std::pair<MemoryArena, Capability> pair;
  Control ctl;
};

// Layout walk from raw bytes, compared with the allocator's own walk.
void check_layout(Heap& h) {
  for (std::size_t i = 0; i < h.ctl.pools().size(); ++i) {
    const auto pool = h.ctl.pools()[i];
    auto raw = oracle::layout_walk(h.arena(), pool.region.base(), pool.size);
    REQUIRE(raw.has_value());
    const auto walked = h.ctl.walk_pool(i);
    REQUIRE(raw->size() == walked.size());
    for (std::size_t b = 0; b < walked.size(); ++b) {
      CHECK((*raw)[b].header == walked[b].offset);
      CHECK((*raw)[b].size == walked[b].size);
      CHECK((*raw)[b].free == walked[b].free);
    }
  }
  h.ctl.validate();
}

}  // namespace

TEST_CASE("mapping_insert frozen values") {
  CHECK(mapping_insert(100) == ClassIndex{0, 12});
  CHECK(mapping_insert(460) == ClassIndex{1, 25});
  CHECK(mapping_insert(256) == ClassIndex{1, 0});
  CHECK(mapping_insert(16) == ClassIndex{0, 2});
  CHECK(mapping_insert(255) == ClassIndex{0, 31});
  CHECK(mapping_insert(511) == ClassIndex{1, 31});
  CHECK(mapping_insert(512) == ClassIndex{2, 0});
  CHECK(mapping_insert(65472) == ClassIndex{8, 31});
}

TEST_CASE("mapping_insert agrees with enumerated class boundaries") {
  const auto classes = oracle::enumerate_classes(std::size_t{1} << 20);
  for (std::size_t size = 16; size <= 65536; ++size) {
    const auto [fl, sl] = oracle::brute_class(classes, size);
    const auto got = mapping_insert(size);
    REQUIRE(got.fl == fl);
    REQUIRE(got.sl == sl);
  }
}

TEST_CASE("mapping_search rounds up to the next class boundary") {
  CHECK(mapping_search(100) == ClassIndex{0, 12});
  CHECK(mapping_search(460) == ClassIndex{1, 26});
  CHECK(mapping_search(456) == ClassIndex{1, 25});
  CHECK(mapping_search(257) == ClassIndex{1, 1});
  const auto classes = oracle::enumerate_classes(std::size_t{1} << 20);
  for (std::size_t size = 256; size <= 65536; size += 16) {
    // Every size in the start class is at least the request.
    const auto cls = mapping_search(size);
    const auto it = std::find_if(classes.begin(), classes.end(),
                                 [&](const auto& c) { return c.fl == cls.fl && c.sl == cls.sl; });
    REQUIRE(it != classes.end());
    REQUIRE(it->lo >= size);
  }
}

TEST_CASE("a fresh 64 KiB pool is one free block") {
  Heap h(64 * 1024, 64 * 1024);
  const auto blocks = h.ctl.walk_pool(0);
  REQUIRE(blocks.size() == 1);
  CHECK(blocks[0].size == 65472);
  CHECK(blocks[0].free);
  CHECK(h.ctl.bitmap_bit(mapping_insert(65472)));
  CHECK(h.ctl.free_bytes() == 65472);
  CHECK(h.ctl.stats() == Stats{0, 64 * 1024, 0});
  check_layout(h);
}

TEST_CASE("pool size limits") {
  auto [arena, root] = arena_create(1 << 20);
  CHECK_THROWS_AS(Control(arena, root, kMinPoolSize - 16), std::invalid_argument);
  CHECK_NOTHROW(Control(arena, root, kMinPoolSize));
  CHECK_THROWS_AS(Control(arena, root, 8192, 4096), std::invalid_argument);
  CHECK_THROWS_AS(Control(arena, cap_clear_tag(root), 4096), std::invalid_argument);
}

TEST_CASE("the whole remaining space can be allocated once") {
  Heap h(64 * 1024, 64 * 1024);
  auto all = h.ctl.malloc(65472);
  REQUIRE(all);
  CHECK(all->length() == 65472);
  auto more = h.ctl.malloc(16);
  REQUIRE_FALSE(more);
  CHECK(more.error() == AllocError::OutOfMemory);
  CHECK_FALSE(h.ctl.find_suitable_block(16));
  check_layout(h);
}

TEST_CASE("add_pool") {
  Heap h(4 << 20, 64 * 1024);
  const auto before = h.ctl.free_bytes();
  h.ctl.add_pool(h.pool_cap(1 << 20, 1 << 20), 1 << 20);
  CHECK(h.ctl.free_bytes() == before + (1 << 20) - kPoolOverhead);
  CHECK(h.ctl.stats().bytes_reserved == 64 * 1024 + (1 << 20));
  CHECK(h.ctl.pools().size() == 2);

  CHECK_THROWS_AS(h.ctl.add_pool(h.pool_cap(32 * 1024, 64 * 1024), 64 * 1024), std::invalid_argument);
  CHECK_THROWS_AS(h.ctl.add_pool(h.pool_cap((1 << 20) + 4096, 4096), 4096), std::invalid_argument);
  CHECK(h.ctl.pools().size() == 2);
  check_layout(h);
}

TEST_CASE("a second pool serves requests once the first is exhausted") {
  Heap h(1 << 20, 4096);
  h.ctl.add_pool(h.pool_cap(8192, 4096), 4096);
  auto first = h.ctl.malloc(4096 - kPoolOverhead);
  REQUIRE(first);
  auto second = h.ctl.malloc(64);
  REQUIRE(second);
  const bool first_low = first->base() < 4096;
  CHECK(first_low == (second->base() >= 8192));
  CHECK((second->base() < 4096 || second->top() <= 8192 + 4096));
  CHECK(h.ctl.malloc(4096 - kPoolOverhead).error() == AllocError::OutOfMemory);
  check_layout(h);
}

TEST_CASE("find_suitable_block") {
  SUBCASE("single free block") {
    Heap h(1 << 16, 1024 + kPoolOverhead);
    auto block = h.ctl.find_suitable_block(64);
    REQUIRE(block);
    CHECK(block->offset() == 0);
    CHECK(h.ctl.block_info(*block).size == 1024);
  }
  SUBCASE("good fit skips a block in the request's own band") {
    Heap h(1 << 16, 4096);
    auto a = h.ctl.malloc(64);
    auto g1 = h.ctl.malloc(16);
    auto b = h.ctl.malloc(512);
    auto g2 = h.ctl.malloc(16);
    REQUIRE((a && g1 && b && g2));
    auto rest = h.ctl.find_suitable_block(16);
    REQUIRE(rest);
    REQUIRE(h.ctl.malloc(h.ctl.block_info(*rest).size));
    REQUIRE(h.ctl.free(*a));
    REQUIRE(h.ctl.free(*b));
    auto pick = h.ctl.find_suitable_block(100);
    REQUIRE(pick);
    CHECK(h.ctl.block_info(*pick).size == 512);
    CHECK(pick->offset() == b->base() - kBlockStartOffset);
    check_layout(h);
  }
}

TEST_CASE("block_split") {
  SUBCASE("1024 for 64 leaves a listed remainder") {
    Heap h(1 << 16, 1024 + kPoolOverhead);
    auto block = *h.ctl.find_suitable_block(64);
    auto split = h.ctl.block_split(block, 64);
    CHECK(h.ctl.block_info(split.allocated).size == 64);
    CHECK_FALSE(h.ctl.block_info(split.allocated).free);
    REQUIRE(split.remainder);
    const auto rest = h.ctl.block_info(*split.remainder);
    CHECK(rest.size == 1024 - 64 - kBlockHeaderOverhead);
    CHECK(rest.free);
    CHECK(h.ctl.bitmap_bit(mapping_insert(rest.size)));
    check_layout(h);
  }
  SUBCASE("exact fit has no remainder") {
    Heap h(1 << 16, 32 + kPoolOverhead);
    auto split = h.ctl.block_split(*h.ctl.find_suitable_block(32), 32);
    CHECK_FALSE(split.remainder);
    CHECK(h.ctl.block_info(split.allocated).size == 32);
    check_layout(h);
  }
  SUBCASE("a remainder too small for a block stays attached") {
    Heap h(1 << 16, 64 + kPoolOverhead);
    auto split = h.ctl.block_split(*h.ctl.find_suitable_block(32), 32);
    CHECK_FALSE(split.remainder);
    CHECK(h.ctl.block_info(split.allocated).size == 64);
    check_layout(h);
  }
  SUBCASE("the smallest remainder is one minimum block") {
    Heap h(1 << 16, 80 + kPoolOverhead);
    auto split = h.ctl.block_split(*h.ctl.find_suitable_block(32), 32);
    REQUIRE(split.remainder);
    CHECK(h.ctl.block_info(*split.remainder).size == kBlockSizeMin);
    check_layout(h);
  }
  SUBCASE("rejects allocated blocks") {
    Heap h(1 << 16, 4096);
    auto cap = *h.ctl.malloc(64);
    auto block = *h.ctl.offset_to_block(cap);
    CHECK_THROWS_AS(h.ctl.block_split(block, 16), std::invalid_argument);
  }
}

TEST_CASE("block_merge") {
  SUBCASE("adjacent frees coalesce") {
    Heap h(1 << 16, 4096);
    auto a = *h.ctl.malloc(64);
    auto b = *h.ctl.malloc(128);
    auto guard = *h.ctl.malloc(16);
    REQUIRE(h.ctl.free(a));
    auto merged = h.ctl.block_merge(*h.ctl.offset_to_block(b));
    CHECK(merged.offset() == a.base() - kBlockStartOffset);
    CHECK(h.ctl.block_info(merged).size == 64 + 128 + kBlockHeaderOverhead);
    CHECK(h.ctl.block_info(merged).free);
    (void)guard;
    check_layout(h);
  }
  SUBCASE("a block between allocated neighbours stays alone") {
    Heap h(1 << 16, 4096);
    auto a = *h.ctl.malloc(64);
    auto b = *h.ctl.malloc(64);
    auto c = *h.ctl.malloc(64);
    REQUIRE(h.ctl.free(b));
    const auto walk = h.ctl.walk_pool(0);
    CHECK(walk[1].free);
    CHECK(walk[1].size == 64);
    CHECK_FALSE(walk[0].free);
    CHECK_FALSE(walk[2].free);
    (void)a;
    (void)c;
    check_layout(h);
  }
  SUBCASE("freeing everything in any order restores the fresh pool") {
    std::mt19937_64 rng(3);
    for (int round = 0; round < 20; ++round) {
      Heap h(1 << 16, 1 << 16);
      const auto fresh = h.ctl.walk_pool(0);
      std::vector<Capability> caps;
      while (auto cap = h.ctl.malloc(16 + rng() % 700)) caps.push_back(*cap);
      std::shuffle(caps.begin(), caps.end(), rng);
      for (const auto& c : caps) REQUIRE(h.ctl.free(c));
      const auto after = h.ctl.walk_pool(0);
      REQUIRE(after.size() == 1);
      CHECK(after[0].size == fresh[0].size);
      CHECK(h.ctl.stats() == Stats{0, 1 << 16, 0});
      check_layout(h);
    }
  }
}

TEST_CASE("malloc rounds and bounds") {
  Heap h(1 << 16, 4096);
  auto five = h.ctl.malloc(5);
  REQUIRE(five);
  CHECK(five->length() == 16);
  CHECK(five->address() == five->base());
  CHECK(five->base() % 16 == 0);
  CHECK(five->perms() == Permissions::load_store());
  auto zero = h.ctl.malloc(0);
  REQUIRE(zero);
  CHECK(zero->length() == 16);
  CHECK(h.ctl.stats().live_allocations == 2);
  CHECK(h.ctl.malloc(std::size_t{1} << 40).error() == AllocError::OutOfMemory);

  // The payload capability cannot reach its own header.
  CHECK(h.arena().load(*five, 0, 16));
  auto below = cap_address_set(*five, five->base() - 16);
  CHECK(h.arena().load(*below, 0, 8).error().kind == FaultKind::BoundsViolation);
}

TEST_CASE("offset_to_block") {
  Heap h(1 << 20, 4096);
  h.ctl.add_pool(h.pool_cap(8192, 4096), 4096);
  auto cap = *h.ctl.malloc(100);
  auto block = h.ctl.offset_to_block(cap);
  REQUIRE(block);
  CHECK(block->offset() == cap.base() - kBlockStartOffset);
  CHECK((oracle::raw_u64(h.arena(), block->offset() + 16) & ~std::uint64_t{15}) == 112);
  CHECK(block->header.base() == h.ctl.heap_capability().base());
  CHECK(block->header.top() == h.ctl.heap_capability().top());

  auto gap = *cap_address_set(cap, 4096 + 64);
  CHECK(h.ctl.offset_to_block(gap).error() == AllocError::InvalidFree);
  auto beyond = *cap_address_set(cap, 900000);
  CHECK(h.ctl.offset_to_block(beyond).error() == AllocError::InvalidFree);
  auto misaligned = *cap_address_set(cap, cap.base() + 8);
  CHECK(h.ctl.offset_to_block(misaligned).error() == AllocError::InvalidFree);
}

TEST_CASE("free") {
  Heap h(1 << 16, 4096);
  const auto before = h.ctl.stats();
  auto cap = *h.ctl.malloc(100);
  REQUIRE(h.ctl.free(cap));
  CHECK(h.ctl.stats() == before);
  auto again = h.ctl.free(cap);
  REQUIRE_FALSE(again);
  CHECK(again.error() == AllocError::DoubleFree);
  auto foreign = *cap_address_set(cap, 60000);
  CHECK(h.ctl.free(foreign).error() == AllocError::InvalidFree);
  check_layout(h);
}

TEST_CASE("random interleavings against an extent oracle") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    std::mt19937_64 rng(seed);
    Heap h(1 << 20, 1 << 18);
    h.ctl.add_pool(h.pool_cap(1 << 19, 1 << 18), 1 << 18);
    oracle::ExtentSet live;
    std::vector<Capability> caps;
    std::size_t block_bytes = 0;
    auto raw_size = [&](const Capability& c) { return oracle::raw_u64(h.arena(), c.base() - 16) & ~std::uint64_t{15}; };
    for (int op = 0; op < 10000; ++op) {
      if (caps.empty() || rng() % 100 < 55) {
        const std::size_t size = rng() % 4 == 0 ? rng() % 8192 : rng() % 256;
        auto cap = h.ctl.malloc(size);
        if (!cap) {
          REQUIRE(cap.error() == AllocError::OutOfMemory);
          continue;
        }
        REQUIRE(cap->base() % 16 == 0);
        REQUIRE(cap->length() >= size);
        REQUIRE(live.insert(cap->base(), cap->length()));
        REQUIRE(raw_size(*cap) >= cap->length());
        block_bytes += raw_size(*cap);
        caps.push_back(*cap);
      } else {
        const std::size_t i = rng() % caps.size();
        block_bytes -= raw_size(caps[i]);
        REQUIRE(h.ctl.free(caps[i]));
        REQUIRE(live.erase(caps[i].base()));
        caps[i] = caps.back();
        caps.pop_back();
      }
      REQUIRE(h.ctl.check_bitmaps());
      REQUIRE(h.ctl.stats().bytes_allocated == block_bytes);
    }
    h.ctl.validate();
    for (const auto& c : caps) REQUIRE(h.ctl.free(c));
    CHECK(h.ctl.stats().bytes_allocated == 0);
    CHECK(h.ctl.stats().live_allocations == 0);
    CHECK(h.ctl.free_bytes() == 2 * ((1 << 18) - kPoolOverhead));
    check_layout(h);
  }
}

TEST_CASE("destroy returns every pool") {
  Heap h(1 << 20, 4096);
  h.ctl.add_pool(h.pool_cap(8192, 4096), 4096);
  h.ctl.add_pool(h.pool_cap(16384, 8192), 8192);
  auto live = h.ctl.malloc(64);
  REQUIRE(live);
  const auto reserved = h.ctl.stats().bytes_reserved;
  const auto pools = h.ctl.destroy();
  REQUIRE(pools.size() == 3);
  const std::size_t sum = std::accumulate(pools.begin(), pools.end(), std::size_t{0},
                                          [](std::size_t acc, const PoolDescriptor& p) { return acc + p.size; });
  CHECK(sum == reserved);
  CHECK(h.ctl.destroyed());
  CHECK_THROWS_AS(h.ctl.malloc(16), std::logic_error);

  Heap fresh(1 << 16, 4096);
  const auto one = fresh.ctl.destroy();
  REQUIRE(one.size() == 1);
  CHECK(one[0].size == 4096);
  CHECK(one[0].region.base() == 0);
}

TEST_CASE("one control is safe to share between threads") {
  Heap h(1 << 22, 1 << 21);
  auto worker = [&h](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Capability> mine;
    for (int i = 0; i < 5000; ++i) {
      if (mine.empty() || rng() % 2) {
        if (auto cap = h.ctl.malloc(rng() % 512)) mine.push_back(*cap);
      } else {
        REQUIRE(h.ctl.free(mine.back()));
        mine.pop_back();
      }
    }
    for (const auto& c : mine) REQUIRE(h.ctl.free(c));
  };
  std::thread a(worker, 1);
  std::thread b(worker, 2);
  a.join();
  b.join();
  CHECK(h.ctl.stats().live_allocations == 0);
  h.ctl.validate();
}
