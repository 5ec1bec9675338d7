// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/measurement.h"

#include "doctest.h"
#include "oracle.h"
#include "support.h"

#include <random>

using namespace nsgx;
using namespace nsgx::monitor;

namespace
{
  guest::EnclaveImage random_image(std::mt19937_64& rng)
  {
    guest::EnclaveImage img;
    uint64_t pages = 1 + rng() % 8;
    img.size_bytes = 16 * kPageSize;
    img.ssa_frame_size = 1 + rng() % 3;
    for (uint64_t i = 0; i < pages; ++i)
    {
      guest::ImagePage p;
      p.offset = (rng() % 16) * kPageSize;
      p.type = rng() % 3 == 0 ? PageType::Tcs : PageType::Reg;
      p.perms = PagePerms::from_bits(rng() % 8);
      p.measure = rng() % 4 != 0;
      p.content.resize(rng() % 2 ? kPageSize : rng() % kPageSize);
      for (auto& b : p.content)
        b = static_cast<uint8_t>(rng());
      img.pages.push_back(std::move(p));
    }
    return img;
  }
}

TEST_CASE("record layouts")
{
  MeasurementLog log;
  log.ecreate(2, 0x8000);
  log.eadd(0x3000, PageType::Tcs, {true, false, true});
  Bytes chunk(kExtendChunk);
  for (size_t i = 0; i < chunk.size(); ++i)
    chunk[i] = static_cast<uint8_t>(i);
  log.eextend(0x3100, chunk);

  const auto& r = log.records();
  REQUIRE(r.size() == 2 + 5);
  CHECK(std::string(reinterpret_cast<const char*>(r[0].data())) == "ECREATE");
  CHECK(get_le32(r[0].data() + 8) == 2);
  CHECK(get_le64(r[0].data() + 12) == 0x8000);
  CHECK(std::string(reinterpret_cast<const char*>(r[1].data())) == "EADD");
  CHECK(get_le64(r[1].data() + 8) == 0x3000);
  CHECK(get_le64(r[1].data() + 16) == (5 | 1 << 8));
  CHECK(std::string(reinterpret_cast<const char*>(r[2].data())) == "EEXTEND");
  CHECK(get_le64(r[2].data() + 8) == 0x3100);
  for (size_t k = 0; k < 4; ++k)
    CHECK(std::equal(r[3 + k].begin(), r[3 + k].end(), chunk.begin() + 64 * k));
  for (size_t i = 0; i < 2; ++i)
    CHECK(std::all_of(r[i].begin() + 24, r[i].end(), [](uint8_t b) { return b == 0; }));
}

TEST_CASE("eextend takes exactly one chunk")
{
  MeasurementLog log;
  CHECK_THROWS_AS(log.eextend(0, Bytes(255)), Error);
  CHECK(log.records().empty());
}

TEST_CASE("frozen logs refuse new records")
{
  MeasurementLog log;
  log.ecreate(1, 0x4000);
  auto d = log.digest();
  log.freeze();
  for (auto f : std::vector<std::function<void()>>{
         [&] { log.ecreate(1, 0x4000); },
         [&] { log.eadd(0, PageType::Reg, {}); },
         [&] { log.eextend(0, Bytes(kExtendChunk)); }})
  {
    try
    {
      f();
      FAIL("accepted");
    }
    catch (const Error& e)
    {
      CHECK(e.code() == ErrorCode::StateError);
    }
  }
  CHECK(log.digest() == d);
  CHECK(log.records().size() == 1);
}

TEST_CASE("property: offline measurement matches the reference digest")
{
  std::mt19937_64 rng(99);
  for (int i = 0; i < 200; ++i)
  {
    auto img = random_image(rng);
    CHECK(guest::measure_image(img) == oracle::mrenclave(img));
  }
}

TEST_CASE("measurement is order sensitive")
{
  std::mt19937_64 rng(4);
  int checked = 0;
  while (checked < 50)
  {
    auto img = random_image(rng);
    if (img.pages.size() < 2 || img.pages[0].offset == img.pages[1].offset)
      continue;
    auto swapped = img;
    std::swap(swapped.pages[0], swapped.pages[1]);
    CHECK(guest::measure_image(img) != guest::measure_image(swapped));
    ++checked;
  }
}

TEST_CASE("unmeasured pages contribute only their EADD record")
{
  std::mt19937_64 rng(8);
  for (int i = 0; i < 50; ++i)
  {
    auto img = random_image(rng);
    for (auto& p : img.pages)
      p.measure = false;
    auto d = guest::measure_image(img);
    for (auto& p : img.pages)
      for (auto& b : p.content)
        b ^= 0xa5;
    CHECK(guest::measure_image(img) == d);

    MeasurementLog log;
    log.ecreate(img.ssa_frame_size, img.size_bytes);
    for (const auto& p : img.pages)
      log.eadd(p.offset, p.type, p.perms);
    CHECK(log.digest() == d);
  }
}

TEST_CASE("permission strings")
{
  for (uint8_t b = 0; b < 8; ++b)
    CHECK(parse_perms(to_string(PagePerms::from_bits(b))).bits() == b);
  CHECK(to_string(PagePerms{true, false, true}) == "r-x");
  for (auto s : {"rw", "rwxx", "wrx", "r+x"})
    CHECK_THROWS_AS(parse_perms(s), Error);
}
