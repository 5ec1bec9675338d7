// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/monitor.h"

#include "doctest.h"
#include "oracle.h"
#include "support.h"

#include <functional>
#include <random>

using namespace nsgx;
using namespace nsgx::monitor;
using nsgx::test::load_asm;
using nsgx::test::seeded;

namespace
{
  ErrorCode code_of(const std::function<void()>& f)
  {
    try
    {
      f();
    }
    catch (const Error& e)
    {
      return e.code();
    }
    FAIL("no error raised");
    return ErrorCode::ParseError;
  }

  MachineConfig small(uint64_t seed)
  {
    auto c = seeded(seed);
    c.total_pages = 256;
    c.vmpl0_pages = 64;
    c.monitor_pages = 16;
    return c;
  }
}

TEST_CASE("ECREATE checks size, alignment and SSA size")
{
  Machine m(seeded(1));
  auto& mon = m.monitor();
  CHECK(code_of([&] { mon.ecreate({0x10000000, 0x3000, 1, 0}); }) == ErrorCode::AlignmentError);
  CHECK(code_of([&] { mon.ecreate({0x10001000, 0x4000, 1, 0}); }) == ErrorCode::AlignmentError);
  CHECK(code_of([&] { mon.ecreate({0x10000000, 0x800, 1, 0}); }) == ErrorCode::AlignmentError);
  CHECK(code_of([&] { mon.ecreate({0x10000000, 0x4000, 0, 0}); }) == ErrorCode::RangeError);
  CHECK(code_of([&] { mon.ecreate({kTrampolineGva, 0x200000, 1, 0}); }) == ErrorCode::RangeError);
  auto id = mon.ecreate({0x10000000, 0x4000, 1, 0});
  CHECK(mon.secs(id).state == SecsState::Uninitialized);
  CHECK(code_of([&] { mon.einit(id); }) == ErrorCode::NoTcsError);
  CHECK(code_of([&] { mon.secs(EnclaveId{99}); }) == ErrorCode::UnknownEnclave);
}

TEST_CASE("EPC exhaustion")
{
  Machine m(small(2));
  auto& mon = m.monitor();
  uint64_t epc = m.layout().epc.size();
  CHECK(mon.epc_free_count() == epc);
  for (uint64_t i = 0; i < epc; ++i)
    mon.ecreate({0x10000000 + i * 0x100000, 0x4000, 1, 0});
  CHECK(mon.epc_free_count() == 0);
  CHECK(code_of([&] { mon.ecreate({0x20000000, 0x4000, 1, 0}); }) == ErrorCode::EpcExhausted);
}

TEST_CASE("build leaves refuse bad arguments")
{
  Machine m(seeded(3));
  auto& mon = m.monitor();
  auto id = mon.ecreate({0x10000000, 0x4000, 1, 0});
  auto src = m.guest().stage_page(Bytes(kPageSize, 1));
  CHECK(code_of([&] { mon.eadd(id, src, 0x10000010, PageType::Reg, {true, false, false}); }) ==
        ErrorCode::AlignmentError);
  CHECK(code_of([&] { mon.eadd(id, src, 0x10004000, PageType::Reg, {true, false, false}); }) ==
        ErrorCode::RangeError);
  CHECK(code_of([&] { mon.eadd(id, src, 0x10000000, PageType::Secs, {}); }) == ErrorCode::LayoutError);
  // A source page the guest cannot read.
  CHECK(code_of([&] { mon.eadd(id, Gpa{m.layout().epc.begin}, 0x10000000, PageType::Reg, {}); }) ==
        ErrorCode::LayoutError);
  mon.eadd(id, src, 0x10001000, PageType::Reg, {true, false, false});
  CHECK(code_of([&] { mon.eadd(id, src, 0x10001000, PageType::Reg, {true, false, false}); }) ==
        ErrorCode::AlreadyMapped);
  CHECK(code_of([&] { mon.eextend(id, 0x10001080); }) == ErrorCode::AlignmentError);
  CHECK(code_of([&] { mon.eextend(id, 0x10002000); }) == ErrorCode::UnmappedError);
  mon.eextend(id, 0x10001100);
  CHECK(code_of([&] { mon.ereport(id, {}); }) == ErrorCode::StateError);
}

TEST_CASE("initialized enclaves are sealed against further building")
{
  Machine m(seeded(4));
  auto e = load_asm(m, nsgx::test::kReturn42);
  auto& mon = m.monitor();
  auto src = m.guest().stage_page(Bytes(kPageSize, 1));
  CHECK(mon.secs(e.id).state == SecsState::Initialized);
  CHECK(code_of([&] { mon.eadd(e.id, src, 0x10003000, PageType::Reg, {true, false, false}); }) ==
        ErrorCode::StateError);
  CHECK(code_of([&] { mon.eextend(e.id, 0x10000000); }) == ErrorCode::StateError);
  CHECK(code_of([&] { mon.einit(e.id); }) == ErrorCode::StateError);
  CHECK(mon.secs(e.id).measurement_log.frozen());
  CHECK(mon.enclave_table_conforms(e.id));
}

TEST_CASE("online measurement equals the offline replay and the reference")
{
  std::mt19937_64 rng(5);
  Machine m(seeded(5));
  for (int i = 0; i < 6; ++i)
  {
    guest::ImageOptions opts;
    opts.base_gva = 0x10000000 + i * 0x100000;
    opts.nssa = 1 + rng() % 3;
    opts.data_pages = 1 + rng() % 2;
    opts.attributes = rng() % 4;
    auto img = guest::make_image(evm::assemble(nsgx::test::spin_program(rng() % 100 + 1)), opts);
    img.pages.back().content.assign(kPageSize, static_cast<uint8_t>(rng()));
    if (rng() % 2)
      img.pages.back().measure = false;
    auto e = guest::load_enclave(m.guest(), img);
    CHECK(e.mrenclave == guest::measure_image(img));
    CHECK(e.mrenclave == oracle::mrenclave(img));
    CHECK(*m.monitor().secs(e.id).mrenclave == e.mrenclave);
  }
}

TEST_CASE("property: EPC pages are conserved across create and remove")
{
  std::mt19937_64 rng(6);
  Machine m(small(6));
  auto& mon = m.monitor();
  const uint64_t epc = m.layout().epc.size();
  std::vector<EnclaveId> live;
  uint64_t base = 0x10000000;
  for (int step = 0; step < 300; ++step)
  {
    if (live.empty() || rng() % 3 != 0)
    {
      try
      {
        auto id = mon.ecreate({base += 0x100000, 0x8000, 1, 0});
        uint64_t pages = rng() % 4;
        for (uint64_t p = 0; p < pages; ++p)
          mon.eadd(id, m.guest().stage_page(Bytes(kPageSize, 0x5a)), base + p * kPageSize, PageType::Reg,
                   {true, true, false});
        live.push_back(id);
      }
      catch (const Error& e)
      {
        CHECK(e.code() == ErrorCode::EpcExhausted);
      }
    }
    else
    {
      auto k = rng() % live.size();
      mon.eremove(live[k]);
      live.erase(live.begin() + k);
    }
    CHECK(mon.epc_free_count() + mon.epc_owned_count() == epc);
    for (const auto& entry : mon.epcm())
      if (!entry.valid)
        CHECK(m.memory().page_is_zero(*m.memory().spa_for(entry.gpa)));
  }
}

TEST_CASE("removed enclaves leave zeroed pages behind")
{
  Machine m(small(7));
  auto e = load_asm(m, nsgx::test::kReturn42);
  auto pages = m.monitor().enclave_pages(e.id);
  REQUIRE_FALSE(pages.empty());
  m.monitor().eremove(e.id);
  for (auto g : pages)
    CHECK(m.memory().page_is_zero(*m.memory().spa_for(g)));
  CHECK(m.monitor().secs(e.id).state == SecsState::Removed);
  CHECK(code_of([&] { m.monitor().eremove(e.id); }) == ErrorCode::StateError);
  // The App's parameter buffer mapping stays pinned, so reload elsewhere.
  CHECK(code_of([&] { load_asm(m, nsgx::test::kReturn42); }) == ErrorCode::Immutable);
  guest::ImageOptions opts;
  opts.base_gva = 0x20000000;
  auto again = load_asm(m, nsgx::test::kReturn42, opts);
  CHECK(guest::ecall(m.guest(), again).value == 42);
}

TEST_CASE("SSA frames run out without ERESUME")
{
  auto cfg = seeded(8);
  cfg.step_budget = 50;
  Machine m(cfg);
  auto e = load_asm(m, nsgx::test::spin_program(1000));
  auto& mon = m.monitor();
  auto first = mon.eenter(e.id, e.tcs[0], guest::kAppAep);
  CHECK(first.kind == ExitEvent::Kind::Aex);
  CHECK(first.aep == guest::kAppAep);
  CHECK(mon.tcs(e.id, e.tcs[0]).current_ssa_index == 1);
  CHECK_FALSE(mon.tcs(e.id, e.tcs[0]).busy);
  auto second = mon.eenter(e.id, e.tcs[0], guest::kAppAep);
  CHECK(second.kind == ExitEvent::Kind::Killed);
  CHECK(second.error == ErrorCode::SsaOverflow);
  CHECK_FALSE(mon.current_thread());
  // The frame saved by the first AEX is still there.
  CHECK(mon.eresume(e.id, e.tcs[0]).kind == ExitEvent::Kind::Aex);
}

TEST_CASE("ERESUME needs a saved frame and a valid TCS")
{
  Machine m(seeded(9));
  auto e = load_asm(m, nsgx::test::kReturn42);
  auto& mon = m.monitor();
  CHECK(code_of([&] { mon.eresume(e.id, e.tcs[0]); }) == ErrorCode::NoPendingSsa);
  CHECK(code_of([&] { mon.eenter(e.id, e.tcs[0] + kPageSize, 0); }) == ErrorCode::NoTcsError);
  auto x = mon.eenter(e.id, e.tcs[0], 0);
  CHECK(x.kind == ExitEvent::Kind::Eexit);
  CHECK(x.value == 42);
}

TEST_CASE("enclave syscall entry rejects non-enclave callers")
{
  Machine m(seeded(10));
  auto e = load_asm(m, nsgx::test::kReturn42);
  for (auto kind : {mem::ContextKind::AppUser, mem::ContextKind::GuestKernel, mem::ContextKind::MonitorKernel})
    CHECK(code_of([&] {
            m.monitor().syscall_dispatch({kind, e.id.value}, kTrampolineGva, evm::SyscallLeaf::Eexit, {});
          }) == ErrorCode::BadEntry);
  // Enclave context, but no thread is running.
  CHECK(code_of([&] {
          m.monitor().syscall_dispatch(
            {mem::ContextKind::EnclaveUser, e.id.value}, kTrampolineGva, evm::SyscallLeaf::Eexit, {});
        }) == ErrorCode::BadEntry);
}

TEST_CASE("EGETKEY policy and determinism")
{
  Machine m(seeded(11));
  auto e = load_asm(m, nsgx::test::kReturn42);
  KeyRequest req;
  req.key_id[0] = 3;
  auto k = m.monitor().egetkey(e.id, req);
  CHECK(m.monitor().egetkey(e.id, req) == k);
  auto bad = req;
  bad.policy = 2;
  CHECK(code_of([&] { m.monitor().egetkey(e.id, bad); }) == ErrorCode::RangeError);
  auto other = req;
  other.key_name = attest::KeyName::ReportKey;
  CHECK(m.monitor().egetkey(e.id, other) != k);
  CHECK(KeyRequest::parse(req.serialize()).key_id == req.key_id);
  Bytes raw = req.serialize();
  raw[0] = 9;
  CHECK(code_of([&] { KeyRequest::parse(raw); }) == ErrorCode::DecodeError);
}

TEST_CASE("the AIK never reaches guest-visible memory")
{
  Machine m(seeded(12));
  auto e = load_asm(m, nsgx::test::report_program(0x10000000 + 3 * kPageSize));
  REQUIRE(guest::ecall(m.guest(), e).ok());
  REQUIRE(m.monitor().last_bundle(e.id));

  auto seed = nsgx::test::aik_seed(12);
  CHECK(m.monitor().aik().public_key() == attest::Aik(seed).public_key());
  std::string visible;
  Bytes page(kPageSize);
  const auto& l = m.layout();
  for (uint64_t g = 0; g < l.total_gpa_pages; ++g)
    if (is_allowed(m.memory().read(Gpa{g}, 0, page, Vmpl{1})))
      visible.append(page.begin(), page.end());
  for (const auto& msg : m.relay().transcript)
  {
    visible.append(msg.ciphertext.begin(), msg.ciphertext.end());
    visible.append(msg.tag.begin(), msg.tag.end());
  }
  visible += attest::bundle_to_json(*m.monitor().last_bundle(e.id));
  CHECK_FALSE(nsgx::test::contains_bytes(visible, seed));
  // The EREPORT output landed in the enclave, not in guest memory.
  auto pub = m.monitor().aik().public_key();
  CHECK(nsgx::test::contains_bytes(visible, pub));
}

TEST_CASE("the binding report names the AIK and VMPL0")
{
  Machine m(seeded(13));
  const auto& b = m.monitor().binding_report();
  REQUIRE(b);
  CHECK(b->vmpl == Vmpl{0});
  CHECK(b->report_data == m.monitor().aik().binding_report_data());
  CHECK(b->launch_digest == m.sp().launch_digest());
}

TEST_CASE("driver channel encoding round-trips")
{
  DriverRequest r{DriverLeaf::Eadd, {1, 2, 3, 4, 5, 6, 7, 8}};
  auto back = decode_request(encode_request(r));
  CHECK(back.leaf == r.leaf);
  CHECK(back.args == r.args);
  MonitorReply rep;
  rep.kind = MonitorReply::Kind::AexDelivery;
  rep.status = 3;
  rep.aep = 0x400000;
  rep.digest[4] = 1;
  Bytes page(kPageSize);
  auto enc = encode_reply(rep);
  std::copy(enc.begin(), enc.end(), page.begin() + kReplyOffset);
  auto rb = decode_reply(page);
  CHECK(rb.kind == rep.kind);
  CHECK(rb.error() == static_cast<ErrorCode>(2));
  CHECK(rb.aep == rep.aep);
  CHECK(rb.digest == rep.digest);
  CHECK(code_of([] { decode_request(Bytes(8)); }) == ErrorCode::DecodeError);
}
