// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails.

#include "nsgx/cli.h"

#include "oracle.h"
#include "support.h"

#include <chrono>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

using namespace nsgx;
using guest::LeafResult;
using nsgx::test::seeded;

namespace
{
  constexpr Vmpl V0{0};
  constexpr Vmpl V1{1};

  struct Failure
  {
    std::string why;
  };

  void require(bool ok, const std::string& why)
  {
    if (!ok)
      throw Failure{why};
  }

  std::string hexs(uint64_t v)
  {
    std::ostringstream o;
    o << "0x" << std::hex << v;
    return o.str();
  }

  // ----- 1: switch ledger for the roundtrip flow -----

  std::string criterion_1()
  {
    auto man = cli::load_manifest(nsgx::test::source_path("manifests/roundtrip.json"));
    Machine m(seeded(1));
    auto e = guest::load_enclave(m.guest(), man.image);
    auto& ledger = m.cpu().ledger();
    auto switches = [&] { return ledger.count(vcpu::EventKind::VmplSwitch); };
    ledger.clear();

    // ECALL that leaves through an OCALL.
    auto first = guest::ecall(m.guest(), e);
    require(first.ocall && first.aex_count == 0, "first ECALL did not end in a clean OCALL exit");
    uint64_t ecall = switches();
    require(ecall == 2, "honest ECALL recorded " + std::to_string(ecall) + " VmplSwitch events");
    require(ledger.count("VmplSwitch(1,0)") == 1 && ledger.count("VmplSwitch(0,1)") == 1,
            "ECALL switches are not one each way");

    // OCALL return, which runs long enough to be preempted once.
    m.guest().write_app_u64(e.param_gva, monitor::param::kOcallReturn);
    auto second = guest::ecall(m.guest(), e);
    require(second.kind == LeafResult::Kind::EexitReturn && second.value == 42, "OCALL return failed");
    require(second.aex_count == 1, "expected exactly one AEX, saw " + std::to_string(second.aex_count));
    uint64_t resumed = switches() - ecall;
    uint64_t per_aex = 0;
    // Split the second segment at the Aex event.
    const auto& trace = ledger.trace();
    bool after_aex = false;
    uint64_t before_aex = 0, seen = 0;
    for (const auto& ev : trace)
    {
      if (ev.kind == vcpu::EventKind::VmplSwitch && ++seen > ecall)
        (after_aex ? per_aex : before_aex)++;
      if (ev.kind == vcpu::EventKind::Aex)
        after_aex = true;
    }
    // Before the AEX: the re-entry (1,0). The AEX exit (0,1) and ERESUME
    // entry (1,0) form the AEX pair; the final EEXIT (0,1) closes the OCALL
    // round-trip.
    uint64_t ocall_roundtrip = resumed - 2 * second.aex_count;
    require(ocall_roundtrip == 2, "OCALL round-trip added " + std::to_string(ocall_roundtrip));
    require(before_aex == 1 && per_aex == 3, "unexpected switch placement around the AEX");
    require(ledger.count(vcpu::EventKind::Aex) == 1, "Aex count");
    require(ledger.consistent(), "ledger counts disagree with the trace");

    // The shipped scenario expresses the same flow.
    auto r = cli::cmd_run(cli::load_scenario(nsgx::test::source_path("scenarios/roundtrip.json")));
    require(r.status == 0, "roundtrip scenario failed:\n" + r.text);
    require(r.ledger.find("VmplSwitch(1,0)=3\nVmplSwitch(0,1)=3\n") != std::string::npos ||
              (r.ledger.find("VmplSwitch(0,1)=3\n") != std::string::npos &&
               r.ledger.find("VmplSwitch(1,0)=3\n") != std::string::npos),
            "roundtrip scenario ledger totals");
    return "ECALL=2, OCALL round-trip=+2, AEX+ERESUME=+2";
  }

  // ----- 2: measurement -----

  guest::EnclaveImage random_build(std::mt19937_64& rng, uint64_t index)
  {
    guest::ImageOptions opts;
    opts.base_gva = 0x10000000 + index * 0x100000;
    opts.nssa = 1 + rng() % 3;
    opts.data_pages = 1 + rng() % 3;
    opts.attributes = rng() % 16;
    auto img = guest::make_image(evm::assemble(nsgx::test::spin_program(1 + rng() % 50, rng() % 100)), opts);
    uint64_t top = 0;
    for (auto& p : img.pages)
    {
      top = std::max(top, p.offset + kPageSize);
      if (p.type == monitor::PageType::Reg && p.perms.write && p.offset > (opts.nssa * kPageSize))
      {
        for (auto& b : p.content)
          b = static_cast<uint8_t>(rng());
        p.measure = rng() % 3 != 0;
      }
    }
    uint64_t extra = rng() % 4;
    for (uint64_t i = 0; i < extra; ++i)
    {
      guest::ImagePage p;
      p.offset = top;
      top += kPageSize;
      p.perms = monitor::PagePerms::from_bits(1 + rng() % 7);
      p.content.resize(rng() % (kPageSize + 1));
      for (auto& b : p.content)
        b = static_cast<uint8_t>(rng());
      p.measure = rng() % 4 != 0;
      img.pages.push_back(std::move(p));
    }
    img.size_bytes = std::bit_ceil(top);
    img.param_gva = img.base_gva + img.size_bytes;
    return img;
  }

  std::string criterion_2()
  {
    std::mt19937_64 rng(2);
    Machine m(seeded(2));
    uint64_t mutations = 0;
    for (uint64_t i = 0; i < 20; ++i)
    {
      auto img = random_build(rng, i);
      auto live = guest::load_enclave(m.guest(), img);
      auto reference = oracle::mrenclave(img);
      require(live.mrenclave == reference, "script " + std::to_string(i) + ": live MRENCLAVE differs");
      require(guest::measure_image(img) == reference, "script " + std::to_string(i) + ": offline differs");

      std::vector<size_t> measured;
      for (size_t k = 0; k < img.pages.size(); ++k)
        if (img.pages[k].measure)
          measured.push_back(k);
      require(!measured.empty(), "no measured pages");
      for (int f = 0; f < 50; ++f)
      {
        auto mutated = img;
        auto& page = mutated.pages[measured[rng() % measured.size()]];
        page.content.resize(kPageSize, 0);
        auto bit = rng() % (8 * kPageSize);
        page.content[bit / 8] ^= static_cast<uint8_t>(1u << (bit % 8));
        auto d = guest::measure_image(mutated);
        require(d != reference, "a single-bit flip kept the digest");
        require(d == oracle::mrenclave(mutated), "mutated digest disagrees with the reference");
        mutations++;
      }
    }
    return "20 scripts match the reference; " + std::to_string(mutations) + " bit flips all change the digest";
  }

  // ----- 3: memory isolation -----

  std::string criterion_3()
  {
    std::mt19937_64 rng(3);
    Machine m(seeded(3));
    auto& os = m.guest();
    const auto& l = m.layout();
    uint64_t probes = 0;

    // VMPL1 kernel and user accesses to VMPL0 gPAs.
    for (int i = 0; i < 1000; ++i)
    {
      Gpa gpa{rng() % l.vmpl0.end};
      bool kernel = rng() % 2;
      bool write = rng() % 2;
      auto& pt = m.tables().get(kernel ? os.kernel_table() : os.app_table());
      uint64_t gva = kernel ? guest::kAttackGva + kPageSize : 0x7e000000;
      pt.map(page_of(gva), {gpa, !kernel, true, rng() % 2 == 0, false});
      auto spa = *m.memory().spa_for(gpa);
      Bytes before(m.memory().raw_page(spa), m.memory().raw_page(spa) + kPageSize);
      uint64_t addr = gva + (rng() % (kPageSize / 8)) * 8;
      evm::Program prog;
      if (write)
        prog.instructions = {evm::instr::LoadImm{1, rng()}, evm::instr::Store{addr, 1}, evm::instr::Halt{}};
      else
        prog.instructions = {evm::instr::Load{1, addr}, evm::instr::Halt{}};
      vcpu::CpuState cpu;
      evm::AddressSpace as{pt, m.memory(), kernel ? Mode::Kernel : Mode::User, V1};
      auto r = evm::run(prog, cpu, as, 8);
      pt.unmap(page_of(gva));
      Bytes after(m.memory().raw_page(spa), m.memory().raw_page(spa) + kPageSize);
      require(r.kind == evm::RunResult::Kind::Trapped && r.trap->kind == vcpu::Exception::RmpFault,
              "VMPL1 access to gpa " + std::to_string(gpa.value) + " did not RmpFault");
      require(before == after, "VMPL0 page changed");
      require(!is_allowed(m.memory().read(gpa, 0, std::span<uint8_t>(before.data(), 8), V1)),
              "direct VMPL1 read allowed");
      probes++;
    }

    // Adversarial enclaves reaching outside their EPC pages.
    const uint64_t app_gva = 0x6000000;
    os.map_app_pages(app_gva, 1);
    os.write_app_u64(app_gva, 0x1111);
    uint64_t faults = 0;
    for (int i = 0; i < 1000; ++i)
    {
      uint64_t base = 0x100000000 + static_cast<uint64_t>(i) * 0x100000;
      std::string body;
      switch (rng() % 6)
      {
        case 0:
          body = "loadi r1, -1\nstore [" + std::to_string(app_gva + (rng() % 512) * 8) + "], r1";
          break;
        case 1:
          body = "load r1, [" + std::to_string(app_gva) + "]";
          break;
        case 2:
          body = "load r1, [" + std::to_string(monitor::kTrampolineGva + (rng() % 512) * 8) + "]";
          break;
        case 3:
          // Another enclave's range or an arbitrary address.
          body = "loadi r1, 5\nstore [" + std::to_string(rng() % 2 ? 0x10000000 : (rng() & ~7ull)) + "], r1";
          break;
        case 4:
          body = "load r1, [" + std::to_string(base + 0x40000 + (rng() % 64) * kPageSize) + "]";
          break;
        default:
          body = std::string("loadi r0, 1\nsyscall ") +
            std::array{"rmpadjust", "wrmsr", "vmgexit", "snp_guest_request", "ioctl"}[rng() % 5] + " r0";
      }
      guest::ImageOptions opts;
      opts.base_gva = base;
      auto e = nsgx::test::load_asm(m, body + "\nloadi r3, 1\nsyscall eexit r3\n", opts);
      auto r = guest::ecall(os, e);
      require(r.kind == LeafResult::Kind::Faulted,
              "adversarial enclave " + std::to_string(i) + " (" + body + ") ended with " +
                std::string(guest::to_string(r.kind)));
      require(os.read_app_u64(app_gva) == 0x1111, "App page modified by an enclave");
      require(m.monitor().enclave_table_conforms(e.id), "enclave table gained foreign mappings");
      os.ioctl({monitor::DriverLeaf::Eremove, {e.id.value}});
      faults++;
    }
    require(m.monitor().epc_owned_count() == 0, "EPC pages leaked");
    return std::to_string(probes) + " VMPL1 probes and " + std::to_string(faults) +
      " adversarial enclaves faulted; 0 succeeded";
  }

  // ----- 4: attacks on random machines -----

  std::string criterion_4()
  {
    std::mt19937_64 rng(4);
    uint64_t runs = 0;
    for (int i = 0; i < 10; ++i)
    {
      auto cfg = seeded(rng());
      cfg.total_pages = 1024 << (rng() % 3);
      cfg.vmpl0_pages = cfg.total_pages / 4 + 64 * (rng() % 4);
      cfg.monitor_pages = 8 + rng() % 64;
      cfg.step_budget = 100 + rng() % 1000;
      Machine m(cfg);
      auto spin = nsgx::test::load_asm(m, nsgx::test::spin_program(3000 + rng() % 3000));
      for (auto kind :
           {guest::AttackKind::ReadVmpl0, guest::AttackKind::WriteVmpl0, guest::AttackKind::RemapEnclavePage,
            guest::AttackKind::SkipAep, guest::AttackKind::TamperLeafParams,
            guest::AttackKind::RequestVmpl0Report, guest::AttackKind::DeriveVmpl0Key})
      {
        auto v = guest::run_attack(m.guest(), kind, spin, m.monitor());
        require(v.kind != guest::AttackVerdict::Kind::Succeeded,
                "machine " + std::to_string(i) + ": " + std::string(guest::to_string(kind)) + " " + v.describe());
        runs++;
      }
    }
    return std::to_string(runs) + " attack runs, all blocked or no-effect";
  }

  // ----- 5: nested attestation -----

  std::string criterion_5()
  {
    uint64_t checks = 0;
    for (uint64_t s = 0; s < 10; ++s)
    {
      Machine m(seeded(500 + s));
      guest::ImageOptions opts;
      auto img = guest::make_image(evm::assemble(nsgx::test::report_program(0x10000000 + 3 * kPageSize)), opts);
      auto e = guest::load_enclave(m.guest(), img);
      require(guest::ecall(m.guest(), e).ok(), "EREPORT enclave failed");
      auto bundle = *m.monitor().last_bundle(e.id);
      auto anchors = m.anchors(e.mrenclave);

      auto check = [&](const attest::NestedBundle& b, const attest::TrustAnchors& t, const std::string& expect,
                       const std::string& what) {
        auto got = oracle::verdict_string(attest::verify_bundle(b, t));
        auto ref = oracle::first_failed_check(b, t);
        require(ref == expect, what + ": reference says " + ref + ", expected " + expect);
        require(got == expect, what + ": verifier said " + got + ", expected " + expect);
        checks++;
      };
      check(bundle, anchors, "accept", "honest bundle");
      for (const auto& name : cli::tamper_names())
      {
        auto t = cli::apply_tamper(bundle, name);
        check(t, anchors, oracle::first_failed_check(t, anchors), name);
        require(!attest::verify_bundle(t, anchors).accepted, name + " accepted");
      }

      // The remaining reasons: a VMPL1 report, wrong anchors, a fresh AIK.
      auto b = bundle;
      b.snp_report = m.guest().requester().snp_report_req(m.sp(), m.relay(), V1, m.monitor().aik().binding_report_data());
      check(b, anchors, "vmpl", "guest-issued VMPL1 report");
      auto wrong = anchors;
      wrong.launch_digest[s] ^= 1;
      check(bundle, wrong, "launch-digest", "wrong launch digest");
      std::array<uint8_t, 32> seed{};
      seed[0] = static_cast<uint8_t>(s + 1);
      check(attest::build_bundle(attest::Aik(seed), m.monitor().binding_report(), bundle.enclave_report), anchors,
            "aik-binding", "fresh AIK");
      wrong = anchors;
      wrong.mrenclave[0] ^= 1;
      check(bundle, wrong, "mrenclave", "wrong mrenclave");
    }
    return std::to_string(checks) + " verdicts match the reference exactly";
  }

  // ----- 6: VMPCK channel -----

  std::string criterion_6()
  {
    std::mt19937_64 rng(6);
    Machine m(seeded(6));
    auto& req = m.guest().requester();
    auto& relay = m.relay();
    std::vector<Bytes> plaintexts;
    auto issue = [&] {
      if (rng() % 2)
      {
        attest::ReportData rd{};
        for (auto& b : rd)
          b = static_cast<uint8_t>(rng());
        plaintexts.emplace_back(rd.begin(), rd.end());
        auto rep = req.snp_report_req(m.sp(), relay, V1, rd);
        plaintexts.push_back(rep.serialize());
      }
      else
      {
        auto k = req.msg_key_req(m.sp(), relay, V1);
        plaintexts.emplace_back(k.begin(), k.end());
      }
    };
    auto expect_error = [&](ErrorCode want, const std::string& what) {
      try
      {
        issue();
      }
      catch (const Error& e)
      {
        require(e.code() == want, what + " raised " + std::string(to_string(e.code())));
        return;
      }
      throw Failure{what + " went undetected"};
    };

    issue();
    uint64_t flips = 0;
    for (int i = 0; i < 1000; ++i)
    {
      auto flip = [&](attest::GuestMessage& msg) {
        // Every field that reaches the decryptor; the channel index is
        // flipped within the VMPL range so a key is still selected.
        size_t ct = 8 * msg.ciphertext.size();
        uint64_t bit = rng() % (ct + 128 + 64 + 8 + 2);
        if (bit < ct)
          msg.ciphertext[bit / 8] ^= static_cast<uint8_t>(1u << (bit % 8));
        else if ((bit -= ct) < 128)
          msg.tag[bit / 8] ^= static_cast<uint8_t>(1u << (bit % 8));
        else if ((bit -= 128) < 64)
          msg.seq ^= 1ull << bit;
        else if ((bit -= 64) < 8)
          msg.payload_type = static_cast<attest::PayloadType>(static_cast<uint8_t>(msg.payload_type) ^ (1u << bit));
        else
          msg.channel ^= 1u << (bit - 8);
      };
      if (i % 2)
        relay.on_request = flip;
      else
        relay.on_response = flip;
      expect_error(ErrorCode::AuthError, "bit flip " + std::to_string(i));
      relay.on_request = nullptr;
      relay.on_response = nullptr;
      flips++;
      if (i % 10 == 0)
        issue();
    }

    // Replays draw only from authentic traffic recorded from here on.
    const size_t honest_from = relay.transcript.size();
    uint64_t replays = 0;
    for (int i = 0; i < 100; ++i)
    {
      issue();
      std::vector<attest::GuestMessage> requests, responses;
      for (size_t k = honest_from; k < relay.transcript.size(); ++k)
      {
        const auto& msg = relay.transcript[k];
        (msg.seq % 2 ? requests : responses).push_back(msg);
      }
      if (i % 2)
      {
        auto old = requests[rng() % requests.size()];
        relay.on_request = [old](attest::GuestMessage& msg) { msg = old; };
      }
      else
      {
        auto old = responses[rng() % responses.size()];
        relay.on_response = [old](attest::GuestMessage& msg) { msg = old; };
      }
      expect_error(ErrorCode::ReplayError, "replay " + std::to_string(i));
      relay.on_request = nullptr;
      relay.on_response = nullptr;
      replays++;
    }

    std::string wire;
    for (const auto& msg : relay.transcript)
    {
      wire.append(msg.ciphertext.begin(), msg.ciphertext.end());
      wire.append(msg.tag.begin(), msg.tag.end());
    }
    uint64_t leaks = 0;
    for (const auto& p : plaintexts)
      if (nsgx::test::contains_bytes(wire, p) || nsgx::test::contains_bytes(wire, ByteView(p).subspan(0, 16)))
        leaks++;
    require(leaks == 0, std::to_string(leaks) + " plaintexts visible in the transcript");
    return std::to_string(flips) + " flips -> AuthError, " + std::to_string(replays) +
      " replays -> ReplayError, 0 leaks in " + std::to_string(relay.transcript.size()) + " messages";
  }

  // ----- 7: sealing -----

  std::string criterion_7()
  {
    constexpr int kMachines = 4, kEnclaves = 4, kKeyIds = 4;
    struct Site
    {
      std::unique_ptr<Machine> m;
      std::vector<guest::LoadedEnclave> enclaves;
    };
    std::vector<Site> sites;
    for (int i = 0; i < kMachines; ++i)
    {
      Site s{std::make_unique<Machine>(seeded(700 + i)), {}};
      for (int k = 0; k < kEnclaves; ++k)
      {
        guest::ImageOptions opts;
        opts.base_gva = 0x10000000 + k * 0x100000;
        s.enclaves.push_back(
          nsgx::test::load_asm(*s.m, "loadi r3, " + std::to_string(k) + "\nsyscall eexit r3", opts));
      }
      sites.push_back(std::move(s));
    }
    auto key_for = [&](int mi, int ei, int ki) {
      monitor::KeyRequest r;
      r.key_id[0] = static_cast<uint8_t>(ki);
      return sites[mi].m->monitor().egetkey(sites[mi].enclaves[ei].id, r);
    };
    auto key_id = [](int ki) {
      std::array<uint8_t, 16> id{};
      id[0] = static_cast<uint8_t>(ki);
      return id;
    };

    Bytes secret = {'s', 'e', 'a', 'l', 'e', 'd', ' ', 'd', 'a', 't', 'a'};
    crypto::GcmNonce nonce{};
    nonce[3] = 9;
    auto blob = attest::seal(key_for(0, 0, 0), key_id(0), nonce, secret);

    // Same machine seed and MRENCLAVE: a rebooted machine and a second
    // instance of the enclave both unseal.
    Machine again(seeded(700));
    auto twin = nsgx::test::load_asm(again, "loadi r3, 0\nsyscall eexit r3");
    auto twin2 = nsgx::test::load_asm(*sites[0].m, "loadi r3, 0\nsyscall eexit r3", {0x30000000, 1, 1, 0});
    monitor::KeyRequest r0;
    require(attest::unseal(again.monitor().egetkey(twin.id, r0), blob) == secret, "unseal after reboot failed");
    require(attest::unseal(sites[0].m->monitor().egetkey(twin2.id, r0), blob) == secret,
            "unseal by a second instance failed");

    uint64_t mismatched = 0;
    for (int mi = 0; mi < kMachines; ++mi)
      for (int ei = 0; ei < kEnclaves; ++ei)
        for (int ki = 0; ki < kKeyIds; ++ki)
        {
          if (mi == 0 && ei == 0 && ki == 0)
            continue;
          bool failed = false;
          try
          {
            attest::unseal(key_for(mi, ei, ki), blob);
          }
          catch (const Error& e)
          {
            failed = e.code() == ErrorCode::AuthError;
          }
          require(failed, "unseal succeeded for (" + std::to_string(mi) + "," + std::to_string(ei) + "," +
                            std::to_string(ki) + ")");
          mismatched++;
        }
    require(mismatched >= 50, "too few combinations");

    // VMPL0 vs VMPL1 guest keys, per machine. A standalone AMD-SP on the
    // same DRBG answers the VMPL0 request the guest may not make.
    uint64_t machines = 0;
    for (auto& s : sites)
    {
      auto& m = *s.m;
      auto k1 = m.guest().requester().msg_key_req(m.sp(), m.relay(), V1);
      attest::AmdSp mirror(m.drbg(), m.sp().launch_digest());
      attest::HostRelay relay;
      attest::GuestRequester q0(V0, mirror.vmpck(V0)), q1(V1, mirror.vmpck(V1));
      auto k0 = q0.msg_key_req(mirror, relay, V0);
      require(q1.msg_key_req(mirror, relay, V1) == k1, "mirror AMD-SP disagrees with the machine");
      require(k0 != k1, "VMPL0 and VMPL1 guest keys are equal");
      monitor::KeyRequest r;
      require(m.monitor().egetkey(s.enclaves[1].id, r) ==
                attest::derive_sealing_key(k0, s.enclaves[1].mrenclave, r.key_id),
              "enclave keys do not derive from the VMPL0 key");
      require(m.monitor().egetkey(s.enclaves[1].id, r) !=
                attest::derive_sealing_key(k1, s.enclaves[1].mrenclave, r.key_id),
              "enclave keys derive from the VMPL1 key");
      machines++;
    }
    return "round-trip ok; " + std::to_string(mismatched) + " mismatches rejected; VMPL0 != VMPL1 keys on " +
      std::to_string(machines) + " machines";
  }

  // ----- 8: AEX/ERESUME state -----

  std::string criterion_8()
  {
    std::mt19937_64 rng(8);
    const std::string program = R"(
      loadi r4, 100
      loadi r5, -1
      loadi r6, 0x9e3779b97f4a7c15
      loadi r7, 1
      top:
      add r7, r6
      xor r6, r7
      store [0x10003000], r7
      load r8, [0x10003000]
      add r9, r8
      add r4, r5
      jnz r4, top
      syscall eexit r9
    )";
    Machine reference(seeded(8));
    auto ref_e = nsgx::test::load_asm(reference, program);
    auto expected = guest::ecall(reference.guest(), ref_e);
    require(expected.aex_count == 0 && expected.ok(), "reference run was preempted");

    uint64_t pairs = 0;
    for (int i = 0; i < 100; ++i)
    {
      auto cfg = seeded(800 + i);
      cfg.step_budget = 5 + rng() % 700;
      cfg.guest.max_resumes = 1000;
      Machine m(cfg);
      auto e = nsgx::test::load_asm(m, program);
      std::vector<vcpu::CpuState> at_aex, at_resume;
      m.monitor().on_aex = [&](const vcpu::CpuState& s) { at_aex.push_back(s); };
      m.monitor().on_eresume = [&](const vcpu::CpuState& s) { at_resume.push_back(s); };
      auto r = guest::ecall(m.guest(), e);
      require(r.ok() && r.value == expected.value,
              "preempted run (budget " + std::to_string(cfg.step_budget) + ") returned " + hexs(r.value));
      require(!at_aex.empty() && at_aex.size() == at_resume.size(), "AEX/ERESUME counts differ");
      for (size_t k = 0; k < at_aex.size(); ++k)
        require(at_aex[k].gprs == at_resume[k].gprs && at_aex[k].rip == at_resume[k].rip &&
                  at_aex[k].rsp == at_resume[k].rsp,
                "register state changed across AEX " + std::to_string(k));
      pairs += at_aex.size();
    }
    return "100 preemption schedules, " + std::to_string(pairs) + " AEX/ERESUME pairs bit-identical";
  }

  // ----- 9: reproducible runs -----

  std::string criterion_9()
  {
    auto dir = std::filesystem::temp_directory_path() / ("nsgx-acceptance-" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    for (const char* file : {"scenarios/roundtrip.json", "scenarios/attacks.json"})
    {
      auto scenario = cli::load_scenario(nsgx::test::source_path(file));
      std::array<std::string, 2> ledger, bundle;
      for (int i = 0; i < 2; ++i)
      {
        cli::RunOptions o;
        o.seed = 4242;
        o.deterministic_crypto = true;
        o.ledger_out = dir / ("ledger" + std::to_string(i));
        o.bundle_out = dir / ("bundle" + std::to_string(i));
        auto r = cli::cmd_run(scenario, o);
        require(r.status == 0, std::string(file) + " failed");
        ledger[i] = cli::read_file(*o.ledger_out);
        bundle[i] = std::filesystem::exists(*o.bundle_out) ? cli::read_file(*o.bundle_out) : "";
      }
      require(ledger[0] == ledger[1], std::string(file) + ": ledger files differ");
      require(bundle[0] == bundle[1], std::string(file) + ": bundle files differ");
      require(!ledger[0].empty(), "empty ledger");
    }
    std::filesystem::remove_all(dir);
    return "ledger and bundle files byte-identical across runs";
  }

  struct Criterion
  {
    int id;
    const char* name;
    double limit_seconds;
    std::function<std::string()> run;
  };
}

int main()
{
  std::vector<Criterion> all{
    {1, "switch ledger", 1.0, criterion_1},
    {2, "measurement", 5.0, criterion_2},
    {3, "memory isolation", 30.0, criterion_3},
    {4, "attack containment", 0, criterion_4},
    {5, "nested attestation", 0, criterion_5},
    {6, "VMPCK channel", 0, criterion_6},
    {7, "sealing", 0, criterion_7},
    {8, "AEX state", 0, criterion_8},
    {9, "reproducibility", 0, criterion_9},
  };
  int failed = 0;
  for (const auto& c : all)
  {
    auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try
    {
      detail = c.run();
    }
    catch (const Failure& f)
    {
      ok = false;
      detail = f.why;
    }
    catch (const std::exception& e)
    {
      ok = false;
      detail = std::string("exception: ") + e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (ok && c.limit_seconds > 0 && secs >= c.limit_seconds)
    {
      ok = false;
      detail += "; too slow";
    }
    failed += ok ? 0 : 1;
    std::printf(
      "%s %d %s (%.3f s%s): %s\n",
      ok ? "PASS" : "FAIL",
      c.id,
      c.name,
      secs,
      c.limit_seconds > 0 ? (" < " + std::to_string(static_cast<int>(c.limit_seconds)) + " s").c_str() : "",
      detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
