// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/guest.h"

#include <cstring>

namespace nsgx::guest
{
  namespace
  {
    constexpr Vmpl kVmpl0{0};
    constexpr Vmpl kVmpl1{1};
    constexpr uint64_t kProbeValue = 0x4141'4141'4141'4141;

    AttackVerdict blocked(std::string d)
    {
      return {AttackVerdict::Kind::Blocked, std::move(d)};
    }

    AttackVerdict no_effect(std::string d)
    {
      return {AttackVerdict::Kind::NoEffect, std::move(d)};
    }

    AttackVerdict succeeded(std::string d)
    {
      return {AttackVerdict::Kind::Succeeded, std::move(d)};
    }

    /// VMPL0 pages a guest would go after: the monitor image, its secrets
    /// page, and every EPC page of the target.
    std::vector<Gpa> vmpl0_targets(
      const mem::GuestMemory& memory, const LoadedEnclave& t, const monitor::Monitor& observer)
    {
      const auto& l = memory.layout();
      std::vector<Gpa> out{
        Gpa{l.monitor.begin + monitor::kImageHeaderPage},
        Gpa{l.monitor.begin + monitor::kSecretsPage}};
      for (auto g : observer.enclave_pages(t.id))
        out.push_back(g);
      return out;
    }

    /// Guest kernel maps `gpa` at kAttackGva and touches it with a load
    /// or store.
    evm::RunResult kernel_probe(GuestOs& os, Gpa gpa, bool write)
    {
      auto& pt = os.tables().get(os.kernel_table());
      pt.map(page_of(kAttackGva), {gpa, false, true, false, false});
      evm::Program prog;
      if (write)
        prog.instructions = {
          evm::instr::LoadImm{1, kProbeValue},
          evm::instr::Store{kAttackGva, 1},
          evm::instr::Halt{}};
      else
        prog.instructions = {evm::instr::Load{0, kAttackGva}, evm::instr::Halt{}};
      vcpu::CpuState cpu;
      evm::AddressSpace as{pt, os.memory(), Mode::Kernel, kVmpl1};
      auto r = evm::run(prog, cpu, as, 16);
      pt.unmap(page_of(kAttackGva));
      return r;
    }

    bool invariants_hold(GuestOs& os, const LoadedEnclave& t, const monitor::Monitor& m)
    {
      const auto& l = os.memory().layout();
      if (m.epc_free_count() + m.epc_owned_count() != l.epc.size())
        return false;
      for (auto id : m.enclaves())
        if (!m.enclave_table_conforms(id))
          return false;
      const auto& s = m.secs(t.id);
      return s.state != monitor::SecsState::Initialized ||
        (s.mrenclave && *s.mrenclave == t.mrenclave);
    }

    AttackVerdict probe_vmpl0(
      GuestOs& os, const LoadedEnclave& t, const monitor::Monitor& m, bool write)
    {
      auto& memory = os.memory();
      for (auto gpa : vmpl0_targets(memory, t, m))
      {
        auto spa = *memory.spa_for(gpa);
        Bytes before(memory.raw_page(spa), memory.raw_page(spa) + kPageSize);
        auto r = kernel_probe(os, gpa, write);
        Bytes after(memory.raw_page(spa), memory.raw_page(spa) + kPageSize);
        if (before != after)
          return succeeded("modified gpa " + std::to_string(gpa.value));
        if (r.kind != evm::RunResult::Kind::Trapped || !r.trap->rmp)
          return succeeded(
            std::string(write ? "wrote" : "read") + " gpa " + std::to_string(gpa.value));
      }
      return blocked("RmpFault");
    }

    AttackVerdict remap_enclave_page(GuestOs& os, const LoadedEnclave& t, const monitor::Monitor& m)
    {
      auto& pt = os.tables().get(os.app_table());
      uint64_t vpn = page_of(m.secs(t.id).base_gva);
      if (pt.lookup(vpn))
        return succeeded("enclave range already mapped in the App table");
      evm::Program prog;
      prog.instructions = {
        evm::instr::Load{0, m.secs(t.id).base_gva}, evm::instr::Halt{}};
      for (auto gpa : m.enclave_pages(t.id))
      {
        pt.map(vpn, {gpa, true, true, true, false});
        vcpu::CpuState cpu;
        evm::AddressSpace as{pt, os.memory(), Mode::User, kVmpl1};
        auto r = evm::run(prog, cpu, as, 16);
        pt.unmap(vpn);
        if (r.kind != evm::RunResult::Kind::Trapped || !r.trap->rmp)
          return succeeded("App read EPC gpa " + std::to_string(gpa.value));
      }
      if (!invariants_hold(os, t, m))
        return succeeded("enclave state changed");
      return blocked("RmpFault");
    }

    AttackVerdict skip_aep(GuestOs& os, const LoadedEnclave& t, const monitor::Monitor& m)
    {
      auto saved = os.config().policy;
      os.config().policy = DriverPolicy::SkipAep;
      auto r = ecall(os, t);
      os.config().policy = saved;
      if (r.kind != LeafResult::Kind::Aborted)
        return no_effect("no AEX to skip");
      const auto& tcs = m.tcs(t.id, t.tcs.front());
      if (tcs.busy || tcs.current_ssa_index == 0 || !invariants_hold(os, t, m))
        return succeeded("thread state corrupted after skipped AEP");
      // The parked thread must still be resumable where it stopped.
      auto resumed =
        os.ioctl({monitor::DriverLeaf::Eresume, {t.id.value, t.tcs.front(), kAppAep}});
      // Hitting the driver's resume cap still means ERESUME ran.
      bool capped = resumed.kind == LeafResult::Kind::Aborted && resumed.aex_count > os.config().max_resumes;
      if (!resumed.ok() && resumed.kind != LeafResult::Kind::Faulted && !capped)
        return succeeded("thread could not be resumed: " + std::string(to_string(resumed.kind)) + " aex=" + std::to_string(resumed.aex_count));
      return no_effect("thread parked; ERESUME still works");
    }

    AttackVerdict tamper_leaf_params(
      GuestOs& os, const LoadedEnclave& t, const monitor::Monitor& m)
    {
      using monitor::DriverLeaf;
      const auto& l = os.memory().layout();
      const auto& secs = m.secs(t.id);
      uint64_t fresh_base = secs.base_gva + 0x1000'0000;

      struct Probe
      {
        const char* name;
        monitor::DriverRequest req;
      };
      std::vector<Probe> probes{
        {"ECREATE with an EPC parameter buffer",
         {DriverLeaf::Ecreate,
          {fresh_base, kPageSize * 4, 1, 0, os.app_table().value, page_of(fresh_base) - 4, l.epc.begin, 1}}},
        {"ECREATE with the buffer in an enclave table",
         {DriverLeaf::Ecreate,
          {fresh_base, kPageSize * 4, 1, 0, secs.page_table.value, page_of(fresh_base) - 4,
           l.vmpl1.end - 1, 1}}},
        {"EADD into an initialized enclave",
         {DriverLeaf::Eadd, {t.id.value, l.vmpl1.end - 1, secs.base_gva + secs.size_bytes - kPageSize, 2, 7}}},
        {"EENTER through a non-TCS page",
         {DriverLeaf::Eenter, {t.id.value, secs.base_gva + kPageSize, kAppAep}}},
        {"EENTER of an unknown enclave", {DriverLeaf::Eenter, {9999, secs.base_gva, kAppAep}}},
        {"ERESUME with no saved state", {DriverLeaf::Eresume, {t.id.value, t.tcs.front()}}},
        {"raw EEXIT leaf", {DriverLeaf::Eexit, {t.id.value}}},
        {"raw EGETKEY leaf", {DriverLeaf::Egetkey, {t.id.value}}},
        {"unknown leaf id", {static_cast<DriverLeaf>(0x7777), {}}},
      };

      // A fresh enclave whose EADD names VMPL0 memory as the source.
      auto created = os.ioctl_raw(
        {DriverLeaf::Ecreate, {fresh_base, kPageSize * 4, 1, 0, os.app_table().value, 0, 0, 0}});
      if (created.ok())
      {
        probes.push_back(
          {"EADD from the monitor secrets page",
           {DriverLeaf::Eadd,
            {created.value, l.monitor.begin + monitor::kSecretsPage, fresh_base, 2, 7}}});
        probes.push_back(
          {"EADD from another enclave's EPC page",
           {DriverLeaf::Eadd,
            {created.value, m.enclave_pages(t.id).back().value, fresh_base, 2, 7}}});
      }

      size_t rejected = 0;
      for (const auto& p : probes)
      {
        if (p.req.leaf == DriverLeaf::Eresume && m.tcs(t.id, t.tcs.front()).current_ssa_index != 0)
          continue;
        auto r = os.ioctl_raw(p.req);
        if (r.ok())
          return succeeded(std::string(p.name) + " was accepted");
        rejected++;
      }
      if (created.ok())
        os.ioctl_raw({DriverLeaf::Eremove, {created.value}});
      if (!invariants_hold(os, t, m))
        return succeeded("monitor state changed");
      return no_effect(std::to_string(rejected) + " tampered requests rejected");
    }

    template <typename F>
    AttackVerdict expect_denied(F&& f)
    {
      try
      {
        f();
      }
      catch (const Error& e)
      {
        if (e.code() == ErrorCode::VmplDenied)
          return blocked("VmplDenied");
        return blocked(std::string(to_string(e.code())));
      }
      return succeeded("AMD-SP served a VMPL0 request from VMPL1");
    }
  }

  std::string_view to_string(AttackKind k)
  {
    switch (k)
    {
      case AttackKind::ReadVmpl0:
        return "read-vmpl0";
      case AttackKind::WriteVmpl0:
        return "write-vmpl0";
      case AttackKind::RemapEnclavePage:
        return "remap-enclave-page";
      case AttackKind::SkipAep:
        return "skip-aep";
      case AttackKind::TamperLeafParams:
        return "tamper-leaf-params";
      case AttackKind::RequestVmpl0Report:
        return "request-vmpl0-report";
      case AttackKind::DeriveVmpl0Key:
        return "derive-vmpl0-key";
    }
    return "?";
  }

  std::optional<AttackKind> parse_attack(std::string_view name)
  {
    for (auto k :
         {AttackKind::ReadVmpl0,
          AttackKind::WriteVmpl0,
          AttackKind::RemapEnclavePage,
          AttackKind::SkipAep,
          AttackKind::TamperLeafParams,
          AttackKind::RequestVmpl0Report,
          AttackKind::DeriveVmpl0Key})
      if (to_string(k) == name)
        return k;
    return std::nullopt;
  }

  std::string AttackVerdict::describe() const
  {
    switch (kind)
    {
      case Kind::Blocked:
        return "blocked(" + detail + ")";
      case Kind::NoEffect:
        return "no-effect(" + detail + ")";
      case Kind::Succeeded:
        return "succeeded(" + detail + ")";
    }
    return "?";
  }

  AttackVerdict run_attack(
    GuestOs& os, AttackKind kind, const LoadedEnclave& target, const monitor::Monitor& observer)
  {
    switch (kind)
    {
      case AttackKind::ReadVmpl0:
        return probe_vmpl0(os, target, observer, false);
      case AttackKind::WriteVmpl0:
        return probe_vmpl0(os, target, observer, true);
      case AttackKind::RemapEnclavePage:
        return remap_enclave_page(os, target, observer);
      case AttackKind::SkipAep:
        return skip_aep(os, target, observer);
      case AttackKind::TamperLeafParams:
        return tamper_leaf_params(os, target, observer);
      case AttackKind::RequestVmpl0Report:
        return expect_denied([&] {
          attest::ReportData rd{};
          os.requester().snp_report_req(os.sp(), os.relay(), kVmpl0, rd);
        });
      case AttackKind::DeriveVmpl0Key:
        return expect_denied(
          [&] { os.requester().msg_key_req(os.sp(), os.relay(), kVmpl0); });
    }
    return succeeded("unknown attack");
  }
}
