// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/common.h"
#include "nsgx/mem.h"

#include <map>
#include <optional>
#include <string>

// Per-VMPL save areas, the GHCB MSR protocol for VMPL switch requests, the
// (possibly adversarial) hypervisor that services them, and the event
// ledger that stands in for cycle measurements.

namespace nsgx::vcpu
{
  constexpr unsigned kGprCount = 16;

  struct CpuState
  {
    std::array<uint64_t, kGprCount> gprs{};
    uint64_t rip = 0;
    uint64_t rsp = 0;

    bool operator==(const CpuState&) const = default;
  };

  struct Vmsa
  {
    Vmpl vmpl;
    CpuState cpu;
    Mode mode = Mode::Kernel;
    PageTableId cr3;
    uint64_t lstar = 0;
    bool runnable = false;
    bool initialized = false;

    /// Register state in a fixed little-endian layout. `runnable` is
    /// hardware-managed by VMRUN and excluded.
    Bytes serialize() const;
  };

  constexpr uint32_t kGhcbMsr = 0xc0010130;
  constexpr uint64_t kRunVmplExitCode = 0x80000018;
  /// Request kind held in bits 0..11; mirrors the low bits of the
  /// run-VMPL exit code.
  constexpr uint64_t kRunVmplRequestKind = kRunVmplExitCode & 0xfff;

  struct GhcbMsrRequest
  {
    uint64_t raw = 0;
  };

  /// kind in bits 0..11, target VMPL in bits 32..39, everything else zero.
  GhcbMsrRequest encode_msr_request(Vmpl target);
  /// Throws DecodeError for an unknown kind, a VMPL above 3, or any
  /// reserved bit set.
  Vmpl decode_msr_request(GhcbMsrRequest request);

  enum class EventKind : uint8_t
  {
    VmplSwitch,
    Vmgexit,
    Aex,
    SyscallEntry,
    SysretExit,
    IoctlEntry,
  };

  struct LedgerEvent
  {
    EventKind kind = EventKind::Vmgexit;
    uint8_t from = 0;
    uint8_t to = 0;

    std::string label() const;
    bool operator==(const LedgerEvent&) const = default;
  };

  class SwitchLedger
  {
  public:
    void record(const LedgerEvent& e);

    const std::vector<LedgerEvent>& trace() const
    {
      return trace_;
    }

    const std::map<std::string, uint64_t>& counts() const
    {
      return counts_;
    }

    uint64_t count(EventKind kind) const;
    uint64_t count(const std::string& label) const;

    /// Recomputes counts from the trace and compares.
    bool consistent() const;

    /// "# counts" section (label=count, sorted) then "# trace" with one
    /// label per line.
    std::string export_text() const;

    void clear();

  private:
    std::vector<LedgerEvent> trace_;
    std::map<std::string, uint64_t> counts_;
  };

  struct HypervisorPolicy
  {
    enum class Kind : uint8_t
    {
      Honest,
      RefuseSwitch,
      WrongVmpl,
    };

    Kind kind = Kind::Honest;
    Vmpl wrong_target;

    static HypervisorPolicy honest()
    {
      return {};
    }

    static HypervisorPolicy refuse()
    {
      return {Kind::RefuseSwitch, Vmpl{}};
    }

    static HypervisorPolicy wrong(Vmpl target)
    {
      return {Kind::WrongVmpl, target};
    }
  };

  std::string to_string(const HypervisorPolicy& p);
  /// "honest", "refuse-switch", "wrong-vmpl:<n>".
  HypervisorPolicy parse_hypervisor_policy(std::string_view text);

  struct SwitchResult
  {
    enum class Kind : uint8_t
    {
      Switched,
      Stalled,
    };

    Kind kind = Kind::Stalled;
    /// VMPL now running when Switched.
    Vmpl vmpl;

    bool switched_to(Vmpl v) const
    {
      return kind == Kind::Switched && vmpl == v;
    }
  };

  enum class Exception : uint8_t
  {
    PageFault,
    RmpFault,
    Timer,
    InvalidOpcode,
    GeneralProtection,
  };

  std::string_view to_string(Exception e);
  std::optional<Exception> parse_exception(std::string_view name);

  enum class HandlerRoute : uint8_t
  {
    Monitor,
    Guest,
  };

  /// Untrusted host VMM. It only ever sees the decoded target VMPL and
  /// answers which VMPL to VMRUN next (nullopt: do nothing). It has no
  /// handle on VMSA contents.
  class Hypervisor
  {
  public:
    explicit Hypervisor(HypervisorPolicy policy = {}) : policy_(policy) {}

    void set_policy(HypervisorPolicy p)
    {
      policy_ = p;
    }

    const HypervisorPolicy& policy() const
    {
      return policy_;
    }

    std::optional<Vmpl> on_run_vmpl(Vmpl requested) const;

  private:
    HypervisorPolicy policy_;
  };

  class Vcpu
  {
  public:
    /// VMPL0 and VMPL1 always get a VMSA; `extra_vmpls` adds VMPL2/3.
    explicit Vcpu(bool extra_vmpls = false, HypervisorPolicy policy = {});

    Vmsa& vmsa(Vmpl v);
    const Vmsa& vmsa(Vmpl v) const;

    Vmpl current() const
    {
      return current_;
    }

    Vmsa& running()
    {
      return vmsa(current_);
    }

    const Vmsa& running() const
    {
      return vmsa(current_);
    }

    Hypervisor& hypervisor()
    {
      return hypervisor_;
    }

    SwitchLedger& ledger()
    {
      return ledger_;
    }

    const SwitchLedger& ledger() const
    {
      return ledger_;
    }

    uint64_t ghcb_msr() const
    {
      return ghcb_msr_;
    }

    /// Writes the run-VMPL request to the GHCB MSR and VMGEXITs. Requires
    /// the running VMSA to be in kernel mode (PrivilegeError otherwise) and
    /// `target` to have an initialized VMSA (ProtocolError otherwise).
    SwitchResult vmgexit_run_vmpl(Vmpl target);

    /// Routes an exception raised in `context`. VMPL0 contexts (enclave,
    /// monitor) go to the monitor's handler with no VMPL switch, VMPL1
    /// contexts to the guest OS. Raising while that handler is active
    /// throws DoubleFault.
    HandlerRoute deliver_exception(mem::ContextKind context, Exception e);

    /// Marks a handler as executing for the scope's lifetime.
    class HandlerScope
    {
    public:
      HandlerScope(Vcpu& cpu, HandlerRoute route);
      ~HandlerScope();
      HandlerScope(const HandlerScope&) = delete;
      HandlerScope& operator=(const HandlerScope&) = delete;

    private:
      Vcpu& cpu_;
      HandlerRoute route_;
    };

    bool in_handler(HandlerRoute r) const
    {
      return in_handler_[static_cast<size_t>(r)];
    }

  private:
    std::array<Vmsa, Vmpl::kCount> vmsas_{};
    Vmpl current_{1};
    Hypervisor hypervisor_;
    SwitchLedger ledger_;
    uint64_t ghcb_msr_ = 0;
    std::array<bool, 2> in_handler_{};
  };
}
