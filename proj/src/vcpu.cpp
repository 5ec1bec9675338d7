// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/vcpu.h"

#include <charconv>
#include <sstream>

namespace nsgx::vcpu
{
  Bytes Vmsa::serialize() const
  {
    Bytes out(8 * (kGprCount + 5) + 2);
    uint8_t* p = out.data();
    for (auto r : cpu.gprs)
    {
      put_le64(p, r);
      p += 8;
    }
    put_le64(p, cpu.rip);
    put_le64(p + 8, cpu.rsp);
    put_le64(p + 16, cr3.value);
    put_le64(p + 24, lstar);
    put_le64(p + 32, initialized ? 1 : 0);
    p[40] = static_cast<uint8_t>(vmpl.value());
    p[41] = static_cast<uint8_t>(mode);
    return out;
  }

  GhcbMsrRequest encode_msr_request(Vmpl target)
  {
    return {kRunVmplRequestKind | (uint64_t{target.value()} << 32)};
  }

  Vmpl decode_msr_request(GhcbMsrRequest request)
  {
    const uint64_t kind = request.raw & 0xfff;
    const uint64_t vmpl = (request.raw >> 32) & 0xff;
    const uint64_t reserved = request.raw & ~(0xfffull | (0xffull << 32));
    if (kind != kRunVmplRequestKind)
      throw Error(ErrorCode::DecodeError, "unknown GHCB MSR request kind " + std::to_string(kind));
    if (reserved != 0)
      throw Error(ErrorCode::DecodeError, "reserved GHCB MSR bits set");
    if (vmpl >= Vmpl::kCount)
      throw Error(ErrorCode::DecodeError, "VMPL " + std::to_string(vmpl) + " out of range");
    return Vmpl{static_cast<unsigned>(vmpl)};
  }

  std::string LedgerEvent::label() const
  {
    switch (kind)
    {
      case EventKind::VmplSwitch:
        return "VmplSwitch(" + std::to_string(from) + "," + std::to_string(to) + ")";
      case EventKind::Vmgexit:
        return "Vmgexit";
      case EventKind::Aex:
        return "Aex";
      case EventKind::SyscallEntry:
        return "SyscallEntry";
      case EventKind::SysretExit:
        return "SysretExit";
      case EventKind::IoctlEntry:
        return "IoctlEntry";
    }
    return "?";
  }

  void SwitchLedger::record(const LedgerEvent& e)
  {
    trace_.push_back(e);
    ++counts_[e.label()];
  }

  uint64_t SwitchLedger::count(EventKind kind) const
  {
    uint64_t n = 0;
    for (const auto& e : trace_)
      n += e.kind == kind ? 1 : 0;
    return n;
  }

  uint64_t SwitchLedger::count(const std::string& label) const
  {
    auto it = counts_.find(label);
    return it == counts_.end() ? 0 : it->second;
  }

  bool SwitchLedger::consistent() const
  {
    std::map<std::string, uint64_t> recomputed;
    for (const auto& e : trace_)
      ++recomputed[e.label()];
    return recomputed == counts_;
  }

  std::string SwitchLedger::export_text() const
  {
    std::ostringstream os;
    os << "# counts\n";
    for (const auto& [label, n] : counts_)
      os << label << "=" << n << "\n";
    os << "# trace\n";
    for (const auto& e : trace_)
      os << e.label() << "\n";
    return os.str();
  }

  void SwitchLedger::clear()
  {
    trace_.clear();
    counts_.clear();
  }

  std::string to_string(const HypervisorPolicy& p)
  {
    switch (p.kind)
    {
      case HypervisorPolicy::Kind::Honest:
        return "honest";
      case HypervisorPolicy::Kind::RefuseSwitch:
        return "refuse-switch";
      case HypervisorPolicy::Kind::WrongVmpl:
        return "wrong-vmpl:" + std::to_string(p.wrong_target.value());
    }
    return "?";
  }

  HypervisorPolicy parse_hypervisor_policy(std::string_view text)
  {
    if (text == "honest")
      return HypervisorPolicy::honest();
    if (text == "refuse-switch")
      return HypervisorPolicy::refuse();
    constexpr std::string_view prefix = "wrong-vmpl:";
    if (text.starts_with(prefix))
    {
      unsigned v = 0;
      auto digits = text.substr(prefix.size());
      auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
      if (ec == std::errc() && ptr == digits.data() + digits.size() && v < Vmpl::kCount)
        return HypervisorPolicy::wrong(Vmpl{v});
    }
    throw Error(ErrorCode::ParseError, "unknown hypervisor policy '" + std::string(text) + "'");
  }

  std::string_view to_string(Exception e)
  {
    switch (e)
    {
      case Exception::PageFault:
        return "PageFault";
      case Exception::RmpFault:
        return "RmpFault";
      case Exception::Timer:
        return "Timer";
      case Exception::InvalidOpcode:
        return "InvalidOpcode";
      case Exception::GeneralProtection:
        return "GeneralProtection";
    }
    return "?";
  }

  std::optional<Exception> parse_exception(std::string_view name)
  {
    for (auto e :
         {Exception::PageFault,
          Exception::RmpFault,
          Exception::Timer,
          Exception::InvalidOpcode,
          Exception::GeneralProtection})
    {
      if (to_string(e) == name)
        return e;
    }
    return std::nullopt;
  }

  std::optional<Vmpl> Hypervisor::on_run_vmpl(Vmpl requested) const
  {
    switch (policy_.kind)
    {
      case HypervisorPolicy::Kind::Honest:
        return requested;
      case HypervisorPolicy::Kind::RefuseSwitch:
        return std::nullopt;
      case HypervisorPolicy::Kind::WrongVmpl:
        return policy_.wrong_target;
    }
    return std::nullopt;
  }

  Vcpu::Vcpu(bool extra_vmpls, HypervisorPolicy policy) : hypervisor_(policy)
  {
    for (unsigned v = 0; v < Vmpl::kCount; ++v)
    {
      vmsas_[v].vmpl = Vmpl{v};
      vmsas_[v].initialized = v < 2 || extra_vmpls;
    }
    vmsas_[1].runnable = true;
  }

  Vmsa& Vcpu::vmsa(Vmpl v)
  {
    return vmsas_[v.value()];
  }

  const Vmsa& Vcpu::vmsa(Vmpl v) const
  {
    return vmsas_[v.value()];
  }

  SwitchResult Vcpu::vmgexit_run_vmpl(Vmpl target)
  {
    if (running().mode != Mode::Kernel)
      throw Error(ErrorCode::PrivilegeError, "VMPL switch requested from user mode");
    if (!vmsa(target).initialized)
      throw Error(
        ErrorCode::ProtocolError, "VMPL" + std::to_string(target.value()) + " has no VMSA");

    ghcb_msr_ = encode_msr_request(target).raw;
    ledger_.record({EventKind::Vmgexit});

    // Host side: decode what the guest wrote, then pick a VMSA to run.
    auto decoded = decode_msr_request(GhcbMsrRequest{ghcb_msr_});
    auto next = hypervisor_.on_run_vmpl(decoded);
    if (!next)
      return {SwitchResult::Kind::Stalled, current_};
    if (!vmsa(*next).initialized)
      throw Error(
        ErrorCode::ProtocolError,
        "hypervisor ran VMPL" + std::to_string(next->value()) + " which has no VMSA");

    ledger_.record(
      {EventKind::VmplSwitch,
       static_cast<uint8_t>(current_.value()),
       static_cast<uint8_t>(next->value())});
    vmsa(current_).runnable = false;
    current_ = *next;
    vmsa(current_).runnable = true;
    return {SwitchResult::Kind::Switched, current_};
  }

  HandlerRoute Vcpu::deliver_exception(mem::ContextKind context, Exception e)
  {
    auto route = (context == mem::ContextKind::EnclaveUser ||
                  context == mem::ContextKind::MonitorKernel) ?
      HandlerRoute::Monitor :
      HandlerRoute::Guest;
    if (in_handler(route))
      throw Error(
        ErrorCode::DoubleFault,
        std::string(to_string(e)) + " raised while the " +
          (route == HandlerRoute::Monitor ? "monitor" : "guest") + " handler was running");
    return route;
  }

  Vcpu::HandlerScope::HandlerScope(Vcpu& cpu, HandlerRoute route) : cpu_(cpu), route_(route)
  {
    cpu_.in_handler_[static_cast<size_t>(route_)] = true;
  }

  Vcpu::HandlerScope::~HandlerScope()
  {
    cpu_.in_handler_[static_cast<size_t>(route_)] = false;
  }
}
