// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/guest.h"

#include "nsgx/measurement.h"

#include <algorithm>
#include <bit>
#include <cstring>

namespace nsgx::guest
{
  namespace
  {
    constexpr Vmpl kVmpl0{0};
    constexpr Vmpl kVmpl1{1};

    attest::Key32 read_guest_vmpck(const mem::GuestMemory& memory)
    {
      attest::Key32 k{};
      Gpa page{memory.layout().vmpl1.begin + monitor::kGuestSecretsPage};
      if (!mem::is_allowed(memory.read(page, 0, k, kVmpl1)))
        throw Error(ErrorCode::StateError, "guest secrets page unreadable");
      return k;
    }

    uint64_t status_word(const LeafResult& r)
    {
      if (r.error)
        return 1 + static_cast<uint64_t>(*r.error);
      if (r.ok())
        return 0;
      return 0x100 + static_cast<uint64_t>(r.kind);
    }
  }

  std::string_view to_string(DriverPolicy p)
  {
    switch (p)
    {
      case DriverPolicy::Honest:
        return "honest";
      case DriverPolicy::SkipAep:
        return "skip-aep";
      case DriverPolicy::TamperLeafParams:
        return "tamper-leaf-params";
    }
    return "?";
  }

  std::optional<DriverPolicy> parse_driver_policy(std::string_view name)
  {
    for (auto p : {DriverPolicy::Honest, DriverPolicy::SkipAep, DriverPolicy::TamperLeafParams})
      if (to_string(p) == name)
        return p;
    return std::nullopt;
  }

  std::string_view to_string(LeafResult::Kind k)
  {
    switch (k)
    {
      case LeafResult::Kind::Done:
        return "done";
      case LeafResult::Kind::EexitReturn:
        return "eexit";
      case LeafResult::Kind::Stalled:
        return "stalled";
      case LeafResult::Kind::Diverted:
        return "diverted";
      case LeafResult::Kind::Aborted:
        return "aborted";
      case LeafResult::Kind::Faulted:
        return "faulted";
    }
    return "?";
  }

  std::string_view to_string(AppResult::Kind k)
  {
    switch (k)
    {
      case AppResult::Kind::Halted:
        return "halted";
      case AppResult::Kind::Faulted:
        return "faulted";
      case AppResult::Kind::BudgetExhausted:
        return "budget-exhausted";
      case AppResult::Kind::Stalled:
        return "stalled";
    }
    return "?";
  }

  GuestOs::GuestOs(
    mem::GuestMemory& memory,
    mem::PageTableSet& tables,
    vcpu::Vcpu& cpu,
    attest::AmdSp& sp,
    attest::HostRelay& relay,
    GuestConfig config) :
    memory_(memory),
    tables_(tables),
    cpu_(cpu),
    sp_(sp),
    relay_(relay),
    config_(config),
    requester_(kVmpl1, read_guest_vmpck(memory)),
    next_page_(memory.layout().vmpl1.begin + monitor::kGuestReservedPages)
  {
    kernel_table_ = tables_.create({mem::ContextKind::GuestKernel, 0});
    app_table_ = tables_.create({mem::ContextKind::AppUser, 1});
    auto& v1 = cpu_.vmsa(kVmpl1);
    v1.mode = Mode::Kernel;
    v1.cr3 = kernel_table_;
  }

  Gpa GuestOs::alloc_pages(uint64_t n)
  {
    if (n == 0 || next_page_ + n > memory_.layout().vmpl1.end)
      throw Error(ErrorCode::SizeError, "guest memory exhausted");
    Gpa g{next_page_};
    next_page_ += n;
    return g;
  }

  Gpa GuestOs::stage_page(ByteView content)
  {
    auto g = alloc_pages(1);
    Bytes page(kPageSize, 0);
    std::copy_n(content.begin(), std::min<size_t>(content.size(), kPageSize), page.begin());
    memory_.write(g, 0, page, kVmpl1);
    return g;
  }

  void GuestOs::map_app_pages(uint64_t gva, uint64_t pages)
  {
    if (offset_in_page(gva) != 0)
      throw Error(ErrorCode::AlignmentError, "App mapping must be page aligned");
    auto g = alloc_pages(pages);
    auto& pt = tables_.get(app_table_);
    for (uint64_t i = 0; i < pages; ++i)
      pt.map(page_of(gva) + i, {Gpa{g.value + i}, true, true, false, false});
  }

  Bytes GuestOs::read_app(uint64_t gva, size_t n) const
  {
    Bytes out(n);
    size_t done = 0;
    while (done < n)
    {
      uint64_t a = gva + done;
      size_t k = std::min<size_t>(n - done, kPageSize - offset_in_page(a));
      auto t = mem::translate(
        tables_.get(app_table_), memory_.rmp(), a, Access::Read, Mode::User, kVmpl1);
      if (!std::holds_alternative<mem::Translated>(t))
        throw Error(ErrorCode::UnmappedError, "App address not readable");
      memory_.read(
        std::get<mem::Translated>(t).gpa,
        offset_in_page(a),
        std::span<uint8_t>(out).subspan(done, k),
        kVmpl1);
      done += k;
    }
    return out;
  }

  void GuestOs::write_app(uint64_t gva, ByteView data)
  {
    size_t done = 0;
    while (done < data.size())
    {
      uint64_t a = gva + done;
      size_t k = std::min<size_t>(data.size() - done, kPageSize - offset_in_page(a));
      auto t = mem::translate(
        tables_.get(app_table_), memory_.rmp(), a, Access::Write, Mode::User, kVmpl1);
      if (!std::holds_alternative<mem::Translated>(t))
        throw Error(ErrorCode::UnmappedError, "App address not writable");
      memory_.write(
        std::get<mem::Translated>(t).gpa, offset_in_page(a), data.subspan(done, k), kVmpl1);
      done += k;
    }
  }

  uint64_t GuestOs::read_app_u64(uint64_t gva) const
  {
    return get_le64(read_app(gva, 8).data());
  }

  void GuestOs::write_app_u64(uint64_t gva, uint64_t v)
  {
    std::array<uint8_t, 8> b{};
    put_le64(b.data(), v);
    write_app(gva, b);
  }

  void GuestOs::guest_handler(vcpu::Exception e)
  {
    auto route = cpu_.deliver_exception(mem::ContextKind::AppUser, e);
    vcpu::Vcpu::HandlerScope scope(cpu_, route);
    observed_.push_back(e);
  }

  std::optional<monitor::MonitorReply> GuestOs::forward(
    const monitor::DriverRequest& request, LeafResult& out)
  {
    auto wire = request;
    if (config_.policy == DriverPolicy::TamperLeafParams && tamper)
      tamper(wire);

    Gpa channel{memory_.layout().vmpl1.begin + monitor::kDriverChannelPage};
    Bytes page(kPageSize, 0);
    auto req = monitor::encode_request(wire);
    std::copy(req.begin(), req.end(), page.begin());
    memory_.write(channel, 0, page, kVmpl1);

    auto sw = cpu_.vmgexit_run_vmpl(kVmpl0);
    if (sw.kind == vcpu::SwitchResult::Kind::Stalled)
    {
      out.kind = LeafResult::Kind::Stalled;
      return std::nullopt;
    }
    if (sw.vmpl != kVmpl0)
    {
      out.kind = LeafResult::Kind::Diverted;
      // Another VMPL now owns the vCPU and nothing there hands it back.
      if (sw.vmpl != kVmpl1)
        stalled_ = true;
      return std::nullopt;
    }
    if (!vmpl0_entry)
      throw Error(ErrorCode::StateError, "no monitor wired to VMPL0");
    auto back = vmpl0_entry();
    if (!back.switched_to(kVmpl1))
    {
      stalled_ = true;
      out.kind = LeafResult::Kind::Stalled;
      return std::nullopt;
    }
    memory_.read(channel, 0, page, kVmpl1);
    return monitor::decode_reply(page);
  }

  LeafResult GuestOs::ioctl(const monitor::DriverRequest& request)
  {
    return run_leaf(request, true);
  }

  LeafResult GuestOs::ioctl_raw(const monitor::DriverRequest& request)
  {
    return run_leaf(request, false);
  }

  LeafResult GuestOs::run_leaf(const monitor::DriverRequest& request, bool filtered)
  {
    LeafResult out;
    if (stalled_)
    {
      out.kind = LeafResult::Kind::Stalled;
      return out;
    }
    if (filtered && !monitor::is_driver_leaf(request.leaf))
    {
      out.error = ErrorCode::InvalidLeaf;
      return out;
    }

    auto& v1 = cpu_.vmsa(kVmpl1);
    const auto saved = v1.cpu;
    const auto saved_mode = v1.mode;
    const auto saved_cr3 = v1.cr3;
    auto& ledger = cpu_.ledger();
    auto back_to_app = [&] {
      v1.cpu = saved;
      v1.mode = saved_mode;
      v1.cr3 = saved_cr3;
      ledger.record({vcpu::EventKind::SysretExit});
    };

    ledger.record({vcpu::EventKind::IoctlEntry});
    v1.mode = Mode::Kernel;
    v1.cr3 = kernel_table_;

    auto req = request;
    uint64_t faults = 0;
    while (true)
    {
      auto reply = forward(req, out);
      if (!reply)
      {
        if (!stalled_)
          back_to_app();
        return out;
      }
      if (reply->kind != monitor::MonitorReply::Kind::AexDelivery)
      {
        out.kind = reply->kind == monitor::MonitorReply::Kind::EexitReturn ?
          LeafResult::Kind::EexitReturn :
          LeafResult::Kind::Done;
        out.error = reply->error();
        out.value = reply->value;
        out.ocall = reply->ocall != 0;
        out.digest = reply->digest;
        back_to_app();
        return out;
      }

      if (reply->exception > static_cast<uint64_t>(vcpu::Exception::GeneralProtection))
        throw Error(ErrorCode::ProtocolError, "monitor reported an unknown exception");
      auto ex = static_cast<vcpu::Exception>(reply->exception);
      out.aex_count++;
      guest_handler(ex);
      // The App only ever sees the synthetic AEX state.
      v1.cpu = {};
      v1.cpu.rip = reply->aep;
      v1.cpu.rsp = saved.rsp;

      bool faulted = ex != vcpu::Exception::Timer && ++faults > config_.max_fault_retries;
      bool abandon =
        config_.policy == DriverPolicy::SkipAep || out.aex_count > config_.max_resumes;
      if (faulted || abandon)
      {
        out.kind = faulted ? LeafResult::Kind::Faulted : LeafResult::Kind::Aborted;
        out.exception = ex;
        back_to_app();
        return out;
      }

      // Return to the AEP, which asks for ERESUME.
      ledger.record({vcpu::EventKind::SysretExit});
      ledger.record({vcpu::EventKind::IoctlEntry});
      req = {monitor::DriverLeaf::Eresume, {request.args[0], request.args[1]}};
    }
  }

  AppResult GuestOs::run_app(
    const evm::Program& program,
    uint64_t budget,
    const std::array<uint64_t, vcpu::kGprCount>& initial_gprs)
  {
    if (budget == 0)
      throw Error(ErrorCode::PreconditionError, "App budget must be positive");
    program.validate();
    auto& v1 = cpu_.vmsa(kVmpl1);
    v1.mode = Mode::User;
    v1.cr3 = app_table_;
    v1.cpu = {};
    v1.cpu.gprs = initial_gprs;
    v1.cpu.rip = program.entry;
    v1.cpu.rsp = kAppStackTop;

    AppResult res;
    auto finish = [&](AppResult::Kind k) {
      res.kind = k;
      res.final_state = v1.cpu;
      v1.mode = Mode::Kernel;
      v1.cr3 = kernel_table_;
      return res;
    };
    auto fault = [&](vcpu::Exception e) {
      guest_handler(e);
      res.fault = e;
      return finish(AppResult::Kind::Faulted);
    };

    uint64_t remaining = budget;
    while (remaining > 0)
    {
      evm::AddressSpace as{tables_.get(app_table_), memory_, Mode::User, kVmpl1};
      auto r = evm::run(program, v1.cpu, as, remaining);
      res.steps += r.steps;
      remaining -= std::min(remaining, r.steps);
      switch (r.kind)
      {
        case evm::RunResult::Kind::Exited:
        case evm::RunResult::Kind::SyscallRequested:
        {
          const auto& a = r.syscall->args;
          switch (r.syscall->leaf)
          {
            case evm::SyscallLeaf::Ioctl:
            {
              auto lr = ioctl({static_cast<monitor::DriverLeaf>(a[0]), {a[1], a[2], kAppAep}});
              res.ioctls.push_back(lr);
              if (stalled_)
                return finish(AppResult::Kind::Stalled);
              v1.cpu.gprs[0] = lr.value;
              v1.cpu.gprs[1] = lr.ocall ? 1 : 0;
              v1.cpu.gprs[2] = status_word(lr);
              break;
            }
            case evm::SyscallLeaf::Vmgexit:
              try
              {
                cpu_.vmgexit_run_vmpl(Vmpl{static_cast<unsigned>(a[0] & 3)});
              }
              catch (const Error&)
              {
                return fault(vcpu::Exception::GeneralProtection);
              }
              break;
            case evm::SyscallLeaf::Rmpadjust:
            {
              auto spa = memory_.spa_for(Gpa{a[0]});
              if (
                !spa ||
                memory_.rmp().rmpadjust(
                  kVmpl1, Mode::User, *spa, Vmpl{2}, mem::VmplPerms::full()) !=
                  mem::AdjustResult::Ok)
                return fault(vcpu::Exception::GeneralProtection);
              break;
            }
            default:
              return fault(vcpu::Exception::GeneralProtection);
          }
          break;
        }
        case evm::RunResult::Kind::Trapped:
          return fault(r.trap->kind);
        case evm::RunResult::Kind::Halted:
          return finish(AppResult::Kind::Halted);
        case evm::RunResult::Kind::BudgetExhausted:
          return finish(AppResult::Kind::BudgetExhausted);
      }
    }
    return finish(AppResult::Kind::BudgetExhausted);
  }

  // ----- images and loading -----

  EnclaveImage make_image(const evm::Program& program, const ImageOptions& opts)
  {
    if (opts.nssa == 0)
      throw Error(ErrorCode::RangeError, "need at least one SSA frame");
    auto code = evm::encode(program);
    uint64_t code_pages = (code.size() + kPageSize - 1) / kPageSize;
    uint64_t code_off = (1 + opts.nssa) * kPageSize;

    EnclaveImage img;
    img.base_gva = opts.base_gva;
    img.attributes = opts.attributes;
    img.pages.push_back(
      {0, monitor::PageType::Tcs, {}, monitor::make_tcs_page(code_off, kPageSize, opts.nssa)});
    for (uint64_t i = 0; i < opts.nssa; ++i)
      img.pages.push_back(
        {(1 + i) * kPageSize, monitor::PageType::Reg, {true, true, false}, Bytes(kPageSize, 0)});
    for (uint64_t i = 0; i < code_pages; ++i)
    {
      Bytes page(kPageSize, 0);
      size_t n = std::min<size_t>(kPageSize, code.size() - i * kPageSize);
      std::copy_n(code.begin() + i * kPageSize, n, page.begin());
      img.pages.push_back(
        {code_off + i * kPageSize, monitor::PageType::Reg, {true, false, true}, page});
    }
    uint64_t data_off = code_off + code_pages * kPageSize;
    for (uint64_t i = 0; i < opts.data_pages; ++i)
      img.pages.push_back(
        {data_off + i * kPageSize, monitor::PageType::Reg, {true, true, false}, Bytes(kPageSize, 0)});
    img.size_bytes = std::bit_ceil(data_off + opts.data_pages * kPageSize);
    img.param_gva = img.base_gva + img.size_bytes;
    img.param_pages = 1;
    return img;
  }

  uint64_t image_data_gva(const EnclaveImage& image)
  {
    uint64_t off = 0;
    for (const auto& p : image.pages)
      if (p.type == monitor::PageType::Reg && p.perms.write)
        off = std::max(off, p.offset);
    return image.base_gva + off;
  }

  Digest32 measure_image(const EnclaveImage& image)
  {
    monitor::MeasurementLog log;
    log.ecreate(image.ssa_frame_size, image.size_bytes);
    for (const auto& p : image.pages)
    {
      log.eadd(p.offset, p.type, p.perms);
      if (!p.measure)
        continue;
      Bytes page(kPageSize, 0);
      std::copy_n(p.content.begin(), std::min<size_t>(p.content.size(), kPageSize), page.begin());
      for (uint64_t k = 0; k < kPageSize / monitor::kExtendChunk; ++k)
        log.eextend(
          p.offset + k * monitor::kExtendChunk,
          ByteView(page).subspan(k * monitor::kExtendChunk, monitor::kExtendChunk));
    }
    return log.digest();
  }

  const LeafResult& expect_ok(const LeafResult& r)
  {
    if (r.ok())
      return r;
    if (r.error)
      throw Error(*r.error, "leaf failed: " + std::string(to_string(*r.error)));
    throw Error(ErrorCode::ProtocolError, "leaf did not complete: " + std::string(to_string(r.kind)));
  }

  LoadedEnclave load_enclave(GuestOs& os, const EnclaveImage& image)
  {
    using monitor::DriverLeaf;
    LoadedEnclave out;
    out.param_gva = image.param_gva != 0 ? image.param_gva : image.base_gva + image.size_bytes;
    out.param_pages = image.param_pages;
    if (out.param_pages > 0)
      out.param_gpa = os.alloc_pages(out.param_pages);

    auto created = expect_ok(os.ioctl(
      {DriverLeaf::Ecreate,
       {image.base_gva,
        image.size_bytes,
        image.ssa_frame_size,
        image.attributes,
        os.app_table().value,
        page_of(out.param_gva),
        out.param_gpa.value,
        out.param_pages}}));
    out.id = EnclaveId{created.value};

    auto staging = os.alloc_pages(1);
    for (const auto& p : image.pages)
    {
      Bytes page(kPageSize, 0);
      std::copy_n(p.content.begin(), std::min<size_t>(p.content.size(), kPageSize), page.begin());
      os.memory().write(staging, 0, page, Vmpl{1});
      uint64_t gva = image.base_gva + p.offset;
      expect_ok(os.ioctl(
        {DriverLeaf::Eadd,
         {out.id.value, staging.value, gva, static_cast<uint64_t>(p.type), p.perms.bits()}}));
      if (p.measure)
        for (uint64_t k = 0; k < kPageSize / monitor::kExtendChunk; ++k)
          expect_ok(
            os.ioctl({DriverLeaf::Eextend, {out.id.value, gva + k * monitor::kExtendChunk}}));
      if (p.type == monitor::PageType::Tcs)
        out.tcs.push_back(gva);
    }
    out.mrenclave = expect_ok(os.ioctl({DriverLeaf::Einit, {out.id.value}})).digest;
    return out;
  }

  LeafResult ecall(GuestOs& os, const LoadedEnclave& e)
  {
    if (e.tcs.empty())
      throw Error(ErrorCode::NoTcsError, "enclave has no TCS");
    return os.ioctl({monitor::DriverLeaf::Eenter, {e.id.value, e.tcs.front(), kAppAep}});
  }
}
