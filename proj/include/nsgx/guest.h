// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/attest.h"
#include "nsgx/common.h"
#include "nsgx/evm.h"
#include "nsgx/mem.h"
#include "nsgx/monitor.h"
#include "nsgx/vcpu.h"

#include <functional>
#include <optional>

// The untrusted guest at VMPL1: kernel driver that forwards SGX leaf
// requests to the monitor, the App runner, the enclave loader, and the
// attacks a malicious guest kernel can mount.

namespace nsgx::guest
{
  /// Where the App's asynchronous exit pointer lives; the driver resumes
  /// here after an AEX.
  constexpr uint64_t kAppAep = 0x0040'0000;
  constexpr uint64_t kAppStackTop = 0x7fff'0000;
  /// Kernel-half address the attacks use for their own mappings.
  constexpr uint64_t kAttackGva = 0x7000'0000'0000;

  enum class DriverPolicy : uint8_t
  {
    Honest,
    /// After an AEX, divert to somewhere other than the AEP.
    SkipAep,
    /// Pass every request through `GuestOs::tamper` before sending it.
    TamperLeafParams,
  };

  std::string_view to_string(DriverPolicy p);
  std::optional<DriverPolicy> parse_driver_policy(std::string_view name);

  struct LeafResult
  {
    enum class Kind : uint8_t
    {
      Done,
      EexitReturn,
      /// The switch to VMPL0 or back did not happen.
      Stalled,
      /// The host ran some other VMPL instead of the monitor.
      Diverted,
      /// The driver abandoned the thread after an AEX.
      Aborted,
      /// A fault in the enclave kept recurring; reported to the App.
      Faulted,
    };

    Kind kind = Kind::Done;
    std::optional<ErrorCode> error;
    uint64_t value = 0;
    bool ocall = false;
    Digest32 digest{};
    std::optional<vcpu::Exception> exception;
    uint64_t aex_count = 0;

    bool ok() const
    {
      return (kind == Kind::Done || kind == Kind::EexitReturn) && !error;
    }
  };

  std::string_view to_string(LeafResult::Kind k);

  struct GuestConfig
  {
    DriverPolicy policy = DriverPolicy::Honest;
    /// Non-timer AEXes retried before the fault is handed to the App.
    uint64_t max_fault_retries = 1;
    /// ERESUMEs per ioctl before the driver abandons the thread.
    uint64_t max_resumes = 64;
  };

  struct AppResult
  {
    enum class Kind : uint8_t
    {
      Halted,
      Faulted,
      BudgetExhausted,
      Stalled,
    };

    Kind kind = Kind::Halted;
    uint64_t steps = 0;
    std::optional<vcpu::Exception> fault;
    std::vector<LeafResult> ioctls;
    vcpu::CpuState final_state;
  };

  std::string_view to_string(AppResult::Kind k);

  class GuestOs
  {
  public:
    GuestOs(
      mem::GuestMemory& memory,
      mem::PageTableSet& tables,
      vcpu::Vcpu& cpu,
      attest::AmdSp& sp,
      attest::HostRelay& relay,
      GuestConfig config = {});

    /// Runs the monitor after the switch lands in VMPL0. Wired by the
    /// machine.
    std::function<vcpu::SwitchResult()> vmpl0_entry;
    std::function<void(monitor::DriverRequest&)> tamper;

    GuestConfig& config()
    {
      return config_;
    }

    /// Driver entry for an App ioctl. Enclave-internal leaves are refused
    /// with InvalidLeaf and never reach the monitor.
    LeafResult ioctl(const monitor::DriverRequest& request);

    /// Sends `request` as-is, skipping the driver's own checks. Used by a
    /// compromised driver.
    LeafResult ioctl_raw(const monitor::DriverRequest& request);

    /// True once the vCPU has been left somewhere the guest cannot run.
    bool stalled() const
    {
      return stalled_;
    }

    PageTableId app_table() const
    {
      return app_table_;
    }

    PageTableId kernel_table() const
    {
      return kernel_table_;
    }

    /// Contiguous VMPL1 pages from the guest pool.
    Gpa alloc_pages(uint64_t n);
    Gpa stage_page(ByteView content);
    /// Maps `pages` fresh pages at `gva` in the App table (user, rw-).
    void map_app_pages(uint64_t gva, uint64_t pages);
    uint64_t read_app_u64(uint64_t gva) const;
    void write_app_u64(uint64_t gva, uint64_t v);
    Bytes read_app(uint64_t gva, size_t n) const;
    void write_app(uint64_t gva, ByteView data);

    /// Runs App bytecode at VMPL1 user mode. `syscall ioctl rA rB rC`
    /// sends leaf rA with (rB, rC); EENTER gets the App AEP. After the
    /// call r0 = value, r1 = OCALL flag, r2 = status (0 or 1 + error).
    AppResult run_app(
      const evm::Program& program,
      uint64_t budget,
      const std::array<uint64_t, vcpu::kGprCount>& initial_gprs = {});

    attest::GuestRequester& requester()
    {
      return requester_;
    }

    attest::AmdSp& sp()
    {
      return sp_;
    }

    attest::HostRelay& relay()
    {
      return relay_;
    }

    mem::GuestMemory& memory()
    {
      return memory_;
    }

    mem::PageTableSet& tables()
    {
      return tables_;
    }

    vcpu::Vcpu& cpu()
    {
      return cpu_;
    }

    /// Exceptions the guest OS handler was invoked for.
    const std::vector<vcpu::Exception>& observed_exceptions() const
    {
      return observed_;
    }

  private:
    LeafResult run_leaf(const monitor::DriverRequest& request, bool filtered);
    std::optional<monitor::MonitorReply> forward(
      const monitor::DriverRequest& request, LeafResult& out);
    void guest_handler(vcpu::Exception e);

    mem::GuestMemory& memory_;
    mem::PageTableSet& tables_;
    vcpu::Vcpu& cpu_;
    attest::AmdSp& sp_;
    attest::HostRelay& relay_;
    GuestConfig config_;
    attest::GuestRequester requester_;
    PageTableId kernel_table_;
    PageTableId app_table_;
    uint64_t next_page_;
    bool stalled_ = false;
    std::vector<vcpu::Exception> observed_;
  };

  // ----- enclave images and the loader -----

  struct ImagePage
  {
    uint64_t offset = 0;
    monitor::PageType type = monitor::PageType::Reg;
    monitor::PagePerms perms;
    Bytes content;
    bool measure = true;
  };

  struct EnclaveImage
  {
    uint64_t base_gva = 0x1000'0000;
    uint64_t size_bytes = 0;
    uint32_t ssa_frame_size = 1;
    uint64_t attributes = 0;
    std::vector<ImagePage> pages;
    uint64_t param_gva = 0;
    uint64_t param_pages = 1;
  };

  struct ImageOptions
  {
    uint64_t base_gva = 0x1000'0000;
    uint64_t nssa = 1;
    uint64_t data_pages = 1;
    uint64_t attributes = 0;
  };

  /// Standard layout: TCS | SSA frames | code (r-x) | data (rw-), size
  /// rounded up to a power of two, parameter buffer right after the range.
  EnclaveImage make_image(const evm::Program& program, const ImageOptions& opts = {});

  /// Gva of the highest writable page (the data page in a make_image layout).
  uint64_t image_data_gva(const EnclaveImage& image);

  /// Offline replay of the build log.
  Digest32 measure_image(const EnclaveImage& image);

  struct LoadedEnclave
  {
    EnclaveId id;
    Digest32 mrenclave{};
    std::vector<uint64_t> tcs;
    uint64_t param_gva = 0;
    Gpa param_gpa;
    uint64_t param_pages = 0;
  };

  /// ECREATE, EADD + EEXTEND for every page, EINIT, all through the
  /// driver. Throws the monitor's error on failure.
  LoadedEnclave load_enclave(GuestOs& os, const EnclaveImage& image);

  /// Throws Error for a failed leaf.
  const LeafResult& expect_ok(const LeafResult& r);

  /// One EENTER of the first TCS through the driver, AEX/ERESUME included.
  LeafResult ecall(GuestOs& os, const LoadedEnclave& e);

  // ----- attacks -----

  enum class AttackKind : uint8_t
  {
    ReadVmpl0,
    WriteVmpl0,
    RemapEnclavePage,
    SkipAep,
    TamperLeafParams,
    RequestVmpl0Report,
    DeriveVmpl0Key,
  };

  std::string_view to_string(AttackKind k);
  std::optional<AttackKind> parse_attack(std::string_view name);

  struct AttackVerdict
  {
    enum class Kind : uint8_t
    {
      Blocked,
      NoEffect,
      Succeeded,
    };

    Kind kind = Kind::Blocked;
    /// What stopped it, or what leaked.
    std::string detail;

    std::string describe() const;
  };

  /// Runs one attack against `target`. `observer` is read-only and only
  /// used to judge the outcome.
  AttackVerdict run_attack(
    GuestOs& os, AttackKind kind, const LoadedEnclave& target, const monitor::Monitor& observer);
}
