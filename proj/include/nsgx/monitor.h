// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/attest.h"
#include "nsgx/common.h"
#include "nsgx/evm.h"
#include "nsgx/measurement.h"
#include "nsgx/mem.h"
#include "nsgx/vcpu.h"

#include <functional>
#include <map>
#include <optional>
#include <variant>

// The VMPL0 security monitor: SGX leaf emulation over an EPC pool carved
// out of VMPL0 memory, AEX/ERESUME handling, and the enclave syscall entry.

namespace nsgx::monitor
{
  /// Kernel-only page shared by the monitor's and every enclave's table;
  /// the value programmed into VMPL0's LSTAR.
  constexpr uint64_t kTrampolineGva = 0xffff'ffff'ffe0'0000;

  /// Fixed gPA roles inside the monitor sub-range.
  constexpr uint64_t kImageHeaderPage = 0;
  constexpr uint64_t kTrampolinePage = 1;
  constexpr uint64_t kSecretsPage = 2;
  constexpr uint64_t kMinMonitorPages = 3;

  /// Fixed gPA roles at the bottom of the VMPL1 region.
  constexpr uint64_t kGuestSecretsPage = 0;
  constexpr uint64_t kDriverChannelPage = 1;
  constexpr uint64_t kGuestReservedPages = 2;

  /// The two pages hashed into the launch digest (header, trampoline).
  Bytes monitor_image(const mem::MemLayout& layout);

  // ----- driver <-> monitor request ABI (lives in the channel page) -----

  enum class DriverLeaf : uint64_t
  {
    Ecreate = 0,
    Eadd = 1,
    Eextend = 2,
    Einit = 3,
    Eenter = 4,
    Eresume = 5,
    Eremove = 6,
    // Enclave-internal leaves; never valid driver requests.
    Eexit = 0x100,
    Ereport = 0x101,
    Egetkey = 0x102,
  };

  std::string_view to_string(DriverLeaf leaf);
  std::optional<DriverLeaf> parse_driver_leaf(std::string_view name);
  bool is_driver_leaf(DriverLeaf leaf);

  constexpr size_t kRequestArgs = 8;

  /// Channel page: leaf u64 @0, args u64[8] @8. Reply @128: kind, status,
  /// value, aep, exception, ocall (u64 each), digest.
  struct DriverRequest
  {
    DriverLeaf leaf = DriverLeaf::Ecreate;
    std::array<uint64_t, kRequestArgs> args{};
  };

  struct MonitorReply
  {
    enum class Kind : uint64_t
    {
      Done = 0,
      EexitReturn = 1,
      AexDelivery = 2,
    };

    Kind kind = Kind::Done;
    /// 0 on success, otherwise 1 + ErrorCode.
    uint64_t status = 0;
    uint64_t value = 0;
    uint64_t aep = 0;
    uint64_t exception = 0;
    uint64_t ocall = 0;
    Digest32 digest{};

    std::optional<ErrorCode> error() const
    {
      if (status == 0)
        return std::nullopt;
      return static_cast<ErrorCode>(status - 1);
    }
  };

  constexpr size_t kReplyOffset = 128;

  Bytes encode_request(const DriverRequest& r);
  DriverRequest decode_request(ByteView page);
  Bytes encode_reply(const MonitorReply& r);
  MonitorReply decode_reply(ByteView page);

  // ----- parameter buffer header (first 32 bytes of the buffer) -----

  namespace param
  {
    constexpr uint64_t kFlagsOffset = 0;
    constexpr uint64_t kValueOffset = 8;
    /// Set by the enclave before EEXIT to mark the exit as an OCALL.
    constexpr uint64_t kOcall = 1;
    /// Set by the App before EENTER to resume after the OCALL.
    constexpr uint64_t kOcallReturn = 2;
    constexpr uint64_t kPayloadOffset = 32;
  }

  // ----- SGX structures -----

  enum class SecsState : uint8_t
  {
    Uninitialized,
    Initialized,
    Removed,
  };

  std::string_view to_string(SecsState s);

  struct EcreateParams
  {
    uint64_t base_gva = 0;
    uint64_t size_bytes = 0;
    uint32_t ssa_frame_size = 1;
    uint64_t attributes = 0;
  };

  struct Secs
  {
    EnclaveId id;
    uint64_t base_gva = 0;
    uint64_t size_bytes = 0;
    uint32_t ssa_frame_size = 1;
    uint64_t attributes = 0;
    SecsState state = SecsState::Uninitialized;
    std::optional<Digest32> mrenclave;
    MeasurementLog measurement_log;
    Gpa secs_page;
    PageTableId page_table;
  };

  struct EpcmEntry
  {
    Gpa gpa;
    EnclaveId owner;
    PageType page_type = PageType::Reg;
    PagePerms perms;
    uint64_t enclave_offset = 0;
    bool valid = false;
  };

  /// TCS page content: OENTRY u64 @0, OSSA u64 @8, NSSA u64 @16 (both
  /// offsets relative to the enclave base).
  Bytes make_tcs_page(uint64_t entry_offset, uint64_t ssa_offset, uint64_t nssa);

  struct Tcs
  {
    uint64_t gva = 0;
    uint64_t entry_point = 0;
    uint64_t aep = 0;
    uint64_t ssa_base = 0;
    uint64_t nssa = 1;
    uint64_t current_ssa_index = 0;
    bool busy = false;
    /// Enclave state parked by an OCALL exit.
    std::optional<vcpu::CpuState> ocall_continuation;
  };

  /// Stored at the start of an SSA frame: gprs[16] | rip | rsp | exit_reason
  /// u64 | valid u64.
  struct Ssa
  {
    static constexpr size_t kSize = 8 * (vcpu::kGprCount + 4);

    vcpu::CpuState saved;
    vcpu::Exception exit_reason = vcpu::Exception::Timer;

    Bytes serialize() const;
    static std::optional<Ssa> parse(ByteView bytes);
  };

  struct KeyRequest
  {
    static constexpr size_t kSize = 32;
    static constexpr uint16_t kPolicyMrenclave = 1;

    attest::KeyName key_name = attest::KeyName::SealKey;
    uint16_t policy = kPolicyMrenclave;
    std::array<uint8_t, 16> key_id{};

    /// key_name u16 | policy u16 | 12 zero bytes | key_id.
    Bytes serialize() const;
    static KeyRequest parse(ByteView bytes);
  };

  // ----- control transfers out of the enclave -----

  struct ExitEvent
  {
    enum class Kind : uint8_t
    {
      Eexit,
      Aex,
      /// Thread could not continue (e.g. SSA overflow); TCS released.
      Killed,
    };

    Kind kind = Kind::Eexit;
    uint64_t value = 0;
    /// EEXIT taken with the OCALL flag set; the thread is parked.
    bool ocall = false;
    uint64_t aep = 0;
    vcpu::Exception exception = vcpu::Exception::Timer;
    ErrorCode error = ErrorCode::StateError;
  };

  /// Result of routing an enclave syscall: leave the enclave, resume it
  /// with a status in r0, or raise an exception in it.
  using DispatchOutcome = std::variant<ExitEvent, uint64_t, vcpu::Exception>;

  namespace status
  {
    constexpr uint64_t kOk = 0;
    constexpr uint64_t kBadBuffer = 1;
    constexpr uint64_t kBadRequest = 2;
  }

  struct MonitorConfig
  {
    uint64_t step_budget = 10'000;
  };

  struct Platform
  {
    mem::GuestMemory& memory;
    mem::PageTableSet& tables;
    vcpu::Vcpu& cpu;
    attest::AmdSp& sp;
    attest::HostRelay& relay;
  };

  class Monitor
  {
  public:
    /// Boot at VMPL0: builds the monitor page table and trampoline,
    /// generates the AIK from `drbg`, obtains the AIK-binding SNP report
    /// and the VMPL0 guest key over VMPCK0, and hands VMPCK1 to the guest.
    Monitor(Platform platform, const crypto::Drbg& drbg, MonitorConfig config = {});

    // SGX leaves ---------------------------------------------------------

    EnclaveId ecreate(const EcreateParams& p);
    void map_parameter_buffer(
      EnclaveId id, PageTableId app_table, uint64_t vpn, Gpa gpa, uint64_t pages);
    /// Copies the page at `src` (which the guest itself must be able to
    /// read) into a fresh EPC page.
    void eadd(EnclaveId id, Gpa src, uint64_t dest_gva, PageType type, PagePerms perms);
    void eextend(EnclaveId id, uint64_t gva);
    Digest32 einit(EnclaveId id);
    /// Enters through the TCS and runs the enclave until it leaves.
    ExitEvent eenter(EnclaveId id, uint64_t tcs_gva, uint64_t aep);
    ExitEvent eresume(EnclaveId id, uint64_t tcs_gva);
    void eremove(EnclaveId id);
    attest::EnclaveReport ereport(EnclaveId id, const attest::ReportData& report_data);
    attest::Key32 egetkey(EnclaveId id, const KeyRequest& req);

    /// EEXIT on behalf of the thread currently inside an enclave.
    ExitEvent eexit(uint64_t return_value);
    /// AEX for the thread currently inside an enclave.
    ExitEvent aex(vcpu::Exception e);

    /// Enclave syscall entry. Throws BadEntry for a non-enclave caller;
    /// an entry address other than the trampoline or a leaf the monitor
    /// does not serve becomes GeneralProtection.
    DispatchOutcome syscall_dispatch(
      const mem::ContextTag& caller,
      uint64_t entry_address,
      evm::SyscallLeaf leaf,
      const std::array<uint64_t, 3>& args);

    /// Called when the driver's VMPL switch lands in VMPL0: reads the
    /// request from the channel page, runs it, writes the reply, and asks
    /// to switch back to VMPL1.
    vcpu::SwitchResult handle_driver_request();

    // Introspection ------------------------------------------------------

    const Secs& secs(EnclaveId id) const;
    const Tcs& tcs(EnclaveId id, uint64_t tcs_gva) const;
    std::vector<EnclaveId> enclaves() const;
    const std::vector<EpcmEntry>& epcm() const
    {
      return epcm_;
    }
    uint64_t epc_free_count() const
    {
      return free_epc_.size();
    }
    uint64_t epc_owned_count() const;
    std::vector<Gpa> enclave_pages(EnclaveId id) const;
    /// Every mapping in the enclave's table is an EPC page it owns, the
    /// parameter buffer, or the trampoline.
    bool enclave_table_conforms(EnclaveId id) const;

    PageTableId page_table() const
    {
      return page_table_;
    }

    const attest::Aik& aik() const
    {
      return aik_;
    }

    const std::optional<attest::SnpReport>& binding_report() const
    {
      return binding_report_;
    }

    /// Bundle for the last EREPORT an enclave made, if any.
    std::optional<attest::NestedBundle> last_bundle(EnclaveId id) const;

    std::optional<std::pair<EnclaveId, uint64_t>> current_thread() const
    {
      return current_;
    }

    // Hooks for tests: enclave state captured at AEX and restored at
    // ERESUME.
    std::function<void(const vcpu::CpuState&)> on_aex;
    std::function<void(const vcpu::CpuState&)> on_eresume;

  private:
    struct Enclave
    {
      Secs secs;
      std::map<uint64_t, Tcs> tcs;
      std::optional<attest::NestedBundle> last_bundle;
    };

    Enclave& enclave(EnclaveId id);
    const Enclave& enclave(EnclaveId id) const;
    Tcs& tcs_mut(Enclave& e, uint64_t tcs_gva);
    Gpa alloc_epc();
    EpcmEntry& epcm_at(Gpa gpa);

    ExitEvent run_enclave(uint64_t budget);
    std::variant<evm::Program, vcpu::Exception> fetch_program(const Enclave& e, const Tcs& t);
    void scrub_vmpl0();
    void release_thread();
    uint64_t do_ereport(Enclave& e, const std::array<uint64_t, 3>& args);
    uint64_t do_egetkey(Enclave& e, const std::array<uint64_t, 3>& args);

    /// Copies through the enclave's table with the enclave's rights.
    bool read_enclave(const Enclave& e, uint64_t gva, std::span<uint8_t> out) const;
    bool write_enclave(const Enclave& e, uint64_t gva, ByteView data);
    /// Privileged window (SMAP off): kernel-mode access through the
    /// enclave table.
    std::optional<vcpu::Exception> kernel_access(
      const Enclave& e, uint64_t gva, std::span<uint8_t> buf, bool write);
    std::optional<vcpu::Exception> access(
      const mem::PageTable& pt, uint64_t gva, std::span<uint8_t> buf, Access access, Mode mode)
      const;

    uint64_t read_param_word(const Enclave& e, uint64_t offset) const;
    void write_param_word(const Enclave& e, uint64_t offset, uint64_t v);

    MonitorReply dispatch_request(const DriverRequest& r);
    MonitorReply reply_for(const ExitEvent& e) const;

    Platform p_;
    MonitorConfig config_;
    PageTableId page_table_;
    attest::Aik aik_;
    attest::GuestRequester requester_;
    std::optional<attest::SnpReport> binding_report_;
    attest::Key32 guest_key_{};

    uint64_t next_enclave_ = 1;
    std::map<EnclaveId, Enclave> enclaves_;
    std::vector<EpcmEntry> epcm_;
    std::vector<Gpa> free_epc_;
    std::optional<std::pair<EnclaveId, uint64_t>> current_;
  };
}
