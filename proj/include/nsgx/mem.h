// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/common.h"

#include <map>
#include <memory>
#include <optional>
#include <variant>

// Guest-physical memory, the reverse map table (RMP) with per-VMPL
// permissions, and per-context page tables.

namespace nsgx::mem
{
  struct VmplPerms
  {
    bool read = false;
    bool write = false;
    bool execute = false;

    static constexpr VmplPerms none()
    {
      return {};
    }

    static constexpr VmplPerms full()
    {
      return {true, true, true};
    }

    constexpr bool allows(Access a) const
    {
      switch (a)
      {
        case Access::Read:
          return read;
        case Access::Write:
          return write;
        case Access::Execute:
          return execute;
      }
      return false;
    }

    constexpr uint8_t bits() const
    {
      return static_cast<uint8_t>((read ? 1 : 0) | (write ? 2 : 0) | (execute ? 4 : 0));
    }

    constexpr auto operator<=>(const VmplPerms&) const = default;
  };

  struct RmpEntry
  {
    Spa spa;
    std::optional<Gpa> assigned_gpa;
    bool validated = false;
    std::array<VmplPerms, Vmpl::kCount> vmpl_perms{};
  };

  struct Allowed
  {
    constexpr bool operator==(const Allowed&) const = default;
  };

  struct RmpFault
  {
    Spa spa;
    Vmpl vmpl;
    Access access = Access::Read;

    constexpr bool operator==(const RmpFault&) const = default;
  };

  struct PageFault
  {
    uint64_t gva = 0;
    Access access = Access::Read;

    constexpr bool operator==(const PageFault&) const = default;
  };

  using RmpCheck = std::variant<Allowed, RmpFault>;

  inline bool is_allowed(const RmpCheck& c)
  {
    return std::holds_alternative<Allowed>(c);
  }

  enum class AdjustResult
  {
    Ok,
    PrivilegeFault,
  };

  /// Half-open range of guest-physical page indices.
  struct GpaRange
  {
    uint64_t begin = 0;
    uint64_t end = 0;

    constexpr uint64_t size() const
    {
      return end - begin;
    }

    constexpr bool contains(Gpa g) const
    {
      return g.value >= begin && g.value < end;
    }

    constexpr bool operator==(const GpaRange&) const = default;
  };

  /// Boot-time split of guest memory. The VMPL0 region starts at gPA 0 and
  /// holds the monitor sub-range followed by the EPC sub-range; everything
  /// above belongs to the guest at VMPL1.
  struct MemLayout
  {
    uint64_t total_gpa_pages = 0;
    GpaRange vmpl0;
    GpaRange monitor;
    GpaRange epc;
    GpaRange vmpl1;

    constexpr bool operator==(const MemLayout&) const = default;
  };

  /// Pure: computes the carve-out or throws SizeError. Requires
  /// monitor_pages < vmpl0_pages < total_pages and monitor_pages >= 1.
  MemLayout carve_layout(uint64_t total_pages, uint64_t vmpl0_pages, uint64_t monitor_pages);

  class Rmp
  {
  public:
    explicit Rmp(uint64_t spa_count);

    uint64_t size() const
    {
      return entries_.size();
    }

    /// AMD-SP assignment of a system page to a guest page; also validates
    /// it (PVALIDATE is folded in). New assignments grant VMPL0 full access
    /// and nothing to VMPL1..3. Throws OneToOne if `gpa` is already backed.
    void assign(Spa spa, Gpa gpa);
    void unassign(Spa spa);

    const RmpEntry& entry(Spa spa) const;
    std::optional<Spa> spa_for(Gpa gpa) const;

    RmpCheck check(Spa spa, Vmpl vmpl, Access access) const;

    /// RMPADJUST: a level may only change strictly less privileged levels,
    /// and only from kernel mode. No state change on fault.
    AdjustResult rmpadjust(Vmpl caller, Mode mode, Spa spa, Vmpl target, VmplPerms perms);

    /// Launch-time permission setup performed before the guest runs.
    void launch_set_perms(Spa spa, Vmpl vmpl, VmplPerms perms);

    /// Stable serialization of every assigned entry in gPA order:
    /// gpa (u64 LE) | validated (u8) | perms[0..3] (u8 each).
    Bytes serialize_permission_map() const;

  private:
    RmpEntry& mutable_entry(Spa spa);

    std::vector<RmpEntry> entries_;
    std::map<uint64_t, uint64_t> gpa_to_spa_;
  };

  using Page = std::array<uint8_t, kPageSize>;

  /// Backing store plus RMP. Pages are allocated lazily and read as zero
  /// until first written.
  class GuestMemory
  {
  public:
    /// Backs every gPA of the layout with a distinct system page (spa =
    /// total - 1 - gpa) and applies the VMPL0/VMPL1 carve-out permissions.
    explicit GuestMemory(const MemLayout& layout);

    const MemLayout& layout() const
    {
      return layout_;
    }

    Rmp& rmp()
    {
      return rmp_;
    }

    const Rmp& rmp() const
    {
      return rmp_;
    }

    std::optional<Spa> spa_for(Gpa gpa) const
    {
      return rmp_.spa_for(gpa);
    }

    /// Unchecked access by system page (hardware-side and test use).
    const uint8_t* raw_page(Spa spa) const;
    uint8_t* raw_page_mut(Spa spa);

    /// RMP-checked accesses on behalf of software running at `vmpl`. The
    /// range must lie within the page at `gpa`.
    RmpCheck read(Gpa gpa, uint64_t offset, std::span<uint8_t> out, Vmpl vmpl) const;
    RmpCheck write(Gpa gpa, uint64_t offset, ByteView data, Vmpl vmpl);

    bool page_is_zero(Spa spa) const;
    void zero_page(Spa spa);

  private:
    MemLayout layout_;
    Rmp rmp_;
    std::vector<std::unique_ptr<Page>> pages_;
  };

  enum class ContextKind : uint8_t
  {
    MonitorKernel,
    EnclaveUser,
    GuestKernel,
    AppUser,
  };

  std::string_view to_string(ContextKind k);

  struct ContextTag
  {
    ContextKind kind = ContextKind::GuestKernel;
    uint64_t id = 0;

    constexpr bool operator==(const ContextTag&) const = default;
  };

  struct Pte
  {
    Gpa gpa;
    bool user = false;
    bool writable = false;
    bool executable = false;
    bool immutable = false;

    constexpr bool operator==(const Pte&) const = default;
  };

  struct ParameterBuffer
  {
    uint64_t vpn = 0;
    Gpa gpa;
    uint64_t pages = 0;

    constexpr bool operator==(const ParameterBuffer&) const = default;
  };

  class PageTable
  {
  public:
    PageTable(PageTableId id, ContextTag owner) : id_(id), owner_(owner) {}

    PageTableId id() const
    {
      return id_;
    }

    const ContextTag& owner() const
    {
      return owner_;
    }

    /// Throws Immutable when replacing an immutable entry.
    void map(uint64_t vpn, const Pte& pte);
    void unmap(uint64_t vpn);

    const Pte* lookup(uint64_t vpn) const;

    const std::map<uint64_t, Pte>& mappings() const
    {
      return mappings_;
    }

    const std::optional<ParameterBuffer>& parameter_buffer() const
    {
      return parameter_buffer_;
    }

  private:
    friend void map_shared_parameter_buffer(
      PageTable&, PageTable&, const MemLayout&, uint64_t, Gpa, uint64_t);

    PageTableId id_;
    ContextTag owner_;
    std::map<uint64_t, Pte> mappings_;
    std::optional<ParameterBuffer> parameter_buffer_;
  };

  /// Owner of every page table in a machine, addressed by id (the cr3
  /// value stored in a VMSA).
  class PageTableSet
  {
  public:
    PageTableId create(ContextTag owner);
    void destroy(PageTableId id);
    PageTable& get(PageTableId id);
    const PageTable& get(PageTableId id) const;
    bool contains(PageTableId id) const;

  private:
    uint64_t next_id_ = 1;
    std::map<PageTableId, PageTable> tables_;
  };

  struct Translated
  {
    Spa spa;
    Gpa gpa;
    uint64_t offset = 0;

    uint64_t physical_address() const
    {
      return spa.value * kPageSize + offset;
    }

    constexpr bool operator==(const Translated&) const = default;
  };

  using Translation = std::variant<Translated, PageFault, RmpFault>;

  /// Page-table check (presence, user/supervisor, write, execute) followed
  /// by the RMP check on the backing system page.
  Translation translate(
    const PageTable& pt, const Rmp& rmp, uint64_t gva, Access access, Mode mode, Vmpl vmpl);

  /// Installs identical, immutable gVA->gPA entries for `pages` pages in
  /// both tables. The gPA range must be inside the VMPL1 region. Throws
  /// AlreadyMapped on a second call for the same enclave table and
  /// LayoutError for a bad range.
  void map_shared_parameter_buffer(
    PageTable& enclave_pt,
    PageTable& app_pt,
    const MemLayout& layout,
    uint64_t vpn,
    Gpa gpa,
    uint64_t pages);
}
