// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/mem.h"

#include <algorithm>
#include <cstring>

namespace nsgx::mem
{
  MemLayout carve_layout(uint64_t total_pages, uint64_t vmpl0_pages, uint64_t monitor_pages)
  {
    if (monitor_pages == 0 || monitor_pages >= vmpl0_pages || vmpl0_pages >= total_pages)
      throw Error(
        ErrorCode::SizeError,
        "need 0 < monitor_pages < vmpl0_pages < total_pages, got " +
          std::to_string(monitor_pages) + "/" + std::to_string(vmpl0_pages) + "/" +
          std::to_string(total_pages));

    MemLayout l;
    l.total_gpa_pages = total_pages;
    l.vmpl0 = {0, vmpl0_pages};
    l.monitor = {0, monitor_pages};
    l.epc = {monitor_pages, vmpl0_pages};
    l.vmpl1 = {vmpl0_pages, total_pages};
    return l;
  }

  Rmp::Rmp(uint64_t spa_count) : entries_(spa_count)
  {
    for (uint64_t i = 0; i < spa_count; ++i)
      entries_[i].spa = Spa{i};
  }

  RmpEntry& Rmp::mutable_entry(Spa spa)
  {
    if (spa.value >= entries_.size())
      throw Error(ErrorCode::RangeError, "spa " + std::to_string(spa.value) + " out of range");
    return entries_[spa.value];
  }

  const RmpEntry& Rmp::entry(Spa spa) const
  {
    if (spa.value >= entries_.size())
      throw Error(ErrorCode::RangeError, "spa " + std::to_string(spa.value) + " out of range");
    return entries_[spa.value];
  }

  void Rmp::assign(Spa spa, Gpa gpa)
  {
    auto& e = mutable_entry(spa);
    auto it = gpa_to_spa_.find(gpa.value);
    if (it != gpa_to_spa_.end() && it->second != spa.value)
      throw Error(
        ErrorCode::OneToOne, "gpa " + std::to_string(gpa.value) + " already backed by another spa");
    if (e.assigned_gpa)
      gpa_to_spa_.erase(e.assigned_gpa->value);

    e.assigned_gpa = gpa;
    e.validated = true;
    e.vmpl_perms = {};
    e.vmpl_perms[0] = VmplPerms::full();
    gpa_to_spa_[gpa.value] = spa.value;
  }

  void Rmp::unassign(Spa spa)
  {
    auto& e = mutable_entry(spa);
    if (e.assigned_gpa)
      gpa_to_spa_.erase(e.assigned_gpa->value);
    e.assigned_gpa.reset();
    e.validated = false;
    e.vmpl_perms = {};
  }

  std::optional<Spa> Rmp::spa_for(Gpa gpa) const
  {
    auto it = gpa_to_spa_.find(gpa.value);
    if (it == gpa_to_spa_.end())
      return std::nullopt;
    return Spa{it->second};
  }

  RmpCheck Rmp::check(Spa spa, Vmpl vmpl, Access access) const
  {
    RmpFault fault{spa, vmpl, access};
    if (spa.value >= entries_.size())
      return fault;
    const auto& e = entries_[spa.value];
    if (!e.assigned_gpa || !e.validated)
      return fault;
    if (!e.vmpl_perms[vmpl.value()].allows(access))
      return fault;
    return Allowed{};
  }

  AdjustResult Rmp::rmpadjust(Vmpl caller, Mode mode, Spa spa, Vmpl target, VmplPerms perms)
  {
    if (mode != Mode::Kernel || target <= caller)
      return AdjustResult::PrivilegeFault;
    if (spa.value >= entries_.size() || !entries_[spa.value].assigned_gpa)
      return AdjustResult::PrivilegeFault;
    entries_[spa.value].vmpl_perms[target.value()] = perms;
    return AdjustResult::Ok;
  }

  void Rmp::launch_set_perms(Spa spa, Vmpl vmpl, VmplPerms perms)
  {
    auto& e = mutable_entry(spa);
    if (!e.assigned_gpa)
      throw Error(ErrorCode::NotAssigned, "launch permissions on unassigned spa");
    e.vmpl_perms[vmpl.value()] = perms;
  }

  Bytes Rmp::serialize_permission_map() const
  {
    Bytes out;
    out.reserve(gpa_to_spa_.size() * 13);
    for (const auto& [gpa, spa] : gpa_to_spa_)
    {
      const auto& e = entries_[spa];
      uint8_t rec[13];
      put_le64(rec, gpa);
      rec[8] = e.validated ? 1 : 0;
      for (unsigned v = 0; v < Vmpl::kCount; ++v)
        rec[9 + v] = e.vmpl_perms[v].bits();
      out.insert(out.end(), rec, rec + sizeof(rec));
    }
    return out;
  }

  GuestMemory::GuestMemory(const MemLayout& layout) :
    layout_(layout),
    rmp_(layout.total_gpa_pages),
    pages_(layout.total_gpa_pages)
  {
    const auto total = layout.total_gpa_pages;
    for (uint64_t g = 0; g < total; ++g)
    {
      Spa spa{total - 1 - g};
      rmp_.assign(spa, Gpa{g});
      if (layout.vmpl1.contains(Gpa{g}))
        rmp_.launch_set_perms(spa, Vmpl{1}, VmplPerms::full());
    }
  }

  const uint8_t* GuestMemory::raw_page(Spa spa) const
  {
    static const Page zero{};
    if (spa.value >= pages_.size())
      throw Error(ErrorCode::RangeError, "spa out of range");
    const auto& p = pages_[spa.value];
    return p ? p->data() : zero.data();
  }

  uint8_t* GuestMemory::raw_page_mut(Spa spa)
  {
    if (spa.value >= pages_.size())
      throw Error(ErrorCode::RangeError, "spa out of range");
    auto& p = pages_[spa.value];
    if (!p)
      p = std::make_unique<Page>(Page{});
    return p->data();
  }

  RmpCheck GuestMemory::read(Gpa gpa, uint64_t offset, std::span<uint8_t> out, Vmpl vmpl) const
  {
    if (offset + out.size() > kPageSize)
      throw Error(ErrorCode::RangeError, "access crosses page boundary");
    auto spa = rmp_.spa_for(gpa);
    if (!spa)
      return RmpFault{Spa{~0ull}, vmpl, Access::Read};
    auto c = rmp_.check(*spa, vmpl, Access::Read);
    if (is_allowed(c))
      std::memcpy(out.data(), raw_page(*spa) + offset, out.size());
    return c;
  }

  RmpCheck GuestMemory::write(Gpa gpa, uint64_t offset, ByteView data, Vmpl vmpl)
  {
    if (offset + data.size() > kPageSize)
      throw Error(ErrorCode::RangeError, "access crosses page boundary");
    auto spa = rmp_.spa_for(gpa);
    if (!spa)
      return RmpFault{Spa{~0ull}, vmpl, Access::Write};
    auto c = rmp_.check(*spa, vmpl, Access::Write);
    if (is_allowed(c) && !data.empty())
      std::memcpy(raw_page_mut(*spa) + offset, data.data(), data.size());
    return c;
  }

  bool GuestMemory::page_is_zero(Spa spa) const
  {
    const auto* p = raw_page(spa);
    return std::all_of(p, p + kPageSize, [](uint8_t b) { return b == 0; });
  }

  void GuestMemory::zero_page(Spa spa)
  {
    if (spa.value >= pages_.size())
      throw Error(ErrorCode::RangeError, "spa out of range");
    pages_[spa.value].reset();
  }

  std::string_view to_string(ContextKind k)
  {
    switch (k)
    {
      case ContextKind::MonitorKernel:
        return "MonitorKernel";
      case ContextKind::EnclaveUser:
        return "EnclaveUser";
      case ContextKind::GuestKernel:
        return "GuestKernel";
      case ContextKind::AppUser:
        return "AppUser";
    }
    return "?";
  }

  void PageTable::map(uint64_t vpn, const Pte& pte)
  {
    auto it = mappings_.find(vpn);
    if (it != mappings_.end() && it->second.immutable)
      throw Error(ErrorCode::Immutable, "vpn " + std::to_string(vpn) + " is pinned");
    mappings_[vpn] = pte;
  }

  void PageTable::unmap(uint64_t vpn)
  {
    auto it = mappings_.find(vpn);
    if (it == mappings_.end())
      return;
    if (it->second.immutable)
      throw Error(ErrorCode::Immutable, "vpn " + std::to_string(vpn) + " is pinned");
    mappings_.erase(it);
  }

  const Pte* PageTable::lookup(uint64_t vpn) const
  {
    auto it = mappings_.find(vpn);
    return it == mappings_.end() ? nullptr : &it->second;
  }

  PageTableId PageTableSet::create(ContextTag owner)
  {
    PageTableId id{next_id_++};
    tables_.emplace(id, PageTable(id, owner));
    return id;
  }

  void PageTableSet::destroy(PageTableId id)
  {
    tables_.erase(id);
  }

  PageTable& PageTableSet::get(PageTableId id)
  {
    auto it = tables_.find(id);
    if (it == tables_.end())
      throw Error(ErrorCode::RangeError, "no page table " + std::to_string(id.value));
    return it->second;
  }

  const PageTable& PageTableSet::get(PageTableId id) const
  {
    auto it = tables_.find(id);
    if (it == tables_.end())
      throw Error(ErrorCode::RangeError, "no page table " + std::to_string(id.value));
    return it->second;
  }

  bool PageTableSet::contains(PageTableId id) const
  {
    return tables_.contains(id);
  }

  Translation translate(
    const PageTable& pt, const Rmp& rmp, uint64_t gva, Access access, Mode mode, Vmpl vmpl)
  {
    PageFault pf{gva, access};
    const auto* pte = pt.lookup(page_of(gva));
    if (pte == nullptr)
      return pf;
    if (mode == Mode::User && !pte->user)
      return pf;
    if (access == Access::Write && !pte->writable)
      return pf;
    if (access == Access::Execute && !pte->executable)
      return pf;

    auto spa = rmp.spa_for(pte->gpa);
    if (!spa)
      return pf;
    auto c = rmp.check(*spa, vmpl, access);
    if (auto* f = std::get_if<RmpFault>(&c))
      return *f;
    return Translated{*spa, pte->gpa, offset_in_page(gva)};
  }

  void map_shared_parameter_buffer(
    PageTable& enclave_pt,
    PageTable& app_pt,
    const MemLayout& layout,
    uint64_t vpn,
    Gpa gpa,
    uint64_t pages)
  {
    if (enclave_pt.parameter_buffer_)
      throw Error(ErrorCode::AlreadyMapped, "parameter buffer already fixed for this enclave");
    if (pages == 0)
      throw Error(ErrorCode::LayoutError, "empty parameter buffer");
    for (uint64_t k = 0; k < pages; ++k)
    {
      if (!layout.vmpl1.contains(Gpa{gpa.value + k}))
        throw Error(
          ErrorCode::LayoutError,
          "parameter buffer gpa " + std::to_string(gpa.value + k) + " not in the VMPL1 region");
      if (enclave_pt.lookup(vpn + k) != nullptr)
        throw Error(ErrorCode::AlreadyMapped, "parameter buffer gva overlaps enclave mapping");
      if (const auto* existing = app_pt.lookup(vpn + k); existing && existing->immutable)
        throw Error(ErrorCode::Immutable, "parameter buffer gva pinned in app table");
    }

    for (uint64_t k = 0; k < pages; ++k)
    {
      Pte pte{Gpa{gpa.value + k}, true, true, false, true};
      enclave_pt.mappings_[vpn + k] = pte;
      app_pt.mappings_[vpn + k] = pte;
    }
    ParameterBuffer pb{vpn, gpa, pages};
    enclave_pt.parameter_buffer_ = pb;
    app_pt.parameter_buffer_ = pb;
  }
}
