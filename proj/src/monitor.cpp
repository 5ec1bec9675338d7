// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/monitor.h"

#include <algorithm>
#include <bit>
#include <cstring>

namespace nsgx::monitor
{
  namespace
  {
    constexpr Vmpl kVmpl0{0};
    constexpr Vmpl kVmpl1{1};
    constexpr uint64_t kNoOffset = ~uint64_t{0};

    Gpa monitor_gpa(const mem::MemLayout& l, uint64_t page)
    {
      return Gpa{l.monitor.begin + page};
    }

    Gpa guest_gpa(const mem::MemLayout& l, uint64_t page)
    {
      return Gpa{l.vmpl1.begin + page};
    }

    attest::Key32 read_key(const mem::GuestMemory& memory, Gpa page, unsigned slot)
    {
      attest::Key32 k{};
      if (!mem::is_allowed(memory.read(page, slot * k.size(), k, kVmpl0)))
        throw Error(ErrorCode::StateError, "secrets page is not readable");
      return k;
    }

    std::array<uint8_t, 32> aik_seed(const crypto::Drbg& drbg)
    {
      auto b = drbg.derive("monitor/aik", 32);
      std::array<uint8_t, 32> seed{};
      std::copy(b.begin(), b.end(), seed.begin());
      return seed;
    }

    vcpu::Exception exception_for(const mem::Translation& t)
    {
      return std::holds_alternative<mem::RmpFault>(t) ? vcpu::Exception::RmpFault :
                                                         vcpu::Exception::PageFault;
    }
  }

  Bytes monitor_image(const mem::MemLayout& layout)
  {
    Bytes image(2 * kPageSize, 0);
    std::memcpy(image.data(), "NSGXMON1", 8);
    put_le32(image.data() + 8, 1);
    put_le64(image.data() + 16, layout.total_gpa_pages);
    put_le64(image.data() + 24, layout.vmpl0.size());
    put_le64(image.data() + 32, layout.monitor.size());
    put_le64(image.data() + 40, kTrampolineGva);
    std::memcpy(image.data() + kPageSize, "NSGXTRMP", 8);
    return image;
  }

  std::string_view to_string(DriverLeaf leaf)
  {
    switch (leaf)
    {
      case DriverLeaf::Ecreate:
        return "ECREATE";
      case DriverLeaf::Eadd:
        return "EADD";
      case DriverLeaf::Eextend:
        return "EEXTEND";
      case DriverLeaf::Einit:
        return "EINIT";
      case DriverLeaf::Eenter:
        return "EENTER";
      case DriverLeaf::Eresume:
        return "ERESUME";
      case DriverLeaf::Eremove:
        return "EREMOVE";
      case DriverLeaf::Eexit:
        return "EEXIT";
      case DriverLeaf::Ereport:
        return "EREPORT";
      case DriverLeaf::Egetkey:
        return "EGETKEY";
    }
    return "?";
  }

  std::optional<DriverLeaf> parse_driver_leaf(std::string_view name)
  {
    for (auto l :
         {DriverLeaf::Ecreate,
          DriverLeaf::Eadd,
          DriverLeaf::Eextend,
          DriverLeaf::Einit,
          DriverLeaf::Eenter,
          DriverLeaf::Eresume,
          DriverLeaf::Eremove,
          DriverLeaf::Eexit,
          DriverLeaf::Ereport,
          DriverLeaf::Egetkey})
    {
      if (to_string(l) == name)
        return l;
    }
    return std::nullopt;
  }

  bool is_driver_leaf(DriverLeaf leaf)
  {
    return static_cast<uint64_t>(leaf) <= static_cast<uint64_t>(DriverLeaf::Eremove);
  }

  Bytes encode_request(const DriverRequest& r)
  {
    Bytes out(8 * (1 + kRequestArgs));
    put_le64(out.data(), static_cast<uint64_t>(r.leaf));
    for (size_t i = 0; i < kRequestArgs; ++i)
      put_le64(out.data() + 8 * (i + 1), r.args[i]);
    return out;
  }

  DriverRequest decode_request(ByteView page)
  {
    if (page.size() < 8 * (1 + kRequestArgs))
      throw Error(ErrorCode::DecodeError, "short driver request");
    DriverRequest r;
    r.leaf = static_cast<DriverLeaf>(get_le64(page.data()));
    for (size_t i = 0; i < kRequestArgs; ++i)
      r.args[i] = get_le64(page.data() + 8 * (i + 1));
    return r;
  }

  Bytes encode_reply(const MonitorReply& r)
  {
    Bytes out(6 * 8 + 32);
    put_le64(out.data(), static_cast<uint64_t>(r.kind));
    put_le64(out.data() + 8, r.status);
    put_le64(out.data() + 16, r.value);
    put_le64(out.data() + 24, r.aep);
    put_le64(out.data() + 32, r.exception);
    put_le64(out.data() + 40, r.ocall);
    std::memcpy(out.data() + 48, r.digest.data(), 32);
    return out;
  }

  MonitorReply decode_reply(ByteView page)
  {
    if (page.size() < kReplyOffset + 80)
      throw Error(ErrorCode::DecodeError, "short monitor reply");
    auto p = page.data() + kReplyOffset;
    MonitorReply r;
    auto kind = get_le64(p);
    if (kind > static_cast<uint64_t>(MonitorReply::Kind::AexDelivery))
      throw Error(ErrorCode::DecodeError, "unknown reply kind");
    r.kind = static_cast<MonitorReply::Kind>(kind);
    r.status = get_le64(p + 8);
    r.value = get_le64(p + 16);
    r.aep = get_le64(p + 24);
    r.exception = get_le64(p + 32);
    r.ocall = get_le64(p + 40);
    std::memcpy(r.digest.data(), p + 48, 32);
    return r;
  }

  std::string_view to_string(SecsState s)
  {
    switch (s)
    {
      case SecsState::Uninitialized:
        return "uninitialized";
      case SecsState::Initialized:
        return "initialized";
      case SecsState::Removed:
        return "removed";
    }
    return "?";
  }

  Bytes make_tcs_page(uint64_t entry_offset, uint64_t ssa_offset, uint64_t nssa)
  {
    Bytes page(kPageSize, 0);
    put_le64(page.data(), entry_offset);
    put_le64(page.data() + 8, ssa_offset);
    put_le64(page.data() + 16, nssa);
    return page;
  }

  Bytes Ssa::serialize() const
  {
    Bytes out(kSize);
    for (unsigned i = 0; i < vcpu::kGprCount; ++i)
      put_le64(out.data() + 8 * i, saved.gprs[i]);
    auto tail = out.data() + 8 * vcpu::kGprCount;
    put_le64(tail, saved.rip);
    put_le64(tail + 8, saved.rsp);
    put_le64(tail + 16, static_cast<uint64_t>(exit_reason));
    put_le64(tail + 24, 1);
    return out;
  }

  std::optional<Ssa> Ssa::parse(ByteView bytes)
  {
    if (bytes.size() < kSize)
      return std::nullopt;
    auto tail = bytes.data() + 8 * vcpu::kGprCount;
    if (get_le64(tail + 24) != 1)
      return std::nullopt;
    auto reason = get_le64(tail + 16);
    if (reason > static_cast<uint64_t>(vcpu::Exception::GeneralProtection))
      return std::nullopt;
    Ssa s;
    for (unsigned i = 0; i < vcpu::kGprCount; ++i)
      s.saved.gprs[i] = get_le64(bytes.data() + 8 * i);
    s.saved.rip = get_le64(tail);
    s.saved.rsp = get_le64(tail + 8);
    s.exit_reason = static_cast<vcpu::Exception>(reason);
    return s;
  }

  Bytes KeyRequest::serialize() const
  {
    Bytes out(kSize, 0);
    out[0] = static_cast<uint8_t>(static_cast<uint16_t>(key_name));
    out[1] = static_cast<uint8_t>(static_cast<uint16_t>(key_name) >> 8);
    out[2] = static_cast<uint8_t>(policy);
    out[3] = static_cast<uint8_t>(policy >> 8);
    std::memcpy(out.data() + 16, key_id.data(), key_id.size());
    return out;
  }

  KeyRequest KeyRequest::parse(ByteView bytes)
  {
    if (bytes.size() != kSize)
      throw Error(ErrorCode::DecodeError, "key request must be 32 bytes");
    KeyRequest r;
    auto name = static_cast<uint16_t>(bytes[0] | (bytes[1] << 8));
    if (name != static_cast<uint16_t>(attest::KeyName::SealKey) &&
        name != static_cast<uint16_t>(attest::KeyName::ReportKey))
      throw Error(ErrorCode::DecodeError, "unknown key name");
    r.key_name = static_cast<attest::KeyName>(name);
    r.policy = static_cast<uint16_t>(bytes[2] | (bytes[3] << 8));
    std::memcpy(r.key_id.data(), bytes.data() + 16, r.key_id.size());
    return r;
  }

  // ----- Monitor -----

  Monitor::Monitor(Platform platform, const crypto::Drbg& drbg, MonitorConfig config) :
    p_(platform),
    config_(config),
    aik_(aik_seed(drbg)),
    requester_(
      kVmpl0,
      read_key(platform.memory, monitor_gpa(platform.memory.layout(), kSecretsPage), 0))
  {
    const auto& layout = p_.memory.layout();
    if (layout.monitor.size() < kMinMonitorPages || layout.vmpl1.size() <= kGuestReservedPages)
      throw Error(ErrorCode::SizeError, "layout too small for the monitor's fixed pages");
    if (config_.step_budget == 0)
      throw Error(ErrorCode::PreconditionError, "step budget must be positive");

    page_table_ = p_.tables.create({mem::ContextKind::MonitorKernel, 0});
    p_.tables.get(page_table_)
      .map(
        page_of(kTrampolineGva),
        {monitor_gpa(layout, kTrampolinePage), false, false, true, true});

    auto& v0 = p_.cpu.vmsa(kVmpl0);
    v0.mode = Mode::Kernel;
    v0.cr3 = page_table_;
    v0.lstar = kTrampolineGva;
    v0.cpu = {};

    epcm_.resize(layout.epc.size());
    for (uint64_t i = 0; i < layout.epc.size(); ++i)
      epcm_[i].gpa = Gpa{layout.epc.begin + i};
    for (uint64_t g = layout.epc.end; g > layout.epc.begin; --g)
      free_epc_.push_back(Gpa{g - 1});

    binding_report_ =
      requester_.snp_report_req(p_.sp, p_.relay, kVmpl0, aik_.binding_report_data());
    guest_key_ = requester_.msg_key_req(p_.sp, p_.relay, kVmpl0);

    auto vmpck1 = read_key(p_.memory, monitor_gpa(layout, kSecretsPage), 1);
    if (!mem::is_allowed(
          p_.memory.write(guest_gpa(layout, kGuestSecretsPage), 0, vmpck1, kVmpl0)))
      throw Error(ErrorCode::StateError, "guest secrets page is not writable");
  }

  Monitor::Enclave& Monitor::enclave(EnclaveId id)
  {
    auto it = enclaves_.find(id);
    if (it == enclaves_.end())
      throw Error(ErrorCode::UnknownEnclave, "no enclave " + std::to_string(id.value));
    return it->second;
  }

  const Monitor::Enclave& Monitor::enclave(EnclaveId id) const
  {
    auto it = enclaves_.find(id);
    if (it == enclaves_.end())
      throw Error(ErrorCode::UnknownEnclave, "no enclave " + std::to_string(id.value));
    return it->second;
  }

  Tcs& Monitor::tcs_mut(Enclave& e, uint64_t tcs_gva)
  {
    auto it = e.tcs.find(tcs_gva);
    if (it == e.tcs.end())
      throw Error(ErrorCode::NoTcsError, "no TCS at that address");
    return it->second;
  }

  const Secs& Monitor::secs(EnclaveId id) const
  {
    return enclave(id).secs;
  }

  const Tcs& Monitor::tcs(EnclaveId id, uint64_t tcs_gva) const
  {
    const auto& e = enclave(id);
    auto it = e.tcs.find(tcs_gva);
    if (it == e.tcs.end())
      throw Error(ErrorCode::NoTcsError, "no TCS at that address");
    return it->second;
  }

  std::vector<EnclaveId> Monitor::enclaves() const
  {
    std::vector<EnclaveId> out;
    for (const auto& [id, _] : enclaves_)
      out.push_back(id);
    return out;
  }

  uint64_t Monitor::epc_owned_count() const
  {
    return std::count_if(
      epcm_.begin(), epcm_.end(), [](const EpcmEntry& e) { return e.valid; });
  }

  std::vector<Gpa> Monitor::enclave_pages(EnclaveId id) const
  {
    std::vector<Gpa> out;
    for (const auto& e : epcm_)
      if (e.valid && e.owner == id)
        out.push_back(e.gpa);
    return out;
  }

  std::optional<attest::NestedBundle> Monitor::last_bundle(EnclaveId id) const
  {
    return enclave(id).last_bundle;
  }

  Gpa Monitor::alloc_epc()
  {
    if (free_epc_.empty())
      throw Error(ErrorCode::EpcExhausted, "no free EPC pages");
    auto g = free_epc_.back();
    free_epc_.pop_back();
    return g;
  }

  EpcmEntry& Monitor::epcm_at(Gpa gpa)
  {
    return epcm_.at(gpa.value - p_.memory.layout().epc.begin);
  }

  bool Monitor::enclave_table_conforms(EnclaveId id) const
  {
    const auto& e = enclave(id);
    if (e.secs.state == SecsState::Removed)
      return !p_.tables.contains(e.secs.page_table);
    const auto& pt = p_.tables.get(e.secs.page_table);
    const auto& layout = p_.memory.layout();
    const auto& pb = pt.parameter_buffer();
    for (const auto& [vpn, pte] : pt.mappings())
    {
      if (vpn == page_of(kTrampolineGva))
      {
        if (pte.gpa != monitor_gpa(layout, kTrampolinePage) || pte.user || pte.writable)
          return false;
        continue;
      }
      if (pb && vpn >= pb->vpn && vpn < pb->vpn + pb->pages)
      {
        if (pte.gpa.value != pb->gpa.value + (vpn - pb->vpn) || pte.executable)
          return false;
        continue;
      }
      if (!layout.epc.contains(pte.gpa))
        return false;
      const auto& entry = epcm_[pte.gpa.value - layout.epc.begin];
      if (!entry.valid || entry.owner != id ||
          entry.enclave_offset != vpn * kPageSize - e.secs.base_gva)
        return false;
    }
    return true;
  }

  // ----- build leaves -----

  EnclaveId Monitor::ecreate(const EcreateParams& p)
  {
    if (
      p.size_bytes < kPageSize || !std::has_single_bit(p.size_bytes) ||
      p.base_gva % p.size_bytes != 0)
      throw Error(
        ErrorCode::AlignmentError, "enclave size must be a power of two and base aligned to it");
    if (p.base_gva + p.size_bytes < p.base_gva ||
        p.base_gva + p.size_bytes > kTrampolineGva)
      throw Error(ErrorCode::RangeError, "enclave range is empty or overlaps the kernel half");
    if (p.ssa_frame_size == 0)
      throw Error(ErrorCode::RangeError, "SSA frame size must be at least one page");

    auto secs_page = alloc_epc();
    EnclaveId id{next_enclave_++};
    auto& entry = epcm_at(secs_page);
    entry = {secs_page, id, PageType::Secs, {}, kNoOffset, true};

    Enclave e;
    e.secs.id = id;
    e.secs.base_gva = p.base_gva;
    e.secs.size_bytes = p.size_bytes;
    e.secs.ssa_frame_size = p.ssa_frame_size;
    e.secs.attributes = p.attributes;
    e.secs.secs_page = secs_page;
    e.secs.page_table = p_.tables.create({mem::ContextKind::EnclaveUser, id.value});
    p_.tables.get(e.secs.page_table)
      .map(
        page_of(kTrampolineGva),
        {monitor_gpa(p_.memory.layout(), kTrampolinePage), false, false, true, true});
    e.secs.measurement_log.ecreate(p.ssa_frame_size, p.size_bytes);
    enclaves_.emplace(id, std::move(e));
    return id;
  }

  void Monitor::map_parameter_buffer(
    EnclaveId id, PageTableId app_table, uint64_t vpn, Gpa gpa, uint64_t pages)
  {
    auto& e = enclave(id);
    if (e.secs.state == SecsState::Removed)
      throw Error(ErrorCode::StateError, "enclave has been removed");
    if (!p_.tables.contains(app_table) ||
        p_.tables.get(app_table).owner().kind != mem::ContextKind::AppUser)
      throw Error(ErrorCode::LayoutError, "parameter buffer peer must be an App page table");
    if (pages == 0)
      throw Error(ErrorCode::LayoutError, "parameter buffer needs at least one page");
    uint64_t lo = e.secs.base_gva / kPageSize;
    uint64_t hi = lo + e.secs.size_bytes / kPageSize;
    if (vpn < hi && vpn + pages > lo)
      throw Error(ErrorCode::LayoutError, "parameter buffer overlaps the enclave range");
    mem::map_shared_parameter_buffer(
      p_.tables.get(e.secs.page_table),
      p_.tables.get(app_table),
      p_.memory.layout(),
      vpn,
      gpa,
      pages);
  }

  void Monitor::eadd(EnclaveId id, Gpa src, uint64_t dest_gva, PageType type, PagePerms perms)
  {
    auto& e = enclave(id);
    if (e.secs.state != SecsState::Uninitialized)
      throw Error(ErrorCode::StateError, "EADD after EINIT");
    if (type == PageType::Secs)
      throw Error(ErrorCode::LayoutError, "EADD cannot add a SECS page");
    if (offset_in_page(dest_gva) != 0)
      throw Error(ErrorCode::AlignmentError, "EADD target must be page aligned");
    if (dest_gva < e.secs.base_gva || dest_gva - e.secs.base_gva >= e.secs.size_bytes)
      throw Error(ErrorCode::RangeError, "EADD target outside the enclave range");
    auto& pt = p_.tables.get(e.secs.page_table);
    if (pt.lookup(page_of(dest_gva)))
      throw Error(ErrorCode::AlreadyMapped, "enclave page already added");

    // The guest names the source page, so read it with the guest's rights.
    Bytes content(kPageSize);
    if (!mem::is_allowed(p_.memory.read(src, 0, content, kVmpl1)))
      throw Error(ErrorCode::LayoutError, "EADD source is not guest memory");

    uint64_t offset = dest_gva - e.secs.base_gva;
    std::optional<Tcs> tcs;
    if (type == PageType::Tcs)
    {
      Tcs t;
      t.gva = dest_gva;
      t.entry_point = e.secs.base_gva + get_le64(content.data());
      t.ssa_base = e.secs.base_gva + get_le64(content.data() + 8);
      t.nssa = get_le64(content.data() + 16);
      if (t.nssa == 0 || get_le64(content.data()) >= e.secs.size_bytes ||
          offset_in_page(t.ssa_base) != 0 || get_le64(content.data() + 8) >= e.secs.size_bytes)
        throw Error(ErrorCode::LayoutError, "malformed TCS");
      tcs = t;
    }

    auto gpa = alloc_epc();
    p_.memory.write(gpa, 0, content, kVmpl0);
    epcm_at(gpa) = {gpa, id, type, perms, offset, true};
    bool user = type == PageType::Reg;
    pt.map(page_of(dest_gva), {gpa, user, user && perms.write, user && perms.execute, false});
    e.secs.measurement_log.eadd(offset, type, perms);
    if (tcs)
      e.tcs.emplace(dest_gva, *tcs);
  }

  void Monitor::eextend(EnclaveId id, uint64_t gva)
  {
    auto& e = enclave(id);
    if (e.secs.state != SecsState::Uninitialized)
      throw Error(ErrorCode::StateError, "EEXTEND after EINIT");
    if (gva % kExtendChunk != 0)
      throw Error(ErrorCode::AlignmentError, "EEXTEND address must be 256-byte aligned");
    const auto* pte = p_.tables.get(e.secs.page_table).lookup(page_of(gva));
    if (!pte || !p_.memory.layout().epc.contains(pte->gpa) || !epcm_at(pte->gpa).valid ||
        epcm_at(pte->gpa).owner != id)
      throw Error(ErrorCode::UnmappedError, "EEXTEND of a page that was not added");
    Bytes chunk(kExtendChunk);
    p_.memory.read(pte->gpa, offset_in_page(gva), chunk, kVmpl0);
    e.secs.measurement_log.eextend(gva - e.secs.base_gva, chunk);
  }

  Digest32 Monitor::einit(EnclaveId id)
  {
    auto& e = enclave(id);
    if (e.secs.state != SecsState::Uninitialized)
      throw Error(ErrorCode::StateError, "enclave already initialized or removed");
    if (e.tcs.empty())
      throw Error(ErrorCode::NoTcsError, "EINIT without a TCS");
    const auto& pt = p_.tables.get(e.secs.page_table);
    if (!pt.parameter_buffer())
      throw Error(ErrorCode::StateError, "EINIT before the parameter buffer is mapped");
    for (const auto& [gva, t] : e.tcs)
    {
      uint64_t pages = t.nssa * e.secs.ssa_frame_size;
      for (uint64_t i = 0; i < pages; ++i)
      {
        uint64_t page_gva = t.ssa_base + i * kPageSize;
        const auto* pte = pt.lookup(page_of(page_gva));
        if (!pte || !p_.memory.layout().epc.contains(pte->gpa) ||
            epcm_at(pte->gpa).page_type != PageType::Reg || !epcm_at(pte->gpa).perms.write)
          throw Error(ErrorCode::LayoutError, "SSA frames must be writable REG pages");
      }
    }
    e.secs.measurement_log.freeze();
    e.secs.mrenclave = e.secs.measurement_log.digest();
    e.secs.state = SecsState::Initialized;
    return *e.secs.mrenclave;
  }

  void Monitor::eremove(EnclaveId id)
  {
    auto& e = enclave(id);
    if (e.secs.state == SecsState::Removed)
      throw Error(ErrorCode::StateError, "enclave already removed");
    for (const auto& [_, t] : e.tcs)
      if (t.busy)
        throw Error(ErrorCode::ThreadsActive, "a thread is inside the enclave");
    if (current_ && current_->first == id)
      throw Error(ErrorCode::ThreadsActive, "a thread is inside the enclave");
    for (auto& entry : epcm_)
    {
      if (!entry.valid || entry.owner != id)
        continue;
      p_.memory.zero_page(*p_.memory.spa_for(entry.gpa));
      entry = {entry.gpa, {}, PageType::Reg, {}, 0, false};
      free_epc_.push_back(entry.gpa);
    }
    p_.tables.destroy(e.secs.page_table);
    e.tcs.clear();
    e.last_bundle.reset();
    e.secs.state = SecsState::Removed;
  }

  attest::EnclaveReport Monitor::ereport(EnclaveId id, const attest::ReportData& report_data)
  {
    auto& e = enclave(id);
    if (e.secs.state != SecsState::Initialized)
      throw Error(ErrorCode::StateError, "EREPORT needs an initialized enclave");
    attest::EnclaveReport body{*e.secs.mrenclave, e.secs.attributes, report_data};
    e.last_bundle = attest::build_bundle(aik_, binding_report_, body);
    return body;
  }

  attest::Key32 Monitor::egetkey(EnclaveId id, const KeyRequest& req)
  {
    const auto& e = enclave(id);
    if (e.secs.state != SecsState::Initialized)
      throw Error(ErrorCode::StateError, "EGETKEY needs an initialized enclave");
    if (req.policy != KeyRequest::kPolicyMrenclave)
      throw Error(ErrorCode::RangeError, "only MRENCLAVE key policy is supported");
    return attest::derive_enclave_key(guest_key_, req.key_name, *e.secs.mrenclave, req.key_id);
  }

  // ----- memory helpers -----

  std::optional<vcpu::Exception> Monitor::access(
    const mem::PageTable& pt, uint64_t gva, std::span<uint8_t> buf, Access acc, Mode mode) const
  {
    size_t done = 0;
    while (done < buf.size())
    {
      uint64_t a = gva + done;
      size_t n = std::min<size_t>(buf.size() - done, kPageSize - offset_in_page(a));
      auto t = mem::translate(pt, p_.memory.rmp(), a, acc, mode, kVmpl0);
      if (!std::holds_alternative<mem::Translated>(t))
        return exception_for(t);
      auto gpa = std::get<mem::Translated>(t).gpa;
      auto chunk = buf.subspan(done, n);
      auto r = acc == Access::Write ?
        p_.memory.write(gpa, offset_in_page(a), chunk, kVmpl0) :
        p_.memory.read(gpa, offset_in_page(a), chunk, kVmpl0);
      if (!mem::is_allowed(r))
        return vcpu::Exception::RmpFault;
      done += n;
    }
    return std::nullopt;
  }

  bool Monitor::read_enclave(const Enclave& e, uint64_t gva, std::span<uint8_t> out) const
  {
    return !access(p_.tables.get(e.secs.page_table), gva, out, Access::Read, Mode::User);
  }

  bool Monitor::write_enclave(const Enclave& e, uint64_t gva, ByteView data)
  {
    Bytes copy(data.begin(), data.end());
    return !access(p_.tables.get(e.secs.page_table), gva, copy, Access::Write, Mode::User);
  }

  std::optional<vcpu::Exception> Monitor::kernel_access(
    const Enclave& e, uint64_t gva, std::span<uint8_t> buf, bool write)
  {
    return access(
      p_.tables.get(e.secs.page_table),
      gva,
      buf,
      write ? Access::Write : Access::Read,
      Mode::Kernel);
  }

  uint64_t Monitor::read_param_word(const Enclave& e, uint64_t offset) const
  {
    const auto& pb = p_.tables.get(e.secs.page_table).parameter_buffer();
    if (!pb)
      return 0;
    std::array<uint8_t, 8> w{};
    if (!read_enclave(e, pb->vpn * kPageSize + offset, w))
      return 0;
    return get_le64(w.data());
  }

  void Monitor::write_param_word(const Enclave& e, uint64_t offset, uint64_t v)
  {
    const auto& pb = p_.tables.get(e.secs.page_table).parameter_buffer();
    if (!pb)
      return;
    std::array<uint8_t, 8> w{};
    put_le64(w.data(), v);
    write_enclave(e, pb->vpn * kPageSize + offset, w);
  }

  std::variant<evm::Program, vcpu::Exception> Monitor::fetch_program(
    const Enclave& e, const Tcs& t)
  {
    const auto& pt = p_.tables.get(e.secs.page_table);
    std::array<uint8_t, evm::kImageHeaderSize> header{};
    if (auto f = access(pt, t.entry_point, header, Access::Execute, Mode::User))
      return *f;
    uint64_t count = get_le64(header.data() + 8);
    if (count > e.secs.size_bytes / evm::kInstrSize)
      return vcpu::Exception::InvalidOpcode;
    Bytes image(evm::kImageHeaderSize + count * evm::kInstrSize);
    if (auto f = access(pt, t.entry_point, image, Access::Execute, Mode::User))
      return *f;
    try
    {
      return evm::decode(image);
    }
    catch (const Error&)
    {
      return vcpu::Exception::InvalidOpcode;
    }
  }

  void Monitor::scrub_vmpl0()
  {
    auto& v0 = p_.cpu.vmsa(kVmpl0);
    v0.cpu = {};
    v0.mode = Mode::Kernel;
    v0.cr3 = page_table_;
  }

  void Monitor::release_thread()
  {
    if (!current_)
      return;
    auto it = enclaves_.find(current_->first);
    if (it != enclaves_.end())
    {
      auto t = it->second.tcs.find(current_->second);
      if (t != it->second.tcs.end())
        t->second.busy = false;
    }
    current_.reset();
    scrub_vmpl0();
  }

  // ----- entry and exit -----

  ExitEvent Monitor::eenter(EnclaveId id, uint64_t tcs_gva, uint64_t aep)
  {
    auto& e = enclave(id);
    if (e.secs.state != SecsState::Initialized)
      throw Error(ErrorCode::StateError, "EENTER needs an initialized enclave");
    auto& t = tcs_mut(e, tcs_gva);
    if (t.busy)
      throw Error(ErrorCode::TcsBusy, "TCS is busy");
    if (current_)
      throw Error(ErrorCode::StateError, "another thread is inside an enclave");

    t.busy = true;
    t.aep = aep;
    current_ = {id, tcs_gva};
    auto& v0 = p_.cpu.vmsa(kVmpl0);
    v0.mode = Mode::User;
    v0.cr3 = e.secs.page_table;

    auto flags = read_param_word(e, param::kFlagsOffset);
    if ((flags & param::kOcallReturn) != 0 && t.ocall_continuation)
    {
      v0.cpu = *t.ocall_continuation;
      v0.cpu.gprs[0] = read_param_word(e, param::kValueOffset);
      t.ocall_continuation.reset();
      write_param_word(e, param::kFlagsOffset, flags & ~(param::kOcall | param::kOcallReturn));
    }
    else
    {
      t.ocall_continuation.reset();
      auto prog = fetch_program(e, t);
      if (auto* ex = std::get_if<vcpu::Exception>(&prog))
        return aex(*ex);
      v0.cpu = {};
      v0.cpu.rip = std::get<evm::Program>(prog).entry;
      const auto& pb = p_.tables.get(e.secs.page_table).parameter_buffer();
      v0.cpu.gprs[0] = pb ? pb->vpn * kPageSize : 0;
      v0.cpu.gprs[1] = t.current_ssa_index;
    }
    p_.cpu.ledger().record({vcpu::EventKind::SysretExit});
    return run_enclave(config_.step_budget);
  }

  ExitEvent Monitor::eresume(EnclaveId id, uint64_t tcs_gva)
  {
    auto& e = enclave(id);
    if (e.secs.state != SecsState::Initialized)
      throw Error(ErrorCode::StateError, "ERESUME needs an initialized enclave");
    auto& t = tcs_mut(e, tcs_gva);
    if (t.busy)
      throw Error(ErrorCode::TcsBusy, "TCS is busy");
    if (t.current_ssa_index == 0)
      throw Error(ErrorCode::NoPendingSsa, "no saved state to resume");
    if (current_)
      throw Error(ErrorCode::StateError, "another thread is inside an enclave");

    uint64_t frame =
      t.ssa_base + (t.current_ssa_index - 1) * e.secs.ssa_frame_size * kPageSize;
    Bytes raw(Ssa::kSize);
    if (kernel_access(e, frame, raw, false))
      throw Error(ErrorCode::StateError, "SSA frame unreadable");
    auto ssa = Ssa::parse(raw);
    if (!ssa)
      throw Error(ErrorCode::StateError, "SSA frame does not hold saved state");
    Bytes zeros(Ssa::kSize, 0);
    kernel_access(e, frame, zeros, true);

    t.current_ssa_index--;
    t.busy = true;
    current_ = {id, tcs_gva};
    auto& v0 = p_.cpu.vmsa(kVmpl0);
    v0.cpu = ssa->saved;
    v0.mode = Mode::User;
    v0.cr3 = e.secs.page_table;
    if (on_eresume)
      on_eresume(v0.cpu);
    p_.cpu.ledger().record({vcpu::EventKind::SysretExit});
    return run_enclave(config_.step_budget);
  }

  ExitEvent Monitor::run_enclave(uint64_t budget)
  {
    auto& v0 = p_.cpu.vmsa(kVmpl0);
    auto& e = enclave(current_->first);
    auto prog = fetch_program(e, e.tcs.at(current_->second));
    if (auto* ex = std::get_if<vcpu::Exception>(&prog))
      return aex(*ex);
    const auto& program = std::get<evm::Program>(prog);

    while (true)
    {
      if (budget == 0)
        return aex(vcpu::Exception::Timer);
      evm::AddressSpace as{p_.tables.get(e.secs.page_table), p_.memory, Mode::User, kVmpl0};
      auto r = evm::run(program, v0.cpu, as, budget);
      budget -= std::min(budget, r.steps);
      switch (r.kind)
      {
        case evm::RunResult::Kind::Exited:
        case evm::RunResult::Kind::SyscallRequested:
        {
          p_.cpu.ledger().record({vcpu::EventKind::SyscallEntry});
          auto out = syscall_dispatch(
            {mem::ContextKind::EnclaveUser, current_->first.value},
            v0.lstar,
            r.syscall->leaf,
            r.syscall->args);
          if (auto* exit = std::get_if<ExitEvent>(&out))
            return *exit;
          if (auto* ex = std::get_if<vcpu::Exception>(&out))
          {
            // A refused syscall faults on the instruction itself.
            v0.cpu.rip--;
            return aex(*ex);
          }
          v0.cpu.gprs[0] = std::get<uint64_t>(out);
          p_.cpu.ledger().record({vcpu::EventKind::SysretExit});
          break;
        }
        case evm::RunResult::Kind::Trapped:
          return aex(r.trap->kind);
        case evm::RunResult::Kind::Halted:
          return aex(vcpu::Exception::GeneralProtection);
        case evm::RunResult::Kind::BudgetExhausted:
          return aex(vcpu::Exception::Timer);
      }
    }
  }

  ExitEvent Monitor::eexit(uint64_t return_value)
  {
    if (!current_)
      throw Error(ErrorCode::StateError, "EEXIT outside an enclave");
    auto& e = enclave(current_->first);
    auto& t = tcs_mut(e, current_->second);
    ExitEvent out;
    out.kind = ExitEvent::Kind::Eexit;
    out.value = return_value;
    if ((read_param_word(e, param::kFlagsOffset) & param::kOcall) != 0)
    {
      t.ocall_continuation = p_.cpu.vmsa(kVmpl0).cpu;
      out.ocall = true;
    }
    // TCS is released here, before the monitor asks for the switch back.
    release_thread();
    return out;
  }

  ExitEvent Monitor::aex(vcpu::Exception ex)
  {
    if (!current_)
      throw Error(ErrorCode::StateError, "AEX outside an enclave");
    auto route = p_.cpu.deliver_exception(mem::ContextKind::EnclaveUser, ex);
    vcpu::Vcpu::HandlerScope scope(p_.cpu, route);

    auto& e = enclave(current_->first);
    auto& t = tcs_mut(e, current_->second);
    auto& v0 = p_.cpu.vmsa(kVmpl0);
    if (on_aex)
      on_aex(v0.cpu);

    ExitEvent out;
    out.aep = t.aep;
    out.exception = ex;
    if (t.current_ssa_index >= t.nssa)
    {
      release_thread();
      out.kind = ExitEvent::Kind::Killed;
      out.error = ErrorCode::SsaOverflow;
      return out;
    }

    auto frame = Ssa{v0.cpu, ex}.serialize();
    uint64_t gva = t.ssa_base + t.current_ssa_index * e.secs.ssa_frame_size * kPageSize;
    if (auto f = kernel_access(e, gva, frame, true))
      p_.cpu.deliver_exception(mem::ContextKind::MonitorKernel, *f);

    t.current_ssa_index++;
    p_.cpu.ledger().record({vcpu::EventKind::Aex});
    release_thread();
    out.kind = ExitEvent::Kind::Aex;
    return out;
  }

  uint64_t Monitor::do_ereport(Enclave& e, const std::array<uint64_t, 3>& args)
  {
    attest::ReportData rd{};
    if (!read_enclave(e, args[0], rd))
      return status::kBadBuffer;
    auto body = ereport(e.secs.id, rd);
    auto out = body.serialize();
    const auto& sig = e.last_bundle->enclave_sig;
    out.insert(out.end(), sig.begin(), sig.end());
    return write_enclave(e, args[1], out) ? status::kOk : status::kBadBuffer;
  }

  uint64_t Monitor::do_egetkey(Enclave& e, const std::array<uint64_t, 3>& args)
  {
    std::array<uint8_t, KeyRequest::kSize> raw{};
    if (!read_enclave(e, args[0], raw))
      return status::kBadBuffer;
    try
    {
      auto key = egetkey(e.secs.id, KeyRequest::parse(raw));
      return write_enclave(e, args[1], key) ? status::kOk : status::kBadBuffer;
    }
    catch (const Error&)
    {
      return status::kBadRequest;
    }
  }

  DispatchOutcome Monitor::syscall_dispatch(
    const mem::ContextTag& caller,
    uint64_t entry_address,
    evm::SyscallLeaf leaf,
    const std::array<uint64_t, 3>& args)
  {
    if (caller.kind != mem::ContextKind::EnclaveUser || !current_ ||
        current_->first.value != caller.id)
      throw Error(ErrorCode::BadEntry, "enclave syscall from a non-enclave context");
    if (entry_address != p_.cpu.vmsa(kVmpl0).lstar || entry_address != kTrampolineGva)
      return vcpu::Exception::GeneralProtection;
    auto& e = enclave(current_->first);
    switch (leaf)
    {
      case evm::SyscallLeaf::Eexit:
        return eexit(args[0]);
      case evm::SyscallLeaf::Ereport:
        return do_ereport(e, args);
      case evm::SyscallLeaf::Egetkey:
        return do_egetkey(e, args);
      default:
        return vcpu::Exception::GeneralProtection;
    }
  }

  // ----- driver requests -----

  MonitorReply Monitor::reply_for(const ExitEvent& e) const
  {
    MonitorReply r;
    switch (e.kind)
    {
      case ExitEvent::Kind::Eexit:
        r.kind = MonitorReply::Kind::EexitReturn;
        r.value = e.value;
        r.ocall = e.ocall ? 1 : 0;
        break;
      case ExitEvent::Kind::Aex:
        r.kind = MonitorReply::Kind::AexDelivery;
        r.aep = e.aep;
        r.exception = static_cast<uint64_t>(e.exception);
        break;
      case ExitEvent::Kind::Killed:
        r.kind = MonitorReply::Kind::Done;
        r.status = 1 + static_cast<uint64_t>(e.error);
        r.exception = static_cast<uint64_t>(e.exception);
        break;
    }
    return r;
  }

  MonitorReply Monitor::dispatch_request(const DriverRequest& r)
  {
    const auto& a = r.args;
    MonitorReply reply;
    switch (r.leaf)
    {
      case DriverLeaf::Ecreate:
      {
        EcreateParams p{a[0], a[1], static_cast<uint32_t>(a[2]), a[3]};
        if (a[2] > UINT32_MAX)
          throw Error(ErrorCode::RangeError, "SSA frame size too large");
        auto id = ecreate(p);
        if (a[7] != 0)
        {
          try
          {
            map_parameter_buffer(id, PageTableId{a[4]}, a[5], Gpa{a[6]}, a[7]);
          }
          catch (const Error&)
          {
            eremove(id);
            throw;
          }
        }
        reply.value = id.value;
        return reply;
      }
      case DriverLeaf::Eadd:
      {
        if (a[3] > static_cast<uint64_t>(PageType::Reg) || a[4] > 7)
          throw Error(ErrorCode::RangeError, "bad SECINFO");
        eadd(
          EnclaveId{a[0]},
          Gpa{a[1]},
          a[2],
          static_cast<PageType>(a[3]),
          PagePerms::from_bits(static_cast<uint8_t>(a[4])));
        return reply;
      }
      case DriverLeaf::Eextend:
        eextend(EnclaveId{a[0]}, a[1]);
        return reply;
      case DriverLeaf::Einit:
        reply.digest = einit(EnclaveId{a[0]});
        return reply;
      case DriverLeaf::Eenter:
        return reply_for(eenter(EnclaveId{a[0]}, a[1], a[2]));
      case DriverLeaf::Eresume:
        return reply_for(eresume(EnclaveId{a[0]}, a[1]));
      case DriverLeaf::Eremove:
        eremove(EnclaveId{a[0]});
        return reply;
      default:
        throw Error(ErrorCode::InvalidLeaf, "not a driver-visible leaf");
    }
  }

  vcpu::SwitchResult Monitor::handle_driver_request()
  {
    if (p_.cpu.current() != kVmpl0)
      throw Error(ErrorCode::StateError, "monitor entered while VMPL0 is not running");
    auto channel = guest_gpa(p_.memory.layout(), kDriverChannelPage);
    Bytes page(kPageSize);
    p_.memory.read(channel, 0, page, kVmpl0);

    MonitorReply reply;
    try
    {
      reply = dispatch_request(decode_request(page));
    }
    catch (const Error& err)
    {
      release_thread();
      reply = {};
      reply.status = 1 + static_cast<uint64_t>(err.code());
    }
    p_.memory.write(channel, kReplyOffset, encode_reply(reply), kVmpl0);
    scrub_vmpl0();
    return p_.cpu.vmgexit_run_vmpl(kVmpl1);
  }
}
