// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/cli.h"

#include "json.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace nsgx::cli
{
  using nlohmann::json;

  namespace
  {
    [[noreturn]] void fail(const std::string& path, const std::string& msg)
    {
      throw Error(ErrorCode::ParseError, path + ": " + msg);
    }

    json parse_json(std::string_view text, const std::string& what)
    {
      try
      {
        return json::parse(text);
      }
      catch (const json::parse_error& e)
      {
        // nlohmann reports a 1-based byte offset of the offending byte.
        size_t line = 1, col = 1;
        size_t end = std::min<size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        for (size_t i = 0; i < end; ++i)
        {
          if (text[i] == '\n')
          {
            line++;
            col = 1;
          }
          else
            col++;
        }
        throw Error(
          ErrorCode::ParseError,
          what + ":" + std::to_string(line) + ":" + std::to_string(col) + ": malformed JSON");
      }
    }

    std::string join(const std::string& path, const std::string& key)
    {
      return path.empty() ? key : path + "." + key;
    }

    std::string index(const std::string& path, size_t i)
    {
      return path + "[" + std::to_string(i) + "]";
    }

    const json& require(const json& obj, const std::string& path, const char* key)
    {
      if (!obj.is_object())
        fail(path.empty() ? "<root>" : path, "expected an object");
      auto it = obj.find(key);
      if (it == obj.end())
        fail(join(path, key), "missing");
      return *it;
    }

    const json* optional_field(const json& obj, const char* key)
    {
      auto it = obj.find(key);
      return it == obj.end() || it->is_null() ? nullptr : &*it;
    }

    uint64_t as_u64(const json& j, const std::string& path)
    {
      if (j.is_number_unsigned())
        return j.get<uint64_t>();
      if (j.is_number_integer())
      {
        auto v = j.get<int64_t>();
        if (v < 0)
          fail(path, "must not be negative");
        return static_cast<uint64_t>(v);
      }
      if (j.is_string())
      {
        auto s = j.get<std::string>();
        int base = 10;
        std::string digits = s;
        if (s.starts_with("0x") || s.starts_with("0X"))
        {
          base = 16;
          digits = s.substr(2);
        }
        uint64_t v = 0;
        auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v, base);
        if (digits.empty() || ec != std::errc() || ptr != digits.data() + digits.size())
          fail(path, "not a number: '" + s + "'");
        return v;
      }
      fail(path, "expected a number");
    }

    std::string as_string(const json& j, const std::string& path)
    {
      if (!j.is_string())
        fail(path, "expected a string");
      return j.get<std::string>();
    }

    bool as_bool(const json& j, const std::string& path)
    {
      if (!j.is_boolean())
        fail(path, "expected true or false");
      return j.get<bool>();
    }

    uint64_t u64_or(const json& obj, const std::string& path, const char* key, uint64_t dflt)
    {
      auto* f = optional_field(obj, key);
      return f ? as_u64(*f, join(path, key)) : dflt;
    }

    evm::Program assemble_at(const std::string& text, const std::string& path)
    {
      try
      {
        return evm::assemble(text);
      }
      catch (const Error& e)
      {
        fail(path, e.what());
      }
    }

    /// Program text, either inline or "@file" relative to `dir`.
    std::string program_text(const json& j, const std::string& path, const std::filesystem::path& dir)
    {
      if (j.is_array())
      {
        std::string out;
        for (size_t i = 0; i < j.size(); ++i)
          out += as_string(j[i], index(path, i)) + "\n";
        return out;
      }
      auto s = as_string(j, path);
      if (s.starts_with("@"))
      {
        try
        {
          return read_file(dir / s.substr(1));
        }
        catch (const Error& e)
        {
          fail(path, e.what());
        }
      }
      return s;
    }

    Bytes page_content(const json& j, const std::string& path, const std::filesystem::path& dir)
    {
      auto s = as_string(j, path);
      Bytes out;
      if (s.starts_with("@"))
      {
        std::string data;
        try
        {
          data = read_file(dir / s.substr(1));
        }
        catch (const Error& e)
        {
          fail(path, e.what());
        }
        out.assign(data.begin(), data.end());
      }
      else
      {
        try
        {
          out = from_hex(s);
        }
        catch (const Error& e)
        {
          fail(path, e.what());
        }
      }
      if (out.size() > kPageSize)
        fail(path, "content larger than a page");
      return out;
    }

    Manifest manifest_from(const json& root, const std::string& path, const std::filesystem::path& dir)
    {
      Manifest m;
      if (!root.is_object())
        fail(path.empty() ? "<root>" : path, "expected an object");
      if (auto* n = optional_field(root, "name"))
        m.name = as_string(*n, join(path, "name"));
      auto& img = m.image;
      img.base_gva = as_u64(require(root, path, "base_gva"), join(path, "base_gva"));
      img.size_bytes = as_u64(require(root, path, "size"), join(path, "size"));
      img.ssa_frame_size =
        static_cast<uint32_t>(u64_or(root, path, "ssa_frame_size", 1));
      img.attributes = u64_or(root, path, "attributes", 0);
      m.entry_point = as_u64(require(root, path, "entry_point"), join(path, "entry_point"));
      img.param_gva = u64_or(root, path, "param_gva", img.base_gva + img.size_bytes);
      img.param_pages = u64_or(root, path, "param_pages", 1);

      if (img.size_bytes == 0 || img.size_bytes % kPageSize != 0)
        fail(join(path, "size"), "must be a positive multiple of the page size");
      if (img.base_gva % kPageSize != 0)
        fail(join(path, "base_gva"), "must be page aligned");
      auto in_range = [&](uint64_t gva) {
        return gva >= img.base_gva && gva - img.base_gva < img.size_bytes;
      };
      if (!in_range(m.entry_point))
        fail(join(path, "entry_point"), "outside the enclave range");

      const auto& pages = require(root, path, "pages");
      auto pages_path = join(path, "pages");
      if (!pages.is_array() || pages.empty())
        fail(pages_path, "expected a non-empty array");
      std::set<uint64_t> seen;
      for (size_t i = 0; i < pages.size(); ++i)
      {
        auto pp = index(pages_path, i);
        const auto& pj = pages[i];
        guest::ImagePage page;
        uint64_t gva = as_u64(require(pj, pp, "gva"), join(pp, "gva"));
        if (gva % kPageSize != 0)
          fail(join(pp, "gva"), "must be page aligned");
        if (!in_range(gva))
          fail(join(pp, "gva"), "outside the enclave range");
        if (!seen.insert(gva).second)
          fail(join(pp, "gva"), "listed twice");
        page.offset = gva - img.base_gva;

        auto type = as_string(require(pj, pp, "type"), join(pp, "type"));
        if (type == "TCS")
          page.type = monitor::PageType::Tcs;
        else if (type == "REG")
          page.type = monitor::PageType::Reg;
        else
          fail(join(pp, "type"), "expected TCS or REG, got '" + type + "'");

        if (auto* perms = optional_field(pj, "perms"))
        {
          try
          {
            page.perms = monitor::parse_perms(as_string(*perms, join(pp, "perms")));
          }
          catch (const Error& e)
          {
            fail(join(pp, "perms"), e.what());
          }
        }
        else if (page.type == monitor::PageType::Reg)
          fail(join(pp, "perms"), "missing");

        if (auto* measure = optional_field(pj, "measure"))
          page.measure = as_bool(*measure, join(pp, "measure"));

        if (auto* content = optional_field(pj, "content"))
          page.content = page_content(*content, join(pp, "content"), dir);
        else if (page.type == monitor::PageType::Tcs)
        {
          uint64_t ssa = u64_or(pj, pp, "ssa_gva", gva + kPageSize);
          uint64_t nssa = u64_or(pj, pp, "nssa", 1);
          if (!in_range(ssa))
            fail(join(pp, "ssa_gva"), "outside the enclave range");
          page.content =
            monitor::make_tcs_page(m.entry_point - img.base_gva, ssa - img.base_gva, nssa);
        }
        img.pages.push_back(std::move(page));
      }

      if (auto* prog = optional_field(root, "program"))
      {
        auto pp = join(path, "program");
        auto code = evm::encode(assemble_at(program_text(*prog, pp, dir), pp));
        uint64_t off = m.entry_point - img.base_gva;
        for (size_t done = 0; done < code.size();)
        {
          uint64_t at = off + done;
          auto it = std::find_if(img.pages.begin(), img.pages.end(), [&](const auto& p) {
            return p.offset == (at & ~(kPageSize - 1));
          });
          if (it == img.pages.end() || it->type != monitor::PageType::Reg)
            fail(pp, "does not fit in the listed pages at entry_point");
          size_t in_page = offset_in_page(at);
          size_t n = std::min<size_t>(kPageSize - in_page, code.size() - done);
          it->content.resize(kPageSize, 0);
          std::copy_n(code.begin() + done, n, it->content.begin() + in_page);
          done += n;
        }
      }
      return m;
    }

    std::string hex(ByteView b)
    {
      return to_hex(b);
    }

    std::string hex64(uint64_t v)
    {
      std::ostringstream s;
      s << "0x" << std::hex << v;
      return s.str();
    }
  }

  std::string read_file(const std::filesystem::path& path)
  {
    std::ifstream in(path, std::ios::binary);
    if (!in)
      throw Error(ErrorCode::ParseError, "cannot read " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  }

  void write_file(const std::filesystem::path& path, std::string_view content)
  {
    std::ofstream out(path, std::ios::binary);
    if (!out)
      throw Error(ErrorCode::ParseError, "cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
  }

  Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir)
  {
    return manifest_from(parse_json(text, "manifest"), "", base_dir);
  }

  Manifest load_manifest(const std::filesystem::path& path)
  {
    auto text = read_file(path);
    auto m = manifest_from(parse_json(text, path.string()), "", path.parent_path());
    if (m.name.empty())
      m.name = path.stem().string();
    return m;
  }

  MeasureResult cmd_measure(const Manifest& manifest, const MachineConfig& machine)
  {
    MeasureResult r;
    r.mrenclave = guest::measure_image(manifest.image);
    mem::GuestMemory memory(
      mem::carve_layout(machine.total_pages, machine.vmpl0_pages, machine.monitor_pages));
    r.launch_digest = attest::compute_launch_digest(
      monitor::monitor_image(memory.layout()), memory.rmp().serialize_permission_map());
    return r;
  }

  Scenario parse_scenario(std::string_view text, const std::filesystem::path& base_dir)
  {
    auto root = parse_json(text, "scenario");
    if (!root.is_object())
      fail("<root>", "expected an object");
    Scenario s;
    if (auto* n = optional_field(root, "name"))
      s.name = as_string(*n, "name");
    s.machine.seed = u64_or(root, "", "seed", 0);
    if (auto* d = optional_field(root, "deterministic_crypto"))
      s.machine.deterministic_crypto = as_bool(*d, "deterministic_crypto");

    if (auto* mj = optional_field(root, "machine"))
    {
      auto& c = s.machine;
      c.total_pages = u64_or(*mj, "machine", "total_pages", c.total_pages);
      c.monitor_pages = u64_or(*mj, "machine", "monitor_pages", c.monitor_pages);
      c.vmpl0_pages = u64_or(*mj, "machine", "vmpl0_pages", c.vmpl0_pages);
      if (auto* epc = optional_field(*mj, "epc_pages"))
        c.vmpl0_pages = c.monitor_pages + as_u64(*epc, "machine.epc_pages");
      c.step_budget = u64_or(*mj, "machine", "step_budget", c.step_budget);
      if (auto* x = optional_field(*mj, "extra_vmpls"))
        c.extra_vmpls = as_bool(*x, "machine.extra_vmpls");
    }
    if (auto* p = optional_field(root, "driver_policy"))
    {
      auto name = as_string(*p, "driver_policy");
      auto dp = guest::parse_driver_policy(name);
      if (!dp)
        fail("driver_policy", "unknown policy '" + name + "'");
      s.driver_policy = *dp;
    }
    if (auto* p = optional_field(root, "hypervisor_policy"))
    {
      try
      {
        s.machine.hypervisor = vcpu::parse_hypervisor_policy(as_string(*p, "hypervisor_policy"));
      }
      catch (const Error& e)
      {
        fail("hypervisor_policy", e.what());
      }
    }
    s.machine.guest.max_resumes = u64_or(root, "", "max_resumes", s.machine.guest.max_resumes);

    if (auto* ej = optional_field(root, "enclaves"))
    {
      if (!ej->is_array())
        fail("enclaves", "expected an array");
      for (size_t i = 0; i < ej->size(); ++i)
      {
        auto ep = index("enclaves", i);
        const auto& e = (*ej)[i];
        const auto& mj = require(e, ep, "manifest");
        Manifest m;
        if (mj.is_string())
        {
          auto file = base_dir / mj.get<std::string>();
          try
          {
            m = load_manifest(file);
          }
          catch (const Error& err)
          {
            fail(join(ep, "manifest"), err.what());
          }
        }
        else
          m = manifest_from(mj, join(ep, "manifest"), base_dir);
        if (auto* n = optional_field(e, "name"))
          m.name = as_string(*n, join(ep, "name"));
        if (m.name.empty())
          m.name = "enclave" + std::to_string(i);
        for (const auto& other : s.enclaves)
          if (other.name == m.name)
            fail(join(ep, "name"), "duplicate enclave name '" + m.name + "'");
        s.enclaves.push_back(std::move(m));
      }
    }

    if (auto* aj = optional_field(root, "app"))
    {
      AppSpec app;
      app.program =
        assemble_at(program_text(require(*aj, "app", "program"), "app.program", base_dir), "app.program");
      app.budget = u64_or(*aj, "app", "budget", app.budget);
      if (auto* dj = optional_field(*aj, "data"))
      {
        if (!dj->is_array())
          fail("app.data", "expected an array");
        for (size_t i = 0; i < dj->size(); ++i)
        {
          auto dp = index("app.data", i);
          uint64_t gva = as_u64(require((*dj)[i], dp, "gva"), join(dp, "gva"));
          if (gva % kPageSize != 0)
            fail(join(dp, "gva"), "must be page aligned");
          app.data.emplace_back(gva, u64_or((*dj)[i], dp, "pages", 1));
        }
      }
      s.app = std::move(app);
    }

    if (auto* aj = optional_field(root, "attacks"))
    {
      if (!aj->is_array())
        fail("attacks", "expected an array");
      for (size_t i = 0; i < aj->size(); ++i)
      {
        auto ap = index("attacks", i);
        const auto& a = (*aj)[i];
        AttackSpec spec;
        auto kind = as_string(require(a, ap, "kind"), join(ap, "kind"));
        auto k = guest::parse_attack(kind);
        if (!k)
          fail(join(ap, "kind"), "unknown attack '" + kind + "'");
        spec.kind = *k;
        if (auto* t = optional_field(a, "target"))
          spec.target = as_string(*t, join(ap, "target"));
        if (auto* x = optional_field(a, "expect"))
        {
          auto e = as_string(*x, join(ap, "expect"));
          if (e != "blocked" && e != "no-effect")
            fail(join(ap, "expect"), "expected 'blocked' or 'no-effect'");
          spec.expect = e;
        }
        s.attacks.push_back(std::move(spec));
      }
    }

    if (auto* xj = optional_field(root, "expected"))
    {
      auto& x = s.expected;
      if (auto* mj = optional_field(*xj, "mrenclave"))
        for (auto& [k, v] : mj->items())
          x.mrenclave[k] = as_string(v, "expected.mrenclave." + k);
      if (auto* lj = optional_field(*xj, "ledger"))
        for (auto& [k, v] : lj->items())
          x.ledger[k] = as_u64(v, "expected.ledger." + k);
      if (auto* a = optional_field(*xj, "app"))
        x.app = as_string(*a, "expected.app");
      if (auto* rj = optional_field(*xj, "registers"))
        for (auto& [k, v] : rj->items())
        {
          auto rp = "expected.registers." + k;
          unsigned r = 0;
          auto [ptr, ec] = std::from_chars(k.data() + 1, k.data() + k.size(), r);
          if (k.size() < 2 || k[0] != 'r' || ec != std::errc() || ptr != k.data() + k.size() ||
              r >= vcpu::kGprCount)
            fail(rp, "expected a register name r0..r15");
          x.registers[r] = as_u64(v, rp);
        }
      if (auto* b = optional_field(*xj, "bundle"))
        x.bundle = as_string(*b, "expected.bundle");
    }
    for (const auto& [name, _] : s.expected.mrenclave)
      if (std::none_of(s.enclaves.begin(), s.enclaves.end(), [&](const auto& m) { return m.name == name; }))
        fail("expected.mrenclave." + name, "no such enclave");
    for (const auto& a : s.attacks)
      if (!a.target.empty() &&
          std::none_of(s.enclaves.begin(), s.enclaves.end(), [&](const auto& m) { return m.name == a.target; }))
        fail("attacks", "unknown target '" + a.target + "'");
    if (!s.attacks.empty() && s.enclaves.empty())
      fail("attacks", "need at least one enclave to attack");
    return s;
  }

  Scenario load_scenario(const std::filesystem::path& path)
  {
    auto s = parse_scenario(read_file(path), path.parent_path());
    if (s.name.empty())
      s.name = path.stem().string();
    return s;
  }

  RunReport cmd_run(const Scenario& scenario, const RunOptions& options)
  {
    RunReport rep;
    std::ostringstream out;
    auto check = [&](bool ok, const std::string& what) {
      out << (ok ? "ok    " : "FAIL  ") << what << "\n";
      if (!ok)
        rep.failures.push_back(what);
    };

    MachineConfig cfg = scenario.machine;
    if (options.seed)
      cfg.seed = *options.seed;
    if (options.deterministic_crypto)
      cfg.deterministic_crypto = *options.deterministic_crypto;
    auto hypervisor = cfg.hypervisor;
    cfg.hypervisor = vcpu::HypervisorPolicy::honest();
    cfg.guest.policy = guest::DriverPolicy::Honest;

    Machine m(cfg);
    auto& os = m.guest();
    out << "scenario " << scenario.name << "\n";
    out << "crypto " << (cfg.deterministic_crypto ? "deterministic" : "system") << "\n";
    out << "launch-digest " << hex(m.sp().launch_digest()) << "\n";

    std::vector<guest::LoadedEnclave> loaded;
    for (const auto& e : scenario.enclaves)
    {
      try
      {
        loaded.push_back(guest::load_enclave(os, e.image));
      }
      catch (const Error& err)
      {
        check(false, "load " + e.name + ": " + err.what());
        rep.status = exit_code::kFailed;
        rep.text = out.str();
        return rep;
      }
      const auto& l = loaded.back();
      out << "enclave " << e.name << " id=" << l.id.value << " mrenclave=" << hex(l.mrenclave)
          << "\n";
      if (auto it = scenario.expected.mrenclave.find(e.name); it != scenario.expected.mrenclave.end())
        check(to_hex(l.mrenclave) == it->second, "mrenclave " + e.name);
    }

    m.cpu().hypervisor().set_policy(hypervisor);
    os.config().policy = scenario.driver_policy;
    if (scenario.driver_policy == guest::DriverPolicy::TamperLeafParams)
      os.tamper = [](monitor::DriverRequest& r) {
        using monitor::DriverLeaf;
        if (r.leaf == DriverLeaf::Eenter)
          r.leaf = DriverLeaf::Eresume;
        else if (r.leaf == DriverLeaf::Eresume)
          r.leaf = DriverLeaf::Eenter;
      };
    m.cpu().ledger().clear();

    if (scenario.app)
    {
      for (auto [gva, pages] : scenario.app->data)
        os.map_app_pages(gva, pages);
      std::array<uint64_t, vcpu::kGprCount> regs{};
      for (size_t k = 0; k < loaded.size() && k < 3; ++k)
      {
        regs[10 + 2 * k] = loaded[k].id.value;
        regs[11 + 2 * k] = loaded[k].tcs.empty() ? 0 : loaded[k].tcs.front();
      }
      auto r = os.run_app(scenario.app->program, scenario.app->budget, regs);
      out << "app " << guest::to_string(r.kind) << " steps=" << r.steps << " ioctls=" << r.ioctls.size()
          << "\n";
      for (const auto& io : r.ioctls)
      {
        out << "  leaf " << guest::to_string(io.kind);
        if (io.error)
          out << " error=" << to_string(*io.error);
        out << " value=" << hex64(io.value) << (io.ocall ? " ocall" : "") << " aex=" << io.aex_count
            << "\n";
      }
      out << "registers";
      for (unsigned i = 0; i < 4; ++i)
        out << " r" << i << "=" << hex64(r.final_state.gprs[i]);
      out << "\n";
      if (scenario.expected.app)
        check(std::string(guest::to_string(r.kind)) == *scenario.expected.app, "app " + *scenario.expected.app);
      for (auto [reg, v] : scenario.expected.registers)
        check(r.final_state.gprs[reg] == v, "r" + std::to_string(reg) + " == " + hex64(v));
    }

    rep.ledger = m.cpu().ledger().export_text();
    out << "ledger";
    for (const auto& [label, n] : m.cpu().ledger().counts())
      out << " " << label << "=" << n;
    out << "\n";
    for (const auto& [label, n] : scenario.expected.ledger)
      check(m.cpu().ledger().count(label) == n, "ledger " + label + " == " + std::to_string(n));

    for (size_t k = 0; k < loaded.size() && !rep.bundle; ++k)
      if (auto b = m.monitor().last_bundle(loaded[k].id))
      {
        rep.bundle = *b;
        auto anchors = m.anchors(loaded[k].mrenclave);
        const auto& name = scenario.enclaves[k].name;
        if (auto it = scenario.expected.mrenclave.find(name); it != scenario.expected.mrenclave.end())
        {
          try
          {
            anchors.mrenclave = array_from_hex<32>(it->second);
          }
          catch (const Error&)
          {
          }
        }
        rep.anchors = anchors;
        auto v = attest::verify_bundle(*rep.bundle, anchors);
        out << "bundle " << name << " " << (v.accepted ? "accept" : "reject(" + v.reason + ")") << "\n";
        if (scenario.expected.bundle)
        {
          auto got = v.accepted ? std::string("accept") : v.reason;
          check(got == *scenario.expected.bundle, "bundle " + *scenario.expected.bundle);
        }
      }
    if (!rep.bundle && scenario.expected.bundle)
      check(false, "bundle " + *scenario.expected.bundle + " (no report was produced)");

    if (!scenario.attacks.empty())
      os.config().policy = guest::DriverPolicy::Honest;
    for (const auto& a : scenario.attacks)
    {
      size_t k = 0;
      if (!a.target.empty())
        while (scenario.enclaves[k].name != a.target)
          k++;
      auto verdict = guest::run_attack(os, a.kind, loaded[k], m.monitor());
      rep.verdicts.emplace_back(a.kind, verdict);
      out << "attack " << guest::to_string(a.kind) << " -> " << verdict.describe() << "\n";
      check(verdict.kind != guest::AttackVerdict::Kind::Succeeded, "attack " + std::string(guest::to_string(a.kind)) + " contained");
      if (a.expect)
      {
        bool match = (*a.expect == "blocked") == (verdict.kind == guest::AttackVerdict::Kind::Blocked);
        check(match, "attack " + std::string(guest::to_string(a.kind)) + " " + *a.expect);
      }
    }

    rep.status = rep.failures.empty() ? exit_code::kOk : exit_code::kFailed;
    out << (rep.failures.empty() ? "RESULT ok" : "RESULT failed (" + std::to_string(rep.failures.size()) + ")")
        << "\n";
    rep.text = out.str();

    if (options.ledger_out)
      write_file(*options.ledger_out, rep.ledger);
    if (options.bundle_out && rep.bundle)
      write_file(*options.bundle_out, attest::bundle_to_json(*rep.bundle));
    if (options.anchors_out && rep.anchors)
      write_file(*options.anchors_out, attest::anchors_to_json(*rep.anchors));
    if (options.report_out)
      write_file(*options.report_out, rep.text);
    return rep;
  }

  attest::Verdict cmd_verify(const std::filesystem::path& bundle, const std::filesystem::path& anchors)
  {
    return attest::verify_bundle(
      attest::bundle_from_json(read_file(bundle)), attest::anchors_from_json(read_file(anchors)));
  }

  const std::vector<std::string>& tamper_names()
  {
    static const std::vector<std::string> names{
      "flip-launch-digest",
      "flip-report-data",
      "resign-wrong-vcek",
      "swap-aik-public",
      "flip-mrenclave",
      "flip-enclave-sig",
      "set-vmpl-1",
    };
    return names;
  }

  attest::NestedBundle apply_tamper(const attest::NestedBundle& bundle, std::string_view name)
  {
    auto b = bundle;
    auto drbg = crypto::Drbg::from_u64(0x7a3d);
    if (name == "flip-launch-digest")
      b.snp_report.launch_digest[0] ^= 1;
    else if (name == "flip-report-data")
      b.snp_report.report_data[0] ^= 1;
    else if (name == "resign-wrong-vcek")
      b.snp_report.signature =
        crypto::EcdsaP384(drbg.derive("tamper/vcek", 48)).sign(b.snp_report.body());
    else if (name == "swap-aik-public")
    {
      std::array<uint8_t, 32> seed{};
      auto s = drbg.derive("tamper/aik", 32);
      std::copy(s.begin(), s.end(), seed.begin());
      attest::Aik other(seed);
      b.aik_public = other.public_key();
      b.enclave_sig = other.sign(b.enclave_report.serialize());
    }
    else if (name == "flip-mrenclave")
      b.enclave_report.mrenclave[0] ^= 1;
    else if (name == "flip-enclave-sig")
    {
      if (b.enclave_sig.empty())
        b.enclave_sig.push_back(0);
      b.enclave_sig[0] ^= 1;
    }
    else if (name == "set-vmpl-1")
      b.snp_report.vmpl = Vmpl{1};
    else
      throw Error(ErrorCode::ParseError, "unknown tamper '" + std::string(name) + "'");
    return b;
  }
}
