// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/evm.h"

#include <charconv>
#include <cstring>
#include <map>
#include <sstream>

namespace nsgx::evm
{
  namespace
  {
    enum class Opcode : uint8_t
    {
      LoadImm = 1,
      Load = 2,
      Store = 3,
      Add = 4,
      Xor = 5,
      Jmp = 6,
      Jnz = 7,
      Syscall = 8,
      TriggerFault = 9,
      Halt = 10,
    };

    constexpr SyscallLeaf kAllLeaves[] = {
      SyscallLeaf::Eexit,
      SyscallLeaf::Ereport,
      SyscallLeaf::Egetkey,
      SyscallLeaf::Ioctl,
      SyscallLeaf::Wrmsr,
      SyscallLeaf::Vmgexit,
      SyscallLeaf::Rmpadjust,
      SyscallLeaf::SnpGuestRequest,
    };

    template <class... Ts>
    struct overloaded : Ts...
    {
      using Ts::operator()...;
    };
    template <class... Ts>
    overloaded(Ts...) -> overloaded<Ts...>;

    [[noreturn]] void bad(const std::string& msg)
    {
      throw Error(ErrorCode::DecodeError, msg);
    }

    void check_reg(uint8_t r)
    {
      if (r >= vcpu::kGprCount)
        bad("register r" + std::to_string(r) + " out of range");
    }

    std::optional<vcpu::Exception> exception_from_byte(uint8_t b)
    {
      if (b > static_cast<uint8_t>(vcpu::Exception::GeneralProtection))
        return std::nullopt;
      return static_cast<vcpu::Exception>(b);
    }
  }

  std::string_view to_string(SyscallLeaf leaf)
  {
    switch (leaf)
    {
      case SyscallLeaf::Eexit:
        return "eexit";
      case SyscallLeaf::Ereport:
        return "ereport";
      case SyscallLeaf::Egetkey:
        return "egetkey";
      case SyscallLeaf::Ioctl:
        return "ioctl";
      case SyscallLeaf::Wrmsr:
        return "wrmsr";
      case SyscallLeaf::Vmgexit:
        return "vmgexit";
      case SyscallLeaf::Rmpadjust:
        return "rmpadjust";
      case SyscallLeaf::SnpGuestRequest:
        return "snp_guest_request";
    }
    return "?";
  }

  std::optional<SyscallLeaf> parse_syscall_leaf(std::string_view name)
  {
    for (auto l : kAllLeaves)
      if (to_string(l) == name)
        return l;
    return std::nullopt;
  }

  void Program::validate() const
  {
    const auto n = instructions.size();
    if (n > 0 && entry >= n)
      bad("entry " + std::to_string(entry) + " out of range");
    for (const auto& i : instructions)
    {
      std::visit(
        overloaded{
          [](const instr::LoadImm& x) { check_reg(x.reg); },
          [](const instr::Load& x) { check_reg(x.reg); },
          [](const instr::Store& x) { check_reg(x.reg); },
          [](const instr::Add& x) {
            check_reg(x.dst);
            check_reg(x.src);
          },
          [](const instr::Xor& x) {
            check_reg(x.dst);
            check_reg(x.src);
          },
          [n](const instr::Jmp& x) {
            if (x.target >= n)
              bad("jump target " + std::to_string(x.target) + " out of range");
          },
          [n](const instr::Jnz& x) {
            check_reg(x.reg);
            if (x.target >= n)
              bad("jump target " + std::to_string(x.target) + " out of range");
          },
          [](const instr::Syscall& x) {
            for (auto r : x.args)
              check_reg(r);
          },
          [](const instr::TriggerFault&) {},
          [](const instr::Halt&) {},
        },
        i);
    }
  }

  Bytes encode(const Program& p)
  {
    p.validate();
    Bytes out(kImageHeaderSize + kInstrSize * p.instructions.size(), 0);
    put_le32(out.data(), kImageMagic);
    put_le32(out.data() + 4, static_cast<uint32_t>(p.entry));
    put_le64(out.data() + 8, p.instructions.size());

    uint8_t* rec = out.data() + kImageHeaderSize;
    for (const auto& i : p.instructions)
    {
      auto set = [rec](Opcode op, uint8_t a, uint8_t b, uint8_t c, uint8_t d, uint64_t imm) {
        rec[0] = static_cast<uint8_t>(op);
        rec[1] = a;
        rec[2] = b;
        rec[3] = c;
        rec[4] = d;
        put_le64(rec + 8, imm);
      };
      std::visit(
        overloaded{
          [&](const instr::LoadImm& x) { set(Opcode::LoadImm, x.reg, 0, 0, 0, x.value); },
          [&](const instr::Load& x) { set(Opcode::Load, x.reg, 0, 0, 0, x.gva); },
          [&](const instr::Store& x) { set(Opcode::Store, x.reg, 0, 0, 0, x.gva); },
          [&](const instr::Add& x) { set(Opcode::Add, x.dst, x.src, 0, 0, 0); },
          [&](const instr::Xor& x) { set(Opcode::Xor, x.dst, x.src, 0, 0, 0); },
          [&](const instr::Jmp& x) { set(Opcode::Jmp, 0, 0, 0, 0, x.target); },
          [&](const instr::Jnz& x) { set(Opcode::Jnz, x.reg, 0, 0, 0, x.target); },
          [&](const instr::Syscall& x) {
            set(
              Opcode::Syscall,
              static_cast<uint8_t>(x.leaf),
              x.args[0],
              x.args[1],
              x.args[2],
              0);
          },
          [&](const instr::TriggerFault& x) {
            set(Opcode::TriggerFault, static_cast<uint8_t>(x.kind), 0, 0, 0, 0);
          },
          [&](const instr::Halt&) { set(Opcode::Halt, 0, 0, 0, 0, 0); },
        },
        i);
      rec += kInstrSize;
    }
    return out;
  }

  Program decode(ByteView image)
  {
    if (image.size() < kImageHeaderSize)
      bad("image shorter than header");
    if (get_le32(image.data()) != kImageMagic)
      bad("bad image magic");
    const uint64_t entry = get_le32(image.data() + 4);
    const uint64_t count = get_le64(image.data() + 8);
    if (count > (image.size() - kImageHeaderSize) / kInstrSize)
      bad("instruction count exceeds image size");

    Program p;
    p.entry = entry;
    p.instructions.reserve(count);
    const uint8_t* rec = image.data() + kImageHeaderSize;
    for (uint64_t k = 0; k < count; ++k, rec += kInstrSize)
    {
      const uint8_t a = rec[1], b = rec[2], c = rec[3], d = rec[4];
      const uint64_t imm = get_le64(rec + 8);
      if (rec[5] != 0 || rec[6] != 0 || rec[7] != 0)
        bad("reserved instruction bytes set");
      switch (static_cast<Opcode>(rec[0]))
      {
        case Opcode::LoadImm:
          p.instructions.push_back(instr::LoadImm{a, imm});
          break;
        case Opcode::Load:
          p.instructions.push_back(instr::Load{a, imm});
          break;
        case Opcode::Store:
          p.instructions.push_back(instr::Store{imm, a});
          break;
        case Opcode::Add:
          p.instructions.push_back(instr::Add{a, b});
          break;
        case Opcode::Xor:
          p.instructions.push_back(instr::Xor{a, b});
          break;
        case Opcode::Jmp:
          p.instructions.push_back(instr::Jmp{imm});
          break;
        case Opcode::Jnz:
          p.instructions.push_back(instr::Jnz{a, imm});
          break;
        case Opcode::Syscall:
        {
          bool known = false;
          for (auto l : kAllLeaves)
            known = known || static_cast<uint8_t>(l) == a;
          if (!known)
            bad("unknown syscall leaf " + std::to_string(a));
          p.instructions.push_back(instr::Syscall{static_cast<SyscallLeaf>(a), {b, c, d}});
          break;
        }
        case Opcode::TriggerFault:
        {
          auto e = exception_from_byte(a);
          if (!e)
            bad("unknown exception kind " + std::to_string(a));
          p.instructions.push_back(instr::TriggerFault{*e});
          break;
        }
        case Opcode::Halt:
          p.instructions.push_back(instr::Halt{});
          break;
        default:
          bad("unknown opcode " + std::to_string(rec[0]));
      }
    }
    p.validate();
    return p;
  }

  namespace
  {
    struct Line
    {
      size_t number;
      std::vector<std::string> tokens;
    };

    [[noreturn]] void parse_fail(size_t line, const std::string& msg)
    {
      throw Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": " + msg);
    }

    std::vector<std::string> tokenize(std::string_view s)
    {
      std::vector<std::string> out;
      std::string cur;
      for (char c : s)
      {
        if (c == ' ' || c == '\t' || c == ',' || c == '\r')
        {
          if (!cur.empty())
            out.push_back(std::move(cur));
          cur.clear();
        }
        else
          cur.push_back(c);
      }
      if (!cur.empty())
        out.push_back(std::move(cur));
      return out;
    }

    std::optional<uint64_t> parse_number(std::string_view s)
    {
      std::string digits;
      for (char c : s)
        if (c != '_')
          digits.push_back(c);
      int base = 10;
      std::string_view v = digits;
      bool negative = v.starts_with('-');
      if (negative)
        v.remove_prefix(1);
      if (v.starts_with("0x") || v.starts_with("0X"))
      {
        base = 16;
        v.remove_prefix(2);
      }
      if (v.empty())
        return std::nullopt;
      uint64_t out = 0;
      auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out, base);
      if (ec != std::errc() || ptr != v.data() + v.size())
        return std::nullopt;
      return negative ? ~out + 1 : out;
    }

    uint8_t parse_reg(const Line& l, const std::string& s)
    {
      if (s.size() < 2 || (s[0] != 'r' && s[0] != 'R'))
        parse_fail(l.number, "expected register, got '" + s + "'");
      auto n = parse_number(std::string_view(s).substr(1));
      if (!n || s[1] == '-' || *n >= vcpu::kGprCount)
        parse_fail(l.number, "bad register '" + s + "'");
      return static_cast<uint8_t>(*n);
    }

    uint64_t parse_imm(const Line& l, const std::string& s)
    {
      auto n = parse_number(s);
      if (!n)
        parse_fail(l.number, "expected number, got '" + s + "'");
      return *n;
    }

    uint64_t parse_mem(const Line& l, const std::string& s)
    {
      if (s.size() < 3 || s.front() != '[' || s.back() != ']')
        parse_fail(l.number, "expected [address], got '" + s + "'");
      return parse_imm(l, s.substr(1, s.size() - 2));
    }
  }

  Program assemble(std::string_view text)
  {
    std::vector<Line> lines;
    std::map<std::string, uint64_t> labels;
    std::optional<std::pair<size_t, std::string>> entry_token;

    size_t number = 0;
    std::istringstream is{std::string(text)};
    std::string raw;
    while (std::getline(is, raw))
    {
      ++number;
      if (auto c = raw.find(';'); c != std::string::npos)
        raw.resize(c);
      auto toks = tokenize(raw);
      while (!toks.empty() && toks.front().back() == ':')
      {
        auto name = toks.front().substr(0, toks.front().size() - 1);
        if (name.empty())
          parse_fail(number, "empty label");
        if (!labels.emplace(name, lines.size()).second)
          parse_fail(number, "duplicate label '" + name + "'");
        toks.erase(toks.begin());
      }
      if (toks.empty())
        continue;
      if (toks.front() == ".entry")
      {
        if (toks.size() != 2)
          parse_fail(number, ".entry takes one operand");
        entry_token = {number, toks[1]};
        continue;
      }
      lines.push_back({number, std::move(toks)});
    }

    auto target = [&](const Line& l, const std::string& s) -> uint64_t {
      if (auto it = labels.find(s); it != labels.end())
        return it->second;
      auto n = parse_number(s);
      if (!n)
        parse_fail(l.number, "unknown label '" + s + "'");
      return *n;
    };

    Program p;
    for (const auto& l : lines)
    {
      const auto& op = l.tokens[0];
      const auto argc = l.tokens.size() - 1;
      auto want = [&](size_t n) {
        if (argc != n)
          parse_fail(
            l.number, "'" + op + "' takes " + std::to_string(n) + " operands, got " +
              std::to_string(argc));
      };

      if (op == "loadi")
      {
        want(2);
        p.instructions.push_back(
          instr::LoadImm{parse_reg(l, l.tokens[1]), parse_imm(l, l.tokens[2])});
      }
      else if (op == "load")
      {
        want(2);
        p.instructions.push_back(instr::Load{parse_reg(l, l.tokens[1]), parse_mem(l, l.tokens[2])});
      }
      else if (op == "store")
      {
        want(2);
        p.instructions.push_back(
          instr::Store{parse_mem(l, l.tokens[1]), parse_reg(l, l.tokens[2])});
      }
      else if (op == "add" || op == "xor")
      {
        want(2);
        auto d = parse_reg(l, l.tokens[1]);
        auto s = parse_reg(l, l.tokens[2]);
        if (op == "add")
          p.instructions.push_back(instr::Add{d, s});
        else
          p.instructions.push_back(instr::Xor{d, s});
      }
      else if (op == "jmp")
      {
        want(1);
        p.instructions.push_back(instr::Jmp{target(l, l.tokens[1])});
      }
      else if (op == "jnz")
      {
        want(2);
        p.instructions.push_back(instr::Jnz{parse_reg(l, l.tokens[1]), target(l, l.tokens[2])});
      }
      else if (op == "syscall")
      {
        if (argc < 1 || argc > 4)
          parse_fail(l.number, "'syscall' takes a leaf and up to 3 registers");
        auto leaf = parse_syscall_leaf(l.tokens[1]);
        if (!leaf)
          parse_fail(l.number, "unknown syscall leaf '" + l.tokens[1] + "'");
        instr::Syscall s{*leaf, {0, 1, 2}};
        for (size_t k = 2; k < l.tokens.size(); ++k)
          s.args[k - 2] = parse_reg(l, l.tokens[k]);
        p.instructions.push_back(s);
      }
      else if (op == "fault")
      {
        want(1);
        auto e = vcpu::parse_exception(l.tokens[1]);
        if (!e)
          parse_fail(l.number, "unknown exception '" + l.tokens[1] + "'");
        p.instructions.push_back(instr::TriggerFault{*e});
      }
      else if (op == "halt")
      {
        want(0);
        p.instructions.push_back(instr::Halt{});
      }
      else
        parse_fail(l.number, "unknown mnemonic '" + op + "'");
    }

    if (entry_token)
    {
      Line l{entry_token->first, {}};
      p.entry = target(l, entry_token->second);
    }

    try
    {
      p.validate();
    }
    catch (const Error& e)
    {
      throw Error(ErrorCode::ParseError, e.what());
    }
    return p;
  }

  std::string disassemble(const Program& p)
  {
    std::ostringstream os;
    auto hex = [](uint64_t v) {
      std::ostringstream h;
      h << "0x" << std::hex << v;
      return h.str();
    };
    os << ".entry " << p.entry << "\n";
    for (const auto& i : p.instructions)
    {
      std::visit(
        overloaded{
          [&](const instr::LoadImm& x) {
            os << "loadi r" << int(x.reg) << ", " << hex(x.value);
          },
          [&](const instr::Load& x) { os << "load r" << int(x.reg) << ", [" << hex(x.gva) << "]"; },
          [&](const instr::Store& x) {
            os << "store [" << hex(x.gva) << "], r" << int(x.reg);
          },
          [&](const instr::Add& x) { os << "add r" << int(x.dst) << ", r" << int(x.src); },
          [&](const instr::Xor& x) { os << "xor r" << int(x.dst) << ", r" << int(x.src); },
          [&](const instr::Jmp& x) { os << "jmp " << x.target; },
          [&](const instr::Jnz& x) { os << "jnz r" << int(x.reg) << ", " << x.target; },
          [&](const instr::Syscall& x) {
            os << "syscall " << to_string(x.leaf) << " r" << int(x.args[0]) << " r"
               << int(x.args[1]) << " r" << int(x.args[2]);
          },
          [&](const instr::TriggerFault& x) { os << "fault " << vcpu::to_string(x.kind); },
          [&](const instr::Halt&) { os << "halt"; },
        },
        i);
      os << "\n";
    }
    return os.str();
  }

  namespace
  {
    struct Chunk
    {
      mem::Translated where;
      size_t length;
    };

    // Resolves an 8-byte access that may straddle two pages. Returns a
    // trap on the first failing page.
    std::variant<std::vector<Chunk>, Trap> resolve(
      const AddressSpace& as, uint64_t gva, Access access)
    {
      std::vector<Chunk> chunks;
      uint64_t addr = gva;
      size_t remaining = 8;
      while (remaining > 0)
      {
        const size_t len = std::min<uint64_t>(remaining, kPageSize - offset_in_page(addr));
        auto t = mem::translate(as.pt, as.memory.rmp(), addr, access, as.mode, as.vmpl);
        if (auto* pf = std::get_if<mem::PageFault>(&t))
          return Trap{vcpu::Exception::PageFault, pf->gva, std::nullopt};
        if (auto* rf = std::get_if<mem::RmpFault>(&t))
          return Trap{vcpu::Exception::RmpFault, addr, *rf};
        chunks.push_back({std::get<mem::Translated>(t), len});
        addr += len;
        remaining -= len;
      }
      return chunks;
    }
  }

  StepOutcome step(const Program& program, vcpu::CpuState& cpu, const AddressSpace& as)
  {
    if (cpu.rip >= program.instructions.size())
      return Trap{vcpu::Exception::GeneralProtection, std::nullopt, std::nullopt};

    auto& r = cpu.gprs;
    const auto& ins = program.instructions[cpu.rip];
    return std::visit(
      overloaded{
        [&](const instr::LoadImm& x) -> StepOutcome {
          r[x.reg] = x.value;
          ++cpu.rip;
          return Continue{};
        },
        [&](const instr::Load& x) -> StepOutcome {
          auto res = resolve(as, x.gva, Access::Read);
          if (auto* t = std::get_if<Trap>(&res))
            return *t;
          uint8_t buf[8];
          size_t pos = 0;
          for (const auto& c : std::get<std::vector<Chunk>>(res))
          {
            std::memcpy(buf + pos, as.memory.raw_page(c.where.spa) + c.where.offset, c.length);
            pos += c.length;
          }
          r[x.reg] = get_le64(buf);
          ++cpu.rip;
          return Continue{};
        },
        [&](const instr::Store& x) -> StepOutcome {
          auto res = resolve(as, x.gva, Access::Write);
          if (auto* t = std::get_if<Trap>(&res))
            return *t;
          uint8_t buf[8];
          put_le64(buf, r[x.reg]);
          size_t pos = 0;
          for (const auto& c : std::get<std::vector<Chunk>>(res))
          {
            std::memcpy(
              as.memory.raw_page_mut(c.where.spa) + c.where.offset, buf + pos, c.length);
            pos += c.length;
          }
          ++cpu.rip;
          return Continue{};
        },
        [&](const instr::Add& x) -> StepOutcome {
          r[x.dst] += r[x.src];
          ++cpu.rip;
          return Continue{};
        },
        [&](const instr::Xor& x) -> StepOutcome {
          r[x.dst] ^= r[x.src];
          ++cpu.rip;
          return Continue{};
        },
        [&](const instr::Jmp& x) -> StepOutcome {
          cpu.rip = x.target;
          return Continue{};
        },
        [&](const instr::Jnz& x) -> StepOutcome {
          cpu.rip = r[x.reg] != 0 ? x.target : cpu.rip + 1;
          return Continue{};
        },
        [&](const instr::Syscall& x) -> StepOutcome {
          ++cpu.rip;
          return SyscallRequest{x.leaf, {r[x.args[0]], r[x.args[1]], r[x.args[2]]}};
        },
        [&](const instr::TriggerFault& x) -> StepOutcome {
          return Trap{x.kind, std::nullopt, std::nullopt};
        },
        [&](const instr::Halt&) -> StepOutcome { return Halted{}; },
      },
      ins);
  }

  RunResult run(
    const Program& program, vcpu::CpuState& cpu, const AddressSpace& as, uint64_t budget)
  {
    if (budget == 0)
      throw Error(ErrorCode::PreconditionError, "run budget must be at least 1");

    RunResult out;
    while (out.steps < budget)
    {
      auto o = step(program, cpu, as);
      ++out.steps;
      if (std::holds_alternative<Continue>(o))
        continue;
      if (auto* t = std::get_if<Trap>(&o))
      {
        out.kind = RunResult::Kind::Trapped;
        out.trap = *t;
        return out;
      }
      if (auto* s = std::get_if<SyscallRequest>(&o))
      {
        out.kind = s->leaf == SyscallLeaf::Eexit ? RunResult::Kind::Exited :
                                                   RunResult::Kind::SyscallRequested;
        out.syscall = *s;
        return out;
      }
      out.kind = RunResult::Kind::Halted;
      return out;
    }
    out.kind = RunResult::Kind::BudgetExhausted;
    return out;
  }
}
