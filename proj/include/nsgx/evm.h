// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/common.h"
#include "nsgx/mem.h"
#include "nsgx/vcpu.h"

#include <optional>
#include <string>
#include <variant>

// Deterministic bytecode standing in for enclave and App code. rip is an
// instruction index; every memory operand is a byte gVA resolved through
// mem::translate with the caller's mode and VMPL.

namespace nsgx::evm
{
  enum class SyscallLeaf : uint8_t
  {
    Eexit = 0x00,
    Ereport = 0x01,
    Egetkey = 0x02,
    Ioctl = 0x10,
    // Privileged operations. They exist only so programs can attempt them;
    // nothing routes them on behalf of user code.
    Wrmsr = 0x20,
    Vmgexit = 0x21,
    Rmpadjust = 0x22,
    SnpGuestRequest = 0x23,
  };

  std::string_view to_string(SyscallLeaf leaf);
  std::optional<SyscallLeaf> parse_syscall_leaf(std::string_view name);

  namespace instr
  {
    struct LoadImm
    {
      uint8_t reg = 0;
      uint64_t value = 0;
      bool operator==(const LoadImm&) const = default;
    };

    struct Load
    {
      uint8_t reg = 0;
      uint64_t gva = 0;
      bool operator==(const Load&) const = default;
    };

    struct Store
    {
      uint64_t gva = 0;
      uint8_t reg = 0;
      bool operator==(const Store&) const = default;
    };

    struct Add
    {
      uint8_t dst = 0;
      uint8_t src = 0;
      bool operator==(const Add&) const = default;
    };

    struct Xor
    {
      uint8_t dst = 0;
      uint8_t src = 0;
      bool operator==(const Xor&) const = default;
    };

    struct Jmp
    {
      uint64_t target = 0;
      bool operator==(const Jmp&) const = default;
    };

    struct Jnz
    {
      uint8_t reg = 0;
      uint64_t target = 0;
      bool operator==(const Jnz&) const = default;
    };

    struct Syscall
    {
      SyscallLeaf leaf = SyscallLeaf::Eexit;
      std::array<uint8_t, 3> args{};
      bool operator==(const Syscall&) const = default;
    };

    struct TriggerFault
    {
      vcpu::Exception kind = vcpu::Exception::InvalidOpcode;
      bool operator==(const TriggerFault&) const = default;
    };

    struct Halt
    {
      bool operator==(const Halt&) const = default;
    };
  }

  using Instr = std::variant<
    instr::LoadImm,
    instr::Load,
    instr::Store,
    instr::Add,
    instr::Xor,
    instr::Jmp,
    instr::Jnz,
    instr::Syscall,
    instr::TriggerFault,
    instr::Halt>;

  struct Program
  {
    std::vector<Instr> instructions;
    uint64_t entry = 0;

    /// Throws DecodeError if a register index is >= 16 or a jump target or
    /// the entry is out of range.
    void validate() const;

    bool operator==(const Program&) const = default;
  };

  constexpr size_t kInstrSize = 16;
  constexpr size_t kImageHeaderSize = 16;
  constexpr uint32_t kImageMagic = 0x314d5645; // "EVM1"

  /// Image layout: magic u32 | entry u32 | count u64 | count * 16-byte
  /// instructions. Each instruction: opcode u8 | a u8 | b u8 | c u8 | d u8 |
  /// 3 zero bytes | imm u64, all little-endian.
  Bytes encode(const Program& p);
  /// Throws DecodeError on a malformed image.
  Program decode(ByteView image);

  /// One instruction per line; `;` starts a comment; `name:` defines a
  /// label; `.entry <label|index>` sets the entry point.
  Program assemble(std::string_view text);
  std::string disassemble(const Program& p);

  struct Continue
  {};

  struct Trap
  {
    vcpu::Exception kind = vcpu::Exception::GeneralProtection;
    std::optional<uint64_t> gva;
    /// Set for RMP faults.
    std::optional<mem::RmpFault> rmp;
  };

  struct SyscallRequest
  {
    SyscallLeaf leaf = SyscallLeaf::Eexit;
    std::array<uint64_t, 3> args{};
  };

  struct Halted
  {};

  using StepOutcome = std::variant<Continue, Trap, SyscallRequest, Halted>;

  /// What a program may touch: its page table, memory, and the privilege
  /// it runs with.
  struct AddressSpace
  {
    const mem::PageTable& pt;
    mem::GuestMemory& memory;
    Mode mode = Mode::User;
    Vmpl vmpl;
  };

  /// Executes the instruction at cpu.rip. Faulting instructions leave rip
  /// unchanged and have no effect; a syscall advances rip past itself.
  /// rip outside the program traps with GeneralProtection.
  StepOutcome step(const Program& program, vcpu::CpuState& cpu, const AddressSpace& as);

  struct RunResult
  {
    enum class Kind : uint8_t
    {
      Exited,
      SyscallRequested,
      Trapped,
      Halted,
      BudgetExhausted,
    };

    Kind kind = Kind::BudgetExhausted;
    uint64_t steps = 0;
    std::optional<Trap> trap;
    std::optional<SyscallRequest> syscall;
  };

  /// Steps until EEXIT (Exited), another syscall, a trap, Halt, or `budget`
  /// steps have run. Throws PreconditionError when budget is 0.
  RunResult run(
    const Program& program, vcpu::CpuState& cpu, const AddressSpace& as, uint64_t budget);
}
