// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/cli.h"
#include "nsgx/machine.h"

#include <random>
#include <string>

namespace nsgx::test
{
  inline MachineConfig seeded(uint64_t seed)
  {
    MachineConfig c;
    c.seed = seed;
    c.deterministic_crypto = true;
    return c;
  }

  inline std::filesystem::path source_path(const std::string& rel)
  {
    return std::filesystem::path(NSGX_SOURCE_DIR) / rel;
  }

  inline guest::LoadedEnclave load_asm(
    Machine& m, std::string_view text, const guest::ImageOptions& opts = {})
  {
    return guest::load_enclave(m.guest(), guest::make_image(evm::assemble(text), opts));
  }

  constexpr std::string_view kReturn42 = "loadi r3, 42\nsyscall eexit r3\n";

  /// Busy loop long enough to be preempted a few times at the default
  /// step budget.
  inline std::string spin_program(uint64_t iterations, uint64_t exit_value = 1)
  {
    return "loadi r4, " + std::to_string(iterations) +
      "\nloadi r5, -1\ntop:\nadd r4, r5\njnz r4, top\nloadi r3, " +
      std::to_string(exit_value) + "\nsyscall eexit r3\n";
  }

  /// EREPORT over the data page, then EEXIT.
  inline std::string report_program(uint64_t data_gva)
  {
    return "loadi r6, " + std::to_string(data_gva) + "\nloadi r7, " +
      std::to_string(data_gva + 0x100) + "\nsyscall ereport r6 r7\nloadi r3, 1\nsyscall eexit r3\n";
  }

  inline std::array<uint8_t, 32> aik_seed(uint64_t machine_seed)
  {
    auto b = crypto::Drbg::from_u64(machine_seed).derive("monitor/aik", 32);
    std::array<uint8_t, 32> out{};
    std::copy(b.begin(), b.end(), out.begin());
    return out;
  }

  inline bool contains_bytes(std::string_view hay, ByteView needle)
  {
    std::string n(needle.begin(), needle.end());
    if (hay.find(n) != std::string_view::npos)
      return true;
    // Also look for the hex and base64 spellings.
    return hay.find(to_hex(needle)) != std::string_view::npos ||
      hay.find(crypto::base64_encode(needle)) != std::string_view::npos;
  }
}
