// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/attest.h"
#include "nsgx/guest.h"
#include "nsgx/mem.h"
#include "nsgx/monitor.h"
#include "nsgx/vcpu.h"

#include <memory>

namespace nsgx
{
  struct MachineConfig
  {
    uint64_t total_pages = 4096;
    uint64_t vmpl0_pages = 1536;
    uint64_t monitor_pages = 512;
    uint64_t step_budget = 10'000;
    bool extra_vmpls = false;
    vcpu::HypervisorPolicy hypervisor;
    guest::GuestConfig guest;
    uint64_t seed = 0;
    /// Draw all key material from `seed` instead of system entropy.
    bool deterministic_crypto = false;
  };

  /// One SEV-SNP guest: launch (monitor image and RMP measured into the
  /// launch digest), monitor boot at VMPL0, then the guest at VMPL1.
  class Machine
  {
  public:
    explicit Machine(const MachineConfig& config = {});

    Machine(const Machine&) = delete;
    Machine& operator=(const Machine&) = delete;

    const MachineConfig& config() const
    {
      return config_;
    }

    const crypto::Drbg& drbg() const
    {
      return drbg_;
    }

    mem::GuestMemory& memory()
    {
      return memory_;
    }

    const mem::MemLayout& layout() const
    {
      return memory_.layout();
    }

    mem::PageTableSet& tables()
    {
      return tables_;
    }

    vcpu::Vcpu& cpu()
    {
      return cpu_;
    }

    attest::AmdSp& sp()
    {
      return *sp_;
    }

    attest::HostRelay& relay()
    {
      return relay_;
    }

    monitor::Monitor& monitor()
    {
      return *monitor_;
    }

    guest::GuestOs& guest()
    {
      return *guest_;
    }

    /// What a verifier should trust for an enclave with `mrenclave`.
    attest::TrustAnchors anchors(const Digest32& mrenclave) const;

  private:
    MachineConfig config_;
    crypto::Drbg drbg_;
    mem::GuestMemory memory_;
    mem::PageTableSet tables_;
    vcpu::Vcpu cpu_;
    attest::HostRelay relay_;
    std::unique_ptr<attest::AmdSp> sp_;
    std::unique_ptr<monitor::Monitor> monitor_;
    std::unique_ptr<guest::GuestOs> guest_;
  };
}
