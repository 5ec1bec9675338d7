// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/common.h"
#include "nsgx/crypto.h"

namespace nsgx::monitor
{
  enum class PageType : uint8_t
  {
    Secs = 0,
    Tcs = 1,
    Reg = 2,
  };

  std::string_view to_string(PageType t);

  struct PagePerms
  {
    bool read = false;
    bool write = false;
    bool execute = false;

    constexpr uint8_t bits() const
    {
      return static_cast<uint8_t>((read ? 1 : 0) | (write ? 2 : 0) | (execute ? 4 : 0));
    }

    static constexpr PagePerms from_bits(uint8_t b)
    {
      return {(b & 1) != 0, (b & 2) != 0, (b & 4) != 0};
    }

    constexpr bool operator==(const PagePerms&) const = default;
  };

  /// "rwx"-style string, '-' for a cleared bit.
  std::string to_string(PagePerms p);
  PagePerms parse_perms(std::string_view s);

  using MeasurementRecord = std::array<uint8_t, 64>;

  constexpr size_t kExtendChunk = 256;

  /// Enclave build log. Records are 64 bytes:
  ///   ECREATE: "ECREATE\0" | ssa_frame_size u32 | size u64 | zeros
  ///   EADD:    "EADD\0\0\0\0" | offset u64 | secinfo flags u64 | zeros
  ///   EEXTEND: "EEXTEND\0" | offset u64 | zeros, then four raw 64-byte
  ///            data records covering the 256 measured bytes
  /// secinfo flags = R|W<<1|X<<2 | page_type<<8. The digest is SHA-256 over
  /// the concatenated records.
  class MeasurementLog
  {
  public:
    void ecreate(uint32_t ssa_frame_size, uint64_t size_bytes);
    void eadd(uint64_t enclave_offset, PageType type, PagePerms perms);
    void eextend(uint64_t enclave_offset, ByteView chunk);

    void freeze()
    {
      frozen_ = true;
    }

    bool frozen() const
    {
      return frozen_;
    }

    const std::vector<MeasurementRecord>& records() const
    {
      return records_;
    }

    Digest32 digest() const
    {
      return hash_.peek();
    }

  private:
    void append(const MeasurementRecord& r);

    std::vector<MeasurementRecord> records_;
    crypto::Sha256 hash_;
    bool frozen_ = false;
  };
}
