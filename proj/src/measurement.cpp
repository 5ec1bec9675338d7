// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/measurement.h"

#include <cstring>

namespace nsgx::monitor
{
  std::string_view to_string(PageType t)
  {
    switch (t)
    {
      case PageType::Secs:
        return "SECS";
      case PageType::Tcs:
        return "TCS";
      case PageType::Reg:
        return "REG";
    }
    return "?";
  }

  std::string to_string(PagePerms p)
  {
    std::string s = "---";
    if (p.read)
      s[0] = 'r';
    if (p.write)
      s[1] = 'w';
    if (p.execute)
      s[2] = 'x';
    return s;
  }

  PagePerms parse_perms(std::string_view s)
  {
    if (s.size() != 3)
      throw Error(ErrorCode::ParseError, "permissions must look like 'rwx' or 'r--'");
    auto bit = [&](size_t i, char set) {
      if (s[i] == set)
        return true;
      if (s[i] == '-')
        return false;
      throw Error(ErrorCode::ParseError, "bad permission string '" + std::string(s) + "'");
    };
    return {bit(0, 'r'), bit(1, 'w'), bit(2, 'x')};
  }

  void MeasurementLog::append(const MeasurementRecord& r)
  {
    if (frozen_)
      throw Error(ErrorCode::StateError, "measurement log is frozen");
    records_.push_back(r);
    hash_.update(r);
  }

  void MeasurementLog::ecreate(uint32_t ssa_frame_size, uint64_t size_bytes)
  {
    MeasurementRecord r{};
    std::memcpy(r.data(), "ECREATE\0", 8);
    put_le32(r.data() + 8, ssa_frame_size);
    put_le64(r.data() + 12, size_bytes);
    append(r);
  }

  void MeasurementLog::eadd(uint64_t enclave_offset, PageType type, PagePerms perms)
  {
    MeasurementRecord r{};
    std::memcpy(r.data(), "EADD\0\0\0\0", 8);
    put_le64(r.data() + 8, enclave_offset);
    put_le64(r.data() + 16, perms.bits() | (uint64_t{static_cast<uint8_t>(type)} << 8));
    append(r);
  }

  void MeasurementLog::eextend(uint64_t enclave_offset, ByteView chunk)
  {
    if (chunk.size() != kExtendChunk)
      throw Error(ErrorCode::RangeError, "EEXTEND measures exactly 256 bytes");
    if (frozen_)
      throw Error(ErrorCode::StateError, "measurement log is frozen");
    MeasurementRecord r{};
    std::memcpy(r.data(), "EEXTEND\0", 8);
    put_le64(r.data() + 8, enclave_offset);
    append(r);
    for (size_t k = 0; k < 4; ++k)
    {
      std::memcpy(r.data(), chunk.data() + 64 * k, 64);
      append(r);
    }
  }
}
