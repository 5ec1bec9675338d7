// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nsgx
{
  using Bytes = std::vector<uint8_t>;
  using ByteView = std::span<const uint8_t>;
  using Digest32 = std::array<uint8_t, 32>;
  using Digest48 = std::array<uint8_t, 48>;

  constexpr uint64_t kPageSize = 4096;
  constexpr uint64_t kPageShift = 12;

  constexpr uint64_t page_of(uint64_t addr)
  {
    return addr >> kPageShift;
  }

  constexpr uint64_t offset_in_page(uint64_t addr)
  {
    return addr & (kPageSize - 1);
  }

  /// Index-like strong type. Tag only distinguishes otherwise identical
  /// integers (system-physical page vs guest-physical page, ids, ...).
  template <typename Tag>
  struct StrongIndex
  {
    uint64_t value = 0;

    constexpr StrongIndex() = default;
    constexpr explicit StrongIndex(uint64_t v) : value(v) {}

    constexpr auto operator<=>(const StrongIndex&) const = default;
  };

  using Spa = StrongIndex<struct SpaTag>;
  using Gpa = StrongIndex<struct GpaTag>;
  using EnclaveId = StrongIndex<struct EnclaveIdTag>;
  using PageTableId = StrongIndex<struct PageTableIdTag>;

  /// Virtual machine privilege level, 0 (most privileged) to 3.
  class Vmpl
  {
  public:
    static constexpr unsigned kCount = 4;

    constexpr Vmpl() = default;
    constexpr explicit Vmpl(unsigned level) : level_(static_cast<uint8_t>(level))
    {
      if (level >= kCount)
        throw std::out_of_range("VMPL out of range");
    }

    constexpr unsigned value() const
    {
      return level_;
    }

    constexpr auto operator<=>(const Vmpl&) const = default;

  private:
    uint8_t level_ = 0;
  };

  enum class Access : uint8_t
  {
    Read,
    Write,
    Execute,
  };

  enum class Mode : uint8_t
  {
    User,
    Kernel,
  };

  std::string_view to_string(Access a);
  std::string_view to_string(Mode m);

  enum class ErrorCode
  {
    SizeError,
    LayoutError,
    AlreadyMapped,
    Immutable,
    NotAssigned,
    OneToOne,
    ProtocolError,
    DecodeError,
    PrivilegeError,
    DoubleFault,
    EpcExhausted,
    AlignmentError,
    StateError,
    RangeError,
    UnmappedError,
    NoTcsError,
    TcsBusy,
    SsaOverflow,
    NoPendingSsa,
    ThreadsActive,
    BadEntry,
    UnknownEnclave,
    InvalidLeaf,
    VmplDenied,
    AuthError,
    ReplayError,
    ChannelError,
    CryptoError,
    PreconditionError,
    ParseError,
  };

  std::string_view to_string(ErrorCode code);

  /// Single exception type for every module; `code()` carries the
  /// contract-level error kind.
  class Error : public std::runtime_error
  {
  public:
    Error(ErrorCode code, const std::string& what);

    ErrorCode code() const
    {
      return code_;
    }

  private:
    ErrorCode code_;
  };

  std::string to_hex(ByteView bytes);
  Bytes from_hex(std::string_view hex);

  template <size_t N>
  std::array<uint8_t, N> array_from_hex(std::string_view hex)
  {
    auto b = from_hex(hex);
    if (b.size() != N)
      throw Error(ErrorCode::ParseError, "expected " + std::to_string(N) + " hex bytes");
    std::array<uint8_t, N> out{};
    std::copy(b.begin(), b.end(), out.begin());
    return out;
  }

  inline void put_le64(uint8_t* dst, uint64_t v)
  {
    for (int i = 0; i < 8; ++i)
      dst[i] = static_cast<uint8_t>(v >> (8 * i));
  }

  inline void put_le32(uint8_t* dst, uint32_t v)
  {
    for (int i = 0; i < 4; ++i)
      dst[i] = static_cast<uint8_t>(v >> (8 * i));
  }

  inline uint64_t get_le64(const uint8_t* src)
  {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
      v = (v << 8) | src[i];
    return v;
  }

  inline uint32_t get_le32(const uint8_t* src)
  {
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | src[i];
    return v;
  }
}
