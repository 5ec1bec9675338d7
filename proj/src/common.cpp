// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/common.h"

namespace nsgx
{
  std::string_view to_string(Access a)
  {
    switch (a)
    {
      case Access::Read:
        return "read";
      case Access::Write:
        return "write";
      case Access::Execute:
        return "execute";
    }
    return "?";
  }

  std::string_view to_string(Mode m)
  {
    return m == Mode::User ? "user" : "kernel";
  }

  std::string_view to_string(ErrorCode code)
  {
    switch (code)
    {
#define NSGX_CASE(x) \
  case ErrorCode::x: \
    return #x;
      NSGX_CASE(SizeError)
      NSGX_CASE(LayoutError)
      NSGX_CASE(AlreadyMapped)
      NSGX_CASE(Immutable)
      NSGX_CASE(NotAssigned)
      NSGX_CASE(OneToOne)
      NSGX_CASE(ProtocolError)
      NSGX_CASE(DecodeError)
      NSGX_CASE(PrivilegeError)
      NSGX_CASE(DoubleFault)
      NSGX_CASE(EpcExhausted)
      NSGX_CASE(AlignmentError)
      NSGX_CASE(StateError)
      NSGX_CASE(RangeError)
      NSGX_CASE(UnmappedError)
      NSGX_CASE(NoTcsError)
      NSGX_CASE(TcsBusy)
      NSGX_CASE(SsaOverflow)
      NSGX_CASE(NoPendingSsa)
      NSGX_CASE(ThreadsActive)
      NSGX_CASE(BadEntry)
      NSGX_CASE(UnknownEnclave)
      NSGX_CASE(InvalidLeaf)
      NSGX_CASE(VmplDenied)
      NSGX_CASE(AuthError)
      NSGX_CASE(ReplayError)
      NSGX_CASE(ChannelError)
      NSGX_CASE(CryptoError)
      NSGX_CASE(PreconditionError)
      NSGX_CASE(ParseError)
#undef NSGX_CASE
    }
    return "?";
  }

  Error::Error(ErrorCode code, const std::string& what) :
    std::runtime_error(std::string(to_string(code)) + ": " + what),
    code_(code)
  {}

  std::string to_hex(ByteView bytes)
  {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (auto b : bytes)
    {
      out.push_back(digits[b >> 4]);
      out.push_back(digits[b & 0xf]);
    }
    return out;
  }

  Bytes from_hex(std::string_view hex)
  {
    auto nibble = [](char c) -> int {
      if (c >= '0' && c <= '9')
        return c - '0';
      if (c >= 'a' && c <= 'f')
        return c - 'a' + 10;
      if (c >= 'A' && c <= 'F')
        return c - 'A' + 10;
      return -1;
    };

    if (hex.size() % 2 != 0)
      throw Error(ErrorCode::ParseError, "odd-length hex string");

    Bytes out(hex.size() / 2);
    for (size_t i = 0; i < out.size(); ++i)
    {
      int hi = nibble(hex[2 * i]);
      int lo = nibble(hex[2 * i + 1]);
      if (hi < 0 || lo < 0)
        throw Error(ErrorCode::ParseError, "invalid hex digit");
      out[i] = static_cast<uint8_t>((hi << 4) | lo);
    }
    return out;
  }
}
