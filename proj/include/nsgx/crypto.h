// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/common.h"

#include <memory>
#include <optional>
#include <string_view>

// Thin RAII wrappers over OpenSSL. Everything here is a standard primitive;
// protocol logic lives in attest.h.

namespace nsgx::crypto
{
  Digest32 sha256(ByteView data);
  Digest48 sha384(ByteView data);

  /// Incremental SHA-256, copyable so a running digest can be snapshotted.
  class Sha256
  {
  public:
    Sha256();
    Sha256(const Sha256& other);
    Sha256& operator=(const Sha256& other);
    Sha256(Sha256&&) noexcept;
    Sha256& operator=(Sha256&&) noexcept;
    ~Sha256();

    void update(ByteView data);
    /// Digest of everything absorbed so far; the running state is kept.
    Digest32 peek() const;

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
  };

  class Sha384
  {
  public:
    Sha384();
    ~Sha384();
    Sha384(const Sha384&) = delete;
    Sha384& operator=(const Sha384&) = delete;

    void update(ByteView data);
    Digest48 finish();

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
  };

  Bytes hmac_sha384(ByteView key, ByteView data);
  Bytes hkdf_sha256(ByteView ikm, ByteView salt, ByteView info, size_t length);

  struct GcmCiphertext
  {
    Bytes ciphertext;
    std::array<uint8_t, 16> tag{};
  };

  using GcmKey = std::array<uint8_t, 32>;
  using GcmNonce = std::array<uint8_t, 12>;

  GcmCiphertext aes256_gcm_encrypt(
    const GcmKey& key, const GcmNonce& nonce, ByteView aad, ByteView plaintext);

  /// Returns nullopt when the tag does not authenticate.
  std::optional<Bytes> aes256_gcm_decrypt(
    const GcmKey& key,
    const GcmNonce& nonce,
    ByteView aad,
    ByteView ciphertext,
    const std::array<uint8_t, 16>& tag);

  std::string base64_encode(ByteView data);
  Bytes base64_decode(std::string_view text);

  Bytes system_random(size_t n);

  /// Seeded byte generator. Labeled draws are independent of the order in
  /// which other labels are drawn; `next()` is a sequential stream.
  class Drbg
  {
  public:
    explicit Drbg(ByteView seed);

    static Drbg from_u64(uint64_t seed);
    static Drbg from_system();

    Bytes derive(std::string_view label, size_t n) const;
    Bytes next(size_t n);

  private:
    Bytes seed_;
    uint64_t counter_ = 0;
  };

  /// ECDSA over P-384 with SHA-384. Signing uses RFC 6979 nonces, so equal
  /// inputs give equal signatures. Public keys are uncompressed SEC1 points
  /// (97 bytes); signatures are r || s, 48 bytes each, big-endian.
  class EcdsaP384
  {
  public:
    static constexpr size_t kPublicKeySize = 97;
    static constexpr size_t kSignatureSize = 96;

    /// `secret` is reduced modulo the group order.
    explicit EcdsaP384(ByteView secret);
    ~EcdsaP384();
    EcdsaP384(EcdsaP384&&) noexcept;
    EcdsaP384& operator=(EcdsaP384&&) noexcept;

    const Bytes& public_key() const
    {
      return public_key_;
    }

    Bytes sign(ByteView message) const;

    static bool verify(ByteView public_key, ByteView message, ByteView signature);

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    Bytes public_key_;
  };

  class Ed25519
  {
  public:
    static constexpr size_t kPublicKeySize = 32;
    static constexpr size_t kSignatureSize = 64;

    explicit Ed25519(const std::array<uint8_t, 32>& seed);
    ~Ed25519();
    Ed25519(Ed25519&&) noexcept;
    Ed25519& operator=(Ed25519&&) noexcept;

    const Bytes& public_key() const
    {
      return public_key_;
    }

    Bytes sign(ByteView message) const;

    static bool verify(ByteView public_key, ByteView message, ByteView signature);

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    Bytes public_key_;
  };
}
