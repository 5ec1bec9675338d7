// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/crypto.h"

#include <openssl/bn.h>
#include <openssl/core_names.h>
#include <openssl/ec.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/kdf.h>
#include <openssl/obj_mac.h>
#include <openssl/params.h>
#include <openssl/rand.h>

#include <cstring>

namespace nsgx::crypto
{
  namespace
  {
    [[noreturn]] void fail(const char* what)
    {
      throw Error(ErrorCode::CryptoError, what);
    }

    template <typename T, void (*Free)(T*)>
    struct Deleter
    {
      void operator()(T* p) const
      {
        Free(p);
      }
    };

    using MdCtxPtr = std::unique_ptr<EVP_MD_CTX, Deleter<EVP_MD_CTX, EVP_MD_CTX_free>>;
    using CipherCtxPtr =
      std::unique_ptr<EVP_CIPHER_CTX, Deleter<EVP_CIPHER_CTX, EVP_CIPHER_CTX_free>>;
    using PkeyPtr = std::unique_ptr<EVP_PKEY, Deleter<EVP_PKEY, EVP_PKEY_free>>;
    using PkeyCtxPtr = std::unique_ptr<EVP_PKEY_CTX, Deleter<EVP_PKEY_CTX, EVP_PKEY_CTX_free>>;
    using BnPtr = std::unique_ptr<BIGNUM, Deleter<BIGNUM, BN_clear_free>>;
    using BnCtxPtr = std::unique_ptr<BN_CTX, Deleter<BN_CTX, BN_CTX_free>>;
    using GroupPtr = std::unique_ptr<EC_GROUP, Deleter<EC_GROUP, EC_GROUP_free>>;
    using PointPtr = std::unique_ptr<EC_POINT, Deleter<EC_POINT, EC_POINT_free>>;
    using SigPtr = std::unique_ptr<ECDSA_SIG, Deleter<ECDSA_SIG, ECDSA_SIG_free>>;

    BnPtr bn_new()
    {
      BnPtr p(BN_new());
      if (!p)
        fail("BN_new");
      return p;
    }

    BnPtr bn_from(ByteView b)
    {
      BnPtr p(BN_bin2bn(b.data(), static_cast<int>(b.size()), nullptr));
      if (!p)
        fail("BN_bin2bn");
      return p;
    }

    Bytes bn_to_fixed(const BIGNUM* bn, size_t len)
    {
      Bytes out(len);
      if (BN_bn2binpad(bn, out.data(), static_cast<int>(len)) < 0)
        fail("BN_bn2binpad");
      return out;
    }

    GroupPtr p384_group()
    {
      GroupPtr g(EC_GROUP_new_by_curve_name(NID_secp384r1));
      if (!g)
        fail("EC_GROUP_new_by_curve_name");
      return g;
    }

    template <size_t N>
    std::array<uint8_t, N> digest_once(const EVP_MD* md, ByteView data)
    {
      std::array<uint8_t, N> out{};
      unsigned len = 0;
      if (!EVP_Digest(data.data(), data.size(), out.data(), &len, md, nullptr) || len != N)
        fail("EVP_Digest");
      return out;
    }
  }

  Digest32 sha256(ByteView data)
  {
    return digest_once<32>(EVP_sha256(), data);
  }

  Digest48 sha384(ByteView data)
  {
    return digest_once<48>(EVP_sha384(), data);
  }

  struct Sha256::Impl
  {
    MdCtxPtr ctx{EVP_MD_CTX_new()};
  };

  Sha256::Sha256() : impl_(std::make_unique<Impl>())
  {
    if (!impl_->ctx || !EVP_DigestInit_ex(impl_->ctx.get(), EVP_sha256(), nullptr))
      fail("sha256 init");
  }

  Sha256::Sha256(const Sha256& other) : impl_(std::make_unique<Impl>())
  {
    if (!impl_->ctx || !EVP_MD_CTX_copy_ex(impl_->ctx.get(), other.impl_->ctx.get()))
      fail("sha256 copy");
  }

  Sha256& Sha256::operator=(const Sha256& other)
  {
    if (this != &other)
    {
      Sha256 tmp(other);
      std::swap(impl_, tmp.impl_);
    }
    return *this;
  }

  Sha256::Sha256(Sha256&&) noexcept = default;
  Sha256& Sha256::operator=(Sha256&&) noexcept = default;
  Sha256::~Sha256() = default;

  void Sha256::update(ByteView data)
  {
    if (!EVP_DigestUpdate(impl_->ctx.get(), data.data(), data.size()))
      fail("sha256 update");
  }

  Digest32 Sha256::peek() const
  {
    MdCtxPtr copy(EVP_MD_CTX_new());
    if (!copy || !EVP_MD_CTX_copy_ex(copy.get(), impl_->ctx.get()))
      fail("sha256 copy");
    Digest32 out{};
    unsigned len = 0;
    if (!EVP_DigestFinal_ex(copy.get(), out.data(), &len))
      fail("sha256 final");
    return out;
  }

  struct Sha384::Impl
  {
    MdCtxPtr ctx{EVP_MD_CTX_new()};
  };

  Sha384::Sha384() : impl_(std::make_unique<Impl>())
  {
    if (!impl_->ctx || !EVP_DigestInit_ex(impl_->ctx.get(), EVP_sha384(), nullptr))
      fail("sha384 init");
  }

  Sha384::~Sha384() = default;

  void Sha384::update(ByteView data)
  {
    if (!EVP_DigestUpdate(impl_->ctx.get(), data.data(), data.size()))
      fail("sha384 update");
  }

  Digest48 Sha384::finish()
  {
    Digest48 out{};
    unsigned len = 0;
    if (!EVP_DigestFinal_ex(impl_->ctx.get(), out.data(), &len))
      fail("sha384 final");
    return out;
  }

  Bytes hmac_sha384(ByteView key, ByteView data)
  {
    Bytes out(48);
    unsigned len = 0;
    if (!HMAC(
          EVP_sha384(),
          key.data(),
          static_cast<int>(key.size()),
          data.data(),
          data.size(),
          out.data(),
          &len))
      fail("HMAC");
    out.resize(len);
    return out;
  }

  Bytes hkdf_sha256(ByteView ikm, ByteView salt, ByteView info, size_t length)
  {
    PkeyCtxPtr ctx(EVP_PKEY_CTX_new_id(EVP_PKEY_HKDF, nullptr));
    if (!ctx || EVP_PKEY_derive_init(ctx.get()) <= 0)
      fail("hkdf init");
    if (EVP_PKEY_CTX_set_hkdf_md(ctx.get(), EVP_sha256()) <= 0)
      fail("hkdf md");
    static const uint8_t empty = 0;
    if (
      EVP_PKEY_CTX_set1_hkdf_salt(
        ctx.get(), salt.empty() ? &empty : salt.data(), static_cast<int>(salt.size())) <= 0)
      fail("hkdf salt");
    if (EVP_PKEY_CTX_set1_hkdf_key(ctx.get(), ikm.data(), static_cast<int>(ikm.size())) <= 0)
      fail("hkdf key");
    if (
      !info.empty() &&
      EVP_PKEY_CTX_add1_hkdf_info(ctx.get(), info.data(), static_cast<int>(info.size())) <= 0)
      fail("hkdf info");
    Bytes out(length);
    size_t len = length;
    if (EVP_PKEY_derive(ctx.get(), out.data(), &len) <= 0 || len != length)
      fail("hkdf derive");
    return out;
  }

  GcmCiphertext aes256_gcm_encrypt(
    const GcmKey& key, const GcmNonce& nonce, ByteView aad, ByteView plaintext)
  {
    CipherCtxPtr ctx(EVP_CIPHER_CTX_new());
    if (!ctx || !EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.data(), nonce.data()))
      fail("gcm init");
    int len = 0;
    if (
      !aad.empty() &&
      !EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())))
      fail("gcm aad");
    GcmCiphertext out;
    out.ciphertext.resize(plaintext.size());
    if (
      !plaintext.empty() &&
      !EVP_EncryptUpdate(
        ctx.get(), out.ciphertext.data(), &len, plaintext.data(), static_cast<int>(plaintext.size())))
      fail("gcm update");
    if (!EVP_EncryptFinal_ex(ctx.get(), out.ciphertext.data() + plaintext.size(), &len))
      fail("gcm final");
    if (!EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, 16, out.tag.data()))
      fail("gcm tag");
    return out;
  }

  std::optional<Bytes> aes256_gcm_decrypt(
    const GcmKey& key,
    const GcmNonce& nonce,
    ByteView aad,
    ByteView ciphertext,
    const std::array<uint8_t, 16>& tag)
  {
    CipherCtxPtr ctx(EVP_CIPHER_CTX_new());
    if (!ctx || !EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.data(), nonce.data()))
      fail("gcm init");
    int len = 0;
    if (
      !aad.empty() &&
      !EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())))
      fail("gcm aad");
    Bytes plain(ciphertext.size());
    if (
      !ciphertext.empty() &&
      !EVP_DecryptUpdate(
        ctx.get(), plain.data(), &len, ciphertext.data(), static_cast<int>(ciphertext.size())))
      fail("gcm update");
    auto tag_copy = tag;
    if (!EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, 16, tag_copy.data()))
      fail("gcm set tag");
    if (EVP_DecryptFinal_ex(ctx.get(), plain.data() + ciphertext.size(), &len) <= 0)
    {
      OPENSSL_cleanse(plain.data(), plain.size());
      return std::nullopt;
    }
    return plain;
  }

  std::string base64_encode(ByteView data)
  {
    std::string out(4 * ((data.size() + 2) / 3), '\0');
    int n = EVP_EncodeBlock(
      reinterpret_cast<unsigned char*>(out.data()), data.data(), static_cast<int>(data.size()));
    out.resize(static_cast<size_t>(n));
    return out;
  }

  Bytes base64_decode(std::string_view text)
  {
    if (text.size() % 4 != 0)
      throw Error(ErrorCode::ParseError, "base64 length not a multiple of 4");
    Bytes out(3 * (text.size() / 4));
    int n = EVP_DecodeBlock(
      out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
    if (n < 0)
      throw Error(ErrorCode::ParseError, "invalid base64");
    size_t pad = 0;
    if (!text.empty() && text.back() == '=')
      ++pad;
    if (text.size() > 1 && text[text.size() - 2] == '=')
      ++pad;
    out.resize(static_cast<size_t>(n) - pad);
    return out;
  }

  Bytes system_random(size_t n)
  {
    Bytes out(n);
    if (RAND_bytes(out.data(), static_cast<int>(n)) != 1)
      fail("RAND_bytes");
    return out;
  }

  Drbg::Drbg(ByteView seed) : seed_(seed.begin(), seed.end()) {}

  Drbg Drbg::from_u64(uint64_t seed)
  {
    uint8_t raw[8];
    put_le64(raw, seed);
    auto d = sha256(raw);
    return Drbg(d);
  }

  Drbg Drbg::from_system()
  {
    return Drbg(system_random(32));
  }

  Bytes Drbg::derive(std::string_view label, size_t n) const
  {
    static constexpr std::string_view salt = "nsgx-drbg-label";
    return hkdf_sha256(
      seed_,
      {reinterpret_cast<const uint8_t*>(salt.data()), salt.size()},
      {reinterpret_cast<const uint8_t*>(label.data()), label.size()},
      n);
  }

  Bytes Drbg::next(size_t n)
  {
    static constexpr std::string_view salt = "nsgx-drbg-stream";
    uint8_t info[8];
    put_le64(info, counter_++);
    return hkdf_sha256(
      seed_, {reinterpret_cast<const uint8_t*>(salt.data()), salt.size()}, info, n);
  }

  struct EcdsaP384::Impl
  {
    GroupPtr group = p384_group();
    BnPtr order = bn_new();
    BnPtr secret;
    Bytes secret_octets;
  };

  EcdsaP384::EcdsaP384(ByteView secret) : impl_(std::make_unique<Impl>())
  {
    auto& g = *impl_;
    BnCtxPtr bnctx(BN_CTX_new());
    if (!bnctx || !EC_GROUP_get_order(g.group.get(), g.order.get(), bnctx.get()))
      fail("group order");

    // d = (secret mod (n - 1)) + 1, never zero.
    auto raw = bn_from(secret);
    auto n_minus_1 = bn_new();
    BN_copy(n_minus_1.get(), g.order.get());
    BN_sub_word(n_minus_1.get(), 1);
    g.secret = bn_new();
    if (!BN_mod(g.secret.get(), raw.get(), n_minus_1.get(), bnctx.get()))
      fail("BN_mod");
    BN_add_word(g.secret.get(), 1);
    g.secret_octets = bn_to_fixed(g.secret.get(), 48);

    PointPtr pub(EC_POINT_new(g.group.get()));
    if (
      !pub ||
      !EC_POINT_mul(g.group.get(), pub.get(), g.secret.get(), nullptr, nullptr, bnctx.get()))
      fail("EC_POINT_mul");
    public_key_.resize(kPublicKeySize);
    if (
      EC_POINT_point2oct(
        g.group.get(),
        pub.get(),
        POINT_CONVERSION_UNCOMPRESSED,
        public_key_.data(),
        public_key_.size(),
        bnctx.get()) != kPublicKeySize)
      fail("EC_POINT_point2oct");
  }

  EcdsaP384::~EcdsaP384()
  {
    if (impl_)
      OPENSSL_cleanse(impl_->secret_octets.data(), impl_->secret_octets.size());
  }

  EcdsaP384::EcdsaP384(EcdsaP384&&) noexcept = default;
  EcdsaP384& EcdsaP384::operator=(EcdsaP384&&) noexcept = default;

  Bytes EcdsaP384::sign(ByteView message) const
  {
    const auto& g = *impl_;
    BnCtxPtr bnctx(BN_CTX_new());
    if (!bnctx)
      fail("BN_CTX_new");

    // qlen == hlen == 384, so bits2int is a plain big-endian read and
    // bits2octets(h) is h mod q re-encoded on 48 bytes.
    auto h = sha384(message);
    auto e = bn_from(h);
    auto e_mod = bn_new();
    if (!BN_nnmod(e_mod.get(), e.get(), g.order.get(), bnctx.get()))
      fail("BN_nnmod");
    auto h_octets = bn_to_fixed(e_mod.get(), 48);

    Bytes v(48, 0x01);
    Bytes k(48, 0x00);
    auto hmac_cat = [&](std::initializer_list<ByteView> parts) {
      Bytes buf;
      for (auto p : parts)
        buf.insert(buf.end(), p.begin(), p.end());
      return hmac_sha384(k, buf);
    };
    const uint8_t zero = 0x00;
    const uint8_t one = 0x01;
    k = hmac_cat({v, {&zero, 1}, g.secret_octets, h_octets});
    v = hmac_sha384(k, v);
    k = hmac_cat({v, {&one, 1}, g.secret_octets, h_octets});
    v = hmac_sha384(k, v);

    auto r = bn_new();
    auto s = bn_new();
    auto kinv = bn_new();
    auto tmp = bn_new();
    auto x = bn_new();
    PointPtr kg(EC_POINT_new(g.group.get()));
    if (!kg)
      fail("EC_POINT_new");

    for (;;)
    {
      v = hmac_sha384(k, v);
      auto nonce = bn_from(v);
      if (!BN_is_zero(nonce.get()) && BN_cmp(nonce.get(), g.order.get()) < 0)
      {
        if (
          !EC_POINT_mul(g.group.get(), kg.get(), nonce.get(), nullptr, nullptr, bnctx.get()) ||
          !EC_POINT_get_affine_coordinates(g.group.get(), kg.get(), x.get(), nullptr, bnctx.get()))
          fail("k*G");
        if (!BN_nnmod(r.get(), x.get(), g.order.get(), bnctx.get()))
          fail("r");
        if (!BN_is_zero(r.get()))
        {
          // s = k^-1 (e + r d) mod q
          if (
            !BN_mod_inverse(kinv.get(), nonce.get(), g.order.get(), bnctx.get()) ||
            !BN_mod_mul(tmp.get(), r.get(), g.secret.get(), g.order.get(), bnctx.get()) ||
            !BN_mod_add(tmp.get(), tmp.get(), e_mod.get(), g.order.get(), bnctx.get()) ||
            !BN_mod_mul(s.get(), kinv.get(), tmp.get(), g.order.get(), bnctx.get()))
            fail("s");
          if (!BN_is_zero(s.get()))
            break;
        }
      }
      k = hmac_cat({v, {&zero, 1}});
      v = hmac_sha384(k, v);
    }

    Bytes sig = bn_to_fixed(r.get(), 48);
    auto s_bytes = bn_to_fixed(s.get(), 48);
    sig.insert(sig.end(), s_bytes.begin(), s_bytes.end());
    return sig;
  }

  bool EcdsaP384::verify(ByteView public_key, ByteView message, ByteView signature)
  {
    if (public_key.size() != kPublicKeySize || signature.size() != kSignatureSize)
      return false;

    OSSL_PARAM params[] = {
      OSSL_PARAM_construct_utf8_string(
        OSSL_PKEY_PARAM_GROUP_NAME, const_cast<char*>("P-384"), 0),
      OSSL_PARAM_construct_octet_string(
        OSSL_PKEY_PARAM_PUB_KEY, const_cast<uint8_t*>(public_key.data()), public_key.size()),
      OSSL_PARAM_construct_end()};
    PkeyCtxPtr fctx(EVP_PKEY_CTX_new_from_name(nullptr, "EC", nullptr));
    EVP_PKEY* raw_key = nullptr;
    if (
      !fctx || EVP_PKEY_fromdata_init(fctx.get()) <= 0 ||
      EVP_PKEY_fromdata(fctx.get(), &raw_key, EVP_PKEY_PUBLIC_KEY, params) <= 0)
      return false;
    PkeyPtr key(raw_key);

    SigPtr sig(ECDSA_SIG_new());
    BIGNUM* r = BN_bin2bn(signature.data(), 48, nullptr);
    BIGNUM* s = BN_bin2bn(signature.data() + 48, 48, nullptr);
    if (!sig || !r || !s || !ECDSA_SIG_set0(sig.get(), r, s))
    {
      BN_free(r);
      BN_free(s);
      return false;
    }
    unsigned char* der = nullptr;
    int der_len = i2d_ECDSA_SIG(sig.get(), &der);
    if (der_len <= 0)
      return false;
    Bytes der_sig(der, der + der_len);
    OPENSSL_free(der);

    MdCtxPtr md(EVP_MD_CTX_new());
    if (!md || EVP_DigestVerifyInit(md.get(), nullptr, EVP_sha384(), nullptr, key.get()) <= 0)
      return false;
    return EVP_DigestVerify(
             md.get(), der_sig.data(), der_sig.size(), message.data(), message.size()) == 1;
  }

  struct Ed25519::Impl
  {
    PkeyPtr key;
  };

  Ed25519::Ed25519(const std::array<uint8_t, 32>& seed) : impl_(std::make_unique<Impl>())
  {
    impl_->key.reset(
      EVP_PKEY_new_raw_private_key(EVP_PKEY_ED25519, nullptr, seed.data(), seed.size()));
    if (!impl_->key)
      fail("ed25519 key");
    size_t len = kPublicKeySize;
    public_key_.resize(len);
    if (!EVP_PKEY_get_raw_public_key(impl_->key.get(), public_key_.data(), &len))
      fail("ed25519 public");
  }

  Ed25519::~Ed25519() = default;
  Ed25519::Ed25519(Ed25519&&) noexcept = default;
  Ed25519& Ed25519::operator=(Ed25519&&) noexcept = default;

  Bytes Ed25519::sign(ByteView message) const
  {
    MdCtxPtr md(EVP_MD_CTX_new());
    if (!md || EVP_DigestSignInit(md.get(), nullptr, nullptr, nullptr, impl_->key.get()) <= 0)
      fail("ed25519 sign init");
    Bytes sig(kSignatureSize);
    size_t len = sig.size();
    if (EVP_DigestSign(md.get(), sig.data(), &len, message.data(), message.size()) <= 0)
      fail("ed25519 sign");
    return sig;
  }

  bool Ed25519::verify(ByteView public_key, ByteView message, ByteView signature)
  {
    if (public_key.size() != kPublicKeySize || signature.size() != kSignatureSize)
      return false;
    PkeyPtr key(EVP_PKEY_new_raw_public_key(
      EVP_PKEY_ED25519, nullptr, public_key.data(), public_key.size()));
    if (!key)
      return false;
    MdCtxPtr md(EVP_MD_CTX_new());
    if (!md || EVP_DigestVerifyInit(md.get(), nullptr, nullptr, nullptr, key.get()) <= 0)
      return false;
    return EVP_DigestVerify(
             md.get(), signature.data(), signature.size(), message.data(), message.size()) == 1;
  }
}
