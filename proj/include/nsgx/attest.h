// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/common.h"
#include "nsgx/crypto.h"

#include <functional>
#include <optional>
#include <string>

// The modeled AMD-SP (VCEK, VMPCK channels, SNP report and key requests),
// the monitor's attestation identity key, the nested attestation bundle and
// its verifier, and sealing.

namespace nsgx::attest
{
  using ReportData = std::array<uint8_t, 64>;
  using Key32 = std::array<uint8_t, 32>;

  // ----- guest <-> AMD-SP message channel -----

  enum class PayloadType : uint8_t
  {
    ReportReq = 1,
    ReportResp = 2,
    KeyReq = 3,
    KeyResp = 4,
  };

  struct GuestMessage
  {
    uint32_t channel = 0;
    uint64_t seq = 0;
    PayloadType payload_type = PayloadType::ReportReq;
    Bytes ciphertext;
    std::array<uint8_t, 16> tag{};
  };

  /// 96-bit nonce: channel id u32 LE | seq u64 LE.
  crypto::GcmNonce channel_nonce(uint32_t channel, uint64_t seq);

  /// AES-256-GCM over `payload`; (channel, seq, payload_type) are bound as
  /// associated data.
  GuestMessage channel_seal(
    const Key32& vmpck, uint32_t channel, uint64_t seq, PayloadType type, ByteView payload);

  /// Receiving end of one direction of a channel. open() authenticates
  /// first (AuthError) and then requires seq == expected (ReplayError for
  /// stale or skipped numbers); only a successful open advances the
  /// counter.
  class ChannelReceiver
  {
  public:
    ChannelReceiver(Key32 key, uint32_t channel, uint64_t first_seq) :
      key_(key),
      channel_(channel),
      expected_seq_(first_seq)
    {}

    Bytes open(const GuestMessage& m);

    uint64_t expected_seq() const
    {
      return expected_seq_;
    }

  private:
    Key32 key_;
    uint32_t channel_;
    uint64_t expected_seq_;
  };

  /// The host-controlled path between guest and AMD-SP. Hooks may modify,
  /// replace, or replay messages; every message that crosses is recorded.
  struct HostRelay
  {
    std::function<void(GuestMessage&)> on_request;
    std::function<void(GuestMessage&)> on_response;
    std::vector<GuestMessage> transcript;
  };

  // ----- reports -----

  struct SnpReport
  {
    static constexpr size_t kBodySize = 120;

    uint32_t version = 1;
    Vmpl vmpl;
    Digest48 launch_digest{};
    ReportData report_data{};
    Bytes signature;

    /// version u32 | vmpl u32 | launch_digest | report_data.
    Bytes body() const;
    Bytes serialize() const;
    static SnpReport parse(ByteView bytes);
  };

  struct EnclaveReport
  {
    static constexpr size_t kSize = 104;

    Digest32 mrenclave{};
    uint64_t attributes = 0;
    ReportData report_data{};

    /// mrenclave | attributes u64 LE | report_data.
    Bytes serialize() const;
    static EnclaveReport parse(ByteView bytes);

    bool operator==(const EnclaveReport&) const = default;
  };

  /// Launch measurement: SHA-384(initial monitor image | RMP permission map).
  Digest48 compute_launch_digest(ByteView monitor_image, ByteView rmp_permission_map);

  enum class KeyName : uint16_t
  {
    SealKey = 1,
    ReportKey = 2,
  };

  // ----- AMD-SP -----

  struct GuestRequestStatus
  {
    static constexpr uint32_t kOk = 0;
    static constexpr uint32_t kVmplDenied = 1;
    static constexpr uint32_t kBadRequest = 2;
  };

  class AmdSp
  {
  public:
    /// Key material (root secret, VCEK, VMPCKs) is drawn from `drbg` by
    /// label, so equal seeds give equal machines.
    AmdSp(const crypto::Drbg& drbg, const Digest48& launch_digest);

    const Bytes& vcek_public() const
    {
      return vcek_.public_key();
    }

    const Digest48& launch_digest() const
    {
      return launch_digest_;
    }

    /// Secrets-page content handed to the guest image at launch.
    const Key32& vmpck(Vmpl v) const
    {
      return vmpck_[v.value()];
    }

    /// SNP_GUEST_REQUEST. The caller's VMPL is the channel index. Throws
    /// AuthError/ReplayError when the request does not open; policy
    /// failures come back as an authenticated error status.
    GuestMessage handle_guest_request(const GuestMessage& request);

  private:
    Bytes handle_report_req(Vmpl caller, ByteView payload);
    Bytes handle_key_req(Vmpl caller, ByteView payload);

    Key32 root_secret_{};
    crypto::EcdsaP384 vcek_;
    std::array<Key32, Vmpl::kCount> vmpck_{};
    std::array<uint64_t, Vmpl::kCount> next_request_seq_{};
    Digest48 launch_digest_{};
  };

  /// Guest-side requester for one VMPCK channel. Requests use odd sequence
  /// numbers starting at 1, responses the following even number.
  class GuestRequester
  {
  public:
    GuestRequester(Vmpl vmpl, const Key32& vmpck) : vmpl_(vmpl), vmpck_(vmpck) {}

    Vmpl vmpl() const
    {
      return vmpl_;
    }

    /// SNP_REPORT_REQ. VmplDenied if requested < own VMPL.
    SnpReport snp_report_req(AmdSp& sp, HostRelay& relay, Vmpl requested, const ReportData& data);

    /// MSG_KEY_REQ. VmplDenied if requested < own VMPL.
    Key32 msg_key_req(AmdSp& sp, HostRelay& relay, Vmpl requested);

    uint64_t next_seq() const
    {
      return next_seq_;
    }

  private:
    Bytes exchange(AmdSp& sp, HostRelay& relay, PayloadType type, ByteView payload);

    Vmpl vmpl_;
    Key32 vmpck_;
    uint64_t next_seq_ = 1;
  };

  /// Pure derivation used by the AMD-SP: HKDF(root, "guest-key" | vmpl).
  Key32 derive_guest_key(const Key32& root_secret, Vmpl vmpl);

  // ----- attestation identity key and bundle -----

  class Aik
  {
  public:
    explicit Aik(const std::array<uint8_t, 32>& seed);

    const Bytes& public_key() const
    {
      return key_.public_key();
    }

    Digest32 public_digest() const;

    /// Binding payload for the SNP report: digest in bytes 0..31, zeros
    /// after.
    ReportData binding_report_data() const;

    Bytes sign(ByteView message) const
    {
      return key_.sign(message);
    }

  private:
    crypto::Ed25519 key_;
  };

  struct NestedBundle
  {
    SnpReport snp_report;
    Bytes aik_public;
    EnclaveReport enclave_report;
    Bytes enclave_sig;
  };

  /// Throws PreconditionError when `binding_report` is absent.
  NestedBundle build_bundle(
    const Aik& aik, const std::optional<SnpReport>& binding_report, const EnclaveReport& body);

  struct TrustAnchors
  {
    Bytes vcek_public;
    Digest48 launch_digest{};
    Digest32 mrenclave{};
  };

  namespace reject
  {
    constexpr std::string_view kVcekSignature = "vcek-signature";
    constexpr std::string_view kVmpl = "vmpl";
    constexpr std::string_view kLaunchDigest = "launch-digest";
    constexpr std::string_view kAikBinding = "aik-binding";
    constexpr std::string_view kEnclaveSignature = "enclave-signature";
    constexpr std::string_view kMrenclave = "mrenclave";
  }

  struct Verdict
  {
    bool accepted = false;
    /// First failed check, empty on Accept.
    std::string reason;

    static Verdict accept()
    {
      return {true, {}};
    }

    static Verdict reject(std::string_view why)
    {
      return {false, std::string(why)};
    }
  };

  /// Stateless; checks in order: VCEK signature, VMPL0, launch digest,
  /// AIK binding, enclave signature, MRENCLAVE.
  Verdict verify_bundle(const NestedBundle& bundle, const TrustAnchors& trust);

  /// Canonical JSON: fixed key order, base64 for binary fields, hex for
  /// digests.
  std::string bundle_to_json(const NestedBundle& bundle);
  NestedBundle bundle_from_json(std::string_view text);

  std::string anchors_to_json(const TrustAnchors& anchors);
  TrustAnchors anchors_from_json(std::string_view text);

  // ----- sealing -----

  /// HKDF(guest_key, key_name u16 | mrenclave | key_id).
  Key32 derive_enclave_key(
    const Key32& guest_key,
    KeyName name,
    const Digest32& mrenclave,
    const std::array<uint8_t, 16>& key_id);

  inline Key32 derive_sealing_key(
    const Key32& guest_key, const Digest32& mrenclave, const std::array<uint8_t, 16>& key_id)
  {
    return derive_enclave_key(guest_key, KeyName::SealKey, mrenclave, key_id);
  }

  struct SealedBlob
  {
    std::array<uint8_t, 16> key_id{};
    crypto::GcmNonce nonce{};
    Bytes ciphertext;
    std::array<uint8_t, 16> tag{};
  };

  SealedBlob seal(
    const Key32& key,
    const std::array<uint8_t, 16>& key_id,
    const crypto::GcmNonce& nonce,
    ByteView plaintext);

  /// Throws AuthError under any other key.
  Bytes unseal(const Key32& key, const SealedBlob& blob);
}
