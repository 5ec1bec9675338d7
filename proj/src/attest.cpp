// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/attest.h"

#include "json.hpp"

#include <cstring>

namespace nsgx::attest
{
  namespace
  {
    ByteView as_bytes(std::string_view s)
    {
      return {reinterpret_cast<const uint8_t*>(s.data()), s.size()};
    }

    template <size_t N>
    std::array<uint8_t, N> to_array(ByteView b)
    {
      std::array<uint8_t, N> out{};
      if (b.size() != N)
        throw Error(ErrorCode::CryptoError, "unexpected key length");
      std::memcpy(out.data(), b.data(), N);
      return out;
    }

    Bytes channel_aad(uint32_t channel, uint64_t seq, PayloadType type)
    {
      Bytes aad(13);
      put_le32(aad.data(), channel);
      put_le64(aad.data() + 4, seq);
      aad[12] = static_cast<uint8_t>(type);
      return aad;
    }
  }

  crypto::GcmNonce channel_nonce(uint32_t channel, uint64_t seq)
  {
    crypto::GcmNonce n{};
    put_le32(n.data(), channel);
    put_le64(n.data() + 4, seq);
    return n;
  }

  GuestMessage channel_seal(
    const Key32& vmpck, uint32_t channel, uint64_t seq, PayloadType type, ByteView payload)
  {
    auto ct = crypto::aes256_gcm_encrypt(
      vmpck, channel_nonce(channel, seq), channel_aad(channel, seq, type), payload);
    return {channel, seq, type, std::move(ct.ciphertext), ct.tag};
  }

  Bytes ChannelReceiver::open(const GuestMessage& m)
  {
    if (m.channel != channel_)
      throw Error(ErrorCode::AuthError, "message for another channel");
    auto plain = crypto::aes256_gcm_decrypt(
      key_,
      channel_nonce(m.channel, m.seq),
      channel_aad(m.channel, m.seq, m.payload_type),
      m.ciphertext,
      m.tag);
    if (!plain)
      throw Error(ErrorCode::AuthError, "guest message failed authentication");
    if (m.seq != expected_seq_)
      throw Error(
        ErrorCode::ReplayError,
        "sequence " + std::to_string(m.seq) + ", expected " + std::to_string(expected_seq_));
    ++expected_seq_;
    return std::move(*plain);
  }

  Bytes SnpReport::body() const
  {
    Bytes out(kBodySize);
    put_le32(out.data(), version);
    put_le32(out.data() + 4, vmpl.value());
    std::memcpy(out.data() + 8, launch_digest.data(), 48);
    std::memcpy(out.data() + 56, report_data.data(), 64);
    return out;
  }

  Bytes SnpReport::serialize() const
  {
    auto out = body();
    out.insert(out.end(), signature.begin(), signature.end());
    return out;
  }

  SnpReport SnpReport::parse(ByteView bytes)
  {
    if (bytes.size() != kBodySize + crypto::EcdsaP384::kSignatureSize)
      throw Error(ErrorCode::ParseError, "SNP report has wrong size");
    SnpReport r;
    r.version = get_le32(bytes.data());
    auto v = get_le32(bytes.data() + 4);
    if (v >= Vmpl::kCount)
      throw Error(ErrorCode::ParseError, "SNP report VMPL out of range");
    r.vmpl = Vmpl{v};
    std::memcpy(r.launch_digest.data(), bytes.data() + 8, 48);
    std::memcpy(r.report_data.data(), bytes.data() + 56, 64);
    r.signature.assign(bytes.begin() + kBodySize, bytes.end());
    return r;
  }

  Bytes EnclaveReport::serialize() const
  {
    Bytes out(kSize);
    std::memcpy(out.data(), mrenclave.data(), 32);
    put_le64(out.data() + 32, attributes);
    std::memcpy(out.data() + 40, report_data.data(), 64);
    return out;
  }

  EnclaveReport EnclaveReport::parse(ByteView bytes)
  {
    if (bytes.size() != kSize)
      throw Error(ErrorCode::ParseError, "enclave report has wrong size");
    EnclaveReport r;
    std::memcpy(r.mrenclave.data(), bytes.data(), 32);
    r.attributes = get_le64(bytes.data() + 32);
    std::memcpy(r.report_data.data(), bytes.data() + 40, 64);
    return r;
  }

  Digest48 compute_launch_digest(ByteView monitor_image, ByteView rmp_permission_map)
  {
    crypto::Sha384 h;
    h.update(monitor_image);
    h.update(rmp_permission_map);
    return h.finish();
  }

  Key32 derive_guest_key(const Key32& root_secret, Vmpl vmpl)
  {
    Bytes info(as_bytes("guest-key").begin(), as_bytes("guest-key").end());
    info.push_back(static_cast<uint8_t>(vmpl.value()));
    return to_array<32>(crypto::hkdf_sha256(root_secret, as_bytes("amd-sp"), info, 32));
  }

  AmdSp::AmdSp(const crypto::Drbg& drbg, const Digest48& launch_digest) :
    root_secret_(to_array<32>(drbg.derive("amd-sp/root-secret", 32))),
    vcek_(drbg.derive("amd-sp/vcek", 64)),
    launch_digest_(launch_digest)
  {
    for (unsigned v = 0; v < Vmpl::kCount; ++v)
    {
      vmpck_[v] = to_array<32>(drbg.derive("amd-sp/vmpck" + std::to_string(v), 32));
      next_request_seq_[v] = 1;
    }
  }

  GuestMessage AmdSp::handle_guest_request(const GuestMessage& request)
  {
    if (request.channel >= Vmpl::kCount)
      throw Error(ErrorCode::ChannelError, "no such VMPCK channel");
    const Vmpl caller{request.channel};
    ChannelReceiver rx(vmpck_[caller.value()], request.channel, next_request_seq_[caller.value()]);
    auto payload = rx.open(request);
    next_request_seq_[caller.value()] = request.seq + 2;

    Bytes response;
    PayloadType type{};
    switch (request.payload_type)
    {
      case PayloadType::ReportReq:
        response = handle_report_req(caller, payload);
        type = PayloadType::ReportResp;
        break;
      case PayloadType::KeyReq:
        response = handle_key_req(caller, payload);
        type = PayloadType::KeyResp;
        break;
      default:
        response.resize(4);
        put_le32(response.data(), GuestRequestStatus::kBadRequest);
        type = request.payload_type;
        break;
    }
    return channel_seal(vmpck_[caller.value()], request.channel, request.seq + 1, type, response);
  }

  Bytes AmdSp::handle_report_req(Vmpl caller, ByteView payload)
  {
    Bytes out(4);
    if (payload.size() != 4 + 64 || get_le32(payload.data()) >= Vmpl::kCount)
    {
      put_le32(out.data(), GuestRequestStatus::kBadRequest);
      return out;
    }
    Vmpl requested{get_le32(payload.data())};
    if (requested < caller)
    {
      put_le32(out.data(), GuestRequestStatus::kVmplDenied);
      return out;
    }

    SnpReport r;
    r.vmpl = requested;
    r.launch_digest = launch_digest_;
    std::memcpy(r.report_data.data(), payload.data() + 4, 64);
    r.signature = vcek_.sign(r.body());

    put_le32(out.data(), GuestRequestStatus::kOk);
    auto bytes = r.serialize();
    out.insert(out.end(), bytes.begin(), bytes.end());
    return out;
  }

  Bytes AmdSp::handle_key_req(Vmpl caller, ByteView payload)
  {
    Bytes out(4);
    if (payload.size() != 4 || get_le32(payload.data()) >= Vmpl::kCount)
    {
      put_le32(out.data(), GuestRequestStatus::kBadRequest);
      return out;
    }
    Vmpl requested{get_le32(payload.data())};
    if (requested < caller)
    {
      put_le32(out.data(), GuestRequestStatus::kVmplDenied);
      return out;
    }
    put_le32(out.data(), GuestRequestStatus::kOk);
    auto key = derive_guest_key(root_secret_, requested);
    out.insert(out.end(), key.begin(), key.end());
    return out;
  }

  Bytes GuestRequester::exchange(AmdSp& sp, HostRelay& relay, PayloadType type, ByteView payload)
  {
    const auto seq = next_seq_;
    auto request = channel_seal(vmpck_, vmpl_.value(), seq, type, payload);
    if (relay.on_request)
      relay.on_request(request);
    relay.transcript.push_back(request);

    auto response = sp.handle_guest_request(request);
    next_seq_ = seq + 2;
    if (relay.on_response)
      relay.on_response(response);
    relay.transcript.push_back(response);

    ChannelReceiver rx(vmpck_, vmpl_.value(), seq + 1);
    auto plain = rx.open(response);
    if (plain.size() < 4)
      throw Error(ErrorCode::ChannelError, "short response");
    switch (get_le32(plain.data()))
    {
      case GuestRequestStatus::kOk:
        break;
      case GuestRequestStatus::kVmplDenied:
        throw Error(ErrorCode::VmplDenied, "requested VMPL is more privileged than the caller");
      default:
        throw Error(ErrorCode::ChannelError, "request rejected by the AMD-SP");
    }
    plain.erase(plain.begin(), plain.begin() + 4);
    return plain;
  }

  SnpReport GuestRequester::snp_report_req(
    AmdSp& sp, HostRelay& relay, Vmpl requested, const ReportData& data)
  {
    Bytes payload(4);
    put_le32(payload.data(), requested.value());
    payload.insert(payload.end(), data.begin(), data.end());
    return SnpReport::parse(exchange(sp, relay, PayloadType::ReportReq, payload));
  }

  Key32 GuestRequester::msg_key_req(AmdSp& sp, HostRelay& relay, Vmpl requested)
  {
    Bytes payload(4);
    put_le32(payload.data(), requested.value());
    return to_array<32>(exchange(sp, relay, PayloadType::KeyReq, payload));
  }

  Aik::Aik(const std::array<uint8_t, 32>& seed) : key_(seed) {}

  Digest32 Aik::public_digest() const
  {
    return crypto::sha256(key_.public_key());
  }

  ReportData Aik::binding_report_data() const
  {
    ReportData rd{};
    auto d = public_digest();
    std::memcpy(rd.data(), d.data(), d.size());
    return rd;
  }

  NestedBundle build_bundle(
    const Aik& aik, const std::optional<SnpReport>& binding_report, const EnclaveReport& body)
  {
    if (!binding_report)
      throw Error(ErrorCode::PreconditionError, "no AIK binding report has been obtained");
    NestedBundle b;
    b.snp_report = *binding_report;
    b.aik_public = aik.public_key();
    b.enclave_report = body;
    b.enclave_sig = aik.sign(body.serialize());
    return b;
  }

  Verdict verify_bundle(const NestedBundle& bundle, const TrustAnchors& trust)
  {
    const auto& snp = bundle.snp_report;
    if (!crypto::EcdsaP384::verify(trust.vcek_public, snp.body(), snp.signature))
      return Verdict::reject(reject::kVcekSignature);
    if (snp.vmpl != Vmpl{0})
      return Verdict::reject(reject::kVmpl);
    if (snp.launch_digest != trust.launch_digest)
      return Verdict::reject(reject::kLaunchDigest);
    auto aik_digest = crypto::sha256(bundle.aik_public);
    if (!std::equal(aik_digest.begin(), aik_digest.end(), snp.report_data.begin()))
      return Verdict::reject(reject::kAikBinding);
    if (!crypto::Ed25519::verify(
          bundle.aik_public, bundle.enclave_report.serialize(), bundle.enclave_sig))
      return Verdict::reject(reject::kEnclaveSignature);
    if (bundle.enclave_report.mrenclave != trust.mrenclave)
      return Verdict::reject(reject::kMrenclave);
    return Verdict::accept();
  }

  namespace
  {
    using ordered = nlohmann::ordered_json;

    template <size_t N>
    std::array<uint8_t, N> hex_field(const nlohmann::json& j, const char* name)
    {
      if (!j.contains(name) || !j.at(name).is_string())
        throw Error(ErrorCode::ParseError, std::string("missing string field '") + name + "'");
      try
      {
        return array_from_hex<N>(j.at(name).get<std::string>());
      }
      catch (const Error& e)
      {
        throw Error(ErrorCode::ParseError, std::string("field '") + name + "': " + e.what());
      }
    }

    Bytes b64_field(const nlohmann::json& j, const char* name)
    {
      if (!j.contains(name) || !j.at(name).is_string())
        throw Error(ErrorCode::ParseError, std::string("missing string field '") + name + "'");
      try
      {
        return crypto::base64_decode(j.at(name).get<std::string>());
      }
      catch (const Error& e)
      {
        throw Error(ErrorCode::ParseError, std::string("field '") + name + "': " + e.what());
      }
    }

    nlohmann::json parse_object(std::string_view text)
    {
      try
      {
        auto j = nlohmann::json::parse(text);
        if (!j.is_object())
          throw Error(ErrorCode::ParseError, "expected a JSON object");
        return j;
      }
      catch (const nlohmann::json::exception& e)
      {
        throw Error(ErrorCode::ParseError, e.what());
      }
    }

    const nlohmann::json& object_field(const nlohmann::json& j, const char* name)
    {
      if (!j.contains(name) || !j.at(name).is_object())
        throw Error(ErrorCode::ParseError, std::string("missing object field '") + name + "'");
      return j.at(name);
    }

    uint64_t uint_field(const nlohmann::json& j, const char* name)
    {
      if (!j.contains(name) || !j.at(name).is_number_unsigned())
        throw Error(ErrorCode::ParseError, std::string("missing unsigned field '") + name + "'");
      return j.at(name).get<uint64_t>();
    }
  }

  std::string bundle_to_json(const NestedBundle& b)
  {
    ordered j;
    j["format"] = "nestedsgx-bundle/1";
    ordered snp;
    snp["version"] = b.snp_report.version;
    snp["vmpl"] = b.snp_report.vmpl.value();
    snp["launch_digest"] = to_hex(b.snp_report.launch_digest);
    snp["report_data"] = crypto::base64_encode(b.snp_report.report_data);
    snp["signature"] = crypto::base64_encode(b.snp_report.signature);
    j["snp_report"] = snp;
    j["aik_public"] = crypto::base64_encode(b.aik_public);
    ordered er;
    er["mrenclave"] = to_hex(b.enclave_report.mrenclave);
    er["attributes"] = b.enclave_report.attributes;
    er["report_data"] = crypto::base64_encode(b.enclave_report.report_data);
    j["enclave_report"] = er;
    j["enclave_sig"] = crypto::base64_encode(b.enclave_sig);
    return j.dump(2) + "\n";
  }

  NestedBundle bundle_from_json(std::string_view text)
  {
    auto j = parse_object(text);
    NestedBundle b;
    const auto& snp = object_field(j, "snp_report");
    b.snp_report.version = static_cast<uint32_t>(uint_field(snp, "version"));
    auto vmpl = uint_field(snp, "vmpl");
    if (vmpl >= Vmpl::kCount)
      throw Error(ErrorCode::ParseError, "snp_report.vmpl out of range");
    b.snp_report.vmpl = Vmpl{static_cast<unsigned>(vmpl)};
    b.snp_report.launch_digest = hex_field<48>(snp, "launch_digest");
    auto rd = b64_field(snp, "report_data");
    if (rd.size() != 64)
      throw Error(ErrorCode::ParseError, "snp_report.report_data must be 64 bytes");
    std::memcpy(b.snp_report.report_data.data(), rd.data(), 64);
    b.snp_report.signature = b64_field(snp, "signature");
    b.aik_public = b64_field(j, "aik_public");

    const auto& er = object_field(j, "enclave_report");
    b.enclave_report.mrenclave = hex_field<32>(er, "mrenclave");
    b.enclave_report.attributes = uint_field(er, "attributes");
    auto erd = b64_field(er, "report_data");
    if (erd.size() != 64)
      throw Error(ErrorCode::ParseError, "enclave_report.report_data must be 64 bytes");
    std::memcpy(b.enclave_report.report_data.data(), erd.data(), 64);
    b.enclave_sig = b64_field(j, "enclave_sig");
    return b;
  }

  std::string anchors_to_json(const TrustAnchors& a)
  {
    ordered j;
    j["format"] = "nestedsgx-anchors/1";
    j["vcek_public"] = crypto::base64_encode(a.vcek_public);
    j["launch_digest"] = to_hex(a.launch_digest);
    j["mrenclave"] = to_hex(a.mrenclave);
    return j.dump(2) + "\n";
  }

  TrustAnchors anchors_from_json(std::string_view text)
  {
    auto j = parse_object(text);
    TrustAnchors a;
    a.vcek_public = b64_field(j, "vcek_public");
    a.launch_digest = hex_field<48>(j, "launch_digest");
    a.mrenclave = hex_field<32>(j, "mrenclave");
    return a;
  }

  Key32 derive_enclave_key(
    const Key32& guest_key,
    KeyName name,
    const Digest32& mrenclave,
    const std::array<uint8_t, 16>& key_id)
  {
    Bytes info(2 + 32 + 16);
    info[0] = static_cast<uint8_t>(static_cast<uint16_t>(name) & 0xff);
    info[1] = static_cast<uint8_t>(static_cast<uint16_t>(name) >> 8);
    std::memcpy(info.data() + 2, mrenclave.data(), 32);
    std::memcpy(info.data() + 34, key_id.data(), 16);
    return to_array<32>(crypto::hkdf_sha256(guest_key, as_bytes("nestedsgx-egetkey"), info, 32));
  }

  SealedBlob seal(
    const Key32& key,
    const std::array<uint8_t, 16>& key_id,
    const crypto::GcmNonce& nonce,
    ByteView plaintext)
  {
    auto ct = crypto::aes256_gcm_encrypt(key, nonce, key_id, plaintext);
    return {key_id, nonce, std::move(ct.ciphertext), ct.tag};
  }

  Bytes unseal(const Key32& key, const SealedBlob& blob)
  {
    auto plain = crypto::aes256_gcm_decrypt(key, blob.nonce, blob.key_id, blob.ciphertext, blob.tag);
    if (!plain)
      throw Error(ErrorCode::AuthError, "sealed blob does not authenticate under this key");
    return std::move(*plain);
  }
}
