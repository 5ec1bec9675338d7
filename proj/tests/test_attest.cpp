// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/attest.h"

#include "doctest.h"
#include "oracle.h"
#include "support.h"

#include <functional>
#include <random>

using namespace nsgx;
using namespace nsgx::attest;

namespace
{
  constexpr Vmpl V0{0};
  constexpr Vmpl V1{1};

  ErrorCode code_of(const std::function<void()>& f)
  {
    try
    {
      f();
    }
    catch (const Error& e)
    {
      return e.code();
    }
    FAIL("no error raised");
    return ErrorCode::ParseError;
  }

  Key32 key_from(uint64_t seed)
  {
    auto b = crypto::Drbg::from_u64(seed).derive("test/key", 32);
    Key32 k{};
    std::copy(b.begin(), b.end(), k.begin());
    return k;
  }

  Digest48 launch(uint8_t fill)
  {
    Digest48 d{};
    d.fill(fill);
    return d;
  }

  struct Chain
  {
    AmdSp sp;
    HostRelay relay;
    Aik aik;
    std::optional<SnpReport> binding;
    EnclaveReport body;
    NestedBundle bundle;
    TrustAnchors anchors;

    explicit Chain(uint64_t seed) :
      sp(crypto::Drbg::from_u64(seed), launch(0x4c)),
      aik(nsgx::test::aik_seed(seed))
    {
      GuestRequester r0(V0, sp.vmpck(V0));
      binding = r0.snp_report_req(sp, relay, V0, aik.binding_report_data());
      body.mrenclave.fill(0x3e);
      body.attributes = 4;
      body.report_data[5] = 9;
      bundle = build_bundle(aik, binding, body);
      anchors = {sp.vcek_public(), sp.launch_digest(), body.mrenclave};
    }
  };
}

TEST_CASE("channel messages round-trip")
{
  auto k = key_from(1);
  Bytes payload = {1, 2, 3, 4, 5};
  auto m = channel_seal(k, 1, 7, PayloadType::KeyReq, payload);
  CHECK(m.channel == 1);
  CHECK(m.seq == 7);
  CHECK(m.ciphertext != payload);
  ChannelReceiver rx(k, 1, 7);
  CHECK(rx.open(m) == payload);
  CHECK(rx.expected_seq() == 8);
  auto n = channel_nonce(0x01020304, 0x1122334455667788);
  CHECK(get_le32(n.data()) == 0x01020304);
  CHECK(get_le64(n.data() + 4) == 0x1122334455667788);
}

TEST_CASE("property: any single bit flip fails authentication")
{
  auto k = key_from(2);
  std::mt19937_64 rng(12);
  Bytes payload(68);
  for (auto& b : payload)
    b = static_cast<uint8_t>(rng());
  auto good = channel_seal(k, 1, 3, PayloadType::ReportReq, payload);
  for (int i = 0; i < 500; ++i)
  {
    auto m = good;
    auto bit = rng() % (8 * (m.ciphertext.size() + m.tag.size() + 8 + 4 + 1));
    size_t ct_bits = 8 * m.ciphertext.size();
    if (bit < ct_bits)
      m.ciphertext[bit / 8] ^= 1 << (bit % 8);
    else if ((bit -= ct_bits) < 128)
      m.tag[bit / 8] ^= 1 << (bit % 8);
    else if ((bit -= 128) < 64)
      m.seq ^= 1ull << bit;
    else if ((bit -= 64) < 32)
      m.channel ^= 1u << bit;
    else
      m.payload_type = static_cast<PayloadType>(static_cast<uint8_t>(m.payload_type) ^ (1 << (bit - 32)));
    ChannelReceiver rx(k, 1, 3);
    CHECK(code_of([&] { rx.open(m); }) == ErrorCode::AuthError);
    CHECK(rx.expected_seq() == 3);
  }
}

TEST_CASE("stale and skipped sequence numbers are refused")
{
  auto k = key_from(3);
  ChannelReceiver rx(k, 0, 1);
  auto m1 = channel_seal(k, 0, 1, PayloadType::KeyReq, Bytes{1});
  auto m3 = channel_seal(k, 0, 3, PayloadType::KeyReq, Bytes{1});
  CHECK(code_of([&] { rx.open(m3); }) == ErrorCode::ReplayError);
  rx.open(m1);
  CHECK(code_of([&] { rx.open(m1); }) == ErrorCode::ReplayError);
  CHECK(rx.expected_seq() == 2);
}

TEST_CASE("report requests enforce the VMPL floor")
{
  AmdSp sp(crypto::Drbg::from_u64(5), launch(1));
  HostRelay relay;
  GuestRequester r1(V1, sp.vmpck(V1));
  ReportData rd{};
  rd[0] = 0xaa;
  CHECK(code_of([&] { r1.snp_report_req(sp, relay, V0, rd); }) == ErrorCode::VmplDenied);
  auto rep = r1.snp_report_req(sp, relay, V1, rd);
  CHECK(rep.vmpl == V1);
  CHECK(rep.launch_digest == launch(1));
  CHECK(rep.report_data == rd);
  CHECK(oracle::ecdsa_p384_verify(sp.vcek_public(), rep.body(), rep.signature));
  CHECK(SnpReport::parse(rep.serialize()).body() == rep.body());
  CHECK(r1.next_seq() == 5);
  CHECK(relay.transcript.size() == 4);
}

TEST_CASE("key requests enforce the VMPL floor and separate levels")
{
  AmdSp sp(crypto::Drbg::from_u64(6), launch(1));
  HostRelay relay;
  GuestRequester r0(V0, sp.vmpck(V0));
  GuestRequester r1(V1, sp.vmpck(V1));
  auto k0 = r0.msg_key_req(sp, relay, V0);
  auto k1 = r1.msg_key_req(sp, relay, V1);
  CHECK(k0 != k1);
  CHECK(r0.msg_key_req(sp, relay, V1) == k1);
  CHECK(code_of([&] { r1.msg_key_req(sp, relay, V0); }) == ErrorCode::VmplDenied);

  AmdSp same(crypto::Drbg::from_u64(6), launch(1));
  HostRelay r2;
  GuestRequester again(V0, same.vmpck(V0));
  CHECK(again.msg_key_req(same, r2, V0) == k0);
  CHECK(same.vcek_public() == sp.vcek_public());

  AmdSp other(crypto::Drbg::from_u64(7), launch(1));
  GuestRequester o0(V0, other.vmpck(V0));
  CHECK(o0.msg_key_req(other, r2, V0) != k0);
  CHECK(other.vcek_public() != sp.vcek_public());
}

TEST_CASE("host replay and tampering on the relay are detected")
{
  AmdSp sp(crypto::Drbg::from_u64(8), launch(1));
  HostRelay relay;
  GuestRequester r1(V1, sp.vmpck(V1));
  r1.msg_key_req(sp, relay, V1);
  auto old = relay.transcript.front();
  relay.on_request = [&](GuestMessage& m) { m = old; };
  CHECK(code_of([&] { r1.msg_key_req(sp, relay, V1); }) == ErrorCode::ReplayError);

  relay.on_request = nullptr;
  relay.on_response = [](GuestMessage& m) { m.tag[0] ^= 1; };
  CHECK(code_of([&] { r1.msg_key_req(sp, relay, V1); }) == ErrorCode::AuthError);

  GuestRequester fresh(V1, sp.vmpck(V1));
  relay.on_response = nullptr;
  relay.on_request = [](GuestMessage& m) { m.ciphertext[0] ^= 0x80; };
  CHECK(code_of([&] { fresh.msg_key_req(sp, relay, V1); }) == ErrorCode::AuthError);
}

TEST_CASE("honest bundle verifies under the machine's anchors")
{
  Chain c(11);
  CHECK(verify_bundle(c.bundle, c.anchors).accepted);
  CHECK(oracle::first_failed_check(c.bundle, c.anchors) == "accept");
  CHECK(c.bundle.aik_public == c.aik.public_key());
  CHECK(c.bundle.enclave_report == c.body);
  CHECK(oracle::ed25519_verify(c.aik.public_key(), c.body.serialize(), c.bundle.enclave_sig));
}

TEST_CASE("bundle building needs a binding report")
{
  Chain c(12);
  CHECK(code_of([&] { build_bundle(c.aik, std::nullopt, c.body); }) == ErrorCode::PreconditionError);
}

TEST_CASE("a fresh AIK without re-binding fails aik-binding")
{
  Chain c(13);
  std::array<uint8_t, 32> seed{};
  seed[0] = 1;
  Aik fresh(seed);
  auto b = build_bundle(fresh, c.binding, c.body);
  CHECK(verify_bundle(b, c.anchors).reason == "aik-binding");
}

TEST_CASE("a VMPL1 report in the bundle fails vmpl")
{
  Chain c(14);
  GuestRequester r1(V1, c.sp.vmpck(V1));
  auto rep = r1.snp_report_req(c.sp, c.relay, V1, c.aik.binding_report_data());
  auto b = build_bundle(c.aik, rep, c.body);
  CHECK(verify_bundle(b, c.anchors).reason == "vmpl");
}

TEST_CASE("wrong anchors")
{
  Chain c(15);
  auto t = c.anchors;
  t.launch_digest[0] ^= 1;
  CHECK(verify_bundle(c.bundle, t).reason == "launch-digest");
  t = c.anchors;
  t.mrenclave[31] ^= 1;
  CHECK(verify_bundle(c.bundle, t).reason == "mrenclave");
  t = c.anchors;
  t.vcek_public = Chain(16).sp.vcek_public();
  CHECK(verify_bundle(c.bundle, t).reason == "vcek-signature");
}

TEST_CASE("property: verifier agrees with the reference on random corruptions")
{
  Chain c(17);
  std::mt19937_64 rng(17);
  for (int i = 0; i < 300; ++i)
  {
    auto b = c.bundle;
    auto t = c.anchors;
    auto flip = [&](uint8_t* p, size_t n) { p[rng() % n] ^= static_cast<uint8_t>(1 << (rng() % 8)); };
    switch (rng() % 9)
    {
      case 0:
        flip(b.snp_report.signature.data(), b.snp_report.signature.size());
        break;
      case 1:
        flip(b.snp_report.launch_digest.data(), 48);
        break;
      case 2:
        flip(b.snp_report.report_data.data(), 64);
        break;
      case 3:
        flip(b.aik_public.data(), b.aik_public.size());
        break;
      case 4:
        flip(b.enclave_report.mrenclave.data(), 32);
        break;
      case 5:
        flip(b.enclave_sig.data(), b.enclave_sig.size());
        break;
      case 6:
        flip(t.launch_digest.data(), 48);
        break;
      case 7:
        flip(t.mrenclave.data(), 32);
        break;
      default:
        b.enclave_report.attributes ^= 1ull << (rng() % 64);
    }
    auto v = verify_bundle(b, t);
    CHECK(oracle::verdict_string(v) == oracle::first_failed_check(b, t));
    CHECK_FALSE(v.accepted);
  }
}

TEST_CASE("bundle and anchor JSON round-trips")
{
  Chain c(18);
  auto text = bundle_to_json(c.bundle);
  auto back = bundle_from_json(text);
  CHECK(bundle_to_json(back) == text);
  CHECK(verify_bundle(back, c.anchors).accepted);
  auto at = anchors_to_json(c.anchors);
  CHECK(anchors_to_json(anchors_from_json(at)) == at);
  CHECK(code_of([] { bundle_from_json("{}"); }) == ErrorCode::ParseError);
  CHECK(code_of([] { anchors_from_json("[1,2"); }) == ErrorCode::ParseError);
}

TEST_CASE("sealing binds the key")
{
  auto gk = key_from(20);
  Digest32 mr{};
  mr.fill(1);
  std::array<uint8_t, 16> id{};
  id[0] = 7;
  auto k = derive_sealing_key(gk, mr, id);
  crypto::GcmNonce nonce{};
  Bytes secret = {'s', 'e', 'c', 'r', 'e', 't'};
  auto blob = seal(k, id, nonce, secret);
  CHECK(unseal(k, blob) == secret);
  CHECK(derive_sealing_key(gk, mr, id) == k);

  auto other_mr = mr;
  other_mr[0] ^= 1;
  auto other_id = id;
  other_id[15] = 1;
  for (const auto& wrong :
       {derive_sealing_key(gk, other_mr, id), derive_sealing_key(gk, mr, other_id),
        derive_sealing_key(key_from(21), mr, id), derive_enclave_key(gk, KeyName::ReportKey, mr, id)})
  {
    CHECK(wrong != k);
    CHECK(code_of([&] { unseal(wrong, blob); }) == ErrorCode::AuthError);
  }
  auto bad = blob;
  bad.ciphertext[0] ^= 1;
  CHECK(code_of([&] { unseal(k, bad); }) == ErrorCode::AuthError);
}

TEST_CASE("guest keys differ per VMPL")
{
  auto root = key_from(22);
  CHECK(derive_guest_key(root, V0) != derive_guest_key(root, V1));
  CHECK(derive_guest_key(root, V1) == derive_guest_key(root, V1));
}

TEST_CASE("drbg labels are independent")
{
  auto a = crypto::Drbg::from_u64(1);
  auto b = crypto::Drbg::from_u64(1);
  b.next(100);
  CHECK(a.derive("x", 32) == b.derive("x", 32));
  CHECK(a.derive("x", 32) != a.derive("y", 32));
  CHECK(crypto::Drbg::from_u64(2).derive("x", 32) != a.derive("x", 32));
}
