// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/machine.h"

namespace nsgx
{
  namespace
  {
    crypto::Drbg make_drbg(const MachineConfig& c)
    {
      return c.deterministic_crypto ? crypto::Drbg::from_u64(c.seed) : crypto::Drbg::from_system();
    }
  }

  Machine::Machine(const MachineConfig& config) :
    config_(config),
    drbg_(make_drbg(config)),
    memory_(mem::carve_layout(config.total_pages, config.vmpl0_pages, config.monitor_pages)),
    cpu_(config.extra_vmpls, config.hypervisor)
  {
    const auto& l = memory_.layout();
    if (l.monitor.size() < monitor::kMinMonitorPages)
      throw Error(ErrorCode::SizeError, "monitor region too small");

    auto image = monitor::monitor_image(l);
    for (uint64_t i = 0; i < image.size() / kPageSize; ++i)
      memory_.write(
        Gpa{l.monitor.begin + i},
        0,
        ByteView(image).subspan(i * kPageSize, kPageSize),
        Vmpl{0});
    auto digest =
      attest::compute_launch_digest(image, memory_.rmp().serialize_permission_map());
    sp_ = std::make_unique<attest::AmdSp>(drbg_, digest);

    // The AMD-SP fills the secrets page at launch.
    Gpa secrets{l.monitor.begin + monitor::kSecretsPage};
    for (unsigned v = 0; v < Vmpl::kCount; ++v)
      memory_.write(secrets, v * 32, sp_->vmpck(Vmpl{v}), Vmpl{0});

    monitor_ = std::make_unique<monitor::Monitor>(
      monitor::Platform{memory_, tables_, cpu_, *sp_, relay_},
      drbg_,
      monitor::MonitorConfig{config.step_budget});
    guest_ = std::make_unique<guest::GuestOs>(
      memory_, tables_, cpu_, *sp_, relay_, config.guest);
    guest_->vmpl0_entry = [this] { return monitor_->handle_driver_request(); };
  }

  attest::TrustAnchors Machine::anchors(const Digest32& mrenclave) const
  {
    return {sp_->vcek_public(), sp_->launch_digest(), mrenclave};
  }
}
