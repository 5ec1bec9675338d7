// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.
#pragma once

#include "nsgx/attest.h"
#include "nsgx/guest.h"
#include "nsgx/machine.h"

#include <filesystem>
#include <map>
#include <optional>
#include <string>

// File formats and the commands behind the nestedsgx tool. Manifests and
// scenarios are JSON; numbers may be JSON integers or "0x..." strings.

namespace nsgx::cli
{
  namespace exit_code
  {
    constexpr int kOk = 0;
    constexpr int kFailed = 1;
    constexpr int kParse = 2;
  }

  /// Enclave manifest:
  ///   name, base_gva, size, ssa_frame_size?, attributes?, entry_point,
  ///   program (assembly), param_gva?, param_pages?,
  ///   pages: [{gva, type: TCS|REG, perms: "rwx", content?: hex | "@file",
  ///            measure?: bool, ssa_gva?, nssa?}]
  /// TCS pages without content get OENTRY = entry_point and OSSA = ssa_gva
  /// (default: the next page). The assembled program is written at
  /// entry_point and must fit in the listed pages.
  struct Manifest
  {
    std::string name;
    guest::EnclaveImage image;
    uint64_t entry_point = 0;
  };

  Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir = {});
  Manifest load_manifest(const std::filesystem::path& path);

  struct MeasureResult
  {
    Digest32 mrenclave{};
    Digest48 launch_digest{};
  };

  /// Offline: replays the build log without booting anything.
  MeasureResult cmd_measure(const Manifest& manifest, const MachineConfig& machine = {});

  struct AttackSpec
  {
    guest::AttackKind kind = guest::AttackKind::ReadVmpl0;
    std::string target;
    /// "blocked" or "no-effect" when the scenario pins the verdict.
    std::optional<std::string> expect;
  };

  struct AppSpec
  {
    evm::Program program;
    uint64_t budget = 1'000'000;
    /// (gva, pages) regions mapped rw- in the App table before it runs.
    std::vector<std::pair<uint64_t, uint64_t>> data;
  };

  struct Expectations
  {
    std::map<std::string, std::string> mrenclave;
    std::map<std::string, uint64_t> ledger;
    std::optional<std::string> app;
    std::map<unsigned, uint64_t> registers;
    /// "accept" or a reject reason.
    std::optional<std::string> bundle;
  };

  /// Scenario:
  ///   name?, seed, deterministic_crypto?, machine?: {total_pages,
  ///   vmpl0_pages | epc_pages, monitor_pages, step_budget, extra_vmpls},
  ///   driver_policy?, hypervisor_policy?, max_resumes?,
  ///   enclaves: [{name?, manifest: path | object}],
  ///   app?: {program, budget?, data?: [{gva, pages}]},
  ///   attacks?: [{kind, target?, expect?}],
  ///   expected?: {mrenclave: {name: hex}, ledger: {label: n}, app,
  ///               registers: {rN: v}, bundle}
  /// The App starts with r(10+2k) = id and r(11+2k) = first TCS of
  /// enclave k (k < 3).
  struct Scenario
  {
    std::string name;
    MachineConfig machine;
    guest::DriverPolicy driver_policy = guest::DriverPolicy::Honest;
    std::vector<Manifest> enclaves;
    std::optional<AppSpec> app;
    std::vector<AttackSpec> attacks;
    Expectations expected;
  };

  Scenario parse_scenario(std::string_view text, const std::filesystem::path& base_dir = {});
  Scenario load_scenario(const std::filesystem::path& path);

  struct RunOptions
  {
    std::optional<uint64_t> seed;
    /// Overrides the scenario when set.
    std::optional<bool> deterministic_crypto;
    std::optional<std::filesystem::path> ledger_out;
    std::optional<std::filesystem::path> bundle_out;
    std::optional<std::filesystem::path> anchors_out;
    std::optional<std::filesystem::path> report_out;
  };

  struct RunReport
  {
    int status = exit_code::kOk;
    /// Human-readable, deterministic for a fixed seed.
    std::string text;
    std::string ledger;
    std::optional<attest::NestedBundle> bundle;
    std::optional<attest::TrustAnchors> anchors;
    std::vector<std::string> failures;
    std::vector<std::pair<guest::AttackKind, guest::AttackVerdict>> verdicts;
  };

  /// Boots a machine, loads the enclaves, runs the App, checks the
  /// expectations, runs the attacks, and writes the requested files. The
  /// ledger covers the App phase only (after loading, before attacks).
  RunReport cmd_run(const Scenario& scenario, const RunOptions& options = {});

  attest::Verdict cmd_verify(
    const std::filesystem::path& bundle, const std::filesystem::path& anchors);

  /// Bundle transformations for negative testing.
  const std::vector<std::string>& tamper_names();
  /// Throws ParseError for an unknown name.
  attest::NestedBundle apply_tamper(const attest::NestedBundle& bundle, std::string_view name);

  std::string read_file(const std::filesystem::path& path);
  void write_file(const std::filesystem::path& path, std::string_view content);
}
