// Copyright (c) The NestedSGX simulator authors.
// Licensed under the Apache 2.0 License.

#include "nsgx/cli.h"

#include "CLI11.hpp"

#include <iostream>

using namespace nsgx;

int main(int argc, char** argv)
{
  CLI::App app{"NestedSGX simulator"};
  app.require_subcommand(1);

  std::string manifest_path;
  MachineConfig machine;
  auto* measure = app.add_subcommand("measure", "Offline MRENCLAVE and expected launch digest");
  measure->add_option("manifest", manifest_path, "Enclave manifest")->required();
  measure->add_option("--total-pages", machine.total_pages);
  measure->add_option("--vmpl0-pages", machine.vmpl0_pages);
  measure->add_option("--monitor-pages", machine.monitor_pages);

  std::string scenario_path;
  std::optional<uint64_t> seed;
  bool deterministic = false;
  std::string ledger_out, bundle_out, anchors_out, report_out;
  auto* run = app.add_subcommand("run", "Run a scenario");
  run->add_option("scenario", scenario_path, "Scenario file")->required();
  run->add_option("--seed", seed, "Overrides the scenario seed");
  run->add_flag("--deterministic-crypto", deterministic, "Derive all keys from the seed");
  run->add_option("--ledger-out", ledger_out);
  run->add_option("--bundle-out", bundle_out);
  run->add_option("--anchors-out", anchors_out);
  run->add_option("--report-out", report_out);

  std::string bundle_path, anchors_path;
  auto* verify = app.add_subcommand("verify", "Check a nested attestation bundle");
  verify->add_option("bundle", bundle_path)->required();
  verify->add_option("anchors", anchors_path)->required();

  std::string tamper_name, tamper_out;
  auto* tamper = app.add_subcommand("tamper", "Apply a named modification to a bundle");
  tamper->add_option("bundle", bundle_path)->required();
  tamper->add_option("name", tamper_name)->required()->check(CLI::IsMember(cli::tamper_names()));
  tamper->add_option("-o,--out", tamper_out, "Output file (default: stdout)");

  try
  {
    app.parse(argc, argv);
  }
  catch (const CLI::ParseError& e)
  {
    int rc = app.exit(e);
    return rc == 0 ? 0 : cli::exit_code::kParse;
  }

  try
  {
    if (*measure)
    {
      auto r = cli::cmd_measure(cli::load_manifest(manifest_path), machine);
      std::cout << "mrenclave " << to_hex(r.mrenclave) << "\n";
      std::cout << "launch-digest " << to_hex(r.launch_digest) << "\n";
      return cli::exit_code::kOk;
    }
    if (*run)
    {
      auto scenario = cli::load_scenario(scenario_path);
      cli::RunOptions opts;
      opts.seed = seed;
      if (deterministic)
        opts.deterministic_crypto = true;
      if (!ledger_out.empty())
        opts.ledger_out = ledger_out;
      if (!bundle_out.empty())
        opts.bundle_out = bundle_out;
      if (!anchors_out.empty())
        opts.anchors_out = anchors_out;
      if (!report_out.empty())
        opts.report_out = report_out;
      auto rep = cli::cmd_run(scenario, opts);
      std::cout << rep.text;
      return rep.status;
    }
    if (*verify)
    {
      auto v = cli::cmd_verify(bundle_path, anchors_path);
      std::cout << (v.accepted ? "accept" : "reject " + v.reason) << "\n";
      return v.accepted ? cli::exit_code::kOk : cli::exit_code::kFailed;
    }
    if (*tamper)
    {
      auto b = attest::bundle_from_json(cli::read_file(bundle_path));
      auto text = attest::bundle_to_json(cli::apply_tamper(b, tamper_name));
      if (tamper_out.empty())
        std::cout << text;
      else
        cli::write_file(tamper_out, text);
      return cli::exit_code::kOk;
    }
  }
  catch (const Error& e)
  {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::ParseError || e.code() == ErrorCode::DecodeError ?
      cli::exit_code::kParse :
      cli::exit_code::kFailed;
  }
  return cli::exit_code::kFailed;
}
