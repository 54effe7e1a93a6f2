// esi_lab <verb> --scenario <path> --out <dir> [--seed N] [--samples N]
//
// Exit codes: 0 holds, 1 fails, 2 inconclusive, 3 input error.

#include <CLI11.hpp>

#include <iostream>

#include "esi/cli_io.hpp"

namespace {

struct Args {
  std::string scenario;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples;
};

int run(const std::string& verb, const Args& a) {
  using namespace esi;
  try {
    io::Scenario s = io::load_scenario(a.scenario);
    const std::string task = io::task_from_verb(verb);
    if (s.task != task)
      throw Error(Errc::SchemaMismatch, "task: scenario is '" + s.task + "' but the verb is '" + verb + "'");
    s = io::apply(s, {a.seed, a.samples});
    const io::Report rep = io::run_scenario(s);
    io::write_outputs(rep, a.out);
    std::cout << rep.summary;
    return rep.exit_code();
  } catch (const Error& e) {
    std::cerr << "esi_lab: " << e.what() << "\n";
    return io::exit_input_error;
  } catch (const std::exception& e) {
    std::cerr << "esi_lab: " << e.what() << "\n";
    return io::exit_input_error;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exponential stochastic inequality lab"};
  app.require_subcommand(1);
  Args args;
  std::string chosen;
  for (const char* verb :
       {"verify", "bounds", "compose", "characterize", "conditions", "pacbayes", "random-eta", "sequential"}) {
    auto* sub = app.add_subcommand(verb, std::string("run a '") + verb + "' scenario");
    sub->add_option("--scenario", args.scenario, "scenario JSON file")->required();
    sub->add_option("--out", args.out, "output directory")->required();
    sub->add_option("--seed", args.seed, "override the scenario seed");
    sub->add_option("--samples", args.samples, "override the Monte Carlo sample count");
    sub->callback([&chosen, verb] { chosen = verb; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return esi::io::exit_input_error;
  }
  return run(chosen, args);
}
