// Command-line driver: scenario configuration, runs, and reports.
// Subcommands: background | euler-flrw | coupled | rates | sweep.

#include <CLI11.hpp>

#include "tiltlab/common.hpp"

int main(int argc, char** argv) {
  CLI::App app{"tiltlab: tilted-fluid cosmology toolbox"};
  app.require_subcommand(1);
  for (const char* name :
       {"background", "euler-flrw", "coupled", "rates", "sweep"}) {
    auto* sub = app.add_subcommand(name, "(scenario runner, in construction)");
    sub->callback([name]() {
      tiltlab::fail("subcommand '", name, "' is not wired up yet");
    });
  }
  CLI11_PARSE(app, argc, argv);
  return 0;
}
