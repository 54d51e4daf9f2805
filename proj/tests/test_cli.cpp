#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "rdc/experiment.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(RDC_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rdc_cli_" + name);
  fs::remove_all(p);
  return p;
}

const char* kSmall =
    " --set mesh.nx=8 --set mesh.ny=8 --set mesh.patches_x=4 --set mesh.patches_y=4"
    " --set env.episode_len=5 --set agent.hidden=8 -q";

}  // namespace

TEST_CASE("cli exit codes") {
  CHECK(run("--help") == 0);
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("run --preset nowhere") == 2);
  CHECK(run("run --set sim.dt=0") == 2);
  CHECK(run("run -c /nonexistent/config.toml") == 2);
  CHECK(run("compare /nonexistent/a.csv /nonexistent/b.csv") != 0);
}

TEST_CASE("cli run, multiple seeds and compare") {
  const fs::path out = fresh_dir("run");
  CHECK(run("run -e 2 --seeds 2 -o " + out.string() + kSmall) == 0);
  CHECK(fs::exists(out / "seeds.csv"));
  CHECK(fs::exists(out / "seed_1" / "trace.csv"));
  CHECK(fs::exists(out / "seed_2" / "manifest.json"));
  const fs::path cmp = out / "cmp";
  CHECK(run("compare " + (out / "seed_1" / "baseline.csv").string() + " " +
            (out / "seed_1" / "after.csv").string() + " -o " + cmp.string()) == 0);
  CHECK(fs::exists(out / "cmp.csv"));
  CHECK(fs::exists(out / "cmp.txt"));
  fs::remove_all(out);
}

TEST_CASE("cli mesh generation") {
  const fs::path out = fresh_dir("mesh");
  fs::create_directories(out);
  CHECK(run("mesh gen --kind regions15 -o " + (out / "r.mesh").string()) == 0);
  CHECK(rdc::load_mesh(out / "r.mesh") == rdc::build_regions15());
  CHECK(run("mesh gen --nx 4 --ny 4 --px 2 --py 2 -o " + (out / "s.mesh").string()) == 0);
  CHECK(rdc::load_mesh(out / "s.mesh").num_regions() == 4);
  CHECK(run("mesh gen --nx 5 --px 2 -o " + (out / "bad.mesh").string()) == 2);
  fs::remove_all(out);
}
