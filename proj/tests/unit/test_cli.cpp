#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

// End-to-end checks of the command-line driver binary.

namespace {

namespace fsys = std::filesystem;
using nlohmann::json;

std::string cli() { return LMMVAE_CLI_PATH; }

int run(const std::string& args) {
    std::string cmd = cli() + " " + args + " > /dev/null 2>&1";
    int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string temp_dir(const std::string& name) {
    fsys::path p = fsys::temp_directory_path() / name;
    fsys::remove_all(p);
    fsys::create_directories(p);
    return p.string();
}

std::string write_config(const std::string& dir) {
    json j{
        {"version", 1},
        {"seeds", {1}},
        {"data",
         {{"source", "synthetic_lmm"},
          {"seed", 3},
          {"missing_fraction", 0.25},
          {"synthetic_lmm",
           {{"n_instances", 5}, {"n_timepoints", 4}, {"latent_dim", 2}, {"data_dim", 5},
            {"latent_noise", 0.2}, {"obs_noise", 0.1}}}}},
        {"schema",
         {{"covariates",
           {{{"name", "time"}, {"kind", "continuous"}, {"role", "shared"}},
            {{"name", "id"}, {"kind", "categorical"}, {"role", "random"}}}}}},
        {"split", {{"kind", "random"}, {"train_ratio", 0.8}, {"seed", 5}}},
        {"train", {{"epochs", 2}, {"batch_size", 8}}},
        {"models",
         {{{"name", "m"}, {"variant", "olmm"}, {"objective", "vi"}, {"latent_dim", 2},
           {"encoder_hidden", {6}}, {"decoder_hidden", {6}}}}},
    };
    std::string path = dir + "/config.json";
    std::ofstream out(path);
    out << j.dump(2);
    return path;
}

}  // namespace

TEST_CASE("cli requires a subcommand and a config") {
    CHECK(run("") != 0);
    CHECK(run("train") != 0);
    CHECK(run("not-a-command --config x.json") != 0);
}

TEST_CASE("cli pipeline: gen-data, train, eval") {
    std::string dir = temp_dir("lmmvae_cli");
    std::string config = write_config(dir);

    CHECK(run("gen-data --config " + config + " --out " + dir + "/data") == 0);
    CHECK(fsys::exists(dir + "/data/data.csv"));
    CHECK(fsys::exists(dir + "/data/manifest.json"));
    CHECK(fsys::exists(dir + "/data/z_true.csv"));

    CHECK(run("train --config " + config + " --out " + dir + "/run") == 0);
    CHECK(fsys::exists(dir + "/run/m/seed_1/snapshot.json"));

    CHECK(run("eval --config " + config + " --out " + dir + "/run") == 0);
    CHECK(fsys::exists(dir + "/run/results.json"));
    CHECK(fsys::exists(dir + "/run/metrics.csv"));

    // seeds override via the flag
    CHECK(run("train --config " + config + " --out " + dir + "/run2 --seeds 1,2") == 0);
    CHECK(fsys::exists(dir + "/run2/m/seed_2/snapshot.json"));

    // overrides reach the config
    CHECK(run("train --config " + config + " --out " + dir +
              "/run3 --override train.epochs=0") == 0);
    fsys::remove_all(dir);
}

TEST_CASE("cli rejects malformed configs with a nonzero exit") {
    std::string dir = temp_dir("lmmvae_cli_bad");
    std::string path = dir + "/bad.json";
    {
        std::ofstream out(path);
        out << "{\"version\": 1, \"mystery\": true}";
    }
    CHECK(run("train --config " + path) != 0);
    CHECK(run("train --config " + dir + "/missing.json") != 0);
    fsys::remove_all(dir);
}
