#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <map>
#include <set>

#include "lmmvae/data.hpp"
#include "test_util.hpp"

using namespace lmmvae;
using testutil::throws_with;

TEST_CASE("identity-decoder generator with zero noise reproduces A* X") {
    SyntheticLmmSpec spec;
    spec.n_instances = 5;
    spec.n_timepoints = 4;
    spec.latent_dim = 3;
    spec.data_dim = 3;
    spec.latent_noise = 0.0;
    spec.obs_noise = 0.0;
    spec.identity_decoder = true;
    LongitudinalDataset ds = gen_synthetic_lmm(spec, 11);
    REQUIRE(ds.Z_true.has_value());
    REQUIRE(ds.A_true.has_value());
    CHECK(testutil::max_abs_diff(ds.Y, *ds.Z_true) == 0.0);

    // Z_true must equal A* X with X rebuilt from the raw covariates.
    std::vector<std::string> levels;
    for (std::size_t i = 0; i < spec.n_instances; ++i) levels.push_back(std::to_string(i));
    CovariateSchema schema;
    schema.entries = {
        {"time", CovariateKind::continuous, {}, CovariateRole::shared, {}},
        {"trait", CovariateKind::continuous, {}, CovariateRole::shared, {}},
        {"gated_time", CovariateKind::continuous, {}, CovariateRole::shared, {}},
        {"id", CovariateKind::categorical, levels, CovariateRole::random, {}},
    };
    DesignMatrix dm = build_design_matrix(schema, ds.covariates);
    for (std::size_t c = 0; c < ds.n_obs(); ++c) {
        for (std::size_t l = 0; l < spec.latent_dim; ++l) {
            double s = 0.0;
            for (std::size_t q = 0; q < dm.total_width(); ++q) {
                s += ds.A_true->at(l, q) * dm.X.at(q, c);
            }
            CHECK(std::abs(ds.Z_true->at(l, c) - s) < 1e-12);
        }
    }
}

TEST_CASE("generators are pure functions of spec and seed") {
    SyntheticLmmSpec spec;
    spec.n_instances = 8;
    spec.n_timepoints = 3;
    spec.latent_dim = 2;
    spec.data_dim = 6;
    LongitudinalDataset a = gen_synthetic_lmm(spec, 5);
    LongitudinalDataset b = gen_synthetic_lmm(spec, 5);
    CHECK(testutil::max_abs_diff(a.Y, b.Y) == 0.0);
    CHECK(testutil::max_abs_diff(*a.Z_true, *b.Z_true) == 0.0);

    RotatingToySpec rspec;
    rspec.n_instances = 4;
    LongitudinalDataset ra = gen_rotating_toy(rspec, 6);
    LongitudinalDataset rb = gen_rotating_toy(rspec, 6);
    CHECK(testutil::max_abs_diff(ra.Y, rb.Y) == 0.0);
}

TEST_CASE("latent variances match the generator's moments") {
    SyntheticLmmSpec spec;
    spec.n_instances = 150;
    spec.n_timepoints = 12;
    spec.latent_dim = 4;
    spec.data_dim = 10;
    spec.latent_noise = 0.25;
    LongitudinalDataset ds = gen_synthetic_lmm(spec, 99);

    std::vector<std::string> levels;
    for (std::size_t i = 0; i < spec.n_instances; ++i) levels.push_back(std::to_string(i));
    CovariateSchema schema;
    schema.entries = {
        {"time", CovariateKind::continuous, {}, CovariateRole::shared, {}},
        {"trait", CovariateKind::continuous, {}, CovariateRole::shared, {}},
        {"gated_time", CovariateKind::continuous, {}, CovariateRole::shared, {}},
        {"id", CovariateKind::categorical, levels, CovariateRole::random, {}},
    };
    DesignMatrix dm = build_design_matrix(schema, ds.covariates);
    std::size_t n = ds.n_obs(), q_dim = dm.total_width();

    for (std::size_t l = 0; l < spec.latent_dim; ++l) {
        // Expected Var(z_l) = Var_n(a_l x_n) + latent_noise^2, with the
        // covariate second moments taken from the realized design matrix.
        std::vector<double> ax(n);
        for (std::size_t c = 0; c < n; ++c) {
            double s = 0.0;
            for (std::size_t q = 0; q < q_dim; ++q) s += ds.A_true->at(l, q) * dm.X.at(q, c);
            ax[c] = s;
        }
        double expected = testutil::var_of(ax) + spec.latent_noise * spec.latent_noise;
        std::vector<double> z(n);
        for (std::size_t c = 0; c < n; ++c) z[c] = ds.Z_true->at(l, c);
        CHECK(testutil::rel_err(testutil::var_of(z), expected) < 0.05);
    }
}

TEST_CASE("rotating toy angular structure") {
    RotatingToySpec spec;
    spec.n_instances = 6;
    spec.n_angles = 16;
    spec.data_dim = 10;
    spec.noise = 0.0;
    LongitudinalDataset ds = gen_rotating_toy(spec, 7);

    // Noiseless Gram structure: y(theta)^T y(theta') = rho^2 cos(theta-theta').
    for (std::size_t inst = 0; inst < spec.n_instances; ++inst) {
        std::size_t base = inst * spec.n_angles;
        double rho_sq = 0.0;
        for (std::size_t d = 0; d < spec.data_dim; ++d) {
            rho_sq += ds.Y.at(d, base) * ds.Y.at(d, base);
        }
        for (std::size_t j = 0; j < spec.n_angles; ++j) {
            double dot = 0.0;
            for (std::size_t d = 0; d < spec.data_dim; ++d) {
                dot += ds.Y.at(d, base) * ds.Y.at(d, base + j);
            }
            double theta = 2.0 * std::numbers::pi * j / spec.n_angles;
            CHECK(std::abs(dot - rho_sq * std::cos(theta)) < 1e-10);
        }
    }

    // Antipodal cancellation with noise: y(theta) + y(theta + pi) is pure
    // noise, so its RMS is near sqrt(2) * noise.
    RotatingToySpec noisy = spec;
    noisy.noise = 0.05;
    LongitudinalDataset nds = gen_rotating_toy(noisy, 8);
    double sq = 0.0;
    std::size_t count = 0;
    for (std::size_t inst = 0; inst < noisy.n_instances; ++inst) {
        std::size_t base = inst * noisy.n_angles;
        for (std::size_t j = 0; j < noisy.n_angles / 2; ++j) {
            for (std::size_t d = 0; d < noisy.data_dim; ++d) {
                double s = nds.Y.at(d, base + j) + nds.Y.at(d, base + j + noisy.n_angles / 2);
                sq += s * s;
                ++count;
            }
        }
    }
    double rms = std::sqrt(sq / count);
    double want = std::sqrt(2.0) * noisy.noise;
    CHECK(rms > 0.8 * want);
    CHECK(rms < 1.25 * want);
}

TEST_CASE("missingness masks an exact per-observation count") {
    SyntheticLmmSpec spec;
    spec.n_instances = 3;
    spec.n_timepoints = 4;
    spec.latent_dim = 2;
    spec.data_dim = 100;
    LongitudinalDataset ds = gen_synthetic_lmm(spec, 1);

    LongitudinalDataset full = apply_missingness(ds, 0.0, 3);
    for (double v : full.mask.data()) CHECK(v == 1.0);

    LongitudinalDataset masked = apply_missingness(ds, 0.25, 3);
    for (std::size_t c = 0; c < masked.n_obs(); ++c) {
        std::size_t observed = 0;
        for (std::size_t d = 0; d < 100; ++d) observed += masked.mask.at(d, c) != 0.0;
        CHECK(observed == 75);
    }
    // Y itself is untouched; reproducible under the seed.
    CHECK(testutil::max_abs_diff(masked.Y, ds.Y) == 0.0);
    LongitudinalDataset again = apply_missingness(ds, 0.25, 3);
    CHECK(testutil::max_abs_diff(masked.mask, again.mask) == 0.0);
    LongitudinalDataset other = apply_missingness(ds, 0.25, 4);
    CHECK(testutil::max_abs_diff(masked.mask, other.mask) > 0.0);
}

namespace {

void check_partition(const LongitudinalDataset& ds, const SplitIndices& s) {
    std::set<std::size_t> seen;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
        for (std::size_t i : *part) {
            CHECK(seen.insert(i).second);  // pairwise disjoint
        }
    }
    CHECK(seen.size() == ds.n_obs());  // exhaustive
}

}  // namespace

TEST_CASE("future split keeps the prefix in train and partitions the data") {
    SyntheticLmmSpec spec;
    spec.n_instances = 20;
    spec.n_timepoints = 20;
    spec.latent_dim = 2;
    spec.data_dim = 5;
    LongitudinalDataset ds = gen_synthetic_lmm(spec, 2);

    SplitProtocol protocol;
    protocol.kind = SplitProtocol::Kind::future;
    protocol.holdout_timepoints = 15;
    protocol.holdout_instances = 2;  // 10% of instances
    protocol.keep_first = 5;
    protocol.train_ratio = 0.85;
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        SplitIndices s = split(ds, protocol, seed);
        check_partition(ds, s);
        CHECK(s.test.size() == 2 * 15);
        // every test instance also appears in train (its first timepoints)
        std::set<int> train_ids, test_ids;
        for (std::size_t i : s.train) train_ids.insert(ds.instance_ids[i]);
        for (std::size_t i : s.test) test_ids.insert(ds.instance_ids[i]);
        for (int id : test_ids) CHECK(train_ids.count(id) == 1);
        // held-out instances contribute exactly keep_first + pool rows; with
        // h + f = sequence length they contribute exactly f train rows
    }

    // h + f equal to the full sequence: the held-out instance has exactly f
    // train rows and the rest in test.
    SplitProtocol tight = protocol;
    tight.holdout_instances = 1;
    tight.keep_first = 5;
    tight.holdout_timepoints = 15;
    SplitIndices s = split(ds, tight, 9);
    std::set<int> test_ids;
    for (std::size_t i : s.test) test_ids.insert(ds.instance_ids[i]);
    REQUIRE(test_ids.size() == 1);
    int held = *test_ids.begin();
    std::size_t train_rows = 0;
    for (std::size_t i : s.train) train_rows += ds.instance_ids[i] == held;
    std::size_t val_rows = 0;
    for (std::size_t i : s.val) val_rows += ds.instance_ids[i] == held;
    CHECK(train_rows == 5);
    CHECK(val_rows == 0);

    SplitProtocol bad = protocol;
    bad.holdout_timepoints = 18;
    bad.keep_first = 5;
    CHECK(throws_with([&] { (void)split(ds, bad, 1); }, "exceeds sequence length"));
}

TEST_CASE("interpolation split withholds one consecutive run per instance") {
    RotatingToySpec spec;
    spec.n_instances = 10;
    spec.n_angles = 16;
    spec.data_dim = 4;
    LongitudinalDataset ds = gen_rotating_toy(spec, 4);
    SplitProtocol protocol;
    protocol.kind = SplitProtocol::Kind::interpolation;
    protocol.consecutive_angles = 4;
    protocol.holdout_instances = 3;
    protocol.train_ratio = 0.8;
    SplitIndices s = split(ds, protocol, 5);
    check_partition(ds, s);
    CHECK(s.test.size() == 3 * 4);
    // each held-out instance's test angles are consecutive
    std::map<int, std::vector<std::size_t>> by_inst;
    for (std::size_t i : s.test) by_inst[ds.instance_ids[i]].push_back(i);
    CHECK(by_inst.size() == 3);
    for (auto& [id, obs] : by_inst) {
        std::sort(obs.begin(), obs.end());
        for (std::size_t j = 1; j < obs.size(); ++j) CHECK(obs[j] == obs[j - 1] + 1);
    }
}

TEST_CASE("random split partitions observations by ratio") {
    SyntheticLmmSpec spec;
    spec.n_instances = 10;
    spec.n_timepoints = 10;
    spec.latent_dim = 2;
    spec.data_dim = 4;
    LongitudinalDataset ds = gen_synthetic_lmm(spec, 6);
    SplitProtocol protocol;
    protocol.kind = SplitProtocol::Kind::random;
    protocol.train_ratio = 0.85;
    SplitIndices s = split(ds, protocol, 8);
    check_partition(ds, s);
    CHECK(s.test.empty());
    CHECK(s.train.size() == 85);
    CHECK(s.val.size() == 15);
}

TEST_CASE("csv round trip preserves observed values and the mask") {
    SyntheticLmmSpec spec;
    spec.n_instances = 4;
    spec.n_timepoints = 3;
    spec.latent_dim = 2;
    spec.data_dim = 5;
    LongitudinalDataset ds = apply_missingness(gen_synthetic_lmm(spec, 3), 0.2, 17);

    std::string path = (std::filesystem::temp_directory_path() / "lmmvae_rt.csv").string();
    save_csv(ds, path);
    CsvManifest manifest;
    manifest.covariate_columns = {"time", "trait", "gated_time", "id"};
    for (std::size_t d = 0; d < 5; ++d) {
        manifest.feature_columns.push_back("feature_" + std::to_string(d));
    }
    LongitudinalDataset back = load_csv(path, manifest);
    REQUIRE(back.n_obs() == ds.n_obs());
    CHECK(testutil::max_abs_diff(back.mask, ds.mask) == 0.0);
    for (std::size_t i = 0; i < ds.Y.size(); ++i) {
        if (ds.mask[i] != 0.0) {
            CHECK(std::abs(back.Y[i] - ds.Y[i]) < 1e-12);
        } else {
            CHECK(back.Y[i] == 0.0);  // hidden values are not serialized
        }
    }
    CHECK(back.instance_ids == ds.instance_ids);
    std::filesystem::remove(path);
}

TEST_CASE("csv error reporting") {
    namespace fsys = std::filesystem;
    std::string path = (fsys::temp_directory_path() / "lmmvae_bad.csv").string();
    {
        std::ofstream out(path);
        out << "instance_id,timepoint,f0,f1\n";
        out << "0,0.0,1.5,2.5\n";
        out << "0,1.0,oops,2.5\n";
    }
    CsvManifest manifest;
    manifest.feature_columns = {"f0", "f1"};
    CHECK(throws_with([&] { (void)load_csv(path, manifest); }, "line 3"));
    CHECK(throws_with([&] { (void)load_csv(path, manifest); }, "f0"));

    CsvManifest unknown;
    unknown.feature_columns = {"nope"};
    CHECK(throws_with([&] { (void)load_csv(path, unknown); }, "unknown column 'nope'"));

    {
        std::ofstream out(path);
        out << "instance_id,timepoint,f0,f1\n";
        out << "0,0.0,1.5\n";  // short row
    }
    CHECK(throws_with([&] { (void)load_csv(path, manifest); }, "line 2"));

    // a single empty cell maps to exactly one masked entry
    {
        std::ofstream out(path);
        out << "instance_id,timepoint,f0,f1\n";
        out << "0,0.0,1.5,2.5\n";
        out << "0,1.0,,2.5\n";
    }
    LongitudinalDataset ds = load_csv(path, manifest);
    CHECK(ds.mask.at(0, 0) == 1.0);
    CHECK(ds.mask.at(0, 1) == 0.0);
    CHECK(ds.mask.at(1, 1) == 1.0);
    CHECK(ds.Y.at(0, 1) == 0.0);
    fsys::remove(path);
}

TEST_CASE("dataset validation rejects unordered timepoints") {
    LongitudinalDataset ds;
    ds.Y = Tensor::zeros({2, 2});
    ds.mask = Tensor::ones({2, 2});
    ds.instance_ids = {0, 0};
    ds.timepoints = {1.0, 1.0};  // not strictly increasing
    ds.covariates.columns = {"t"};
    ds.covariates.values = {{0.0, 1.0}};
    CHECK(throws_with([&] { ds.validate(); }, "strictly increasing"));
}
