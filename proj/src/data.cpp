#include "lmmvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "lmmvae/rng.hpp"

namespace lmmvae {

bool LongitudinalDataset::has_missing() const {
    for (double m : mask.data()) {
        if (m == 0.0) return true;
    }
    return false;
}

void LongitudinalDataset::validate() const {
    std::size_t n = n_obs();
    if (mask.shape() != Y.shape()) throw std::invalid_argument("dataset: mask shape mismatch");
    if (instance_ids.size() != n || timepoints.size() != n) {
        throw std::invalid_argument("dataset: per-observation fields misaligned");
    }
    if (covariates.n_rows() != n) {
        throw std::invalid_argument("dataset: covariate table misaligned");
    }
    if (Z_true && Z_true->cols() != n) throw std::invalid_argument("dataset: Z_true misaligned");
    std::map<int, double> last_time;
    for (std::size_t i = 0; i < n; ++i) {
        auto it = last_time.find(instance_ids[i]);
        if (it != last_time.end() && !(timepoints[i] > it->second)) {
            throw std::invalid_argument("dataset: timepoints not strictly increasing for instance " +
                                        std::to_string(instance_ids[i]));
        }
        last_time[instance_ids[i]] = timepoints[i];
    }
}

namespace {

void shuffle(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        std::swap(idx[i - 1], idx[rng.below(i)]);
    }
}

double leaky_relu(double x) { return x > 0.0 ? x : 0.2 * x; }

// Gram-Schmidt orthonormalization of the columns of a D x K draw.
void orthonormalize_columns(Tensor& w, Rng& rng) {
    std::size_t d = w.rows(), k = w.cols();
    for (std::size_t c = 0; c < k; ++c) {
        for (;;) {
            for (std::size_t p = 0; p < c; ++p) {
                double dot = 0.0;
                for (std::size_t r = 0; r < d; ++r) dot += w.at(r, c) * w.at(r, p);
                for (std::size_t r = 0; r < d; ++r) w.at(r, c) -= dot * w.at(r, p);
            }
            double norm = 0.0;
            for (std::size_t r = 0; r < d; ++r) norm += w.at(r, c) * w.at(r, c);
            norm = std::sqrt(norm);
            if (norm > 1e-8) {
                for (std::size_t r = 0; r < d; ++r) w.at(r, c) /= norm;
                break;
            }
            for (std::size_t r = 0; r < d; ++r) w.at(r, c) = rng.normal();
        }
    }
}

}  // namespace

LongitudinalDataset gen_synthetic_lmm(const SyntheticLmmSpec& spec, std::uint64_t seed) {
    if (spec.n_instances == 0 || spec.n_timepoints == 0 || spec.latent_dim == 0 ||
        spec.data_dim == 0) {
        throw std::invalid_argument("gen_synthetic_lmm: zero-sized spec");
    }
    if (spec.identity_decoder && spec.data_dim != spec.latent_dim) {
        throw std::invalid_argument("gen_synthetic_lmm: identity decoder needs D == L");
    }
    if (!spec.identity_decoder && spec.data_dim <= spec.latent_dim) {
        throw std::invalid_argument("gen_synthetic_lmm: needs D > L for an injective decoder");
    }
    Rng root(seed);
    std::size_t k = spec.n_instances, t_len = spec.n_timepoints;
    std::size_t n = k * t_len, l_dim = spec.latent_dim, d_dim = spec.data_dim;

    // Raw covariates: time in [0, 1], a binary trait, a trait-gated late-time
    // ramp (interaction analog), and the instance id.
    Rng trait_rng = root.fork("trait");
    std::vector<double> trait(k), gate(k);
    for (std::size_t i = 0; i < k; ++i) {
        trait[i] = trait_rng.bernoulli(0.5) ? 1.0 : 0.0;
        gate[i] = trait_rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    LongitudinalDataset ds;
    ds.covariates.columns = {"time", "trait", "gated_time", "id"};
    ds.covariates.values.resize(4);
    CovariateSchema schema;
    std::vector<std::string> levels(k);
    for (std::size_t i = 0; i < k; ++i) levels[i] = std::to_string(i);
    schema.entries = {
        {"time", CovariateKind::continuous, {}, CovariateRole::shared, {}},
        {"trait", CovariateKind::continuous, {}, CovariateRole::shared, {}},
        {"gated_time", CovariateKind::continuous, {}, CovariateRole::shared, {}},
        {"id", CovariateKind::categorical, levels, CovariateRole::random, {}},
    };
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < t_len; ++j) {
            double t = t_len == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(t_len - 1);
            ds.covariates.values[0].push_back(t);
            ds.covariates.values[1].push_back(trait[i]);
            ds.covariates.values[2].push_back(gate[i] * std::max(0.0, t - 0.5));
            ds.covariates.values[3].push_back(levels[i]);
            ds.instance_ids.push_back(static_cast<int>(i));
            ds.timepoints.push_back(t_len == 1 ? 0.0 : t);
        }
    }
    DesignMatrix dm = build_design_matrix(schema, ds.covariates);
    std::size_t q_dim = dm.total_width();

    Rng a_rng = root.fork("effects");
    Tensor a_true({l_dim, q_dim});
    for (std::size_t l = 0; l < l_dim; ++l) {
        for (std::size_t q = 0; q < q_dim; ++q) {
            double scale = q < dm.shared_width ? 1.0 : spec.random_effect_scale;
            a_true.at(l, q) = scale * a_rng.normal();
        }
    }

    Rng z_rng = root.fork("latent-noise");
    Tensor z({l_dim, n});
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t l = 0; l < l_dim; ++l) {
            double m = 0.0;
            for (std::size_t q = 0; q < q_dim; ++q) m += a_true.at(l, q) * dm.X.at(q, c);
            z.at(l, c) = m + spec.latent_noise * z_rng.normal();
        }
    }

    ds.Y = Tensor::zeros({d_dim, n});
    if (spec.identity_decoder) {
        ds.Y = z;
    } else {
        Rng g_rng = root.fork("decoder");
        std::size_t h_dim = std::min(2 * l_dim, d_dim);
        Tensor w1 = g_rng.draw_normal({h_dim, l_dim});
        for (auto& v : w1.data()) v /= std::sqrt(static_cast<double>(l_dim));
        Tensor b1 = g_rng.draw_normal({h_dim});
        for (auto& v : b1.data()) v *= 0.1;
        Tensor w2 = g_rng.draw_normal({d_dim, h_dim});
        orthonormalize_columns(w2, g_rng);
        std::vector<double> h(h_dim);
        for (std::size_t c = 0; c < n; ++c) {
            for (std::size_t r = 0; r < h_dim; ++r) {
                double s = b1[r];
                for (std::size_t l = 0; l < l_dim; ++l) s += w1.at(r, l) * z.at(l, c);
                h[r] = leaky_relu(s);
            }
            for (std::size_t d = 0; d < d_dim; ++d) {
                double s = 0.0;
                for (std::size_t r = 0; r < h_dim; ++r) s += w2.at(d, r) * h[r];
                ds.Y.at(d, c) = s;
            }
        }
        // Bring the signal to unit scale before adding observation noise.
        double mean = 0.0;
        for (double v : ds.Y.data()) mean += v;
        mean /= static_cast<double>(ds.Y.size());
        double var = 0.0;
        for (double v : ds.Y.data()) var += (v - mean) * (v - mean);
        var /= static_cast<double>(ds.Y.size());
        double scale = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
        for (double& v : ds.Y.data()) v = (v - mean) * scale;
    }
    if (spec.obs_noise > 0.0) {
        Rng y_rng = root.fork("obs-noise");
        for (double& v : ds.Y.data()) v += spec.obs_noise * y_rng.normal();
    }
    ds.mask = Tensor::ones({d_dim, n});
    ds.Z_true = z;
    ds.A_true = a_true;
    ds.validate();
    return ds;
}

LongitudinalDataset gen_rotating_toy(const RotatingToySpec& spec, std::uint64_t seed) {
    if (spec.n_angles < 4) throw std::invalid_argument("gen_rotating_toy: needs n_angles >= 4");
    if (spec.n_instances == 0 || spec.data_dim < 2) {
        throw std::invalid_argument("gen_rotating_toy: bad spec");
    }
    Rng root(seed);
    Rng tpl_rng = root.fork("templates");
    Rng noise_rng = root.fork("noise");
    std::size_t k = spec.n_instances, t_len = spec.n_angles, d_dim = spec.data_dim;
    std::size_t n = k * t_len;

    LongitudinalDataset ds;
    ds.Y = Tensor::zeros({d_dim, n});
    ds.mask = Tensor::ones({d_dim, n});
    ds.covariates.columns = {"angle", "cos_angle", "sin_angle", "id"};
    ds.covariates.values.resize(4);

    std::size_t c = 0;
    for (std::size_t i = 0; i < k; ++i) {
        // Orthonormal template pair with a per-instance amplitude, so the
        // angular Gram structure is exact.
        Tensor uv = tpl_rng.draw_normal({d_dim, 2});
        orthonormalize_columns(uv, tpl_rng);
        double amplitude = 0.7 + 0.6 * tpl_rng.uniform();
        for (std::size_t j = 0; j < t_len; ++j, ++c) {
            double theta = 2.0 * std::numbers::pi * static_cast<double>(j) /
                           static_cast<double>(t_len);
            for (std::size_t d = 0; d < d_dim; ++d) {
                double v = amplitude * (uv.at(d, 0) * std::cos(theta) + uv.at(d, 1) * std::sin(theta));
                if (spec.noise > 0.0) v += spec.noise * noise_rng.normal();
                ds.Y.at(d, c) = v;
            }
            ds.covariates.values[0].push_back(theta);
            ds.covariates.values[1].push_back(std::cos(theta));
            ds.covariates.values[2].push_back(std::sin(theta));
            ds.covariates.values[3].push_back(std::to_string(i));
            ds.instance_ids.push_back(static_cast<int>(i));
            ds.timepoints.push_back(theta);
        }
    }
    ds.validate();
    return ds;
}

LongitudinalDataset apply_missingness(const LongitudinalDataset& ds, double fraction,
                                      std::uint64_t seed) {
    if (fraction < 0.0 || fraction >= 1.0) {
        throw std::invalid_argument("apply_missingness: fraction must be in [0, 1)");
    }
    LongitudinalDataset out = ds;
    std::size_t d_dim = ds.data_dim();
    auto n_hidden = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(d_dim)));
    if (n_hidden == 0) return out;
    Rng rng = Rng(seed).fork("mask");
    std::vector<std::size_t> rows(d_dim);
    for (std::size_t c = 0; c < ds.n_obs(); ++c) {
        for (std::size_t r = 0; r < d_dim; ++r) rows[r] = r;
        // Partial Fisher-Yates: the first n_hidden entries are the sample.
        for (std::size_t i = 0; i < n_hidden; ++i) {
            std::size_t j = i + rng.below(d_dim - i);
            std::swap(rows[i], rows[j]);
            out.mask.at(rows[i], c) = 0.0;
        }
    }
    return out;
}

namespace {

std::map<int, std::vector<std::size_t>> observations_by_instance(const LongitudinalDataset& ds) {
    std::map<int, std::vector<std::size_t>> by_inst;
    for (std::size_t i = 0; i < ds.n_obs(); ++i) by_inst[ds.instance_ids[i]].push_back(i);
    // Observations are stored time-ordered per instance (validated), so each
    // vector is already in time order.
    return by_inst;
}

void split_pool(std::vector<std::size_t>& pool, double train_ratio, Rng& rng,
                std::vector<std::size_t>& train, std::vector<std::size_t>& val) {
    shuffle(pool, rng);
    auto n_train = static_cast<std::size_t>(
        std::llround(train_ratio * static_cast<double>(pool.size())));
    n_train = std::min(n_train, pool.size());
    train.insert(train.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_train));
    val.insert(val.end(), pool.begin() + static_cast<std::ptrdiff_t>(n_train), pool.end());
}

}  // namespace

SplitIndices split(const LongitudinalDataset& ds, const SplitProtocol& protocol,
                   std::uint64_t seed) {
    ds.validate();
    Rng rng = Rng(seed).fork("split");
    SplitIndices out;
    auto by_inst = observations_by_instance(ds);
    std::vector<int> instances;
    for (const auto& [id, obs] : by_inst) instances.push_back(id);

    if (protocol.kind == SplitProtocol::Kind::random) {
        std::vector<std::size_t> pool(ds.n_obs());
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
        split_pool(pool, protocol.train_ratio, rng, out.train, out.val);
    } else {
        std::size_t m = std::min<std::size_t>(protocol.holdout_instances, instances.size());
        std::vector<std::size_t> order(instances.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        shuffle(order, rng);
        std::vector<char> held(instances.size(), 0);
        for (std::size_t i = 0; i < m; ++i) held[order[i]] = 1;

        std::vector<std::size_t> pool;
        for (std::size_t ii = 0; ii < instances.size(); ++ii) {
            const auto& obs = by_inst[instances[ii]];
            if (!held[ii]) {
                pool.insert(pool.end(), obs.begin(), obs.end());
                continue;
            }
            if (protocol.kind == SplitProtocol::Kind::future) {
                std::size_t h = protocol.holdout_timepoints, f = protocol.keep_first;
                if (h + f > obs.size()) {
                    throw std::invalid_argument(
                        "split: holdout_timepoints + keep_first exceeds sequence length of instance " +
                        std::to_string(instances[ii]));
                }
                for (std::size_t j = 0; j < obs.size(); ++j) {
                    if (j < f) {
                        out.train.push_back(obs[j]);
                    } else if (j >= obs.size() - h) {
                        out.test.push_back(obs[j]);
                    } else {
                        pool.push_back(obs[j]);
                    }
                }
            } else {  // interpolation: one run of consecutive angles per instance
                std::size_t c = protocol.consecutive_angles;
                if (c > obs.size()) {
                    throw std::invalid_argument("split: consecutive_angles exceeds sequence length");
                }
                std::size_t start = rng.below(obs.size() - c + 1);
                for (std::size_t j = 0; j < obs.size(); ++j) {
                    if (j >= start && j < start + c) {
                        out.test.push_back(obs[j]);
                    } else {
                        pool.push_back(obs[j]);
                    }
                }
            }
        }
        split_pool(pool, protocol.train_ratio, rng, out.train, out.val);
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

namespace {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

double parse_double(const std::string& s, std::size_t line_no, const std::string& column) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != s.size() || s.empty()) {
        throw std::invalid_argument("csv: non-numeric value '" + s + "' at line " +
                                    std::to_string(line_no) + ", column '" + column + "'");
    }
    return v;
}

}  // namespace

void save_csv(const LongitudinalDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("csv: cannot write '" + path + "'");
    out << "instance_id,timepoint";
    for (const auto& c : ds.covariates.columns) out << "," << c;
    for (std::size_t d = 0; d < ds.data_dim(); ++d) out << ",feature_" << d;
    out << "\n";
    for (std::size_t i = 0; i < ds.n_obs(); ++i) {
        out << ds.instance_ids[i] << "," << format_double(ds.timepoints[i]);
        for (std::size_t c = 0; c < ds.covariates.columns.size(); ++c) {
            const CovariateValue& v = ds.covariates.values[c][i];
            out << ",";
            if (const double* x = std::get_if<double>(&v)) {
                out << format_double(*x);
            } else {
                out << std::get<std::string>(v);
            }
        }
        for (std::size_t d = 0; d < ds.data_dim(); ++d) {
            out << ",";
            if (ds.mask.at(d, i) != 0.0) out << format_double(ds.Y.at(d, i));
        }
        out << "\n";
    }
}

LongitudinalDataset load_csv(const std::string& path, const CsvManifest& manifest) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("csv: cannot read '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("csv: empty file '" + path + "'");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> header = split_line(line);
    auto column_of = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            throw std::invalid_argument("csv: unknown column '" + name + "' in '" + path + "'");
        }
        return static_cast<std::size_t>(it - header.begin());
    };

    std::size_t id_col = column_of(manifest.id_column);
    std::size_t time_col = column_of(manifest.time_column);
    std::vector<std::size_t> cov_cols;
    for (const auto& c : manifest.covariate_columns) cov_cols.push_back(column_of(c));
    std::vector<std::size_t> feat_cols;
    for (const auto& c : manifest.feature_columns) feat_cols.push_back(column_of(c));
    if (feat_cols.empty()) throw std::invalid_argument("csv: manifest names no feature columns");

    LongitudinalDataset ds;
    ds.covariates.columns = manifest.covariate_columns;
    ds.covariates.values.resize(cov_cols.size());
    std::vector<double> y_data;
    std::vector<double> mask_data;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells = split_line(line);
        if (cells.size() != header.size()) {
            throw std::invalid_argument("csv: line " + std::to_string(line_no) + " has " +
                                        std::to_string(cells.size()) + " cells, expected " +
                                        std::to_string(header.size()));
        }
        ds.instance_ids.push_back(
            static_cast<int>(parse_double(cells[id_col], line_no, manifest.id_column)));
        ds.timepoints.push_back(parse_double(cells[time_col], line_no, manifest.time_column));
        for (std::size_t c = 0; c < cov_cols.size(); ++c) {
            const std::string& cell = cells[cov_cols[c]];
            std::size_t pos = 0;
            double x = 0.0;
            bool numeric = false;
            try {
                x = std::stod(cell, &pos);
                numeric = pos == cell.size() && !cell.empty();
            } catch (const std::exception&) {
                numeric = false;
            }
            if (numeric) {
                ds.covariates.values[c].emplace_back(x);
            } else {
                ds.covariates.values[c].emplace_back(cell);
            }
        }
        for (std::size_t f = 0; f < feat_cols.size(); ++f) {
            const std::string& cell = cells[feat_cols[f]];
            if (cell.empty()) {
                y_data.push_back(0.0);
                mask_data.push_back(0.0);
            } else {
                y_data.push_back(parse_double(cell, line_no, manifest.feature_columns[f]));
                mask_data.push_back(1.0);
            }
        }
    }
    std::size_t n = ds.instance_ids.size();
    std::size_t d_dim = feat_cols.size();
    // CSV rows are observations; transpose into the D x N layout.
    ds.Y = Tensor::zeros({d_dim, n});
    ds.mask = Tensor::zeros({d_dim, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < d_dim; ++d) {
            ds.Y.at(d, i) = y_data[i * d_dim + d];
            ds.mask.at(d, i) = mask_data[i * d_dim + d];
        }
    }
    ds.validate();
    return ds;
}

}  // namespace lmmvae
