#include "lmmvae/covariates.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

namespace lmmvae {

std::size_t BasisSpec::width() const {
    switch (kind) {
        case BasisKind::identity:
            return 1;
        case BasisKind::polynomial:
            return static_cast<std::size_t>(degree);
        case BasisKind::trig:
            return 2 * frequencies.size();
        case BasisKind::custom_table:
            return table.empty() ? 0 : table.front().second.size();
    }
    return 0;
}

std::size_t CovariateEntry::encoded_width() const {
    if (kind == CovariateKind::categorical) return levels.size();
    return basis.width();
}

void CovariateSchema::validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.name).second) {
            throw std::invalid_argument("schema: duplicate covariate name '" + e.name + "'");
        }
        if (e.kind == CovariateKind::categorical && e.levels.empty()) {
            throw std::invalid_argument("schema: categorical covariate '" + e.name +
                                        "' declares no levels");
        }
        if (e.kind == CovariateKind::continuous && e.basis.kind == BasisKind::polynomial &&
            e.basis.degree < 1) {
            throw std::invalid_argument("schema: polynomial basis for '" + e.name +
                                        "' needs degree >= 1");
        }
        if (e.basis.kind == BasisKind::trig) {
            for (double w : e.basis.frequencies) {
                if (!(w > 0.0) || !std::isfinite(w)) {
                    throw std::invalid_argument("schema: trig basis for '" + e.name +
                                                "' has a non-positive frequency");
                }
            }
        }
    }
}

namespace {

std::size_t width_for_role(const CovariateSchema& s, CovariateRole role) {
    std::size_t w = 0;
    for (const auto& e : s.entries) {
        if (e.role == role) w += e.encoded_width();
    }
    return w;
}

}  // namespace

std::size_t CovariateSchema::shared_width() const { return width_for_role(*this, CovariateRole::shared); }
std::size_t CovariateSchema::random_width() const { return width_for_role(*this, CovariateRole::random); }

std::pair<std::size_t, std::size_t> CovariateSchema::block(const std::string& name) const {
    // Shared blocks first, then random blocks, each in declaration order.
    std::size_t offset = 0;
    for (CovariateRole role : {CovariateRole::shared, CovariateRole::random}) {
        for (const auto& e : entries) {
            if (e.role != role) continue;
            if (e.name == name) return {offset, e.encoded_width()};
            offset += e.encoded_width();
        }
    }
    throw std::invalid_argument("schema: no covariate named '" + name + "'");
}

const CovariateEntry& CovariateSchema::entry(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) return e;
    }
    throw std::invalid_argument("schema: no covariate named '" + name + "'");
}

std::size_t CovariateTable::column_index(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) {
        throw std::invalid_argument("covariates: missing column '" + name + "'");
    }
    return static_cast<std::size_t>(it - columns.begin());
}

void GroupIndex::validate() const {
    std::vector<std::size_t> counted(sizes.size(), 0);
    for (int g : group_of) {
        if (g < 0 || static_cast<std::size_t>(g) >= sizes.size()) {
            throw std::invalid_argument("group index: observation assigned to unknown group");
        }
        ++counted[static_cast<std::size_t>(g)];
    }
    if (counted != sizes) {
        throw std::invalid_argument("group index: sizes do not match group assignments");
    }
}

GroupIndex GroupIndex::from_ids(const std::vector<int>& ids) {
    GroupIndex gi;
    gi.group_of = ids;
    int max_id = -1;
    for (int id : ids) {
        if (id < 0) throw std::invalid_argument("group index: negative instance id");
        max_id = std::max(max_id, id);
    }
    gi.sizes.assign(static_cast<std::size_t>(max_id + 1), 0);
    for (int id : ids) ++gi.sizes[static_cast<std::size_t>(id)];
    return gi;
}

std::vector<double> expand_basis(double x, const BasisSpec& spec) {
    switch (spec.kind) {
        case BasisKind::identity:
            return {x};
        case BasisKind::polynomial: {
            std::vector<double> out(static_cast<std::size_t>(spec.degree));
            double p = 1.0;
            for (auto& v : out) {
                p *= x;
                v = p;
            }
            return out;
        }
        case BasisKind::trig:
            return fourier_feature_map(x, spec.frequencies);
        case BasisKind::custom_table: {
            for (const auto& [key, feats] : spec.table) {
                if (key == x) return feats;
            }
            throw std::invalid_argument("expand_basis: value not present in custom table");
        }
    }
    throw std::invalid_argument("expand_basis: unknown basis kind");
}

std::vector<double> fourier_feature_map(double x, const std::vector<double>& frequencies) {
    if (frequencies.empty()) {
        throw std::invalid_argument("fourier_feature_map: needs at least one frequency");
    }
    std::vector<double> out(2 * frequencies.size());
    for (std::size_t m = 0; m < frequencies.size(); ++m) {
        out[m] = std::cos(frequencies[m] * x);
        out[m + frequencies.size()] = std::sin(frequencies[m] * x);
    }
    return out;
}

namespace {

void encode_entry(const CovariateEntry& e, const CovariateValue& v, double* dst) {
    if (e.kind == CovariateKind::categorical) {
        const std::string* s = std::get_if<std::string>(&v);
        std::string label = s ? *s : std::to_string(std::get<double>(v));
        auto it = std::find(e.levels.begin(), e.levels.end(), label);
        if (it == e.levels.end()) {
            throw std::invalid_argument("design matrix: unknown level '" + label +
                                        "' for covariate '" + e.name + "'");
        }
        std::fill(dst, dst + e.levels.size(), 0.0);
        dst[it - e.levels.begin()] = 1.0;
        return;
    }
    const double* x = std::get_if<double>(&v);
    if (!x) {
        throw std::invalid_argument("design matrix: covariate '" + e.name +
                                    "' expects a numeric value");
    }
    std::vector<double> feats = expand_basis(*x, e.basis);
    std::copy(feats.begin(), feats.end(), dst);
}

}  // namespace

DesignMatrix build_design_matrix(const CovariateSchema& schema, const CovariateTable& raw) {
    schema.validate();
    std::size_t n = raw.n_rows();
    DesignMatrix dm;
    dm.shared_width = schema.shared_width();
    dm.random_width = schema.random_width();
    std::size_t q = dm.total_width();
    dm.X = Tensor::zeros({q, n});

    for (CovariateRole role : {CovariateRole::shared, CovariateRole::random}) {
        for (const auto& e : schema.entries) {
            if (e.role != role) continue;
            std::size_t w = e.encoded_width();
            if (e.kind == CovariateKind::categorical) {
                for (const auto& level : e.levels) dm.column_labels.push_back(e.name + "=" + level);
            } else {
                for (std::size_t j = 0; j < w; ++j) {
                    dm.column_labels.push_back(w == 1 ? e.name : e.name + "[" + std::to_string(j) + "]");
                }
            }
        }
    }

    std::vector<double> buf;
    for (std::size_t obs = 0; obs < n; ++obs) {
        std::size_t offset = 0;
        for (CovariateRole role : {CovariateRole::shared, CovariateRole::random}) {
            for (const auto& e : schema.entries) {
                if (e.role != role) continue;
                std::size_t col = raw.column_index(e.name);
                std::size_t w = e.encoded_width();
                buf.assign(w, 0.0);
                encode_entry(e, raw.values[col][obs], buf.data());
                for (std::size_t j = 0; j < w; ++j) dm.X.at(offset + j, obs) = buf[j];
                offset += w;
            }
        }
    }
    return dm;
}

double rbf_spectral_density(double omega, double variance, double lengthscale) {
    return variance * lengthscale * std::sqrt(2.0 * std::numbers::pi) *
           std::exp(-0.5 * omega * omega * lengthscale * lengthscale);
}

std::vector<double> sample_random_frequencies(double lengthscale, std::size_t m, Rng& rng) {
    if (!(lengthscale > 0.0) || m == 0) {
        throw std::invalid_argument("sample_random_frequencies: need lengthscale > 0, m >= 1");
    }
    std::vector<double> out(m);
    for (auto& w : out) w = rng.normal() / lengthscale;
    return out;
}

FrequencyGrid regular_frequency_grid(double variance, double lengthscale, std::size_t m,
                                     double domain_half_width) {
    if (m == 0 || !(domain_half_width > 0.0)) {
        throw std::invalid_argument("regular_frequency_grid: need m >= 1, half width > 0");
    }
    FrequencyGrid grid;
    grid.frequencies.resize(m);
    grid.weights.resize(2 * m);
    for (std::size_t i = 0; i < m; ++i) {
        double w = static_cast<double>(i + 1) * std::numbers::pi / domain_half_width;
        grid.frequencies[i] = w;
        double s = rbf_spectral_density(w, variance, lengthscale);
        grid.weights[i] = s;
        grid.weights[i + m] = s;
    }
    return grid;
}

Tensor prior_column_variances(const CovariateSchema& schema, double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("prior_column_variances: beta must be > 0");
    Tensor out({schema.total_width()});
    std::size_t offset = 0;
    for (CovariateRole role : {CovariateRole::shared, CovariateRole::random}) {
        for (const auto& e : schema.entries) {
            if (e.role != role) continue;
            std::size_t w = e.encoded_width();
            bool spectral = e.kind == CovariateKind::continuous &&
                            e.basis.kind == BasisKind::trig && !e.basis.spectral_weights.empty();
            for (std::size_t j = 0; j < w; ++j) {
                if (spectral) {
                    if (e.basis.spectral_weights.size() != w) {
                        throw std::invalid_argument("schema: spectral weights for '" + e.name +
                                                    "' must have one entry per trig column");
                    }
                    out[offset + j] = e.basis.spectral_weights[j];
                } else {
                    out[offset + j] = 1.0 / beta;
                }
            }
            offset += w;
        }
    }
    return out;
}

}  // namespace lmmvae
