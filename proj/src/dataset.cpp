#include "crmt/dataset.hpp"

#include "crmt/errors.hpp"
#include "crmt/prng.hpp"
#include "crmt/textio.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

namespace crmt {

using json = nlohmann::ordered_json;

namespace {
constexpr const char* kFormatVersion = "crmt-ds-1";
}

void GenSpec::validate() const {
    if (k < 2) throw ConfigError("gen: need at least two classes");
    if (dims.size() < 2) throw ConfigError("gen: need at least two modalities");
    if (separation.size() != dims.size() || noise_sigma.size() != dims.size() ||
        scale.size() != dims.size())
        throw ConfigError("gen: per-modality fields must all have one entry per modality");
    for (std::size_t d : dims)
        if (d < 2) throw ConfigError("gen: each modality needs dimension >= 2");
    for (std::size_t m = 0; m < dims.size(); ++m)
        if (dims[m] < static_cast<std::size_t>(k))
            throw ConfigError("gen: modality " + std::to_string(m + 1) + " dimension " +
                              std::to_string(dims[m]) + " cannot place " + std::to_string(k) +
                              " orthogonal class means");
    for (double s : separation)
        if (s < 0) throw ConfigError("gen: separations must be >= 0");
    for (double s : noise_sigma)
        if (s < 0) throw ConfigError("gen: noise sigmas must be >= 0");
    if (n_train < static_cast<std::size_t>(k) || n_test < static_cast<std::size_t>(k))
        throw ConfigError("gen: need at least one sample per class in each part");
}

std::vector<Matrix> Dataset::sample(std::size_t i) const {
    std::vector<Matrix> xs;
    xs.reserve(modalities.size());
    for (const auto& block : modalities) xs.push_back(block.row(i));
    return xs;
}

namespace {

// Stream layout (single SplitMix64 stream, documented so the files can be
// regenerated independently): per modality, K x dim Gaussian draws for the
// class directions; then train samples in index order, then test samples,
// each drawing dim_m Gaussians per modality. Labels are round-robin i % K.
Dataset materialize(const GenSpec& spec, const std::vector<Matrix>& means,
                    SplitMix64& rng, std::size_t n, const char* kind) {
    Dataset ds;
    ds.spec = spec;
    ds.kind = kind;
    ds.labels.resize(n);
    for (std::size_t m = 0; m < spec.modalities(); ++m)
        ds.modalities.emplace_back(n, spec.dims[m]);
    for (std::size_t i = 0; i < n; ++i) {
        int label = static_cast<int>(i % static_cast<std::size_t>(spec.k));
        ds.labels[i] = label;
        for (std::size_t m = 0; m < spec.modalities(); ++m) {
            for (std::size_t c = 0; c < spec.dims[m]; ++c) {
                double v = means[m](static_cast<std::size_t>(label), c) +
                           spec.noise_sigma[m] * rng.gaussian();
                ds.modalities[m](i, c) = spec.scale[m] * v;
            }
        }
    }
    return ds;
}

} // namespace

std::pair<Dataset, Dataset> generate(const GenSpec& spec) {
    spec.validate();
    SplitMix64 rng(spec.seed);

    std::vector<Matrix> means;
    for (std::size_t m = 0; m < spec.modalities(); ++m) {
        Matrix dirs(static_cast<std::size_t>(spec.k), spec.dims[m]);
        for (std::size_t i = 0; i < dirs.size(); ++i) dirs[i] = rng.gaussian();
        Matrix ortho = orthonormalize(dirs);
        ortho *= spec.separation[m];
        means.push_back(std::move(ortho));
    }

    Dataset train = materialize(spec, means, rng, spec.n_train, "train");
    Dataset test = materialize(spec, means, rng, spec.n_test, "test");
    return {std::move(train), std::move(test)};
}

namespace {

json spec_to_json(const GenSpec& spec) {
    json j;
    j["version"] = kFormatVersion;
    j["k"] = spec.k;
    j["dims"] = spec.dims;
    j["separation"] = spec.separation;
    j["noise_sigma"] = spec.noise_sigma;
    j["scale"] = spec.scale;
    j["n_train"] = spec.n_train;
    j["n_test"] = spec.n_test;
    j["seed"] = spec.seed;
    return j;
}

GenSpec spec_from_json(const json& j) {
    GenSpec spec;
    spec.k = j.at("k").get<int>();
    spec.dims = j.at("dims").get<std::vector<std::size_t>>();
    spec.separation = j.at("separation").get<std::vector<double>>();
    spec.noise_sigma = j.at("noise_sigma").get<std::vector<double>>();
    spec.scale = j.at("scale").get<std::vector<double>>();
    spec.n_train = j.at("n_train").get<std::size_t>();
    spec.n_test = j.at("n_test").get<std::size_t>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    return spec;
}

std::string header_line(const GenSpec& spec) {
    std::string h = "label";
    for (std::size_t m = 0; m < spec.modalities(); ++m)
        for (std::size_t c = 0; c < spec.dims[m]; ++c)
            h += ",m" + std::to_string(m + 1) + "_" + std::to_string(c);
    return h;
}

} // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary); // binary: exact '\n' endings
    if (!out) throw UsageError("save_dataset: cannot open '" + path.string() + "' for writing");
    json manifest = spec_to_json(ds.spec);
    manifest["kind"] = ds.kind;
    manifest["n"] = ds.size();
    out << manifest.dump() << '\n';
    out << header_line(ds.spec) << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << ds.labels[i];
        for (std::size_t m = 0; m < ds.n_modalities(); ++m)
            for (std::size_t c = 0; c < ds.spec.dims[m]; ++c)
                out << ',' << fmt_double(ds.modalities[m](i, c));
        out << '\n';
    }
    if (!out) throw UsageError("save_dataset: write failed for '" + path.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("load_dataset: cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("dataset: missing manifest line");

    json manifest;
    try {
        manifest = json::parse(line);
    } catch (const json::exception& e) {
        throw ParseError(std::string("dataset: bad manifest: ") + e.what());
    }
    std::string version = manifest.value("version", "");
    if (version != kFormatVersion)
        throw ParseError("dataset: version '" + version + "' is not '" + kFormatVersion + "'");

    Dataset ds;
    ds.spec = spec_from_json(manifest);
    ds.kind = manifest.value("kind", "");
    std::size_t n = manifest.at("n").get<std::size_t>();

    if (!std::getline(in, line)) throw ParseError("dataset: missing header line");
    if (line != header_line(ds.spec))
        throw ParseError("dataset: header does not match the manifest dimensions");

    ds.labels.resize(n);
    for (std::size_t m = 0; m < ds.spec.modalities(); ++m)
        ds.modalities.emplace_back(n, ds.spec.dims[m]);
    std::size_t total_cols =
        1 + std::accumulate(ds.spec.dims.begin(), ds.spec.dims.end(), std::size_t{0});

    for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(in, line))
            throw ParseError("dataset: truncated at row " + std::to_string(i) + " of " +
                             std::to_string(n));
        auto fields = split_csv(line);
        if (fields.size() != total_cols)
            throw ParseError("dataset: row " + std::to_string(i) + " has " +
                             std::to_string(fields.size()) + " fields, expected " +
                             std::to_string(total_cols));
        double label_raw = parse_double(fields[0], "dataset row " + std::to_string(i));
        int label = static_cast<int>(label_raw);
        if (static_cast<double>(label) != label_raw || label < 0 || label >= ds.spec.k)
            throw IntegrityError("dataset: row " + std::to_string(i) + " label " +
                                 std::string(fields[0]) + " is outside 0.." +
                                 std::to_string(ds.spec.k - 1));
        ds.labels[i] = label;
        std::size_t f = 1;
        for (std::size_t m = 0; m < ds.spec.modalities(); ++m)
            for (std::size_t c = 0; c < ds.spec.dims[m]; ++c)
                ds.modalities[m](i, c) =
                    parse_double(fields[f++], "dataset row " + std::to_string(i));
    }
    if (std::getline(in, line) && !line.empty())
        throw ParseError("dataset: trailing content after " + std::to_string(n) + " rows");
    return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw UsageError("split: fraction must be inside (0, 1)");

    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.spec.k));
    for (std::size_t i = 0; i < ds.size(); ++i)
        by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

    SplitMix64 rng(derive_seed(seed, "split"));
    std::vector<std::size_t> first_idx, second_idx;
    for (auto& group : by_class) {
        for (std::size_t i = group.size(); i > 1; --i)
            std::swap(group[i - 1], group[rng.below(i)]);
        std::size_t take = static_cast<std::size_t>(
            std::llround(fraction * static_cast<double>(group.size())));
        for (std::size_t i = 0; i < group.size(); ++i)
            (i < take ? first_idx : second_idx).push_back(group[i]);
    }
    std::sort(first_idx.begin(), first_idx.end());
    std::sort(second_idx.begin(), second_idx.end());

    auto take_rows = [&](const std::vector<std::size_t>& idx) {
        Dataset out;
        out.spec = ds.spec;
        out.kind = "split";
        out.labels.reserve(idx.size());
        for (std::size_t m = 0; m < ds.n_modalities(); ++m)
            out.modalities.emplace_back(idx.size(), ds.spec.dims[m]);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            out.labels.push_back(ds.labels[idx[r]]);
            for (std::size_t m = 0; m < ds.n_modalities(); ++m)
                for (std::size_t c = 0; c < ds.spec.dims[m]; ++c)
                    out.modalities[m](r, c) = ds.modalities[m](idx[r], c);
        }
        return out;
    };
    return {take_rows(first_idx), take_rows(second_idx)};
}

bool datasets_bit_equal(const Dataset& a, const Dataset& b) {
    if (a.labels != b.labels || a.n_modalities() != b.n_modalities()) return false;
    for (std::size_t m = 0; m < a.n_modalities(); ++m)
        if (!a.modalities[m].bit_equal(b.modalities[m])) return false;
    return true;
}

} // namespace crmt
