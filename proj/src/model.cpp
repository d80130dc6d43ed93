#include "crmt/model.hpp"

#include "crmt/errors.hpp"
#include "crmt/prng.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace crmt {

using json = nlohmann::ordered_json;

std::string activation_name(Activation a) {
    switch (a) {
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Identity: return "identity";
    }
    return "?";
}

Activation activation_from_name(const std::string& name) {
    if (name == "relu") return Activation::Relu;
    if (name == "tanh") return Activation::Tanh;
    if (name == "identity") return Activation::Identity;
    throw ConfigError("unknown activation '" + name + "'");
}

const StandardHead& MultiModalModel::standard_head() const {
    if (!std::holds_alternative<StandardHead>(head))
        throw UsageError("model: standard head expected");
    return std::get<StandardHead>(head);
}

const OrthogonalHead& MultiModalModel::orthogonal_head() const {
    if (!std::holds_alternative<OrthogonalHead>(head))
        throw UsageError("model: orthogonal head expected");
    return std::get<OrthogonalHead>(head);
}

StandardHead& MultiModalModel::standard_head() {
    if (!std::holds_alternative<StandardHead>(head))
        throw UsageError("model: standard head expected");
    return std::get<StandardHead>(head);
}

OrthogonalHead& MultiModalModel::orthogonal_head() {
    if (!std::holds_alternative<OrthogonalHead>(head))
        throw UsageError("model: orthogonal head expected");
    return std::get<OrthogonalHead>(head);
}

std::vector<std::size_t> MultiModalModel::modality_dims() const {
    std::vector<std::size_t> dims;
    for (const auto& enc : encoders) dims.push_back(enc.input_dim());
    return dims;
}

Matrix encode(const Encoder& enc, const Matrix& x) {
    if (x.cols() != enc.input_dim())
        throw ShapeError("encode: input has " + std::to_string(x.cols()) +
                         " features, encoder expects " + std::to_string(enc.input_dim()));
    Matrix h = x;
    for (const auto& layer : enc.layers) {
        Matrix z = h.matmul(layer.weight);
        for (std::size_t r = 0; r < z.rows(); ++r)
            for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += layer.bias(0, c);
        switch (layer.act) {
            case Activation::Relu:
                for (std::size_t i = 0; i < z.size(); ++i)
                    if (z[i] < 0.0) z[i] = 0.0;
                break;
            case Activation::Tanh:
                for (std::size_t i = 0; i < z.size(); ++i) z[i] = std::tanh(z[i]);
                break;
            case Activation::Identity:
                break;
        }
        h = std::move(z);
    }
    return h;
}

ForwardResult forward(const MultiModalModel& model, const std::vector<Matrix>& xs) {
    if (xs.size() != model.modalities())
        throw ShapeError("forward: expected " + std::to_string(model.modalities()) +
                         " modalities, got " + std::to_string(xs.size()));
    ForwardResult out;
    out.embeddings.reserve(xs.size());
    for (std::size_t m = 0; m < xs.size(); ++m)
        out.embeddings.push_back(encode(model.encoders[m], xs[m]));

    const std::size_t n = xs[0].rows();
    const std::size_t k = static_cast<std::size_t>(model.k);
    if (model.is_orthogonal()) {
        const auto& h = model.orthogonal_head();
        out.logits = Matrix(n, k);
        for (std::size_t m = 0; m < xs.size(); ++m) {
            Matrix s = out.embeddings[m].matmul(h.w_rows[m].transposed());
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < k; ++c) out.logits(r, c) += h.a[m](c, 0) * s(r, c);
            out.scores.push_back(std::move(s));
        }
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < k; ++c) out.logits(r, c) += h.bias(0, c);
    } else {
        const auto& h = model.standard_head();
        out.logits = Matrix(n, k);
        for (std::size_t m = 0; m < xs.size(); ++m)
            out.logits += out.embeddings[m].matmul(h.w_parts[m].transposed());
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < k; ++c) out.logits(r, c) += h.bias(0, c);
    }
    return out;
}

Matrix forward_standard(const MultiModalModel& model, const std::vector<Matrix>& xs) {
    if (model.is_orthogonal()) throw UsageError("forward_standard: model has an orthogonal head");
    return forward(model, xs).logits;
}

ForwardResult forward_orth(const MultiModalModel& model, const std::vector<Matrix>& xs) {
    const auto& h = model.orthogonal_head();
    for (std::size_t m = 0; m < h.w_rows.size(); ++m) {
        double res = orthonormality_residual(h.w_rows[m]);
        if (res > kOrthonormalityTolerance)
            throw IntegrityError("forward_orth: modality " + std::to_string(m + 1) +
                                 " rows drifted from orthonormal (residual " +
                                 std::to_string(res) + ")");
    }
    return forward(model, xs);
}

namespace {
int argmax_row(const Matrix& logits, std::size_t r) {
    int best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
        if (logits(r, c) > logits(r, best)) best = static_cast<int>(c);
    return best;
}
} // namespace

int predict(const MultiModalModel& model, const std::vector<Matrix>& xs) {
    return argmax_row(forward(model, xs).logits, 0);
}

std::vector<int> predict_batch(const MultiModalModel& model, const std::vector<Matrix>& xs) {
    Matrix logits = forward(model, xs).logits;
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = argmax_row(logits, r);
    return out;
}

double max_orthonormality_residual(const MultiModalModel& model) {
    if (!model.is_orthogonal()) return 0.0;
    double res = 0.0;
    for (const auto& w : model.orthogonal_head().w_rows)
        res = std::max(res, orthonormality_residual(w));
    return res;
}

double min_a_entry(const MultiModalModel& model) {
    if (!model.is_orthogonal()) return 0.0;
    double lo = std::numeric_limits<double>::infinity();
    for (const auto& a : model.orthogonal_head().a)
        for (std::size_t i = 0; i < a.size(); ++i) lo = std::min(lo, a[i]);
    return lo;
}

MultiModalModel init_model(const ModelConfig& config, std::uint64_t seed) {
    if (config.modality_dims.size() < 2)
        throw ConfigError("init_model: need at least two modalities");
    if (config.k < 2) throw ConfigError("init_model: need at least two classes");

    MultiModalModel model;
    model.k = config.k;
    model.init_seed = seed;

    for (std::size_t m = 0; m < config.modality_dims.size(); ++m) {
        SplitMix64 rng(derive_seed(seed, "encoder", m));
        Encoder enc;
        std::size_t in = config.modality_dims[m];
        for (std::size_t l = 0; l < config.hidden.size(); ++l) {
            std::size_t width = config.hidden[l];
            EncoderLayer layer;
            layer.weight = Matrix(in, width);
            double s = 1.0 / std::sqrt(static_cast<double>(in));
            for (std::size_t i = 0; i < layer.weight.size(); ++i)
                layer.weight[i] = s * rng.gaussian();
            layer.bias = Matrix(1, width);
            bool last = l + 1 == config.hidden.size();
            layer.act = (last && config.linear_output) ? Activation::Identity
                                                       : config.activation;
            enc.layers.push_back(std::move(layer));
            in = width;
        }
        if (config.head == HeadKind::Orthogonal && enc.output_dim() < static_cast<std::size_t>(config.k))
            throw ConfigError("init_model: encoder output dim " + std::to_string(enc.output_dim()) +
                              " is below the class count " + std::to_string(config.k) +
                              " required by the orthogonal head");
        model.encoders.push_back(std::move(enc));
    }

    const std::size_t k = static_cast<std::size_t>(config.k);
    if (config.head == HeadKind::Orthogonal) {
        OrthogonalHead head;
        for (std::size_t m = 0; m < model.encoders.size(); ++m) {
            SplitMix64 rng(derive_seed(seed, "head", m));
            std::size_t d = model.encoders[m].output_dim();
            Matrix w(k, d);
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.gaussian();
            head.w_rows.push_back(orthonormalize(w));
            head.a.push_back(Matrix(k, 1, 1.0));
        }
        head.bias = Matrix(1, k);
        model.head = std::move(head);
    } else {
        StandardHead head;
        for (std::size_t m = 0; m < model.encoders.size(); ++m) {
            SplitMix64 rng(derive_seed(seed, "head", m));
            std::size_t d = model.encoders[m].output_dim();
            Matrix w(k, d);
            double s = 1.0 / std::sqrt(static_cast<double>(d));
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = s * rng.gaussian();
            head.w_parts.push_back(std::move(w));
        }
        head.bias = Matrix(1, k);
        model.head = std::move(head);
    }
    return model;
}

// ---------------------------------------------------------------------------
// checkpoint io

namespace {

constexpr const char* kCheckpointFormat = "crmt-ckpt-1";

void append_params(std::vector<double>& out, const Matrix& m) {
    out.insert(out.end(), m.data(), m.data() + m.size());
}

std::vector<double> flatten_params(const MultiModalModel& model) {
    std::vector<double> params;
    for (const auto& enc : model.encoders) {
        for (const auto& layer : enc.layers) {
            append_params(params, layer.weight);
            append_params(params, layer.bias);
        }
    }
    if (model.is_orthogonal()) {
        const auto& h = model.orthogonal_head();
        for (const auto& w : h.w_rows) append_params(params, w);
        for (const auto& a : h.a) append_params(params, a);
        append_params(params, h.bias);
    } else {
        const auto& h = model.standard_head();
        for (const auto& w : h.w_parts) append_params(params, w);
        append_params(params, h.bias);
    }
    return params;
}

class ParamReader {
public:
    explicit ParamReader(std::vector<double> data) : data_(std::move(data)) {}

    void fill(Matrix& m) {
        if (pos_ + m.size() > data_.size())
            throw ParseError("checkpoint: parameter block is truncated");
        std::memcpy(m.data(), data_.data() + pos_, m.size() * sizeof(double));
        pos_ += m.size();
    }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::vector<double> data_;
    std::size_t pos_ = 0;
};

void to_little_endian(std::vector<double>& values) {
    if constexpr (std::endian::native == std::endian::big) {
        for (double& v : values) {
            std::uint64_t u;
            std::memcpy(&u, &v, 8);
            u = ((u & 0x00000000000000ffULL) << 56) | ((u & 0x000000000000ff00ULL) << 40) |
                ((u & 0x0000000000ff0000ULL) << 24) | ((u & 0x00000000ff000000ULL) << 8) |
                ((u & 0x000000ff00000000ULL) >> 8) | ((u & 0x0000ff0000000000ULL) >> 24) |
                ((u & 0x00ff000000000000ULL) >> 40) | ((u & 0xff00000000000000ULL) >> 56);
            std::memcpy(&v, &u, 8);
        }
    }
}

} // namespace

void save_model(const MultiModalModel& model, const std::filesystem::path& path) {
    json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["k"] = model.k;
    manifest["head"] = model.is_orthogonal() ? "orthogonal" : "standard";
    json encs = json::array();
    for (const auto& enc : model.encoders) {
        json e;
        json dims = json::array();
        dims.push_back(enc.input_dim());
        for (const auto& layer : enc.layers) dims.push_back(layer.weight.cols());
        e["dims"] = dims;
        json acts = json::array();
        for (const auto& layer : enc.layers) acts.push_back(activation_name(layer.act));
        e["activations"] = acts;
        encs.push_back(e);
    }
    manifest["encoders"] = encs;
    manifest["seed"] = model.init_seed;
    std::vector<double> params = flatten_params(model);
    manifest["param_count"] = params.size();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("save_model: cannot open '" + path.string() + "' for writing");
    out << manifest.dump() << '\n';
    to_little_endian(params);
    out.write(reinterpret_cast<const char*>(params.data()),
              static_cast<std::streamsize>(params.size() * sizeof(double)));
    if (!out) throw UsageError("save_model: write failed for '" + path.string() + "'");
}

MultiModalModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("load_model: cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("checkpoint: missing manifest line");
    json manifest;
    try {
        manifest = json::parse(line);
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint: bad manifest: ") + e.what());
    }
    if (manifest.value("format", "") != kCheckpointFormat)
        throw ParseError("checkpoint: unsupported format '" + manifest.value("format", "") + "'");

    MultiModalModel model;
    model.k = manifest.at("k").get<int>();
    model.init_seed = manifest.at("seed").get<std::uint64_t>();
    bool orthogonal = manifest.at("head").get<std::string>() == "orthogonal";

    for (const auto& e : manifest.at("encoders")) {
        Encoder enc;
        auto dims = e.at("dims").get<std::vector<std::size_t>>();
        auto acts = e.at("activations").get<std::vector<std::string>>();
        if (dims.size() < 2 || acts.size() != dims.size() - 1)
            throw ParseError("checkpoint: inconsistent encoder spec");
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            EncoderLayer layer;
            layer.weight = Matrix(dims[l], dims[l + 1]);
            layer.bias = Matrix(1, dims[l + 1]);
            layer.act = activation_from_name(acts[l]);
            enc.layers.push_back(std::move(layer));
        }
        model.encoders.push_back(std::move(enc));
    }

    std::size_t expected = manifest.at("param_count").get<std::size_t>();
    std::vector<double> params(expected);
    in.read(reinterpret_cast<char*>(params.data()),
            static_cast<std::streamsize>(expected * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != expected * sizeof(double))
        throw ParseError("checkpoint: parameter block is truncated");
    char extra;
    if (in.read(&extra, 1))
        throw ParseError("checkpoint: trailing bytes after parameters");
    to_little_endian(params);

    const std::size_t k = static_cast<std::size_t>(model.k);
    ParamReader reader(std::move(params));
    for (auto& enc : model.encoders)
        for (auto& layer : enc.layers) {
            reader.fill(layer.weight);
            reader.fill(layer.bias);
        }
    if (orthogonal) {
        OrthogonalHead head;
        for (const auto& enc : model.encoders) {
            Matrix w(k, enc.output_dim());
            reader.fill(w);
            head.w_rows.push_back(std::move(w));
        }
        for (std::size_t m = 0; m < model.encoders.size(); ++m) {
            Matrix a(k, 1);
            reader.fill(a);
            head.a.push_back(std::move(a));
        }
        head.bias = Matrix(1, k);
        reader.fill(head.bias);
        model.head = std::move(head);
    } else {
        StandardHead head;
        for (const auto& enc : model.encoders) {
            Matrix w(k, enc.output_dim());
            reader.fill(w);
            head.w_parts.push_back(std::move(w));
        }
        head.bias = Matrix(1, k);
        reader.fill(head.bias);
        model.head = std::move(head);
    }
    if (reader.remaining() != 0)
        throw ParseError("checkpoint: parameter count does not match the architecture");
    return model;
}

bool models_bit_equal(const MultiModalModel& a, const MultiModalModel& b) {
    if (a.k != b.k || a.modalities() != b.modalities() ||
        a.is_orthogonal() != b.is_orthogonal())
        return false;
    for (std::size_t m = 0; m < a.modalities(); ++m) {
        if (a.encoders[m].layers.size() != b.encoders[m].layers.size()) return false;
        for (std::size_t l = 0; l < a.encoders[m].layers.size(); ++l) {
            const auto& la = a.encoders[m].layers[l];
            const auto& lb = b.encoders[m].layers[l];
            if (la.act != lb.act || !la.weight.bit_equal(lb.weight) ||
                !la.bias.bit_equal(lb.bias))
                return false;
        }
    }
    if (a.is_orthogonal()) {
        const auto& ha = a.orthogonal_head();
        const auto& hb = b.orthogonal_head();
        for (std::size_t m = 0; m < ha.w_rows.size(); ++m)
            if (!ha.w_rows[m].bit_equal(hb.w_rows[m]) || !ha.a[m].bit_equal(hb.a[m]))
                return false;
        return ha.bias.bit_equal(hb.bias);
    }
    const auto& ha = a.standard_head();
    const auto& hb = b.standard_head();
    for (std::size_t m = 0; m < ha.w_parts.size(); ++m)
        if (!ha.w_parts[m].bit_equal(hb.w_parts[m])) return false;
    return ha.bias.bit_equal(hb.bias);
}

} // namespace crmt
