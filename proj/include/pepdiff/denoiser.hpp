#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pepdiff/autodiff.hpp"
#include "pepdiff/common.hpp"

namespace pepdiff::denoise {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DenoiserConfig {
    std::size_t d_emb = 1024;
    std::size_t hidden = 2048;
    std::size_t intermediate = 4096;
    std::size_t heads = 8;
    std::size_t layers = 2;
    double dropout = 0.1;
    int T = 1000;
    std::size_t fourier_dim = 0;  // 0 means "use hidden"
    double fourier_scale = 16.0;
    std::uint64_t seed = 0;

    std::size_t fourier_dim_value() const { return fourier_dim == 0 ? hidden : fourier_dim; }

    void validate() const {
        if (d_emb < 1 || hidden < 1 || intermediate < 1 || heads < 1 || layers < 1)
            throw ConfigError("denoiser config: all dimensions must be >= 1");
        if (hidden % heads != 0)
            throw ConfigError("denoiser config: hidden (" + std::to_string(hidden) +
                              ") not divisible by heads (" + std::to_string(heads) + ")");
        if (fourier_dim_value() % 2 != 0)
            throw ConfigError("denoiser config: fourier_dim must be even");
        if (dropout < 0.0 || dropout >= 1.0)
            throw ConfigError("denoiser config: dropout must be in [0, 1)");
        if (T < 1) throw ConfigError("denoiser config: T must be >= 1");
        if (!(fourier_scale > 0.0))
            throw ConfigError("denoiser config: fourier_scale must be > 0");
    }
};

inline nlohmann::ordered_json config_to_json(const DenoiserConfig& c) {
    return {{"d_emb", c.d_emb},
            {"hidden", c.hidden},
            {"intermediate", c.intermediate},
            {"heads", c.heads},
            {"layers", c.layers},
            {"dropout", c.dropout},
            {"T", c.T},
            {"fourier_dim", c.fourier_dim},
            {"fourier_scale", c.fourier_scale},
            {"seed", c.seed}};
}

inline DenoiserConfig config_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {
        "d_emb",  "hidden", "intermediate", "heads",         "layers",
        "dropout", "T",     "fourier_dim",  "fourier_scale", "seed"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("denoiser config: unknown key '" + key + "'");
    DenoiserConfig c;
    if (j.contains("d_emb")) c.d_emb = j.at("d_emb").get<std::size_t>();
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::size_t>();
    if (j.contains("intermediate")) c.intermediate = j.at("intermediate").get<std::size_t>();
    if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
    if (j.contains("layers")) c.layers = j.at("layers").get<std::size_t>();
    if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
    if (j.contains("T")) c.T = j.at("T").get<int>();
    if (j.contains("fourier_dim")) c.fourier_dim = j.at("fourier_dim").get<std::size_t>();
    if (j.contains("fourier_scale")) c.fourier_scale = j.at("fourier_scale").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Pocket mask & normalization statistics
// ---------------------------------------------------------------------------

/// Binary mask over receptor positions; at least one position must be set.
struct PocketMask {
    std::vector<std::uint8_t> bits;

    static PocketMask from_indices(std::size_t receptor_len, const std::vector<std::size_t>& idx) {
        PocketMask m;
        m.bits.assign(receptor_len, 0);
        for (std::size_t i : idx) {
            if (i >= receptor_len)
                throw InvalidArgument("pocket index " + std::to_string(i) +
                                      " out of range for receptor length " +
                                      std::to_string(receptor_len));
            m.bits[i] = 1;
        }
        m.validate(receptor_len);
        return m;
    }

    void validate(std::size_t receptor_len) const {
        if (bits.size() != receptor_len)
            throw ShapeError("pocket mask length " + std::to_string(bits.size()) +
                             " does not match receptor length " + std::to_string(receptor_len));
        for (auto b : bits)
            if (b) return;
        throw InvalidArgument("pocket mask has no set positions");
    }
};

/// Per-dimension z-transform statistics (std floored at 1e-8).
struct NormStats {
    std::vector<float> mean;
    std::vector<float> std;

    static NormStats identity(std::size_t d) {
        NormStats s;
        s.mean.assign(d, 0.0f);
        s.std.assign(d, 1.0f);
        return s;
    }

    void validate() const {
        if (mean.size() != std.size()) throw ShapeError("norm stats: mean/std lengths differ");
        for (float v : mean)
            if (!std::isfinite(v)) throw InvalidArgument("norm stats: non-finite mean");
        for (float v : std)
            if (!(v >= 1e-8f)) throw InvalidArgument("norm stats: std below 1e-8 floor");
    }
};

inline EmbeddingMatrix normalize(const EmbeddingMatrix& x, const NormStats& s) {
    if (x.cols != s.mean.size()) throw ShapeError("normalize: dimension mismatch");
    EmbeddingMatrix out(x.rows, x.cols);
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < x.cols; ++c)
            out.at(r, c) = (x.at(r, c) - s.mean[c]) / s.std[c];
    return out;
}

inline EmbeddingMatrix denormalize(const EmbeddingMatrix& x, const NormStats& s) {
    if (x.cols != s.mean.size()) throw ShapeError("denormalize: dimension mismatch");
    EmbeddingMatrix out(x.rows, x.cols);
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < x.cols; ++c)
            out.at(r, c) = x.at(r, c) * s.std[c] + s.mean[c];
    return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

using ParamMap = std::map<std::string, Matrix<float>>;

struct DenoiserModel {
    DenoiserConfig config;
    ParamMap params;
    NormStats norm_stats;

    /// Fourier frequencies are drawn once and never updated.
    static bool trainable(const std::string& name) { return name != "fourier_w"; }
};

/// Timestep features: [sin(2 pi w t/T), cos(2 pi w t/T)] concatenated.
inline Matrix<float> fourier_time_features(const Matrix<float>& w, int t, int T) {
    if (t < 1 || t > T)
        throw InvalidArgument("fourier_time_features: t=" + std::to_string(t) + " outside [1, " +
                              std::to_string(T) + "]");
    if (w.rows != 1) throw ShapeError("fourier_time_features: w must be a row vector");
    const double tn = static_cast<double>(t) / T;
    const double two_pi = 2.0 * 3.14159265358979323846;
    Matrix<float> out(1, 2 * w.cols);
    for (std::size_t i = 0; i < w.cols; ++i) {
        const double phase = two_pi * double(w.at(0, i)) * tn;
        out.at(0, i) = static_cast<float>(std::sin(phase));
        out.at(0, w.cols + i) = static_cast<float>(std::cos(phase));
    }
    return out;
}

enum class TensorKind { GaussianFanIn, Zeros, Ones, FourierFreqs };

/// Walks the full tensor layout of the architecture in a fixed order. Both
/// initialization and checkpoint validation derive from this single listing.
template <typename Fn>
void for_each_tensor(const DenoiserConfig& cfg, Fn&& fn) {
    const std::size_t h = cfg.hidden;
    const std::size_t fdim = cfg.fourier_dim_value();
    auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
        fn(name + ".w", in, out, TensorKind::GaussianFanIn);
        fn(name + ".b", std::size_t(1), out, TensorKind::Zeros);
    };
    auto layer_norm = [&](const std::string& name) {
        fn(name + ".g", std::size_t(1), h, TensorKind::Ones);
        fn(name + ".b", std::size_t(1), h, TensorKind::Zeros);
    };
    auto attention = [&](const std::string& name) {
        linear(name + ".q", h, h);
        linear(name + ".k", h, h);
        linear(name + ".v", h, h);
        linear(name + ".o", h, h);
    };

    linear("in_proj_x", cfg.d_emb, h);
    linear("in_proj_z", cfg.d_emb, h);
    fn("fourier_w", std::size_t(1), fdim / 2, TensorKind::FourierFreqs);
    linear("time_mlp.1", fdim, h);
    linear("time_mlp.2", h, h);
    for (int r = 0; r < 2; ++r) {
        const std::string base = "receptor." + std::to_string(r);
        layer_norm(base + ".ln");
        attention(base + ".attn");
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string base = "peptide." + std::to_string(l);
        layer_norm(base + ".self.ln");
        attention(base + ".self.attn");
        layer_norm(base + ".cross.ln");
        attention(base + ".cross.attn");
        layer_norm(base + ".ff.ln");
        linear(base + ".ff.1", h, cfg.intermediate);
        linear(base + ".ff.2", cfg.intermediate, h);
    }
    linear("out_proj", h, cfg.d_emb);
}

inline DenoiserModel init_model(const DenoiserConfig& cfg) {
    cfg.validate();
    DenoiserModel m;
    m.config = cfg;
    Rng rng(mix_seed(cfg.seed, 0x1217ULL));
    for_each_tensor(cfg, [&](const std::string& name, std::size_t rows, std::size_t cols,
                             TensorKind kind) {
        Matrix<float> t(rows, cols);
        switch (kind) {
            case TensorKind::GaussianFanIn:
                rng.fill_normal(t, 1.0 / std::sqrt(static_cast<double>(rows)));
                break;
            case TensorKind::Zeros:
                break;
            case TensorKind::Ones:
                t = Matrix<float>(rows, cols, 1.0f);
                break;
            case TensorKind::FourierFreqs:
                rng.fill_normal(t, cfg.fourier_scale);
                break;
        }
        m.params[name] = std::move(t);
    });
    m.norm_stats = NormStats::identity(cfg.d_emb);
    return m;
}

// ---------------------------------------------------------------------------
// Forward pass (tape program shared by inference and training)
// ---------------------------------------------------------------------------

template <typename S>
struct ForwardNodes {
    typename ad::Tape<S>::NodeId out = 0;
    typename ad::Tape<S>::NodeId z_pocket = 0;
    std::vector<typename ad::Tape<S>::NodeId> masked_attention;  // per head, probe only
};

/// Registers the model parameters on a tape. Trainable tensors become grad
/// leaves when with_grad is set; the frozen Fourier frequencies are always
/// constants.
template <typename S>
std::map<std::string, typename ad::Tape<S>::NodeId> register_params(ad::Tape<S>& tape,
                                                                    const ParamMap& params,
                                                                    bool with_grad) {
    std::map<std::string, typename ad::Tape<S>::NodeId> ids;
    for (const auto& [name, m] : params) {
        const bool grad = with_grad && DenoiserModel::trainable(name);
        ids[name] = tape.input(m.template cast<S>(), grad);
    }
    return ids;
}

/// Noise prediction program. x_t is the (normalized-space) noisy peptide
/// embedding, z the pre-normalized receptor embedding. The receptor branch
/// runs self-attention then pocket-masked attention (non-pocket keys get a
/// -1e9 logit); the peptide branch adds the time embedding after input
/// projection and runs layers of self-attention, cross-attention against the
/// pocket representation, and feed-forward, all pre-norm with residuals.
template <typename S>
ForwardNodes<S> build_forward(ad::Tape<S>& tape,
                              const std::map<std::string, typename ad::Tape<S>::NodeId>& p,
                              const DenoiserConfig& cfg, const Matrix<S>& x_t,
                              const Matrix<S>& z, const PocketMask& mask, int t, bool train_mode,
                              std::uint64_t dropout_seed, bool probe_attention = false) {
    using NodeId = typename ad::Tape<S>::NodeId;
    if (x_t.cols != cfg.d_emb) throw ShapeError("predict_noise: x_t columns != d_emb");
    if (z.cols != cfg.d_emb) throw ShapeError("predict_noise: z columns != d_emb");
    mask.validate(z.rows);
    if (t < 1 || t > cfg.T)
        throw InvalidArgument("predict_noise: t=" + std::to_string(t) + " outside [1, " +
                              std::to_string(cfg.T) + "]");

    const std::size_t h = cfg.hidden;
    const std::size_t dk = h / cfg.heads;
    std::uint64_t drop_counter = 0;
    ForwardNodes<S> result;

    auto drop = [&](NodeId x) {
        return tape.dropout(x, cfg.dropout, mix_seed(dropout_seed, drop_counter++), train_mode);
    };
    auto linear = [&](NodeId x, const std::string& name) {
        return tape.add(tape.matmul(x, p.at(name + ".w")), p.at(name + ".b"));
    };
    auto mha = [&](NodeId q_in, NodeId kv_in, const std::string& name,
                   std::optional<NodeId> key_mask, bool record_probe) {
        const NodeId q = linear(q_in, name + ".q");
        const NodeId k = linear(kv_in, name + ".k");
        const NodeId v = linear(kv_in, name + ".v");
        NodeId merged = 0;
        for (std::size_t head = 0; head < cfg.heads; ++head) {
            const std::size_t c0 = head * dk, c1 = (head + 1) * dk;
            NodeId scores = tape.scale(
                tape.matmul(tape.slice_cols(q, c0, c1), tape.transpose(tape.slice_cols(k, c0, c1))),
                1.0 / std::sqrt(double(dk)));
            if (key_mask) scores = tape.add(scores, *key_mask);
            const NodeId attn = tape.softmax_rows(scores);
            if (record_probe) result.masked_attention.push_back(attn);
            const NodeId head_out = tape.matmul(attn, tape.slice_cols(v, c0, c1));
            merged = head == 0 ? head_out : tape.concat_cols(merged, head_out);
        }
        return linear(merged, name + ".o");
    };
    auto self_block = [&](NodeId x, const std::string& base, std::optional<NodeId> key_mask,
                          bool record_probe = false) {
        const NodeId ln = tape.layer_norm(x, p.at(base + ".ln.g"), p.at(base + ".ln.b"));
        return tape.add(x, drop(mha(ln, ln, base + ".attn", key_mask, record_probe)));
    };
    auto cross_block = [&](NodeId x, NodeId context, const std::string& base) {
        const NodeId ln = tape.layer_norm(x, p.at(base + ".ln.g"), p.at(base + ".ln.b"));
        return tape.add(x, drop(mha(ln, context, base + ".attn", std::nullopt, false)));
    };
    auto ff_block = [&](NodeId x, const std::string& base) {
        const NodeId ln = tape.layer_norm(x, p.at(base + ".ln.g"), p.at(base + ".ln.b"));
        const NodeId f = linear(tape.gelu(linear(ln, base + ".1")), base + ".2");
        return tape.add(x, drop(f));
    };

    // receptor branch
    Matrix<S> mask_logits(1, z.rows);
    for (std::size_t i = 0; i < z.rows; ++i)
        mask_logits.at(0, i) = mask.bits[i] ? S(0) : S(-1e9);
    const NodeId key_mask = tape.constant(std::move(mask_logits));

    NodeId zc = tape.constant(z);
    NodeId zp = linear(zc, "in_proj_z");
    zp = self_block(zp, "receptor.0", std::nullopt);
    zp = self_block(zp, "receptor.1", key_mask, probe_attention);
    result.z_pocket = zp;

    // peptide branch
    const Matrix<float> ff = fourier_time_features(
        [&] {
            // frequencies live in the param map as float regardless of S
            Matrix<float> w(1, cfg.fourier_dim_value() / 2);
            const auto& node = tape.value(p.at("fourier_w"));
            for (std::size_t i = 0; i < w.cols; ++i)
                w.at(0, i) = static_cast<float>(node.at(0, i));
            return w;
        }(),
        t, cfg.T);
    const NodeId ff_node = tape.constant(ff.template cast<S>());
    const NodeId t1 = tape.gelu(tape.add(tape.matmul(ff_node, p.at("time_mlp.1.w")),
                                         p.at("time_mlp.1.b")));
    const NodeId temb = tape.add(tape.matmul(t1, p.at("time_mlp.2.w")), p.at("time_mlp.2.b"));

    NodeId hx = tape.add(linear(tape.constant(x_t), "in_proj_x"), temb);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string base = "peptide." + std::to_string(l);
        hx = self_block(hx, base + ".self", std::nullopt);
        hx = cross_block(hx, zp, base + ".cross");
        hx = ff_block(hx, base + ".ff");
    }
    result.out = linear(hx, "out_proj");
    return result;
}

/// Inference-style single call: builds a throwaway tape with constant
/// parameters and returns the predicted noise.
inline EmbeddingMatrix predict_noise(const DenoiserModel& model, const EmbeddingMatrix& x_t,
                                     const EmbeddingMatrix& z, const PocketMask& mask, int t,
                                     bool train_mode = false, std::uint64_t dropout_seed = 0) {
    ad::Tape<float> tape;
    const auto ids = register_params(tape, model.params, /*with_grad=*/false);
    const auto fwd =
        build_forward<float>(tape, ids, model.config, x_t, z, mask, t, train_mode, dropout_seed);
    return tape.value(fwd.out);
}

/// Pocket-conditioned receptor representation (the cross-attention context).
inline EmbeddingMatrix encode_receptor(const DenoiserModel& model, const EmbeddingMatrix& z,
                                       const PocketMask& mask) {
    ad::Tape<float> tape;
    const auto ids = register_params(tape, model.params, false);
    // peptide side is irrelevant here; a single dummy row keeps shapes valid
    const EmbeddingMatrix dummy(1, model.config.d_emb);
    const auto fwd = build_forward<float>(tape, ids, model.config, dummy, z, mask, 1, false, 0);
    return tape.value(fwd.z_pocket);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'P', 'E', 'P', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Optional bookkeeping carried in the checkpoint metadata.
struct TrainingState {
    long epochs_completed = 0;
    long global_step = 0;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}
inline bool get_bytes(std::istream& is, void* out, std::size_t n) {
    is.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(is.gcount()) == n;
}
inline bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!get_bytes(is, b, 4)) return false;
    v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return true;
}
inline bool get_u64(std::istream& is, std::uint64_t& v) {
    unsigned char b[8];
    if (!get_bytes(is, b, 8)) return false;
    v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return true;
}

}  // namespace detail

inline void save_checkpoint(const DenoiserModel& model, const std::string& path,
                            const std::optional<TrainingState>& training = std::nullopt) {
    nlohmann::ordered_json meta;
    meta["config"] = config_to_json(model.config);
    meta["norm_stats"] = {{"mean", model.norm_stats.mean}, {"std", model.norm_stats.std}};
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;  // in floats
    for (const auto& [name, m] : model.params) {
        tensors.push_back(
            {{"name", name}, {"rows", m.rows}, {"cols", m.cols}, {"offset", offset}});
        offset += m.size();
    }
    meta["tensors"] = std::move(tensors);
    if (training)
        meta["training"] = {{"epochs_completed", training->epochs_completed},
                            {"global_step", training->global_step}};
    const std::string meta_str = meta.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw FormatError("save_checkpoint: cannot open " + tmp);
        os.write(kCheckpointMagic, 4);
        detail::put_u32(os, kCheckpointVersion);
        detail::put_u64(os, meta_str.size());
        os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
        for (const auto& [name, m] : model.params) {
            for (float v : m.data) {
                std::uint32_t bits;
                std::memcpy(&bits, &v, 4);
                detail::put_u32(os, bits);
            }
        }
        if (!os) throw FormatError("save_checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline DenoiserModel load_checkpoint(const std::string& path,
                                     TrainingState* training_out = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("load_checkpoint: cannot open " + path);
    char magic[4];
    if (!detail::get_bytes(is, magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("load_checkpoint: bad magic in " + path);
    std::uint32_t version = 0;
    if (!detail::get_u32(is, version)) throw FormatError("load_checkpoint: truncated header");
    if (version != kCheckpointVersion)
        throw FormatError("load_checkpoint: unsupported version " + std::to_string(version));
    std::uint64_t meta_len = 0;
    if (!detail::get_u64(is, meta_len)) throw FormatError("load_checkpoint: truncated header");
    std::string meta_str(meta_len, '\0');
    if (meta_len > 0 && !detail::get_bytes(is, meta_str.data(), meta_len))
        throw FormatError("load_checkpoint: truncated metadata");

    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_str);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("load_checkpoint: metadata is not valid JSON: ") +
                          e.what());
    }

    DenoiserModel model;
    model.config = config_from_json(meta.at("config"));
    model.norm_stats.mean = meta.at("norm_stats").at("mean").get<std::vector<float>>();
    model.norm_stats.std = meta.at("norm_stats").at("std").get<std::vector<float>>();
    try {
        model.norm_stats.validate();
    } catch (const Error& e) {
        throw FormatError(std::string("load_checkpoint: ") + e.what());
    }
    if (model.norm_stats.mean.size() != model.config.d_emb)
        throw FormatError("load_checkpoint: norm stats length != d_emb");

    std::uint64_t expected_offset = 0;
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> directory;
    for (const auto& entry : meta.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto rows = entry.at("rows").get<std::size_t>();
        const auto cols = entry.at("cols").get<std::size_t>();
        if (entry.at("offset").get<std::uint64_t>() != expected_offset)
            throw FormatError("load_checkpoint: non-contiguous tensor '" + name + "'");
        expected_offset += rows * cols;
        directory.emplace_back(name, std::make_pair(rows, cols));
    }
    for (const auto& [name, shape] : directory) {
        Matrix<float> m(shape.first, shape.second);
        for (auto& v : m.data) {
            std::uint32_t bits;
            if (!detail::get_u32(is, bits))
                throw FormatError("load_checkpoint: payload truncated at tensor '" + name + "'");
            std::memcpy(&v, &bits, 4);
        }
        if (!m.all_finite())
            throw FormatError("load_checkpoint: non-finite values in tensor '" + name + "'");
        model.params[name] = std::move(m);
    }

    // the stored tensor set must match the declared architecture exactly
    std::size_t expected_count = 0;
    for_each_tensor(model.config, [&](const std::string& name, std::size_t rows,
                                      std::size_t cols, TensorKind) {
        ++expected_count;
        const auto it = model.params.find(name);
        if (it == model.params.end())
            throw FormatError("load_checkpoint: missing tensor '" + name + "'");
        if (it->second.rows != rows || it->second.cols != cols)
            throw FormatError("load_checkpoint: tensor '" + name + "' has wrong shape");
    });
    if (expected_count != model.params.size())
        throw FormatError("load_checkpoint: tensor count does not match architecture");

    if (training_out) {
        *training_out = TrainingState{};
        if (meta.contains("training")) {
            training_out->epochs_completed = meta["training"].value("epochs_completed", 0L);
            training_out->global_step = meta["training"].value("global_step", 0L);
        }
    }
    return model;
}

}  // namespace pepdiff::denoise
