#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pepdiff/common.hpp"

namespace pepdiff::codec {

inline constexpr std::string_view kAlphabet = "ACDEFGHIKLMNPQRSTVWY";
inline constexpr std::size_t kResidueCount = 20;

inline int residue_index(char c) {
    const auto pos = kAlphabet.find(c);
    return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
}

/// Validated peptide sequence over the 20 standard amino acids.
class PeptideSequence {
public:
    explicit PeptideSequence(std::string s) : seq_(std::move(s)) {
        if (seq_.empty()) throw InvalidArgument("PeptideSequence: empty sequence");
        for (std::size_t i = 0; i < seq_.size(); ++i)
            if (residue_index(seq_[i]) < 0)
                throw AlphabetError("invalid residue '" + std::string(1, seq_[i]) +
                                    "' at position " + std::to_string(i));
    }

    const std::string& str() const { return seq_; }
    std::size_t length() const { return seq_.size(); }

    friend bool operator==(const PeptideSequence& a, const PeptideSequence& b) {
        return a.seq_ == b.seq_;
    }

private:
    std::string seq_;
};

/// 21 unit-norm rows (20 residues + terminal marker). With d_emb >= 21 the
/// rows are Gram-Schmidt orthogonalized seeded Gaussians, so distinct
/// residues are exactly orthogonal and nearest-neighbor decoding has a wide
/// margin.
struct ResidueCodebook {
    std::size_t d_emb = 0;
    std::uint64_t seed = 0;
    Matrix<float> vectors;  // 21 x d_emb, row 20 is the terminal marker

    static constexpr std::size_t kTerminal = kResidueCount;

    static ResidueCodebook make(std::size_t d_emb, std::uint64_t seed) {
        if (d_emb < 1) throw InvalidArgument("ResidueCodebook: d_emb must be >= 1");
        ResidueCodebook cb;
        cb.d_emb = d_emb;
        cb.seed = seed;

        Rng rng(mix_seed(seed, 0xC0DEB00CULL));
        std::vector<std::vector<double>> rows(kResidueCount + 1, std::vector<double>(d_emb));
        for (auto& row : rows)
            for (auto& v : row) v = rng.normal();

        const bool orthogonalize = d_emb >= kResidueCount + 1;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (orthogonalize) {
                for (std::size_t j = 0; j < i; ++j) {
                    double dot = 0;
                    for (std::size_t k = 0; k < d_emb; ++k) dot += rows[i][k] * rows[j][k];
                    for (std::size_t k = 0; k < d_emb; ++k) rows[i][k] -= dot * rows[j][k];
                }
            }
            double norm = 0;
            for (double v : rows[i]) norm += v * v;
            norm = std::sqrt(norm);
            if (norm < 1e-9) throw InvalidArgument("ResidueCodebook: degenerate draw");
            for (auto& v : rows[i]) v /= norm;
        }

        cb.vectors = Matrix<float>(kResidueCount + 1, d_emb);
        for (std::size_t i = 0; i <= kResidueCount; ++i)
            for (std::size_t k = 0; k < d_emb; ++k)
                cb.vectors.at(i, k) = static_cast<float>(rows[i][k]);
        return cb;
    }
};

/// One codebook row per residue plus the terminal row: (L'+1) x d_emb.
inline EmbeddingMatrix encode(const PeptideSequence& seq, const ResidueCodebook& cb) {
    EmbeddingMatrix out(seq.length() + 1, cb.d_emb);
    for (std::size_t i = 0; i < seq.length(); ++i) {
        const int idx = residue_index(seq.str()[i]);
        for (std::size_t k = 0; k < cb.d_emb; ++k)
            out.at(i, k) = cb.vectors.at(static_cast<std::size_t>(idx), k);
    }
    for (std::size_t k = 0; k < cb.d_emb; ++k)
        out.at(seq.length(), k) = cb.vectors.at(ResidueCodebook::kTerminal, k);
    return out;
}

/// Nearest-residue decoding by cosine. The last row (terminal) is dropped;
/// any remaining row whose best cosine falls below tau fails the whole
/// decode. Failure is a value, not an error.
inline std::optional<PeptideSequence> decode(const EmbeddingMatrix& x, const ResidueCodebook& cb,
                                             double tau = 0.5) {
    if (x.rows < 2) throw InvalidArgument("decode: need at least 2 rows (residue + terminal)");
    if (x.cols != cb.d_emb) throw ShapeError("decode: column count differs from codebook");
    std::string out;
    out.reserve(x.rows - 1);
    for (std::size_t r = 0; r + 1 < x.rows; ++r) {
        double norm = 0;
        for (std::size_t k = 0; k < x.cols; ++k)
            norm += double(x.at(r, k)) * double(x.at(r, k));
        norm = std::sqrt(norm);
        double best = -2.0;
        std::size_t best_idx = 0;
        for (std::size_t i = 0; i < kResidueCount; ++i) {
            double dot = 0;
            for (std::size_t k = 0; k < x.cols; ++k)
                dot += double(x.at(r, k)) * double(cb.vectors.at(i, k));
            const double cos = norm > 0 ? dot / norm : 0.0;  // codebook rows are unit norm
            if (cos > best) {
                best = cos;
                best_idx = i;
            }
        }
        if (best < tau) return std::nullopt;
        out.push_back(kAlphabet[best_idx]);
    }
    return PeptideSequence(std::move(out));
}

// ---------------------------------------------------------------------------
// Embedding container: magic "PEPE", version, count; per record a
// length-prefixed id, the shape, then row-major float32 little-endian data.
// ---------------------------------------------------------------------------

inline constexpr char kContainerMagic[4] = {'P', 'E', 'P', 'E'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}
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
inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline bool get_bytes(std::istream& is, void* out, std::size_t n) {
    is.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(is.gcount()) == n;
}
inline bool get_u16(std::istream& is, std::uint16_t& v) {
    unsigned char b[2];
    if (!get_bytes(is, b, 2)) return false;
    v = static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    return true;
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
inline bool get_f32(std::istream& is, float& v) {
    std::uint32_t bits;
    if (!get_u32(is, bits)) return false;
    std::memcpy(&v, &bits, 4);
    return true;
}

}  // namespace detail

inline void write_embeddings(const std::string& path,
                             const std::map<std::string, EmbeddingMatrix>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("write_embeddings: cannot open " + path);
    os.write(kContainerMagic, 4);
    detail::put_u32(os, kContainerVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(records.size()));
    for (const auto& [id, m] : records) {
        if (id.size() > 0xffff) throw FormatError("write_embeddings: id too long: " + id);
        detail::put_u16(os, static_cast<std::uint16_t>(id.size()));
        os.write(id.data(), static_cast<std::streamsize>(id.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(m.rows));
        detail::put_u32(os, static_cast<std::uint32_t>(m.cols));
        for (float v : m.data) detail::put_f32(os, v);
    }
    if (!os) throw FormatError("write_embeddings: write failed for " + path);
}

inline std::map<std::string, EmbeddingMatrix> load_embeddings(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("load_embeddings: cannot open " + path);
    char magic[4];
    if (!detail::get_bytes(is, magic, 4) || std::memcmp(magic, kContainerMagic, 4) != 0)
        throw FormatError("load_embeddings: bad magic in " + path);
    std::uint32_t version = 0, count = 0;
    if (!detail::get_u32(is, version)) throw FormatError("load_embeddings: truncated header");
    if (version != kContainerVersion)
        throw FormatError("load_embeddings: unsupported version " + std::to_string(version));
    if (!detail::get_u32(is, count)) throw FormatError("load_embeddings: truncated header");

    std::map<std::string, EmbeddingMatrix> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t id_len = 0;
        if (!detail::get_u16(is, id_len))
            throw FormatError("load_embeddings: truncated record header");
        std::string id(id_len, '\0');
        if (id_len > 0 && !detail::get_bytes(is, id.data(), id_len))
            throw FormatError("load_embeddings: truncated id");
        std::uint32_t rows = 0, cols = 0;
        if (!detail::get_u32(is, rows) || !detail::get_u32(is, cols))
            throw FormatError("load_embeddings: truncated shape for '" + id + "'");
        if (rows == 0 || cols == 0)
            throw FormatError("load_embeddings: empty shape for '" + id + "'");
        EmbeddingMatrix m(rows, cols);
        for (auto& v : m.data)
            if (!detail::get_f32(is, v))
                throw FormatError("load_embeddings: payload shorter than header shape for '" +
                                  id + "'");
        out[id] = std::move(m);
    }
    return out;
}

}  // namespace pepdiff::codec
