#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pepdiff/blosum62_data.hpp"
#include "pepdiff/common.hpp"

namespace pepdiff::metrics {

// ---------------------------------------------------------------------------
// Substitution matrix
// ---------------------------------------------------------------------------

/// Residue substitution scores parsed from the standard matrix text layout:
/// '#' comment lines, a header row of letters, then one labeled row per
/// letter.
class SubstitutionMatrix {
public:
    static SubstitutionMatrix parse(std::istream& is) {
        SubstitutionMatrix m;
        m.scores_.fill(kUnset);
        std::string line;
        std::vector<char> header;
        while (std::getline(is, line)) {
            if (line.empty() || line[0] == '#') continue;
            std::istringstream row(line);
            if (header.empty()) {
                std::string tok;
                while (row >> tok) {
                    if (tok.size() != 1) throw ParseError("matrix header: bad token '" + tok + "'");
                    header.push_back(tok[0]);
                }
                if (header.empty()) throw ParseError("matrix header: no letters");
                continue;
            }
            std::string label;
            row >> label;
            if (label.size() != 1) throw ParseError("matrix row: bad label '" + label + "'");
            for (char col : header) {
                int v;
                if (!(row >> v))
                    throw ParseError(std::string("matrix row ") + label + ": too few scores");
            m.set(label[0], col, v);
            }
        }
        if (header.empty()) throw ParseError("matrix: empty input");
        m.letters_.assign(header.begin(), header.end());
        return m;
    }

    static SubstitutionMatrix parse_text(const std::string& text) {
        std::istringstream is(text);
        return parse(is);
    }

    static SubstitutionMatrix parse_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ParseError("matrix: cannot open " + path);
        return parse(is);
    }

    static const SubstitutionMatrix& blosum62() {
        static const SubstitutionMatrix m = parse_text(kBlosum62Text);
        return m;
    }

    int score(char a, char b) const {
        const int v = scores_[index(a, b)];
        if (v == kUnset)
            throw AlphabetError(std::string("substitution matrix has no entry for pair ") + a +
                                "/" + b);
        return v;
    }

    bool has(char a) const { return scores_[index(a, a)] != kUnset; }
    const std::string& letters() const { return letters_; }

private:
    static constexpr int kUnset = std::numeric_limits<int>::min();

    static std::size_t index(char a, char b) {
        const auto ia = static_cast<unsigned char>(a);
        const auto ib = static_cast<unsigned char>(b);
        return std::size_t(ia) * 256 + ib;
    }
    void set(char a, char b, int v) { scores_[index(a, b)] = v; }

    std::array<int, 256 * 256> scores_{};
    std::string letters_;
};

struct GapPenalties {
    double open = 10.0;    // charged once per gap
    double extend = 1.0;   // charged per gapped position
};

// ---------------------------------------------------------------------------
// Global alignment (Needleman-Wunsch with affine gaps, Gotoh three-matrix DP)
// ---------------------------------------------------------------------------

/// Optimal global alignment score. A gap of length k costs
/// open + k * extend; switching the gapped sequence opens a new gap.
inline double nw_align(const std::string& s1, const std::string& s2,
                       const SubstitutionMatrix& m, const GapPenalties& gaps = {}) {
    if (s1.empty() || s2.empty()) throw InvalidArgument("nw_align: empty sequence");
    for (char c : s1)
        if (!m.has(c)) throw AlphabetError(std::string("nw_align: unknown residue '") + c + "'");
    for (char c : s2)
        if (!m.has(c)) throw AlphabetError(std::string("nw_align: unknown residue '") + c + "'");

    const std::size_t n = s1.size(), w = s2.size();
    constexpr double ninf = -std::numeric_limits<double>::infinity();
    const double gap_new = gaps.open + gaps.extend;

    // M: both consumed; X: gap in s2 (s1 consumed); Y: gap in s1 (s2 consumed)
    std::vector<double> M((n + 1) * (w + 1), ninf), X = M, Y = M;
    auto at = [w](std::size_t i, std::size_t j) { return i * (w + 1) + j; };

    M[at(0, 0)] = 0.0;
    for (std::size_t i = 1; i <= n; ++i)
        X[at(i, 0)] = -(gaps.open + double(i) * gaps.extend);
    for (std::size_t j = 1; j <= w; ++j)
        Y[at(0, j)] = -(gaps.open + double(j) * gaps.extend);

    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= w; ++j) {
            const double sub = m.score(s1[i - 1], s2[j - 1]);
            M[at(i, j)] =
                std::max({M[at(i - 1, j - 1)], X[at(i - 1, j - 1)], Y[at(i - 1, j - 1)]}) + sub;
            X[at(i, j)] = std::max({M[at(i - 1, j)] - gap_new, X[at(i - 1, j)] - gaps.extend,
                                    Y[at(i - 1, j)] - gap_new});
            Y[at(i, j)] = std::max({M[at(i, j - 1)] - gap_new, Y[at(i, j - 1)] - gaps.extend,
                                    X[at(i, j - 1)] - gap_new});
        }
    }
    return std::max({M[at(n, w)], X[at(n, w)], Y[at(n, w)]});
}

/// NW(s1, s2) / NW(s1, s1). Normalized by the *first* argument's self-score,
/// so the measure is asymmetric; negative values are reported as-is.
inline double sim_seq(const std::string& s1, const std::string& s2, const SubstitutionMatrix& m,
                      const GapPenalties& gaps = {}) {
    const double self = nw_align(s1, s1, m, gaps);
    if (self == 0.0)
        throw DegenerateNormalization("sim_seq: self-alignment score of '" + s1 + "' is zero");
    return nw_align(s1, s2, m, gaps) / self;
}

/// Mean of (1 - sim_seq) over ordered pairs. Can exceed 1 because negative
/// similarities are not clamped.
inline double div_seq(const std::vector<std::string>& seqs, const SubstitutionMatrix& m,
                      const GapPenalties& gaps = {}) {
    const std::size_t n = seqs.size();
    if (n < 2) throw InvalidArgument("div_seq: need at least 2 sequences");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) acc += 1.0 - sim_seq(seqs[i], seqs[j], m, gaps);
    return acc / (double(n) * double(n - 1));
}

// ---------------------------------------------------------------------------
// Structure similarity
// ---------------------------------------------------------------------------

/// L x 3 C-alpha coordinates in Angstrom.
using CoordSet = Matrix<double>;

struct KabschResult {
    double rmsd = 0.0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

namespace detail {

inline Eigen::MatrixX3d to_eigen(const CoordSet& c) {
    Eigen::MatrixX3d m(c.rows, 3);
    for (std::size_t i = 0; i < c.rows; ++i)
        for (int k = 0; k < 3; ++k) m(static_cast<Eigen::Index>(i), k) = c.at(i, k);
    return m;
}

/// Least-squares rotation+translation mapping a onto b, restricted to the
/// given point subset. Reflections are corrected via the sign of the
/// determinant.
inline KabschResult kabsch_subset(const Eigen::MatrixX3d& a, const Eigen::MatrixX3d& b,
                                  const std::vector<int>& subset) {
    const auto n = static_cast<Eigen::Index>(subset.size());
    Eigen::Vector3d ca = Eigen::Vector3d::Zero(), cb = Eigen::Vector3d::Zero();
    for (int i : subset) {
        ca += a.row(i).transpose();
        cb += b.row(i).transpose();
    }
    ca /= double(n);
    cb /= double(n);

    Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
    for (int i : subset)
        h += (a.row(i).transpose() - ca) * (b.row(i) - cb.transpose());

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    d(2, 2) = (v * u.transpose()).determinant() < 0 ? -1.0 : 1.0;

    KabschResult r;
    r.rotation = v * d * u.transpose();
    r.translation = cb - r.rotation * ca;
    double acc = 0.0;
    for (int i : subset) {
        const Eigen::Vector3d moved = r.rotation * a.row(i).transpose() + r.translation;
        acc += (moved - b.row(i).transpose()).squaredNorm();
    }
    r.rmsd = std::sqrt(acc / double(n));
    return r;
}

}  // namespace detail

/// Optimal rigid superposition of a onto b over all points.
inline KabschResult kabsch_rmsd(const CoordSet& a, const CoordSet& b) {
    if (a.cols != 3 || b.cols != 3) throw ShapeError("kabsch_rmsd: coordinates must be L x 3");
    if (a.rows != b.rows) throw ShapeError("kabsch_rmsd: point counts differ");
    if (a.rows < 3) throw InvalidArgument("kabsch_rmsd: need at least 3 points");
    std::vector<int> all(a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) all[i] = static_cast<int>(i);
    return detail::kabsch_subset(detail::to_eigen(a), detail::to_eigen(b), all);
}

/// TM-score length normalization, clamped below at 0.5 A (the raw formula is
/// negative for short chains).
inline double tm_d0(std::size_t L) {
    return std::max(1.24 * std::cbrt(double(L) - 15.0) - 1.8, 0.5);
}

/// TM-score with identity residue correspondence (comparison sets share one
/// length, so no alignment search). Superposition starts from Kabsch and is
/// refined by re-fitting on inliers (d_i < 2*d0) for a few rounds, which
/// tracks the TM-optimal superposition closely at peptide scale; plain
/// Kabsch is used below 8 residues.
inline double tm_score(const CoordSet& a, const CoordSet& b) {
    if (a.cols != 3 || b.cols != 3) throw ShapeError("tm_score: coordinates must be L x 3");
    if (a.rows != b.rows) throw ShapeError("tm_score: lengths differ");
    const std::size_t L = a.rows;
    if (L < 3) throw InvalidArgument("tm_score: need at least 3 residues");

    const double d0 = tm_d0(L);
    const auto ea = detail::to_eigen(a);
    const auto eb = detail::to_eigen(b);

    std::vector<int> all(L);
    for (std::size_t i = 0; i < L; ++i) all[i] = static_cast<int>(i);

    auto tm_under = [&](const KabschResult& r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < L; ++i) {
            const Eigen::Vector3d moved =
                r.rotation * ea.row(static_cast<Eigen::Index>(i)).transpose() + r.translation;
            const double d = (moved - eb.row(static_cast<Eigen::Index>(i)).transpose()).norm();
            acc += 1.0 / (1.0 + (d / d0) * (d / d0));
        }
        return acc / double(L);
    };

    KabschResult fit = detail::kabsch_subset(ea, eb, all);
    double best = tm_under(fit);
    if (L >= 8) {
        for (int round = 0; round < 3; ++round) {
            std::vector<int> inliers;
            for (std::size_t i = 0; i < L; ++i) {
                const Eigen::Vector3d moved =
                    fit.rotation * ea.row(static_cast<Eigen::Index>(i)).transpose() +
                    fit.translation;
                const double d =
                    (moved - eb.row(static_cast<Eigen::Index>(i)).transpose()).norm();
                if (d < 2.0 * d0) inliers.push_back(static_cast<int>(i));
            }
            if (inliers.size() < 3 || inliers.size() == L) break;
            fit = detail::kabsch_subset(ea, eb, inliers);
            best = std::max(best, tm_under(fit));
        }
    }
    return best;
}

/// Mean of (1 - TM) over ordered pairs.
inline double div_str(const std::vector<CoordSet>& sets) {
    const std::size_t n = sets.size();
    if (n < 2) throw InvalidArgument("div_str: need at least 2 structures");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) acc += 1.0 - tm_score(sets[i], sets[j]);
    return acc / (double(n) * double(n - 1));
}

// ---------------------------------------------------------------------------
// Embedding similarity
// ---------------------------------------------------------------------------

/// Cosine similarity of the row-mean-pooled embeddings. Row counts may
/// differ; a zero-norm pooled vector yields similarity 0.
inline double sim_emb(const EmbeddingMatrix& e1, const EmbeddingMatrix& e2) {
    if (e1.cols != e2.cols) throw ShapeError("sim_emb: embedding dimensions differ");
    std::vector<double> p1(e1.cols, 0.0), p2(e2.cols, 0.0);
    for (std::size_t r = 0; r < e1.rows; ++r)
        for (std::size_t c = 0; c < e1.cols; ++c) p1[c] += e1.at(r, c);
    for (std::size_t r = 0; r < e2.rows; ++r)
        for (std::size_t c = 0; c < e2.cols; ++c) p2[c] += e2.at(r, c);
    for (auto& v : p1) v /= double(e1.rows);
    for (auto& v : p2) v /= double(e2.rows);

    double dot = 0.0, n1 = 0.0, n2 = 0.0;
    for (std::size_t c = 0; c < p1.size(); ++c) {
        dot += p1[c] * p2[c];
        n1 += p1[c] * p1[c];
        n2 += p2[c] * p2[c];
    }
    if (n1 == 0.0 || n2 == 0.0) return 0.0;
    return dot / (std::sqrt(n1) * std::sqrt(n2));
}

/// Mean of (1 - sim_emb) over ordered pairs.
inline double div_emb(const std::vector<EmbeddingMatrix>& embs) {
    const std::size_t n = embs.size();
    if (n < 2) throw InvalidArgument("div_emb: need at least 2 embeddings");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) acc += 1.0 - sim_emb(embs[i], embs[j]);
    return acc / (double(n) * double(n - 1));
}

// ---------------------------------------------------------------------------
// Set-level report
// ---------------------------------------------------------------------------

/// Summary of one diversity metric over a set: mean/std of the ordered-pair
/// dissimilarities (the mean is the diversity value itself) plus the
/// optional pairwise dissimilarity matrix (zero diagonal; asymmetric for
/// sequence similarity by construction).
struct SetReport {
    std::string metric;
    std::size_t N = 0;
    double mean = 0.0;
    double stddev = 0.0;
    std::optional<Matrix<double>> pairwise;
};

namespace detail {

template <typename PairFn>
SetReport report_from_pairs(std::string metric, std::size_t n, PairFn&& dissim,
                            bool keep_matrix) {
    if (n < 2) throw InvalidArgument(metric + ": need at least 2 items");
    SetReport rep;
    rep.metric = std::move(metric);
    rep.N = n;
    Matrix<double> mat(n, n, 0.0);
    double acc = 0.0, acc2 = 0.0;
    const double cnt = double(n) * double(n - 1);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double d = dissim(i, j);
            mat.at(i, j) = d;
            acc += d;
            acc2 += d * d;
        }
    rep.mean = acc / cnt;
    rep.stddev = std::sqrt(std::max(0.0, acc2 / cnt - rep.mean * rep.mean));
    if (keep_matrix) rep.pairwise = std::move(mat);
    return rep;
}

}  // namespace detail

inline SetReport report_div_seq(const std::vector<std::string>& seqs, const SubstitutionMatrix& m,
                                const GapPenalties& gaps = {}, bool keep_matrix = false) {
    return detail::report_from_pairs(
        "div_seq", seqs.size(),
        [&](std::size_t i, std::size_t j) { return 1.0 - sim_seq(seqs[i], seqs[j], m, gaps); },
        keep_matrix);
}

inline SetReport report_div_str(const std::vector<CoordSet>& sets, bool keep_matrix = false) {
    return detail::report_from_pairs(
        "div_str", sets.size(),
        [&](std::size_t i, std::size_t j) { return 1.0 - tm_score(sets[i], sets[j]); },
        keep_matrix);
}

inline SetReport report_div_emb(const std::vector<EmbeddingMatrix>& embs,
                                bool keep_matrix = false) {
    return detail::report_from_pairs(
        "div_emb", embs.size(),
        [&](std::size_t i, std::size_t j) { return 1.0 - sim_emb(embs[i], embs[j]); },
        keep_matrix);
}

}  // namespace pepdiff::metrics
