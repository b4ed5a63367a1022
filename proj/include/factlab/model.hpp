#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <factlab/knowledge.hpp>
#include <factlab/matrix.hpp>
#include <factlab/vocab.hpp>

namespace factlab {

// The one-layer, single-head transformer: identity embeddings, identity
// output head, sequence length fixed at two. The only learnable state is the
// value matrix W_V and the merged key-query matrix W_KQ.
struct ModelParams {
    Matrix w_v;
    Matrix w_kq;

    explicit ModelParams(std::size_t side) : w_v(side), w_kq(side) {}

    std::size_t side() const { return w_v.side(); }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct ForwardTrace {
    double att_first = 0.5;          // attention on the first (subject) token
    double att_second = 0.5;         // attention on the last token
    std::vector<double> presoftmax;  // Z = att_first * W_V col(first) + att_second * W_V col(second)
    std::vector<double> probs;       // softmax(Z)
};

namespace detail {

inline void check_token(const ModelParams& p, Token t, const char* what) {
    if (t < 0 || static_cast<std::size_t>(t) >= p.side())
        throw std::out_of_range(std::string(what) + ": token " + std::to_string(t) + " outside [0, " +
                                std::to_string(p.side()) + ")");
}

}  // namespace detail

// Attention over the two positions. The last token attends to both; scores
// are (W_KQ[first, second], W_KQ[second, second]).
inline std::pair<double, double> attention_pair(const ModelParams& p, Token first, Token second) {
    detail::check_token(p, first, "attention");
    detail::check_token(p, second, "attention");
    const double u1 = p.w_kq(static_cast<std::size_t>(first), static_cast<std::size_t>(second));
    const double u2 = p.w_kq(static_cast<std::size_t>(second), static_cast<std::size_t>(second));
    if (!std::isfinite(u1) || !std::isfinite(u2))
        throw std::runtime_error("attention: non-finite key-query entries");
    const double m = std::max(u1, u2);
    const double e1 = std::exp(u1 - m);
    const double e2 = std::exp(u2 - m);
    const double z = e1 + e2;
    return {e1 / z, e2 / z};
}

inline ForwardTrace forward(const ModelParams& p, Token first, Token second) {
    const auto [a1, a2] = attention_pair(p, first, second);
    const std::size_t side = p.side();
    ForwardTrace tr;
    tr.att_first = a1;
    tr.att_second = a2;
    tr.presoftmax.resize(side);
    double zmax = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < side; ++i) {
        const double z = a1 * p.w_v(i, static_cast<std::size_t>(first)) +
                         a2 * p.w_v(i, static_cast<std::size_t>(second));
        if (!std::isfinite(z)) throw std::runtime_error("forward: non-finite value entries");
        tr.presoftmax[i] = z;
        zmax = std::max(zmax, z);
    }
    tr.probs.resize(side);
    double sum = 0.0;
    for (std::size_t i = 0; i < side; ++i) {
        tr.probs[i] = std::exp(tr.presoftmax[i] - zmax);
        sum += tr.probs[i];
    }
    for (std::size_t i = 0; i < side; ++i) tr.probs[i] /= sum;
    return tr;
}

// argmax decoding over the pre-softmax output; ties break to the lowest
// index. The softmax preserves ordering, so this equals argmax over probs.
inline Token decode(const ModelParams& p, Token first, Token second) {
    const auto [a1, a2] = attention_pair(p, first, second);
    const std::size_t side = p.side();
    Token best = 0;
    double best_z = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < side; ++i) {
        const double z = a1 * p.w_v(i, static_cast<std::size_t>(first)) +
                         a2 * p.w_v(i, static_cast<std::size_t>(second));
        if (z > best_z) {
            best_z = z;
            best = static_cast<Token>(i);
        }
    }
    return best;
}

// Fact salience: phi(a)^T W_V phi(s), i.e. the (a, s) entry.
inline double salience(const ModelParams& p, Token s, Token a) {
    detail::check_token(p, s, "salience");
    detail::check_token(p, a, "salience");
    return p.w_v(static_cast<std::size_t>(a), static_cast<std::size_t>(s));
}

// (e_target - probs)^T W_V column(col); shared by the relevance probes and
// the analytic gradient.
inline double residual_value_dot(const ModelParams& p, const ForwardTrace& tr, Token target, Token col) {
    detail::check_token(p, target, "relevance");
    detail::check_token(p, col, "relevance");
    double acc = p.w_v(static_cast<std::size_t>(target), static_cast<std::size_t>(col));
    for (std::size_t i = 0; i < p.side(); ++i)
        acc -= tr.probs[i] * p.w_v(i, static_cast<std::size_t>(col));
    return acc;
}

inline double subject_relevance(const ModelParams& p, const Example& ex) {
    return residual_value_dot(p, forward(p, ex.first, ex.second), ex.target, ex.first);
}

inline double relation_relevance(const ModelParams& p, const Example& ex) {
    return residual_value_dot(p, forward(p, ex.first, ex.second), ex.target, ex.second);
}

inline double attention_on_subject(const ModelParams& p, Token s, Token prompt) {
    return attention_pair(p, s, prompt).first;
}

// ---------------------------------------------------------------------------
// Flat binary checkpoint: magic, side length, W_V then W_KQ row-major.

inline constexpr char kParamsMagic[8] = {'F', 'L', 'A', 'B', 'P', 'M', '0', '1'};

inline void save_params(const ModelParams& p, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_params: cannot open " + path.string());
    os.write(kParamsMagic, sizeof(kParamsMagic));
    const std::uint64_t side = p.side();
    os.write(reinterpret_cast<const char*>(&side), sizeof(side));
    os.write(reinterpret_cast<const char*>(p.w_v.data().data()),
             static_cast<std::streamsize>(p.w_v.data().size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(p.w_kq.data().data()),
             static_cast<std::streamsize>(p.w_kq.data().size() * sizeof(double)));
    if (!os) throw std::runtime_error("save_params: write failed for " + path.string());
}

inline ModelParams load_params(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_params: cannot open " + path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kParamsMagic, sizeof(magic)) != 0)
        throw std::runtime_error("load_params: bad magic in " + path.string());
    std::uint64_t side = 0;
    is.read(reinterpret_cast<char*>(&side), sizeof(side));
    if (!is || side == 0 || side > (1u << 20)) throw std::runtime_error("load_params: bad side length");
    ModelParams p(static_cast<std::size_t>(side));
    is.read(reinterpret_cast<char*>(p.w_v.data().data()),
            static_cast<std::streamsize>(p.w_v.data().size() * sizeof(double)));
    is.read(reinterpret_cast<char*>(p.w_kq.data().data()),
            static_cast<std::streamsize>(p.w_kq.data().size() * sizeof(double)));
    if (!is) throw std::runtime_error("load_params: truncated file " + path.string());
    return p;
}

}  // namespace factlab
