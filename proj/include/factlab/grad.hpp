#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <factlab/model.hpp>
#include <factlab/rng.hpp>

namespace factlab {

// Cross-entropy gradient of one two-token example. Both gradients are
// structurally sparse: dW_V lives in the two input-token columns and dW_KQ in
// the entries (first, second) and (second, second), so only those parts are
// stored. dense_v/dense_kq materialize full matrices for checks.
struct GradPair {
    Token first = 0;
    Token second = 0;
    std::vector<double> v_col_first;   // dL/dW_V[:, first]
    std::vector<double> v_col_second;  // dL/dW_V[:, second]
    double kq_first_second = 0.0;      // dL/dW_KQ[first, second]
    double kq_second_second = 0.0;     // dL/dW_KQ[second, second]

    Matrix dense_v(std::size_t side) const {
        Matrix m(side);
        for (std::size_t i = 0; i < side; ++i) {
            m(i, static_cast<std::size_t>(first)) += v_col_first[i];
            m(i, static_cast<std::size_t>(second)) += v_col_second[i];
        }
        return m;
    }

    Matrix dense_kq(std::size_t side) const {
        Matrix m(side);
        m(static_cast<std::size_t>(first), static_cast<std::size_t>(second)) += kq_first_second;
        m(static_cast<std::size_t>(second), static_cast<std::size_t>(second)) += kq_second_second;
        return m;
    }
};

inline double ce_loss(const ForwardTrace& tr, Token target) {
    if (target < 0 || static_cast<std::size_t>(target) >= tr.probs.size())
        throw std::out_of_range("ce_loss: target outside token range");
    return -std::log(tr.probs[static_cast<std::size_t>(target)]);
}

// Gradient from an already-computed forward trace.
//
// With u1 = W_KQ[first, second], u2 = W_KQ[second, second], att = softmax(u),
// Z = att_1 W_V col(first) + att_2 W_V col(second), L = -log softmax(Z)[a]:
//   dL/dZ            = probs - e_a
//   dL/dW_V[:, t]    = att_t (probs - e_a)
//   dL/du1           = -att_1 att_2 (s_rel - p_rel)
//   dL/du2           = +att_1 att_2 (s_rel - p_rel)
// where s_rel/p_rel are the token relevances of the two columns. The paper's
// softmax factor "c" is exactly att_1 * att_2 here; the finite-difference
// oracle is the arbiter for the scalar.
inline GradPair grad_from_trace(const ModelParams& p, const ForwardTrace& tr, const Example& ex) {
    const std::size_t side = p.side();
    GradPair g;
    g.first = ex.first;
    g.second = ex.second;
    g.v_col_first.resize(side);
    g.v_col_second.resize(side);
    for (std::size_t i = 0; i < side; ++i) {
        const double resid = tr.probs[i] - (static_cast<std::size_t>(ex.target) == i ? 1.0 : 0.0);
        g.v_col_first[i] = tr.att_first * resid;
        g.v_col_second[i] = tr.att_second * resid;
    }
    const double s_rel = residual_value_dot(p, tr, ex.target, ex.first);
    const double p_rel = residual_value_dot(p, tr, ex.target, ex.second);
    const double jac = tr.att_first * tr.att_second;
    g.kq_first_second = -jac * (s_rel - p_rel);
    g.kq_second_second = jac * (s_rel - p_rel);
    return g;
}

inline GradPair grad_analytic(const ModelParams& p, const Example& ex) {
    detail::check_token(p, ex.target, "grad");
    return grad_from_trace(p, forward(p, ex.first, ex.second), ex);
}

// One SGD descent step, params -= lr * grad. Contributions accumulate, so a
// degenerate first == second example still applies the correct total.
inline void apply_step(ModelParams& p, const GradPair& g, double lr) {
    const std::size_t side = p.side();
    for (std::size_t i = 0; i < side; ++i) {
        p.w_v(i, static_cast<std::size_t>(g.first)) -= lr * g.v_col_first[i];
        p.w_v(i, static_cast<std::size_t>(g.second)) -= lr * g.v_col_second[i];
    }
    p.w_kq(static_cast<std::size_t>(g.first), static_cast<std::size_t>(g.second)) -= lr * g.kq_first_second;
    p.w_kq(static_cast<std::size_t>(g.second), static_cast<std::size_t>(g.second)) -= lr * g.kq_second_second;
}

struct FdGrad {
    GradPair grad;
    double max_abs_off_support = 0.0;  // largest |gradient| seen at probed off-support entries
};

// Central-difference oracle over the sparsity support of both matrices, plus
// eight random off-support probes that must come out ~0. Independent of the
// analytic path: it only evaluates ce_loss(forward(...)).
inline FdGrad grad_fd(const ModelParams& p, const Example& ex, double h = 1e-5,
                      std::uint64_t probe_seed = 0) {
    if (!(h > 0.0)) throw std::invalid_argument("grad_fd: step must be positive");
    if (ex.first == ex.second)
        throw std::invalid_argument("grad_fd: degenerate example with first == second");
    const std::size_t side = p.side();
    ModelParams q = p;
    const auto loss_at = [&]() { return ce_loss(forward(q, ex.first, ex.second), ex.target); };
    const auto central = [&](double& entry) {
        const double saved = entry;
        entry = saved + h;
        const double up = loss_at();
        entry = saved - h;
        const double down = loss_at();
        entry = saved;
        return (up - down) / (2.0 * h);
    };

    FdGrad out;
    out.grad.first = ex.first;
    out.grad.second = ex.second;
    out.grad.v_col_first.resize(side);
    out.grad.v_col_second.resize(side);
    for (std::size_t i = 0; i < side; ++i) {
        out.grad.v_col_first[i] = central(q.w_v(i, static_cast<std::size_t>(ex.first)));
        out.grad.v_col_second[i] = central(q.w_v(i, static_cast<std::size_t>(ex.second)));
    }
    out.grad.kq_first_second =
        central(q.w_kq(static_cast<std::size_t>(ex.first), static_cast<std::size_t>(ex.second)));
    out.grad.kq_second_second =
        central(q.w_kq(static_cast<std::size_t>(ex.second), static_cast<std::size_t>(ex.second)));

    Rng rng(probe_seed);
    int probed = 0;
    while (probed < 8) {
        const bool in_kq = rng.below(2) == 1;
        const std::size_t i = static_cast<std::size_t>(rng.below(side));
        const std::size_t j = static_cast<std::size_t>(rng.below(side));
        if (!in_kq && (j == static_cast<std::size_t>(ex.first) || j == static_cast<std::size_t>(ex.second)))
            continue;  // W_V support is the two input columns
        if (in_kq && j == static_cast<std::size_t>(ex.second) &&
            (i == static_cast<std::size_t>(ex.first) || i == static_cast<std::size_t>(ex.second)))
            continue;  // W_KQ support is (first, second) and (second, second)
        const double g = central(in_kq ? q.w_kq(i, j) : q.w_v(i, j));
        out.max_abs_off_support = std::max(out.max_abs_off_support, std::abs(g));
        ++probed;
    }
    return out;
}

}  // namespace factlab
