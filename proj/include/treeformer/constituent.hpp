#pragma once

#include <cstddef>
#include <vector>

#include "treeformer/array.hpp"
#include "treeformer/autodiff.hpp"

namespace treeformer {

/// Per-layer adjacent-word merge probabilities. probs[i] is the probability
/// that word i and word i+1 belong to the same constituent; length N-1.
template <typename Real>
struct NeighborLinks {
    int layer = 0;
    std::vector<Real> probs;
};

/// Symmetric N x N matrix gating attention; entry (i, j) is the probability
/// that words i and j share a constituent at this layer.
template <typename Real>
struct ConstituentPrior {
    int layer = 0;
    Array<Real> matrix;
};

// floor applied inside log() so gradients stay finite when a link hits zero
inline constexpr double kLinkLogFloor = 1e-12;

// ---------------------------------------------------------------------------
// numeric route: plain-array versions used for diagnostics, parsing and as
// one side of the dual-route tests against the differentiable graph
// ---------------------------------------------------------------------------

/// Directed link probabilities from undirected pair scores s (length N-1).
/// Boundary words have a single neighbor, which receives probability 1.
template <typename Real>
struct DirectedLinks {
    std::vector<Real> to_right;  // index i in [0, N-2]: p(i -> i+1)
    std::vector<Real> to_left;   // index i in [1, N-1]: p(i -> i-1), stored at i
};

template <typename Real>
DirectedLinks<Real> neighbor_softmax(const std::vector<Real>& scores) {
    const std::size_t n = scores.size() + 1;  // word count
    DirectedLinks<Real> out;
    out.to_right.assign(n, Real(0));
    out.to_left.assign(n, Real(0));
    if (n < 2) return out;
    out.to_right[0] = Real(1);
    out.to_left[n - 1] = Real(1);
    for (std::size_t i = 1; i + 1 < n; ++i) {
        // softmax over the two links of word i: (s[i], s[i-1])
        const Real d = scores[i] - scores[i - 1];
        const Real p = d >= Real(0) ? Real(1) / (Real(1) + std::exp(-d))
                                    : std::exp(d) / (Real(1) + std::exp(d));
        out.to_right[i] = p;
        out.to_left[i] = Real(1) - p;
    }
    return out;
}

/// Geometric mean of the two directed links across each adjacent pair:
/// a_hat[i] = sqrt(p(i -> i+1) * p(i+1 -> i)).
template <typename Real>
std::vector<Real> average_links(const DirectedLinks<Real>& p) {
    if (p.to_right.empty()) return {};
    const std::size_t n = p.to_right.size();
    std::vector<Real> a_hat(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i)
        a_hat[i] = std::sqrt(p.to_right[i] * p.to_left[i + 1]);
    return a_hat;
}

/// Monotone merge across layers: a[i] = prev[i] + (1 - prev[i]) * a_hat[i].
/// The result is elementwise >= prev, so constituents never split upward.
template <typename Real>
std::vector<Real> hierarchical_update(const std::vector<Real>& prev,
                                      const std::vector<Real>& a_hat) {
    require_shape_match(Shape{prev.size()}, Shape{a_hat.size()}, "hierarchical_update");
    std::vector<Real> out(prev.size());
    for (std::size_t i = 0; i < prev.size(); ++i)
        out[i] = prev[i] + (Real(1) - prev[i]) * a_hat[i];
    return out;
}

/// Prior matrix from link probabilities, computed in log space. A span that
/// crosses any exactly-zero link reports exactly 0; the diagonal is exactly 1
/// and the matrix is symmetric by construction.
template <typename Real>
Array<Real> build_prior(const std::vector<Real>& links) {
    const std::size_t n = links.size() + 1;
    Array<Real> c(Shape{n, n});
    std::vector<Real> logcum(n, Real(0));
    std::vector<int> zerocum(n, 0);
    for (std::size_t k = 0; k < links.size(); ++k) {
        const Real clamped = std::max(links[k], Real(kLinkLogFloor));
        logcum[k + 1] = logcum[k] + std::log(clamped);
        zerocum[k + 1] = zerocum[k] + (links[k] == Real(0) ? 1 : 0);
    }
    for (std::size_t i = 0; i < n; ++i) {
        c.at(i, i) = Real(1);
        for (std::size_t j = i + 1; j < n; ++j) {
            const Real v = (zerocum[j] - zerocum[i]) > 0
                               ? Real(0)
                               : std::exp(logcum[j] - logcum[i]);
            c.at(i, j) = v;
            c.at(j, i) = v;
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// differentiable route: the same operations expressed on the tape
// ---------------------------------------------------------------------------

/// Separate projection weights producing link query/key vectors. These are
/// distinct from the main attention's Q/K parameters.
template <typename Real>
struct LinkProjection {
    Node<Real>* wq = nullptr;
    Node<Real>* bq = nullptr;
    Node<Real>* wk = nullptr;
    Node<Real>* bk = nullptr;
};

/// s[i] = (q_i . k_{i+1}) / (d_model / 2) for adjacent pairs; length N-1.
template <typename Real>
Node<Real>* neighbor_scores(Tape<Real>& t, Node<Real>* hidden, const LinkProjection<Real>& proj) {
    const std::size_t n = hidden->value.rows();
    const std::size_t d_model = hidden->value.cols();
    if (n < 2) return t.constant(Array<Real>(Shape{0}));
    auto* q = t.add(t.matmul(hidden, proj.wq), proj.bq);
    auto* k = t.add(t.matmul(hidden, proj.wk), proj.bk);
    auto* q_head = t.slice(q, {0, 0}, {n - 1, d_model});
    auto* k_next = t.slice(k, {1, 0}, {n - 1, d_model});
    auto* dots = t.reduce_sum_axis(t.mul(q_head, k_next), 1);
    return t.scale(dots, Real(2) / Real(d_model));
}

/// a_hat from pair scores via the paired softmax and geometric-mean link.
template <typename Real>
Node<Real>* average_links_from_scores(Tape<Real>& t, Node<Real>* scores) {
    const std::size_t m = scores->value.numel();  // N-1
    if (m == 0) return scores;
    auto* one = t.constant(Array<Real>::vector({Real(1)}));
    if (m == 1) {
        // both words are boundary words; they link to each other with p = 1
        return one;
    }
    auto* s_head = t.slice(scores, {0}, {m - 1});
    auto* s_tail = t.slice(scores, {1}, {m - 1});
    auto* diff = t.sub(s_tail, s_head);
    auto* right_interior = t.sigmoid(diff);        // p(i -> i+1), i = 1..N-2
    auto* left_interior = t.sigmoid(t.neg(diff));  // p(i -> i-1), i = 1..N-2
    auto* to_right = t.concat({one, right_interior}, 0);  // i = 0..N-2
    auto* to_left_next = t.concat({left_interior, one}, 0);  // i+1 = 1..N-1
    return t.sqrt(t.mul(to_right, to_left_next));
}

/// Eq-style monotone update on the tape.
template <typename Real>
Node<Real>* hierarchical_update(Tape<Real>& t, Node<Real>* prev, Node<Real>* a_hat) {
    auto* one = t.constant(Array<Real>(prev->value.shape(), Real(1)));
    return t.add(prev, t.mul(t.sub(one, prev), a_hat));
}

/// N x N prior from the length-(N-1) link node, via clamped log prefix sums.
template <typename Real>
Node<Real>* build_prior(Tape<Real>& t, Node<Real>* links) {
    const std::size_t m = links->value.numel();
    const std::size_t n = m + 1;
    if (m == 0) return t.constant(Array<Real>(Shape{1, 1}, Real(1)));
    auto* loga = t.log(t.clamp_min(links, Real(kLinkLogFloor)));
    // prefix sums via a constant lower-triangular map: cum = T loga, cum[0] = 0
    Array<Real> tri(Shape{n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < i; ++k) tri.at(i, k) = Real(1);
    auto* cum = t.matmul(t.constant(std::move(tri)), t.reshape(loga, {m, 1}));  // n x 1
    auto* row = t.reshape(cum, {std::size_t(1), n});
    auto* col = t.reshape(cum, {n, std::size_t(1)});
    // log a <= 0, so |cum_j - cum_i| recovers the in-between sum for either order
    return t.exp(t.neg(t.abs(t.sub(row, col))));
}

}  // namespace treeformer
