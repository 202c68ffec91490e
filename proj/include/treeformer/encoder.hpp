#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "treeformer/autodiff.hpp"
#include "treeformer/constituent.hpp"
#include "treeformer/optim.hpp"
#include "treeformer/random.hpp"

namespace treeformer {

enum class RunMode { train, eval };

/// Which prior gates the attention: the learned constituent prior, or a
/// forced all-ones matrix (diagnostic; makes the tree model reproduce a
/// plain transformer exactly).
enum class PriorMode { learned, force_ones };

struct ModelConfig {
    std::size_t num_layers = 4;
    std::size_t d_model = 64;
    std::size_t num_heads = 4;
    std::size_t d_ff = 256;
    double dropout = 0.1;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 128;
    bool constituent_attention = true;  // false: plain transformer encoder

    std::size_t head_dim() const { return d_model / num_heads; }

    void validate() const {
        if (num_heads == 0 || d_model % num_heads != 0)
            throw std::invalid_argument("config: d_model (" + std::to_string(d_model) +
                                        ") must be divisible by num_heads (" +
                                        std::to_string(num_heads) + ")");
        if (vocab_size == 0) throw std::invalid_argument("config: vocab_size must be set");
        if (num_layers == 0) throw std::invalid_argument("config: num_layers must be positive");
    }

    /// CI-runnable profile.
    static ModelConfig desk() {
        ModelConfig c;
        c.num_layers = 4;
        c.d_model = 64;
        c.num_heads = 4;
        c.d_ff = 256;
        c.dropout = 0.1;
        c.vocab_size = 1000;
        c.max_seq_len = 128;
        return c;
    }

    /// Full-scale profile: d_model 512, 8 heads, feed-forward 2048,
    /// dropout 0.1, 10 blocks, 16k vocabulary.
    static ModelConfig paper() {
        ModelConfig c;
        c.num_layers = 10;
        c.d_model = 512;
        c.num_heads = 8;
        c.d_ff = 2048;
        c.dropout = 0.1;
        c.vocab_size = 16000;
        c.max_seq_len = 512;
        return c;
    }
};

/// Sinusoidal position table, rows = positions, cols = d_model.
template <typename Real>
Array<Real> sinusoidal_positions(std::size_t max_len, std::size_t d_model) {
    Array<Real> pe(Shape{max_len, d_model});
    for (std::size_t pos = 0; pos < max_len; ++pos) {
        for (std::size_t i = 0; i < d_model; i += 2) {
            const double angle = double(pos) / std::pow(10000.0, double(i) / double(d_model));
            pe.at(pos, i) = Real(std::sin(angle));
            if (i + 1 < d_model) pe.at(pos, i + 1) = Real(std::cos(angle));
        }
    }
    return pe;
}

/// Per-forward view of one block's parameters bound onto a tape.
template <typename Real>
struct BoundLayer {
    Node<Real>* wq;
    Node<Real>* bq;
    Node<Real>* wk;
    Node<Real>* bk;
    Node<Real>* wv;
    Node<Real>* bv;
    Node<Real>* wo;
    Node<Real>* bo;
    Node<Real>* norm1_gain;
    Node<Real>* norm1_bias;
    Node<Real>* ff_w1;
    Node<Real>* ff_b1;
    Node<Real>* ff_w2;
    Node<Real>* ff_b2;
    Node<Real>* norm2_gain;
    Node<Real>* norm2_bias;
    LinkProjection<Real> link;  // null nodes for the plain variant
};

template <typename Real>
struct BoundModel {
    Node<Real>* embedding;
    std::vector<BoundLayer<Real>> layers;
    Node<Real>* cls_w;
    Node<Real>* cls_b;
};

/// Everything the forward pass exposes on the tape. Link/prior/attention
/// nodes double as training-time graph handles and diagnostics sources.
template <typename Real>
struct ForwardGraph {
    Node<Real>* hidden = nullptr;  // N x d_model
    Node<Real>* logits = nullptr;  // N x vocab
    std::vector<Node<Real>*> links;                  // per layer, length N-1
    std::vector<Node<Real>*> priors;                 // per layer, N x N
    std::vector<std::vector<Node<Real>*>> attention; // [layer][head], N x N
};

/// Plain-array snapshot of a forward pass for parsing, export and tests.
template <typename Real>
struct EncoderOutput {
    Array<Real> hidden;
    Array<Real> logits;
    std::vector<NeighborLinks<Real>> links;
    std::vector<ConstituentPrior<Real>> priors;  // exact-zero diagnostic form
    std::vector<std::vector<Array<Real>>> attention;
};

/// The encoder model: a bidirectional transformer whose attention is gated
/// per layer by the constituent prior induced from neighbor links.
template <typename Real>
class Model {
public:
    Model() = default;

    Model(ModelConfig cfg, std::uint64_t seed) : config_(cfg) {
        config_.validate();
        init_params(seed);
        positions_ = sinusoidal_positions<Real>(config_.max_seq_len, config_.d_model);
    }

    /// Construct around existing parameters (checkpoint load).
    static Model from_params(ModelConfig cfg, ParamStore<Real>&& params) {
        Model m;
        m.config_ = cfg;
        m.config_.validate();
        m.params_ = std::move(params);
        m.positions_ = sinusoidal_positions<Real>(cfg.max_seq_len, cfg.d_model);
        return m;
    }

    const ModelConfig& config() const { return config_; }
    ParamStore<Real>& params() { return params_; }
    const ParamStore<Real>& params() const { return params_; }

    std::size_t count_params() const { return params_.count_scalars(); }

    BoundModel<Real> bind(Tape<Real>& t) {
        BoundModel<Real> b;
        b.embedding = t.leaf(*params_.find("embedding"));
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            BoundLayer<Real> bl;
            bl.wq = t.leaf(*params_.find(p + "attn.wq"));
            bl.bq = t.leaf(*params_.find(p + "attn.bq"));
            bl.wk = t.leaf(*params_.find(p + "attn.wk"));
            bl.bk = t.leaf(*params_.find(p + "attn.bk"));
            bl.wv = t.leaf(*params_.find(p + "attn.wv"));
            bl.bv = t.leaf(*params_.find(p + "attn.bv"));
            bl.wo = t.leaf(*params_.find(p + "attn.wo"));
            bl.bo = t.leaf(*params_.find(p + "attn.bo"));
            bl.norm1_gain = t.leaf(*params_.find(p + "norm1.gain"));
            bl.norm1_bias = t.leaf(*params_.find(p + "norm1.bias"));
            bl.ff_w1 = t.leaf(*params_.find(p + "ff.w1"));
            bl.ff_b1 = t.leaf(*params_.find(p + "ff.b1"));
            bl.ff_w2 = t.leaf(*params_.find(p + "ff.w2"));
            bl.ff_b2 = t.leaf(*params_.find(p + "ff.b2"));
            bl.norm2_gain = t.leaf(*params_.find(p + "norm2.gain"));
            bl.norm2_bias = t.leaf(*params_.find(p + "norm2.bias"));
            if (config_.constituent_attention) {
                bl.link.wq = t.leaf(*params_.find(p + "link.wq"));
                bl.link.bq = t.leaf(*params_.find(p + "link.bq"));
                bl.link.wk = t.leaf(*params_.find(p + "link.wk"));
                bl.link.bk = t.leaf(*params_.find(p + "link.bk"));
            }
            b.layers.push_back(bl);
        }
        b.cls_w = t.leaf(*params_.find("classifier.w"));
        b.cls_b = t.leaf(*params_.find("classifier.b"));
        return b;
    }

    /// Build the forward graph for one sequence. `pad` marks positions that
    /// must not merge into constituents or receive attention; it may be
    /// empty when nothing is padded. Dropout draws from `rng` in train mode.
    ForwardGraph<Real> forward(Tape<Real>& t, const BoundModel<Real>& b,
                               const std::vector<std::size_t>& tokens,
                               const std::vector<bool>& pad, RunMode mode, Rng& rng,
                               PriorMode prior_mode = PriorMode::learned) const {
        const std::size_t n = tokens.size();
        if (n == 0) throw std::invalid_argument("encoder: empty input");
        if (n > config_.max_seq_len)
            throw std::invalid_argument(
                "encoder: input length " + std::to_string(n) + " exceeds max sequence length " +
                std::to_string(config_.max_seq_len) + "; refusing to truncate");
        if (!pad.empty() && pad.size() != n)
            throw std::invalid_argument("encoder: pad flags do not match input length");
        const bool training = mode == RunMode::train;
        const bool any_pad = std::find(pad.begin(), pad.end(), true) != pad.end();

        // token embedding scaled by sqrt(d_model), plus sinusoidal positions
        auto* emb = t.embedding_lookup(b.embedding, tokens);
        Array<Real> pos(Shape{n, config_.d_model});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < config_.d_model; ++j) pos.at(i, j) = positions_.at(i, j);
        auto* h = t.add(t.scale(emb, Real(std::sqrt(double(config_.d_model)))),
                        t.constant(std::move(pos)));
        h = t.dropout(h, config_.dropout, rng, training);

        // attention-logit mask: every row is forbidden from padded columns
        std::vector<bool> col_mask;
        if (any_pad) {
            col_mask.resize(n * n, false);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    if (pad[j]) col_mask[i * n + j] = true;
        }
        // links touching a padded position are forced to zero
        std::vector<bool> link_mask;
        if (any_pad && n > 1) {
            link_mask.resize(n - 1, false);
            for (std::size_t i = 0; i + 1 < n; ++i) link_mask[i] = pad[i] || pad[i + 1];
        }

        ForwardGraph<Real> g;
        Node<Real>* a_prev = nullptr;  // layer -1 initialized to zeros
        if (config_.constituent_attention && n > 1)
            a_prev = t.constant(Array<Real>(Shape{n - 1}, Real(0)));

        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            const auto& bl = b.layers[l];

            Node<Real>* prior = nullptr;
            if (config_.constituent_attention) {
                // constituent attention works on the block's input states
                auto* scores = neighbor_scores(t, h, bl.link);
                auto* a_hat = average_links_from_scores(t, scores);
                if (!link_mask.empty()) a_hat = t.masked_fill(a_hat, link_mask, Real(0));
                auto* a = n > 1 ? hierarchical_update(t, a_prev, a_hat)
                                : t.constant(Array<Real>(Shape{0}));
                a_prev = n > 1 ? a : a_prev;
                prior = build_prior(t, a);
                g.links.push_back(a);
                g.priors.push_back(prior);
                if (prior_mode == PriorMode::force_ones)
                    prior = t.constant(Array<Real>(Shape{n, n}, Real(1)));
            }

            // gated multi-head attention
            auto* q = t.add(t.matmul(h, bl.wq), bl.bq);
            auto* k = t.add(t.matmul(h, bl.wk), bl.bk);
            auto* v = t.add(t.matmul(h, bl.wv), bl.bv);
            const std::size_t dk = config_.head_dim();
            const Real inv_scale = Real(1.0 / std::sqrt(double(dk)));
            std::vector<Node<Real>*> head_outs;
            std::vector<Node<Real>*> head_attn;
            for (std::size_t head = 0; head < config_.num_heads; ++head) {
                auto* qh = t.slice(q, {0, head * dk}, {n, dk});
                auto* kh = t.slice(k, {0, head * dk}, {n, dk});
                auto* vh = t.slice(v, {0, head * dk}, {n, dk});
                auto* logits = t.scale(t.matmul(qh, t.transpose(kh)), inv_scale);
                if (!col_mask.empty()) logits = t.masked_fill(logits, col_mask, Real(-1e30));
                Node<Real>* e = t.softmax(logits);
                if (prior) e = t.mul(prior, e);  // no renormalization after gating
                head_attn.push_back(e);
                head_outs.push_back(t.matmul(e, vh));
            }
            g.attention.push_back(head_attn);
            auto* attn = t.add(t.matmul(t.concat(head_outs, 1), bl.wo), bl.bo);
            attn = t.dropout(attn, config_.dropout, rng, training);
            h = t.layer_norm(t.add(h, attn), bl.norm1_gain, bl.norm1_bias);

            // position-wise feed-forward
            auto* ff = t.add(t.matmul(t.relu(t.add(t.matmul(h, bl.ff_w1), bl.ff_b1)), bl.ff_w2),
                             bl.ff_b2);
            ff = t.dropout(ff, config_.dropout, rng, training);
            h = t.layer_norm(t.add(h, ff), bl.norm2_gain, bl.norm2_bias);
        }

        g.hidden = h;
        g.logits = t.add(t.matmul(h, b.cls_w), b.cls_b);
        return g;
    }

    /// One-shot forward returning plain arrays. Prior diagnostics are
    /// rebuilt numerically so exact zeros survive the log-space clamp.
    EncoderOutput<Real> run(const std::vector<std::size_t>& tokens, RunMode mode = RunMode::eval,
                            PriorMode prior_mode = PriorMode::learned,
                            std::uint64_t dropout_seed = 0) const {
        Tape<Real> t;
        Rng rng(dropout_seed);
        auto* self = const_cast<Model*>(this);
        auto bound = self->bind(t);
        auto graph = forward(t, bound, tokens, {}, mode, rng, prior_mode);

        EncoderOutput<Real> out;
        out.hidden = graph.hidden->value;
        out.logits = graph.logits->value;
        for (std::size_t l = 0; l < graph.links.size(); ++l) {
            NeighborLinks<Real> nl;
            nl.layer = int(l);
            nl.probs = graph.links[l]->value.values();
            out.links.push_back(std::move(nl));
            ConstituentPrior<Real> cp;
            cp.layer = int(l);
            cp.matrix = build_prior(out.links.back().probs);
            out.priors.push_back(std::move(cp));
        }
        for (const auto& heads : graph.attention) {
            std::vector<Array<Real>> copies;
            for (auto* e : heads) copies.push_back(e->value);
            out.attention.push_back(std::move(copies));
        }
        return out;
    }

private:
    void init_params(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x1717));
        auto xavier = [&](std::size_t rows, std::size_t cols) {
            Array<Real> a(Shape{rows, cols});
            const double limit = std::sqrt(6.0 / double(rows + cols));
            for (std::size_t i = 0; i < a.numel(); ++i) a[i] = Real(rng.uniform(-limit, limit));
            return a;
        };
        auto zeros = [](std::size_t nvals) { return Array<Real>(Shape{nvals}); };
        auto ones = [](std::size_t nvals) { return Array<Real>(Shape{nvals}, Real(1)); };

        const std::size_t d = config_.d_model, v = config_.vocab_size, f = config_.d_ff;
        params_.add("embedding", xavier(v, d));
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            params_.add(p + "attn.wq", xavier(d, d));
            params_.add(p + "attn.bq", zeros(d));
            params_.add(p + "attn.wk", xavier(d, d));
            params_.add(p + "attn.bk", zeros(d));
            params_.add(p + "attn.wv", xavier(d, d));
            params_.add(p + "attn.bv", zeros(d));
            params_.add(p + "attn.wo", xavier(d, d));
            params_.add(p + "attn.bo", zeros(d));
            params_.add(p + "norm1.gain", ones(d));
            params_.add(p + "norm1.bias", zeros(d));
            params_.add(p + "ff.w1", xavier(d, f));
            params_.add(p + "ff.b1", zeros(f));
            params_.add(p + "ff.w2", xavier(f, d));
            params_.add(p + "ff.b2", zeros(d));
            params_.add(p + "norm2.gain", ones(d));
            params_.add(p + "norm2.bias", zeros(d));
            if (config_.constituent_attention) {
                params_.add(p + "link.wq", xavier(d, d));
                params_.add(p + "link.bq", zeros(d));
                params_.add(p + "link.wk", xavier(d, d));
                params_.add(p + "link.bk", zeros(d));
            }
        }
        params_.add("classifier.w", xavier(d, v));
        params_.add("classifier.b", zeros(v));
    }

    ModelConfig config_;
    ParamStore<Real> params_;
    Array<Real> positions_;
};

}  // namespace treeformer
