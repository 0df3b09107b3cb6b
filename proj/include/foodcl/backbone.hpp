#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "foodcl/artifacts.hpp"
#include "foodcl/lora.hpp"
#include "foodcl/matrix.hpp"
#include "foodcl/optim.hpp"
#include "foodcl/rng.hpp"
#include "foodcl/tape.hpp"

namespace foodcl {

struct BackboneConfig {
    int vocab_size{224};
    int model_dim{64};
    int num_layers{2};
    int num_heads{4};
    int mlp_dim{128};
    int max_seq_len{128};

    void validate() const {
        if (vocab_size < 2 || model_dim < 1 || num_layers < 1 || num_heads < 1 || mlp_dim < 1 || max_seq_len < 2)
            throw std::invalid_argument("backbone config: non-positive dimension");
        if (model_dim % num_heads != 0)
            throw std::invalid_argument("backbone config: model_dim must be divisible by num_heads");
    }

    int head_dim() const { return model_dim / num_heads; }

    bool operator==(const BackboneConfig&) const = default;
};

// Pre-LN decoder-only transformer weights. Frozen after pretraining: the
// continual stages never mutate these, which the checksum invariant enforces.
struct BackboneWeights {
    BackboneConfig config;

    struct Layer {
        Matrix ln1_g, ln1_b;
        Matrix wq, wk, wv, wo;  // stored input-major: activations multiply from the left
        Matrix ln2_g, ln2_b;
        Matrix w1, b1, w2, b2;
    };

    Matrix tok_embed;  // vocab x d
    Matrix pos_embed;  // max_seq x d
    std::vector<Layer> layers;
    Matrix lnf_g, lnf_b;
    Matrix head_w;  // d x vocab
    Matrix head_b;  // 1 x vocab

    static BackboneWeights init(const BackboneConfig& cfg, Rng& rng, double init_std = 0.08) {
        cfg.validate();
        BackboneWeights w;
        w.config = cfg;
        const int d = cfg.model_dim;
        w.tok_embed = Matrix::randn(cfg.vocab_size, d, rng, init_std);
        w.pos_embed = Matrix::randn(cfg.max_seq_len, d, rng, init_std);
        for (int l = 0; l < cfg.num_layers; ++l) {
            Layer layer;
            layer.ln1_g = Matrix::filled(1, d, 1.0);
            layer.ln1_b = Matrix::zeros(1, d);
            layer.wq = Matrix::randn(d, d, rng, init_std);
            layer.wk = Matrix::randn(d, d, rng, init_std);
            layer.wv = Matrix::randn(d, d, rng, init_std);
            layer.wo = Matrix::randn(d, d, rng, init_std);
            layer.ln2_g = Matrix::filled(1, d, 1.0);
            layer.ln2_b = Matrix::zeros(1, d);
            layer.w1 = Matrix::randn(d, cfg.mlp_dim, rng, init_std);
            layer.b1 = Matrix::zeros(1, cfg.mlp_dim);
            layer.w2 = Matrix::randn(cfg.mlp_dim, d, rng, init_std);
            layer.b2 = Matrix::zeros(1, d);
            w.layers.push_back(std::move(layer));
        }
        w.lnf_g = Matrix::filled(1, d, 1.0);
        w.lnf_b = Matrix::zeros(1, d);
        w.head_w = Matrix::randn(d, cfg.vocab_size, rng, init_std);
        w.head_b = Matrix::zeros(1, cfg.vocab_size);
        return w;
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) {
        fn("tok_embed", tok_embed);
        fn("pos_embed", pos_embed);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            auto& ly = layers[l];
            fn(p + "ln1_g", ly.ln1_g);
            fn(p + "ln1_b", ly.ln1_b);
            fn(p + "wq", ly.wq);
            fn(p + "wk", ly.wk);
            fn(p + "wv", ly.wv);
            fn(p + "wo", ly.wo);
            fn(p + "ln2_g", ly.ln2_g);
            fn(p + "ln2_b", ly.ln2_b);
            fn(p + "w1", ly.w1);
            fn(p + "b1", ly.b1);
            fn(p + "w2", ly.w2);
            fn(p + "b2", ly.b2);
        }
        fn("lnf_g", lnf_g);
        fn("lnf_b", lnf_b);
        fn("head_w", head_w);
        fn("head_b", head_b);
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        const_cast<BackboneWeights*>(this)->for_each_param(
            [&](const std::string& name, Matrix& m) { fn(name, static_cast<const Matrix&>(m)); });
    }

    uint64_t checksum() const {
        uint64_t h = fnv1a64("foodcl-backbone");
        for_each_param([&](const std::string& name, const Matrix& m) {
            h = fnv1a64(name, h);
            h = matrix_checksum(m, h);
        });
        return h;
    }

    void save(const std::filesystem::path& path) const {
        TensorContainer c;
        c.meta = {{"format", "foodcl-backbone"},
                  {"version", 1},
                  {"checksum", checksum()},
                  {"config",
                   {{"vocab_size", config.vocab_size},
                    {"model_dim", config.model_dim},
                    {"num_layers", config.num_layers},
                    {"num_heads", config.num_heads},
                    {"mlp_dim", config.mlp_dim},
                    {"max_seq_len", config.max_seq_len}}}};
        for_each_param([&](const std::string& name, const Matrix& m) { c.tensors.emplace_back(name, m); });
        save_container(c, path);
    }

    static BackboneWeights load(const std::filesystem::path& path) {
        const TensorContainer c = load_container(path);
        if (c.meta.value("format", "") != "foodcl-backbone")
            throw std::runtime_error("not a backbone checkpoint: " + path.string());
        BackboneConfig cfg;
        const auto& j = c.meta.at("config");
        cfg.vocab_size = j.at("vocab_size").get<int>();
        cfg.model_dim = j.at("model_dim").get<int>();
        cfg.num_layers = j.at("num_layers").get<int>();
        cfg.num_heads = j.at("num_heads").get<int>();
        cfg.mlp_dim = j.at("mlp_dim").get<int>();
        cfg.max_seq_len = j.at("max_seq_len").get<int>();
        cfg.validate();
        BackboneWeights w;
        w.config = cfg;
        w.layers.resize(static_cast<size_t>(cfg.num_layers));
        w.for_each_param([&](const std::string& name, Matrix& m) { m = c.get(name); });
        const uint64_t expect = c.meta.at("checksum").get<uint64_t>();
        if (w.checksum() != expect) throw std::runtime_error("checkpoint checksum mismatch: " + path.string());
        return w;
    }
};

struct TrainableParam {
    std::string name;
    int node{-1};
    Matrix* dest{nullptr};
};

// Records one forward graph family on a tape: weight leaves are registered
// once and shared by every sample of the batch, so adapter gradients
// accumulate across the whole batch on a single leaf.
class BatchGraph {
public:
    // Frozen backbone; the binding flags decide which adapters train.
    BatchGraph(Tape& tape, const BackboneWeights& weights, std::span<const AdapterBinding> adapters,
               std::span<const std::string> adapter_names = {})
        : tape_(tape), w_(weights) {
        register_backbone(false, nullptr);
        for (size_t i = 0; i < adapters.size(); ++i) {
            const AdapterBinding& bind = adapters[i];
            if (!bind.adapter) throw std::invalid_argument("BatchGraph: null adapter binding");
            BoundAdapter ba;
            ba.site = bind.adapter->site;
            ba.a_node = tape_.leaf(bind.adapter->a, bind.trainable);
            ba.b_node = tape_.leaf(bind.adapter->b, bind.trainable);
            if (bind.trainable) {
                const std::string base =
                    i < adapter_names.size() ? adapter_names[i] : "adapter" + std::to_string(i) + "." + ba.site.str();
                trainables_.push_back({base + ".a", ba.a_node, &bind.adapter->a});
                trainables_.push_back({base + ".b", ba.b_node, &bind.adapter->b});
            }
            bound_.push_back(ba);
        }
    }

    // Everything trainable (pretraining).
    BatchGraph(Tape& tape, BackboneWeights& weights) : tape_(tape), w_(weights) { register_backbone(true, &weights); }

    Tape& tape() { return tape_; }

    const std::vector<TrainableParam>& trainables() const { return trainables_; }

    // Leaf node of the i-th bound adapter's A matrix (for penalty terms).
    int adapter_a_node(size_t binding_index) const { return bound_.at(binding_index).a_node; }

    // Causal logits for one token sequence; every adapted site computes the
    // frozen product plus the sum of its attached adapter deltas.
    int forward(std::span<const int> tokens) {
        const auto& cfg = w_.config;
        if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
        if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
            throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                        " exceeds context " + std::to_string(cfg.max_seq_len));
        for (int id : tokens)
            if (id < 0 || id >= cfg.vocab_size)
                throw std::out_of_range("forward: token id " + std::to_string(id) + " outside vocabulary");

        const int T = static_cast<int>(tokens.size());
        std::vector<int> positions(static_cast<size_t>(T));
        for (int i = 0; i < T; ++i) positions[static_cast<size_t>(i)] = i;

        int x = tape_.add(tape_.embed_gather(n_.tok_embed, tokens), tape_.embed_gather(n_.pos_embed, positions));
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
        for (int l = 0; l < cfg.num_layers; ++l) {
            const auto& ln = n_.layers[static_cast<size_t>(l)];
            const int h = tape_.layer_norm(x, ln.ln1_g, ln.ln1_b);
            int q = apply_site(tape_.matmul(h, ln.wq), h, {l, SiteKind::kQuery});
            const int k = tape_.matmul(h, ln.wk);
            int v = apply_site(tape_.matmul(h, ln.wv), h, {l, SiteKind::kValue});
            std::vector<int> heads;
            for (int hh = 0; hh < cfg.num_heads; ++hh) {
                const int c0 = hh * cfg.head_dim(), c1 = (hh + 1) * cfg.head_dim();
                const int qh = tape_.slice_cols(q, c0, c1);
                const int kh = tape_.slice_cols(k, c0, c1);
                const int vh = tape_.slice_cols(v, c0, c1);
                const int scores = tape_.scale(tape_.matmul_nt(qh, kh), att_scale);
                const int probs = tape_.softmax(scores, /*causal=*/true);
                heads.push_back(tape_.matmul(probs, vh));
            }
            const int merged = tape_.concat_cols(heads);
            x = tape_.add(x, tape_.matmul(merged, ln.wo));
            const int h2 = tape_.layer_norm(x, ln.ln2_g, ln.ln2_b);
            int m = tape_.gelu(tape_.add_row(tape_.matmul(h2, ln.w1), ln.b1));
            m = tape_.add_row(tape_.matmul(m, ln.w2), ln.b2);
            x = tape_.add(x, m);
        }
        x = tape_.layer_norm(x, n_.lnf_g, n_.lnf_b);
        return tape_.add_row(tape_.matmul(x, n_.head_w), n_.head_b);
    }

private:
    struct LayerNodes {
        int ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    struct Nodes {
        int tok_embed, pos_embed;
        std::vector<LayerNodes> layers;
        int lnf_g, lnf_b, head_w, head_b;
    };
    struct BoundAdapter {
        SiteId site;
        int a_node, b_node;
    };

    void register_backbone(bool trainable, BackboneWeights* mutable_w) {
        auto reg = [&](const std::string& name, const Matrix& m, Matrix* dest) {
            const int node = tape_.leaf(m, trainable);
            if (trainable) trainables_.push_back({"backbone." + name, node, dest});
            return node;
        };
        BackboneWeights* mw = mutable_w;
        const auto& w = w_;
        n_.tok_embed = reg("tok_embed", w.tok_embed, mw ? &mw->tok_embed : nullptr);
        n_.pos_embed = reg("pos_embed", w.pos_embed, mw ? &mw->pos_embed : nullptr);
        for (size_t l = 0; l < w.layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            const auto& ly = w.layers[l];
            auto* mly = mw ? &mw->layers[l] : nullptr;
            LayerNodes ln{};
            ln.ln1_g = reg(p + "ln1_g", ly.ln1_g, mly ? &mly->ln1_g : nullptr);
            ln.ln1_b = reg(p + "ln1_b", ly.ln1_b, mly ? &mly->ln1_b : nullptr);
            ln.wq = reg(p + "wq", ly.wq, mly ? &mly->wq : nullptr);
            ln.wk = reg(p + "wk", ly.wk, mly ? &mly->wk : nullptr);
            ln.wv = reg(p + "wv", ly.wv, mly ? &mly->wv : nullptr);
            ln.wo = reg(p + "wo", ly.wo, mly ? &mly->wo : nullptr);
            ln.ln2_g = reg(p + "ln2_g", ly.ln2_g, mly ? &mly->ln2_g : nullptr);
            ln.ln2_b = reg(p + "ln2_b", ly.ln2_b, mly ? &mly->ln2_b : nullptr);
            ln.w1 = reg(p + "w1", ly.w1, mly ? &mly->w1 : nullptr);
            ln.b1 = reg(p + "b1", ly.b1, mly ? &mly->b1 : nullptr);
            ln.w2 = reg(p + "w2", ly.w2, mly ? &mly->w2 : nullptr);
            ln.b2 = reg(p + "b2", ly.b2, mly ? &mly->b2 : nullptr);
            n_.layers.push_back(ln);
        }
        n_.lnf_g = reg("lnf_g", w.lnf_g, mw ? &mw->lnf_g : nullptr);
        n_.lnf_b = reg("lnf_b", w.lnf_b, mw ? &mw->lnf_b : nullptr);
        n_.head_w = reg("head_w", w.head_w, mw ? &mw->head_w : nullptr);
        n_.head_b = reg("head_b", w.head_b, mw ? &mw->head_b : nullptr);
    }

    int apply_site(int base, int h, SiteId site) {
        for (const auto& ba : bound_) {
            if (!(ba.site == site)) continue;
            const int down = tape_.matmul_nt(h, ba.a_node);     // T x r
            const int delta = tape_.matmul_nt(down, ba.b_node); // T x d
            base = tape_.add(base, delta);
        }
        return base;
    }

    Tape& tape_;
    const BackboneWeights& w_;
    Nodes n_;
    std::vector<BoundAdapter> bound_;
    std::vector<TrainableParam> trainables_;
};

// Mean negative log-likelihood over the masked positions of one sequence;
// the plain (non-tape) form used by evaluation and tests.
inline double answer_loss(const Matrix& logits, std::span<const int> targets, std::span<const int> mask) {
    if (mask.empty()) throw std::invalid_argument("answer_loss: empty mask");
    if (static_cast<int>(targets.size()) != logits.rows)
        throw std::invalid_argument("answer_loss: targets/logits length mismatch");
    double total = 0.0;
    for (int pos : mask) {
        if (pos < 0 || pos >= logits.rows) throw std::out_of_range("answer_loss: mask position outside logits");
        const double* row = logits.row(pos);
        const int tgt = targets[static_cast<size_t>(pos)];
        if (tgt < 0 || tgt >= logits.cols) throw std::out_of_range("answer_loss: target outside vocabulary");
        double mx = row[0];
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < logits.cols; ++j) denom += std::exp(row[j] - mx);
        total += std::log(denom) + mx - row[tgt];
    }
    return total / static_cast<double>(mask.size());
}

struct GenOptions {
    double temperature{0.8};
    uint64_t seed{0};
    int max_new_tokens{32};
    int eos_id{1};
    bool greedy{false};
};

struct GenResult {
    std::vector<int> tokens;  // continuation only, without the prompt
    bool truncated{false};    // hit max_new_tokens or the context limit before <eos>
};

// Read-only composed model: frozen backbone plus a frozen adapter stack.
// Generation keeps per-layer key/value rows for the processed prefix; the
// arithmetic per position is identical to the batch forward, so cached and
// full forwards produce bit-identical logits.
class InferenceModel {
public:
    InferenceModel(const BackboneWeights& weights, std::vector<AdapterBinding> adapters)
        : w_(weights), adapters_(std::move(adapters)) {
        for (const auto& b : adapters_)
            if (!b.adapter) throw std::invalid_argument("InferenceModel: null adapter binding");
    }

    const BackboneWeights& weights() const { return w_; }

    // Logits for every position, cache-built.
    Matrix full_logits(std::span<const int> tokens) const {
        State st(w_.config);
        Matrix out(static_cast<int>(tokens.size()), w_.config.vocab_size);
        for (size_t i = 0; i < tokens.size(); ++i) {
            const auto logits = step(st, tokens[i]);
            std::copy(logits.begin(), logits.end(), out.row(static_cast<int>(i)));
        }
        return out;
    }

    GenResult generate(std::span<const int> prompt, const GenOptions& opts) const {
        if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
        if (static_cast<int>(prompt.size()) > w_.config.max_seq_len)
            throw std::invalid_argument("generate: prompt does not fit context");
        if (!opts.greedy && !(opts.temperature > 0.0))
            throw std::invalid_argument("generate: temperature must be > 0 (or use greedy)");

        State st(w_.config);
        std::vector<double> logits;
        for (int id : prompt) logits = step(st, id);

        Rng rng = Rng(opts.seed).derive("generate");
        GenResult result;
        for (int produced = 0; produced < opts.max_new_tokens; ++produced) {
            if (st.used >= w_.config.max_seq_len) {
                result.truncated = true;
                return result;
            }
            const int next = opts.greedy ? argmax(logits) : sample_token(logits, opts.temperature, rng);
            result.tokens.push_back(next);
            if (next == opts.eos_id) return result;
            logits = step(st, next);
        }
        result.truncated = true;
        return result;
    }

private:
    struct State {
        explicit State(const BackboneConfig& cfg)
            : k(cfg.num_layers, Matrix(cfg.max_seq_len, cfg.model_dim)),
              v(cfg.num_layers, Matrix(cfg.max_seq_len, cfg.model_dim)) {}
        std::vector<Matrix> k, v;
        int used{0};
    };

    static int argmax(const std::vector<double>& logits) {
        int best = 0;
        for (size_t j = 1; j < logits.size(); ++j)
            if (logits[j] > logits[static_cast<size_t>(best)]) best = static_cast<int>(j);
        return best;
    }

    static int sample_token(const std::vector<double>& logits, double temperature, Rng& rng) {
        std::vector<double> probs(logits.size());
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double denom = 0.0;
        for (size_t j = 0; j < logits.size(); ++j) {
            probs[j] = std::exp((logits[j] - mx) / temperature);
            denom += probs[j];
        }
        const double r = rng.uniform() * denom;
        double acc = 0.0;
        for (size_t j = 0; j < probs.size(); ++j) {
            acc += probs[j];
            if (r < acc) return static_cast<int>(j);
        }
        return static_cast<int>(probs.size()) - 1;
    }

    // row = row @ W (+ adapter deltas when a site id is given)
    std::vector<double> project(const std::vector<double>& h, const Matrix& wmat, const SiteId* site) const {
        std::vector<double> out(static_cast<size_t>(wmat.cols), 0.0);
        for (int p = 0; p < wmat.rows; ++p) {
            const double hv = h[static_cast<size_t>(p)];
            if (hv == 0.0) continue;
            const double* wp = wmat.row(p);
            for (int j = 0; j < wmat.cols; ++j) out[static_cast<size_t>(j)] += hv * wp[j];
        }
        if (site) {
            for (const auto& bind : adapters_) {
                const LoRAAdapter& ad = *bind.adapter;
                if (!(ad.site == *site)) continue;
                std::vector<double> down(static_cast<size_t>(ad.rank), 0.0);
                for (int r = 0; r < ad.rank; ++r) {
                    const double* ar = ad.a.row(r);
                    double acc = 0.0;
                    for (size_t p = 0; p < h.size(); ++p) acc += h[p] * ar[p];
                    down[static_cast<size_t>(r)] = acc;
                }
                for (int j = 0; j < ad.b.rows; ++j) {
                    const double* bj = ad.b.row(j);
                    double acc = 0.0;
                    for (int r = 0; r < ad.rank; ++r) acc += down[static_cast<size_t>(r)] * bj[r];
                    out[static_cast<size_t>(j)] += acc;
                }
            }
        }
        return out;
    }

    static std::vector<double> layer_norm_row(const std::vector<double>& x, const Matrix& g, const Matrix& b,
                                              double eps = 1e-5) {
        const int d = static_cast<int>(x.size());
        double mean = 0.0;
        for (double v : x) mean += v;
        mean /= d;
        double var = 0.0;
        for (double v : x) {
            const double t = v - mean;
            var += t * t;
        }
        var /= d;
        const double inv_std = 1.0 / std::sqrt(var + eps);
        std::vector<double> y(x.size());
        for (int j = 0; j < d; ++j) y[static_cast<size_t>(j)] = (x[static_cast<size_t>(j)] - mean) * inv_std * g.data[static_cast<size_t>(j)] + b.data[static_cast<size_t>(j)];
        return y;
    }

    // Process one token at the next position; returns the logits row.
    std::vector<double> step(State& st, int token) const {
        const auto& cfg = w_.config;
        if (token < 0 || token >= cfg.vocab_size)
            throw std::out_of_range("inference: token id " + std::to_string(token) + " outside vocabulary");
        if (st.used >= cfg.max_seq_len) throw std::runtime_error("inference: context overflow");
        const int pos = st.used;
        const int d = cfg.model_dim;
        const int hd = cfg.head_dim();
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

        std::vector<double> x(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] = w_.tok_embed.at(token, j) + w_.pos_embed.at(pos, j);

        for (int l = 0; l < cfg.num_layers; ++l) {
            const auto& ly = w_.layers[static_cast<size_t>(l)];
            const auto h = layer_norm_row(x, ly.ln1_g, ly.ln1_b);
            const SiteId qsite{l, SiteKind::kQuery};
            const SiteId vsite{l, SiteKind::kValue};
            const auto q = project(h, ly.wq, &qsite);
            const auto k = project(h, ly.wk, nullptr);
            const auto v = project(h, ly.wv, &vsite);
            std::copy(k.begin(), k.end(), st.k[static_cast<size_t>(l)].row(pos));
            std::copy(v.begin(), v.end(), st.v[static_cast<size_t>(l)].row(pos));

            std::vector<double> merged(static_cast<size_t>(d), 0.0);
            for (int hh = 0; hh < cfg.num_heads; ++hh) {
                const int c0 = hh * hd;
                std::vector<double> scores(static_cast<size_t>(pos) + 1);
                for (int t = 0; t <= pos; ++t) {
                    const double* kt = st.k[static_cast<size_t>(l)].row(t) + c0;
                    double acc = 0.0;
                    for (int j = 0; j < hd; ++j) acc += q[static_cast<size_t>(c0 + j)] * kt[j];
                    scores[static_cast<size_t>(t)] = acc * att_scale;
                }
                double mx = scores[0];
                for (double s : scores) mx = std::max(mx, s);
                double denom = 0.0;
                for (auto& s : scores) {
                    s = std::exp(s - mx);
                    denom += s;
                }
                for (auto& s : scores) s /= denom;
                for (int t = 0; t <= pos; ++t) {
                    const double* vt = st.v[static_cast<size_t>(l)].row(t) + c0;
                    const double p = scores[static_cast<size_t>(t)];
                    for (int j = 0; j < hd; ++j) merged[static_cast<size_t>(c0 + j)] += p * vt[j];
                }
            }
            const auto attn = project(merged, ly.wo, nullptr);
            for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += attn[static_cast<size_t>(j)];

            const auto h2 = layer_norm_row(x, ly.ln2_g, ly.ln2_b);
            auto m = project(h2, ly.w1, nullptr);
            for (int j = 0; j < cfg.mlp_dim; ++j) {
                const double t = m[static_cast<size_t>(j)] + ly.b1.data[static_cast<size_t>(j)];
                m[static_cast<size_t>(j)] = 0.5 * t * (1.0 + std::erf(t * 0.7071067811865475));
            }
            auto m2 = project(m, ly.w2, nullptr);
            for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += m2[static_cast<size_t>(j)] + ly.b2.data[static_cast<size_t>(j)];
        }
        const auto xf = layer_norm_row(x, w_.lnf_g, w_.lnf_b);
        auto logits = project(xf, w_.head_w, nullptr);
        for (int j = 0; j < cfg.vocab_size; ++j) logits[static_cast<size_t>(j)] += w_.head_b.data[static_cast<size_t>(j)];
        st.used += 1;
        return logits;
    }

    const BackboneWeights& w_;
    std::vector<AdapterBinding> adapters_;
};

struct PretrainOptions {
    int max_steps{3000};
    int min_steps{800};
    int batch_size{16};
    double learning_rate{1e-3};
    double weight_decay{0.01};
    int eval_every{200};
    double plateau_delta{1e-3};
    int plateau_patience{3};
    bool verbose{false};
};

struct PretrainResult {
    BackboneWeights weights;
    int steps_run{0};
    double final_val_loss{0.0};
    bool plateaued{false};
};

// Next-token training on the synthetic mixed-domain corpus until the
// validation loss plateaus or the step budget runs out. The result is the
// frozen base model every continual stage builds on.
inline PretrainResult pretrain_backbone(const std::vector<std::vector<int>>& corpus, const BackboneConfig& cfg,
                                        uint64_t seed, const PretrainOptions& opts = {}) {
    if (corpus.empty()) throw std::invalid_argument("pretrain_backbone: empty corpus");
    for (const auto& seq : corpus)
        if (seq.size() < 2) throw std::invalid_argument("pretrain_backbone: sequence shorter than 2 tokens");

    Rng root(seed);
    Rng init_rng = root.derive("backbone-init");
    PretrainResult res;
    res.weights = BackboneWeights::init(cfg, init_rng);
    BackboneWeights& w = res.weights;

    // deterministic validation split, ~5%; tiny corpora validate on the
    // training sequences themselves
    const size_t val_count = corpus.size() >= 20 ? corpus.size() / 20 : 0;
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng = root.derive("val-split");
    split_rng.shuffle(order);
    std::vector<size_t> val_idx(order.begin(), order.begin() + static_cast<long>(val_count));
    std::vector<size_t> train_idx(order.begin() + static_cast<long>(val_count), order.end());
    if (val_idx.empty()) val_idx = train_idx;

    auto eval_val = [&]() {
        double total = 0.0;
        size_t count = 0;
        InferenceModel model(w, {});
        for (size_t idx : val_idx) {
            const auto& seq = corpus[idx];
            const Matrix logits = model.full_logits(seq);
            std::vector<int> targets(seq.size(), 0);
            std::vector<int> mask;
            for (size_t j = 0; j + 1 < seq.size(); ++j) {
                targets[j] = seq[j + 1];
                mask.push_back(static_cast<int>(j));
            }
            total += answer_loss(logits, targets, mask);
            ++count;
        }
        return total / static_cast<double>(count);
    };

    AdamWConfig acfg;
    acfg.lr = opts.learning_rate;
    acfg.weight_decay = opts.weight_decay;
    AdamW optimizer(acfg);

    Rng shuffle_rng = root.derive("batch-order");
    std::vector<size_t> cursor_order = train_idx;
    shuffle_rng.shuffle(cursor_order);
    size_t cursor = 0;

    double best_val = std::numeric_limits<double>::infinity();
    int stale_checks = 0;
    Tape tape;
    for (int step = 1; step <= opts.max_steps; ++step) {
        tape.reset();
        BatchGraph graph(tape, w);
        int combined = -1;
        for (int bi = 0; bi < opts.batch_size; ++bi) {
            if (cursor >= cursor_order.size()) {
                cursor = 0;
                shuffle_rng.shuffle(cursor_order);
            }
            const auto& seq = corpus[cursor_order[cursor++]];
            const int logits = graph.forward(seq);
            std::vector<int> targets(seq.size(), 0);
            std::vector<int> mask;
            for (size_t j = 0; j + 1 < seq.size(); ++j) {
                targets[j] = seq[j + 1];
                mask.push_back(static_cast<int>(j));
            }
            const int loss = tape.nll_loss(logits, targets, mask);
            combined = combined < 0 ? loss : tape.add(combined, loss);
        }
        const int total = tape.scale(combined, 1.0 / opts.batch_size);
        if (!std::isfinite(tape.value(total).data[0]))
            throw std::runtime_error("pretraining diverged: non-finite loss at step " + std::to_string(step));
        tape.backward(total);
        std::vector<ParamUpdate> updates;
        for (const auto& t : graph.trainables()) updates.push_back({t.name, t.dest, &tape.grad(t.node)});
        optimizer.step(updates);
        res.steps_run = step;

        if (step % opts.eval_every == 0) {
            const double vl = eval_val();
            res.final_val_loss = vl;
            if (opts.verbose)
                std::fprintf(stderr, "[pretrain] step %d train %.4f val %.4f\n", step, tape.value(total).data[0], vl);
            if (vl < best_val - opts.plateau_delta) {
                best_val = vl;
                stale_checks = 0;
            } else if (step >= opts.min_steps && ++stale_checks >= opts.plateau_patience) {
                res.plateaued = true;
                break;
            }
        }
    }
    if (res.final_val_loss == 0.0) res.final_val_loss = eval_val();
    return res;
}

}  // namespace foodcl
