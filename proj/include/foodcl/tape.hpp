#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "foodcl/matrix.hpp"

namespace foodcl {

// Reverse-mode gradient tape over a fixed operation set: exactly the ops the
// transformer backbone, the adapter deltas and the losses need. Forward
// values are computed eagerly as nodes are recorded; backward() walks the
// node list in reverse creation order (a topological order by construction)
// and visits every reachable node exactly once.
class Tape {
public:
    enum class Op : uint8_t {
        kLeaf,
        kMatMul,      // a @ b
        kMatMulNT,    // a @ b^T
        kAdd,         // elementwise
        kMul,         // elementwise
        kAddRow,      // matrix + broadcast row vector
        kScale,       // matrix * constant
        kGelu,
        kSoftmax,     // row-wise, optionally causal-masked
        kLayerNorm,   // row-wise, trainable gain/bias
        kEmbedGather, // table rows by id
        kSliceCols,
        kConcatCols,
        kFrobeniusSq, // sum of squares -> 1x1
        kNllLoss,     // mean negative log-likelihood over masked positions -> 1x1
    };

    struct Node {
        Op op{Op::kLeaf};
        bool needs_grad{false};
        int in0{-1};
        int in1{-1};
        int in2{-1};
        Matrix value;
        Matrix grad;                 // allocated lazily in backward()
        double c{0.0};               // scale constant
        int c0{0}, c1{0};            // column range / causal flag
        std::vector<int> multi;      // concat inputs
        std::vector<int> ids;        // gather ids or nll targets
        std::vector<int> mask;       // nll masked positions
        std::vector<double> saved;   // op-specific forward state
    };

    void reset() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

    const Matrix& value(int id) const { return nodes_[check(id)].value; }

    // Adjoint of a node; zero matrix if the node was never reached.
    const Matrix& grad(int id) const {
        const Node& n = nodes_[check(id)];
        if (n.grad.empty()) {
            zero_like_.rows = n.value.rows;
            zero_like_.cols = n.value.cols;
            zero_like_.data.assign(n.value.size(), 0.0);
            return zero_like_;
        }
        return n.grad;
    }

    bool needs_grad(int id) const { return nodes_[check(id)].needs_grad; }

    // ---- node constructors -------------------------------------------------

    int leaf(Matrix v, bool requires_grad) {
        Node n;
        n.op = Op::kLeaf;
        n.needs_grad = requires_grad;
        n.value = std::move(v);
        check_finite(n.value, "tape.leaf");
        return push(std::move(n));
    }

    int constant(const Matrix& v) { return leaf(v, false); }

    int matmul(int a, int b) {
        Node n;
        n.op = Op::kMatMul;
        n.in0 = a;
        n.in1 = b;
        n.value = foodcl::matmul(val(a), val(b));
        return push_auto(std::move(n));
    }

    int matmul_nt(int a, int b) {
        Node n;
        n.op = Op::kMatMulNT;
        n.in0 = a;
        n.in1 = b;
        n.value = foodcl::matmul_nt(val(a), val(b));
        return push_auto(std::move(n));
    }

    int add(int a, int b) {
        Node n;
        n.op = Op::kAdd;
        n.in0 = a;
        n.in1 = b;
        n.value = foodcl::add(val(a), val(b));
        return push_auto(std::move(n));
    }

    int mul(int a, int b) {
        const Matrix& x = val(a);
        const Matrix& y = val(b);
        if (!x.same_shape(y))
            throw std::invalid_argument("tape.mul: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
        Node n;
        n.op = Op::kMul;
        n.in0 = a;
        n.in1 = b;
        n.value = x;
        for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= y.data[i];
        check_finite(n.value, "tape.mul");
        return push_auto(std::move(n));
    }

    // x (n x d) + row (1 x d), broadcast over rows.
    int add_row(int x, int rowvec) {
        const Matrix& m = val(x);
        const Matrix& r = val(rowvec);
        if (r.rows != 1 || r.cols != m.cols)
            throw std::invalid_argument("tape.add_row: bias shape " + r.shape_str() + " vs " + m.shape_str());
        Node n;
        n.op = Op::kAddRow;
        n.in0 = x;
        n.in1 = rowvec;
        n.value = m;
        for (int i = 0; i < m.rows; ++i) {
            double* vi = n.value.row(i);
            for (int j = 0; j < m.cols; ++j) vi[j] += r.data[j];
        }
        check_finite(n.value, "tape.add_row");
        return push_auto(std::move(n));
    }

    int scale(int a, double c) {
        Node n;
        n.op = Op::kScale;
        n.in0 = a;
        n.c = c;
        n.value = foodcl::scale(val(a), c);
        return push_auto(std::move(n));
    }

    int gelu(int a) {
        Node n;
        n.op = Op::kGelu;
        n.in0 = a;
        n.value = val(a);
        for (auto& v : n.value.data) v = gelu_fwd(v);
        check_finite(n.value, "tape.gelu");
        return push_auto(std::move(n));
    }

    // Row-wise softmax. With causal=true the input must be square and row i
    // only distributes probability over columns 0..i.
    int softmax(int a, bool causal) {
        const Matrix& s = val(a);
        if (causal && s.rows != s.cols)
            throw std::invalid_argument("tape.softmax: causal mask needs square scores, got " + s.shape_str());
        Node n;
        n.op = Op::kSoftmax;
        n.in0 = a;
        n.c0 = causal ? 1 : 0;
        n.value = Matrix(s.rows, s.cols);
        for (int i = 0; i < s.rows; ++i) {
            const int valid = causal ? i + 1 : s.cols;
            const double* si = s.row(i);
            double* pi = n.value.row(i);
            double mx = si[0];
            for (int j = 1; j < valid; ++j) mx = std::max(mx, si[j]);
            double denom = 0.0;
            for (int j = 0; j < valid; ++j) {
                pi[j] = std::exp(si[j] - mx);
                denom += pi[j];
            }
            for (int j = 0; j < valid; ++j) pi[j] /= denom;
        }
        check_finite(n.value, "tape.softmax");
        return push_auto(std::move(n));
    }

    // Row-wise layer normalization with gain/bias (1 x d each).
    int layer_norm(int x, int gamma, int beta, double eps = 1e-5) {
        const Matrix& m = val(x);
        const Matrix& g = val(gamma);
        const Matrix& b = val(beta);
        if (g.rows != 1 || g.cols != m.cols || b.rows != 1 || b.cols != m.cols)
            throw std::invalid_argument("tape.layer_norm: param shape mismatch for input " + m.shape_str());
        Node n;
        n.op = Op::kLayerNorm;
        n.in0 = x;
        n.in1 = gamma;
        n.in2 = beta;
        n.c = eps;
        n.value = Matrix(m.rows, m.cols);
        n.saved.resize(static_cast<size_t>(m.rows) * 2);
        const int d = m.cols;
        for (int i = 0; i < m.rows; ++i) {
            const double* xi = m.row(i);
            double mean = 0.0;
            for (int j = 0; j < d; ++j) mean += xi[j];
            mean /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) {
                const double t = xi[j] - mean;
                var += t * t;
            }
            var /= d;
            const double inv_std = 1.0 / std::sqrt(var + eps);
            n.saved[2 * i] = mean;
            n.saved[2 * i + 1] = inv_std;
            double* yi = n.value.row(i);
            for (int j = 0; j < d; ++j) yi[j] = (xi[j] - mean) * inv_std * g.data[j] + b.data[j];
        }
        check_finite(n.value, "tape.layer_norm");
        return push_auto(std::move(n));
    }

    int embed_gather(int table, std::span<const int> ids) {
        const Matrix& t = val(table);
        Node n;
        n.op = Op::kEmbedGather;
        n.in0 = table;
        n.ids.assign(ids.begin(), ids.end());
        n.value = Matrix(static_cast<int>(ids.size()), t.cols);
        for (size_t i = 0; i < ids.size(); ++i) {
            const int id = ids[i];
            if (id < 0 || id >= t.rows)
                throw std::out_of_range("tape.embed_gather: id " + std::to_string(id) + " outside table of " +
                                        std::to_string(t.rows) + " rows");
            std::copy(t.row(id), t.row(id) + t.cols, n.value.row(static_cast<int>(i)));
        }
        return push_auto(std::move(n));
    }

    int slice_cols(int a, int c0, int c1) {
        const Matrix& m = val(a);
        if (c0 < 0 || c1 > m.cols || c0 >= c1)
            throw std::invalid_argument("tape.slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                        ") outside " + m.shape_str());
        Node n;
        n.op = Op::kSliceCols;
        n.in0 = a;
        n.c0 = c0;
        n.c1 = c1;
        n.value = Matrix(m.rows, c1 - c0);
        for (int i = 0; i < m.rows; ++i)
            std::copy(m.row(i) + c0, m.row(i) + c1, n.value.row(i));
        return push_auto(std::move(n));
    }

    int concat_cols(std::span<const int> parts) {
        if (parts.empty()) throw std::invalid_argument("tape.concat_cols: no inputs");
        int total = 0;
        const int rows = val(parts[0]).rows;
        for (int p : parts) {
            if (val(p).rows != rows) throw std::invalid_argument("tape.concat_cols: row mismatch");
            total += val(p).cols;
        }
        Node n;
        n.op = Op::kConcatCols;
        n.multi.assign(parts.begin(), parts.end());
        n.value = Matrix(rows, total);
        int off = 0;
        for (int p : parts) {
            const Matrix& m = val(p);
            for (int i = 0; i < rows; ++i)
                std::copy(m.row(i), m.row(i) + m.cols, n.value.row(i) + off);
            off += m.cols;
        }
        return push_auto(std::move(n));
    }

    int frobenius_sq(int a) {
        Node n;
        n.op = Op::kFrobeniusSq;
        n.in0 = a;
        n.value = Matrix(1, 1);
        n.value.data[0] = foodcl::frobenius_sq(val(a));
        return push_auto(std::move(n));
    }

    // Mean of -log p(target[j] | logits row j) over the given positions.
    int nll_loss(int logits, std::span<const int> targets, std::span<const int> mask_positions) {
        const Matrix& lg = val(logits);
        if (static_cast<int>(targets.size()) != lg.rows)
            throw std::invalid_argument("tape.nll_loss: targets length " + std::to_string(targets.size()) +
                                        " vs logits rows " + std::to_string(lg.rows));
        if (mask_positions.empty()) throw std::invalid_argument("tape.nll_loss: empty mask");
        Node n;
        n.op = Op::kNllLoss;
        n.in0 = logits;
        n.ids.assign(targets.begin(), targets.end());
        n.mask.assign(mask_positions.begin(), mask_positions.end());
        n.saved.resize(n.mask.size() * static_cast<size_t>(lg.cols));
        double total = 0.0;
        for (size_t mi = 0; mi < n.mask.size(); ++mi) {
            const int pos = n.mask[mi];
            if (pos < 0 || pos >= lg.rows) throw std::out_of_range("tape.nll_loss: mask position outside logits");
            const int tgt = n.ids[pos];
            if (tgt < 0 || tgt >= lg.cols) throw std::out_of_range("tape.nll_loss: target id outside vocab");
            const double* row = lg.row(pos);
            double mx = row[0];
            for (int j = 1; j < lg.cols; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            double* probs = n.saved.data() + mi * lg.cols;
            for (int j = 0; j < lg.cols; ++j) {
                probs[j] = std::exp(row[j] - mx);
                denom += probs[j];
            }
            for (int j = 0; j < lg.cols; ++j) probs[j] /= denom;
            total += std::log(denom) + mx - row[tgt];
        }
        n.value = Matrix(1, 1);
        n.value.data[0] = total / static_cast<double>(n.mask.size());
        check_finite(n.value, "tape.nll_loss");
        return push_auto(std::move(n));
    }

    // ---- backward ----------------------------------------------------------

    void backward(int root) {
        Node& r = nodes_[check(root)];
        if (r.value.rows != 1 || r.value.cols != 1)
            throw std::invalid_argument("tape.backward: root must be scalar, got " + r.value.shape_str());
        if (!r.needs_grad) return;
        ensure_grad(root).data[0] = 1.0;
        for (int id = root; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.needs_grad || n.grad.empty()) continue;
            propagate(n);
        }
    }

private:
    std::vector<Node> nodes_;
    mutable Matrix zero_like_;

    int check(int id) const {
        if (id < 0 || id >= static_cast<int>(nodes_.size()))
            throw std::out_of_range("tape: bad node id " + std::to_string(id));
        return id;
    }

    const Matrix& val(int id) const { return nodes_[check(id)].value; }

    int push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int push_auto(Node n) {
        bool ng = false;
        for (int in : {n.in0, n.in1, n.in2})
            if (in >= 0 && nodes_[in].needs_grad) ng = true;
        for (int in : n.multi)
            if (nodes_[in].needs_grad) ng = true;
        n.needs_grad = ng;
        return push(std::move(n));
    }

    Matrix& ensure_grad(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad = Matrix(n.value.rows, n.value.cols);
        return n.grad;
    }

    // Accumulate into input grad only when that input participates in
    // training; adjoints of non-reachable nodes stay zero.
    bool wants(int id) const { return id >= 0 && nodes_[id].needs_grad; }

    static double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }

    static double gelu_bwd(double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
        const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
    }

    void propagate(Node& n) {
        const Matrix& g = n.grad;
        switch (n.op) {
            case Op::kLeaf:
                break;
            case Op::kMatMul: {
                if (wants(n.in0)) add_inplace(ensure_grad(n.in0), foodcl::matmul_nt(g, val(n.in1)));
                if (wants(n.in1)) add_inplace(ensure_grad(n.in1), foodcl::matmul_tn(val(n.in0), g));
                break;
            }
            case Op::kMatMulNT: {
                if (wants(n.in0)) add_inplace(ensure_grad(n.in0), foodcl::matmul(g, val(n.in1)));
                if (wants(n.in1)) add_inplace(ensure_grad(n.in1), foodcl::matmul_tn(g, val(n.in0)));
                break;
            }
            case Op::kAdd: {
                if (wants(n.in0)) add_inplace(ensure_grad(n.in0), g);
                if (wants(n.in1)) add_inplace(ensure_grad(n.in1), g);
                break;
            }
            case Op::kMul: {
                if (wants(n.in0)) {
                    Matrix& d = ensure_grad(n.in0);
                    const Matrix& other = val(n.in1);
                    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += g.data[i] * other.data[i];
                }
                if (wants(n.in1)) {
                    Matrix& d = ensure_grad(n.in1);
                    const Matrix& other = val(n.in0);
                    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += g.data[i] * other.data[i];
                }
                break;
            }
            case Op::kAddRow: {
                if (wants(n.in0)) add_inplace(ensure_grad(n.in0), g);
                if (wants(n.in1)) {
                    Matrix& d = ensure_grad(n.in1);
                    for (int i = 0; i < g.rows; ++i) {
                        const double* gi = g.row(i);
                        for (int j = 0; j < g.cols; ++j) d.data[j] += gi[j];
                    }
                }
                break;
            }
            case Op::kScale: {
                if (wants(n.in0)) axpy_inplace(ensure_grad(n.in0), n.c, g);
                break;
            }
            case Op::kGelu: {
                if (wants(n.in0)) {
                    Matrix& d = ensure_grad(n.in0);
                    const Matrix& x = val(n.in0);
                    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += g.data[i] * gelu_bwd(x.data[i]);
                }
                break;
            }
            case Op::kSoftmax: {
                if (!wants(n.in0)) break;
                Matrix& d = ensure_grad(n.in0);
                const Matrix& p = n.value;
                const bool causal = n.c0 != 0;
                for (int i = 0; i < p.rows; ++i) {
                    const int valid = causal ? i + 1 : p.cols;
                    const double* pi = p.row(i);
                    const double* gi = g.row(i);
                    double inner = 0.0;
                    for (int j = 0; j < valid; ++j) inner += gi[j] * pi[j];
                    double* di = d.row(i);
                    for (int j = 0; j < valid; ++j) di[j] += pi[j] * (gi[j] - inner);
                }
                break;
            }
            case Op::kLayerNorm: {
                const Matrix& x = val(n.in0);
                const Matrix& gamma = val(n.in1);
                const int dcols = x.cols;
                const bool wx = wants(n.in0), wg = wants(n.in1), wb = wants(n.in2);
                Matrix* dx = wx ? &ensure_grad(n.in0) : nullptr;
                Matrix* dg = wg ? &ensure_grad(n.in1) : nullptr;
                Matrix* db = wb ? &ensure_grad(n.in2) : nullptr;
                for (int i = 0; i < x.rows; ++i) {
                    const double mean = n.saved[2 * i];
                    const double inv_std = n.saved[2 * i + 1];
                    const double* xi = x.row(i);
                    const double* gi = g.row(i);
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int j = 0; j < dcols; ++j) {
                        const double xhat = (xi[j] - mean) * inv_std;
                        const double dxhat = gi[j] * gamma.data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        if (dg) dg->data[j] += gi[j] * xhat;
                        if (db) db->data[j] += gi[j];
                    }
                    if (dx) {
                        double* dxi = dx->row(i);
                        for (int j = 0; j < dcols; ++j) {
                            const double xhat = (xi[j] - mean) * inv_std;
                            const double dxhat = gi[j] * gamma.data[j];
                            dxi[j] += inv_std * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / dcols);
                        }
                    }
                }
                break;
            }
            case Op::kEmbedGather: {
                if (!wants(n.in0)) break;
                Matrix& d = ensure_grad(n.in0);
                for (size_t i = 0; i < n.ids.size(); ++i) {
                    const double* gi = g.row(static_cast<int>(i));
                    double* di = d.row(n.ids[i]);
                    for (int j = 0; j < g.cols; ++j) di[j] += gi[j];
                }
                break;
            }
            case Op::kSliceCols: {
                if (!wants(n.in0)) break;
                Matrix& d = ensure_grad(n.in0);
                for (int i = 0; i < g.rows; ++i) {
                    const double* gi = g.row(i);
                    double* di = d.row(i) + n.c0;
                    for (int j = 0; j < g.cols; ++j) di[j] += gi[j];
                }
                break;
            }
            case Op::kConcatCols: {
                int off = 0;
                for (int p : n.multi) {
                    const int w = val(p).cols;
                    if (wants(p)) {
                        Matrix& d = ensure_grad(p);
                        for (int i = 0; i < g.rows; ++i) {
                            const double* gi = g.row(i) + off;
                            double* di = d.row(i);
                            for (int j = 0; j < w; ++j) di[j] += gi[j];
                        }
                    }
                    off += w;
                }
                break;
            }
            case Op::kFrobeniusSq: {
                if (wants(n.in0)) axpy_inplace(ensure_grad(n.in0), 2.0 * g.data[0], val(n.in0));
                break;
            }
            case Op::kNllLoss: {
                if (!wants(n.in0)) break;
                Matrix& d = ensure_grad(n.in0);
                const double upstream = g.data[0] / static_cast<double>(n.mask.size());
                const int vocab = d.cols;
                for (size_t mi = 0; mi < n.mask.size(); ++mi) {
                    const int pos = n.mask[mi];
                    const double* probs = n.saved.data() + mi * vocab;
                    double* di = d.row(pos);
                    for (int j = 0; j < vocab; ++j) di[j] += upstream * probs[j];
                    di[n.ids[pos]] -= upstream;
                }
                break;
            }
        }
    }
};

}  // namespace foodcl
