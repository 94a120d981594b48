#include "ibmeta/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "ibmeta/simd.hpp"

namespace ibmeta::ad {

namespace {

void require(bool ok, const char* msg) {
    if (!ok) throw DimensionMismatch(msg);
}

// Flat index into a possibly-broadcast operand of an (r, c) output position.
inline int bidx(const Shape& s, int r, int c) {
    const int rr = s.rows == 1 ? 0 : r;
    const int cc = s.cols == 1 ? 0 : c;
    return rr * s.cols + cc;
}

bool dim_compatible(int a, int b) { return a == b || a == 1 || b == 1; }

Shape broadcast_shape(const Shape& a, const Shape& b, const char* opname) {
    if (!dim_compatible(a.rows, b.rows) || !dim_compatible(a.cols, b.cols))
        throw DimensionMismatch(std::string(opname) + ": shapes not broadcastable");
    return {std::max(a.rows, b.rows), std::max(a.cols, b.cols)};
}

bool same_shape(const Shape& a, const Shape& b) { return a.rows == b.rows && a.cols == b.cols; }

double powc_eval(double x, double p) {
    if (p == 2.0) return x * x;
    if (p == -1.0) return 1.0 / x;
    if (p == 0.5) return std::sqrt(x);
    if (p == -0.5) return 1.0 / std::sqrt(x);
    return std::pow(x, p);
}

}  // namespace

// ---------------- ParamSet ----------------

int ParamSet::add(const std::string& name, int rows, int cols, std::vector<double> init) {
    require(static_cast<int>(init.size()) == rows * cols, "ParamSet::add: init size mismatch");
    require(index_.count(name) == 0, "ParamSet::add: duplicate name");
    index_[name] = static_cast<int>(entries_.size());
    entries_.push_back(Entry{name, rows, cols, std::move(init)});
    return static_cast<int>(entries_.size()) - 1;
}

int ParamSet::add_scalar(const std::string& name, double init) {
    return add(name, 1, 1, {init});
}

int ParamSet::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
}

const ParamSet::Entry& ParamSet::entry(const std::string& name) const {
    const int i = find(name);
    require(i >= 0, "ParamSet: unknown entry name");
    return entries_[i];
}

ParamSet::Entry& ParamSet::entry(const std::string& name) {
    const int i = find(name);
    require(i >= 0, "ParamSet: unknown entry name");
    return entries_[i];
}

int ParamSet::total_size() const {
    int n = 0;
    for (const auto& e : entries_) n += static_cast<int>(e.value.size());
    return n;
}

std::vector<double> ParamSet::flatten() const {
    std::vector<double> out;
    out.reserve(total_size());
    for (const auto& e : entries_) out.insert(out.end(), e.value.begin(), e.value.end());
    return out;
}

void ParamSet::set_flat(const std::vector<double>& flat) {
    require(static_cast<int>(flat.size()) == total_size(), "ParamSet::set_flat: size mismatch");
    size_t off = 0;
    for (auto& e : entries_) {
        std::copy(flat.begin() + off, flat.begin() + off + e.value.size(), e.value.begin());
        off += e.value.size();
    }
}

// ---------------- Tape: recording ----------------

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::constant(const DenseMatrix& m) {
    Node n;
    n.op = Op::Constant;
    n.shape = {m.rows, m.cols};
    n.val = m.data;
    return {push(std::move(n))};
}

Var Tape::constant(double v) {
    Node n;
    n.op = Op::Constant;
    n.shape = {1, 1};
    n.val = {v};
    return {push(std::move(n))};
}

Var Tape::constant(const std::vector<double>& column) {
    Node n;
    n.op = Op::Constant;
    n.shape = {static_cast<int>(column.size()), 1};
    n.val = column;
    return {push(std::move(n))};
}

Var Tape::param(const ParamSet& ps, const std::string& name) {
    const int slot = ps.find(name);
    require(slot >= 0, "Tape::param: unknown parameter name");
    return param_slot_var(ps, slot);
}

Var Tape::param_slot_var(const ParamSet& ps, int slot) {
    auto it = param_nodes_.find(slot);
    if (it != param_nodes_.end()) return {it->second};
    const auto& e = ps.entry(slot);
    Node n;
    n.op = Op::Param;
    n.shape = {e.rows, e.cols};
    n.val = e.value;
    n.param_slot = slot;
    const int idx = push(std::move(n));
    param_nodes_[slot] = idx;
    return {idx};
}

namespace {
enum class BinKind { Add, Sub, Mul };
}

Var Tape::add(Var a, Var b) {
    const Node& na = at(a);
    const Node& nb = at(b);
    Node n;
    n.op = Op::Add;
    n.shape = broadcast_shape(na.shape, nb.shape, "add");
    n.a = a.i;
    n.b = b.i;
    n.val.resize(n.shape.size());
    if (same_shape(na.shape, nb.shape)) {
        simd::active().add(na.val.data(), nb.val.data(), n.val.data(), n.val.size());
    } else {
        for (int r = 0; r < n.shape.rows; ++r)
            for (int c = 0; c < n.shape.cols; ++c)
                n.val[r * n.shape.cols + c] =
                    na.val[bidx(na.shape, r, c)] + nb.val[bidx(nb.shape, r, c)];
    }
    return {push(std::move(n))};
}

Var Tape::sub(Var a, Var b) {
    const Node& na = at(a);
    const Node& nb = at(b);
    Node n;
    n.op = Op::Sub;
    n.shape = broadcast_shape(na.shape, nb.shape, "sub");
    n.a = a.i;
    n.b = b.i;
    n.val.resize(n.shape.size());
    if (same_shape(na.shape, nb.shape)) {
        simd::active().sub(na.val.data(), nb.val.data(), n.val.data(), n.val.size());
    } else {
        for (int r = 0; r < n.shape.rows; ++r)
            for (int c = 0; c < n.shape.cols; ++c)
                n.val[r * n.shape.cols + c] =
                    na.val[bidx(na.shape, r, c)] - nb.val[bidx(nb.shape, r, c)];
    }
    return {push(std::move(n))};
}

Var Tape::mul(Var a, Var b) {
    const Node& na = at(a);
    const Node& nb = at(b);
    Node n;
    n.op = Op::Mul;
    n.shape = broadcast_shape(na.shape, nb.shape, "mul");
    n.a = a.i;
    n.b = b.i;
    n.val.resize(n.shape.size());
    if (same_shape(na.shape, nb.shape)) {
        simd::active().mul(na.val.data(), nb.val.data(), n.val.data(), n.val.size());
    } else {
        for (int r = 0; r < n.shape.rows; ++r)
            for (int c = 0; c < n.shape.cols; ++c)
                n.val[r * n.shape.cols + c] =
                    na.val[bidx(na.shape, r, c)] * nb.val[bidx(nb.shape, r, c)];
    }
    return {push(std::move(n))};
}

Var Tape::scale_add(Var a, double scale, double offset) {
    const Node& na = at(a);
    Node n;
    n.op = Op::ScaleAdd;
    n.shape = na.shape;
    n.a = a.i;
    n.c0 = scale;
    n.c1 = offset;
    n.val.resize(na.val.size());
    for (size_t i = 0; i < na.val.size(); ++i) n.val[i] = scale * na.val[i] + offset;
    return {push(std::move(n))};
}

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
    const Node& na = at(a);
    const Node& nb = at(b);
    DenseMatrix ma(na.shape.rows, na.shape.cols, na.val);
    DenseMatrix mb(nb.shape.rows, nb.shape.cols, nb.val);
    DenseMatrix mc = ibmeta::matmul(ma, mb, trans_a, trans_b);
    Node n;
    n.op = Op::MatMul;
    n.shape = {mc.rows, mc.cols};
    n.a = a.i;
    n.b = b.i;
    n.flag = (trans_a ? 1 : 0) | (trans_b ? 2 : 0);
    n.val = std::move(mc.data);
    return {push(std::move(n))};
}

namespace {
Tape::Node unary_node(Op op, const Tape::Node& na, int a_idx) {
    Tape::Node n;
    n.op = op;
    n.shape = na.shape;
    n.a = a_idx;
    n.val.resize(na.val.size());
    return n;
}
}  // namespace

Var Tape::exp(Var a) {
    Node n = unary_node(Op::Exp, at(a), a.i);
    simd::active().exp(at(a).val.data(), n.val.data(), n.val.size());
    return {push(std::move(n))};
}

Var Tape::log(Var a) {
    Node n = unary_node(Op::Log, at(a), a.i);
    simd::active().log(at(a).val.data(), n.val.data(), n.val.size());
    return {push(std::move(n))};
}

Var Tape::tanh(Var a) {
    Node n = unary_node(Op::Tanh, at(a), a.i);
    simd::active().tanh(at(a).val.data(), n.val.data(), n.val.size());
    return {push(std::move(n))};
}

Var Tape::relu(Var a) {
    Node n = unary_node(Op::Relu, at(a), a.i);
    simd::active().relu(at(a).val.data(), n.val.data(), n.val.size());
    return {push(std::move(n))};
}

Var Tape::softplus(Var a) {
    Node n = unary_node(Op::Softplus, at(a), a.i);
    simd::active().softplus(at(a).val.data(), n.val.data(), n.val.size());
    return {push(std::move(n))};
}

Var Tape::powc(Var a, double p) {
    Node n = unary_node(Op::PowC, at(a), a.i);
    n.c0 = p;
    const auto& x = at(a).val;
    for (size_t i = 0; i < x.size(); ++i) n.val[i] = powc_eval(x[i], p);
    return {push(std::move(n))};
}

Var Tape::clamp(Var a, double lo, double hi) {
    Node n = unary_node(Op::Clamp, at(a), a.i);
    n.c0 = lo;
    n.c1 = hi;
    simd::active().clamp(at(a).val.data(), lo, hi, n.val.data(), n.val.size());
    return {push(std::move(n))};
}

Var Tape::sum(Var a) {
    Node n;
    n.op = Op::Sum;
    n.shape = {1, 1};
    n.a = a.i;
    n.val = {simd::active().sum(at(a).val.data(), at(a).val.size())};
    return {push(std::move(n))};
}

Var Tape::sum_rows(Var a) {
    const Node& na = at(a);
    Node n;
    n.op = Op::SumRows;
    n.shape = {na.shape.rows, 1};
    n.a = a.i;
    n.val.resize(na.shape.rows);
    for (int r = 0; r < na.shape.rows; ++r)
        n.val[r] = simd::active().sum(na.val.data() + static_cast<size_t>(r) * na.shape.cols,
                                      na.shape.cols);
    return {push(std::move(n))};
}

Var Tape::sum_cols(Var a) {
    const Node& na = at(a);
    Node n;
    n.op = Op::SumCols;
    n.shape = {1, na.shape.cols};
    n.a = a.i;
    n.val.assign(na.shape.cols, 0.0);
    for (int r = 0; r < na.shape.rows; ++r)
        simd::active().axpy(1.0, na.val.data() + static_cast<size_t>(r) * na.shape.cols,
                            n.val.data(), na.shape.cols);
    return {push(std::move(n))};
}

Var Tape::transpose(Var a) {
    const Node& na = at(a);
    Node n;
    n.op = Op::Transpose;
    n.shape = {na.shape.cols, na.shape.rows};
    n.a = a.i;
    n.val.resize(na.val.size());
    for (int r = 0; r < na.shape.rows; ++r)
        for (int c = 0; c < na.shape.cols; ++c)
            n.val[c * na.shape.rows + r] = na.val[r * na.shape.cols + c];
    return {push(std::move(n))};
}

Var Tape::repeat_rows(Var a, int copies) {
    require(copies >= 1, "repeat_rows: copies must be >= 1");
    const Node& na = at(a);
    Node n;
    n.op = Op::RepeatRows;
    n.shape = {na.shape.rows * copies, na.shape.cols};
    n.a = a.i;
    n.c0 = copies;
    n.val.resize(n.shape.size());
    for (int k = 0; k < copies; ++k)
        std::copy(na.val.begin(), na.val.end(), n.val.begin() + static_cast<size_t>(k) * na.val.size());
    return {push(std::move(n))};
}

Var Tape::logsumexp_rows(Var a) {
    const Node& na = at(a);
    Node n;
    n.op = Op::LogSumExpRows;
    n.shape = {na.shape.rows, 1};
    n.a = a.i;
    n.val.resize(na.shape.rows);
    const int m = na.shape.cols;
    for (int r = 0; r < na.shape.rows; ++r) {
        const double* row = na.val.data() + static_cast<size_t>(r) * m;
        double mx = row[0];
        for (int c = 1; c < m; ++c) mx = std::max(mx, row[c]);
        double acc = 0.0;
        for (int c = 0; c < m; ++c) acc += std::exp(row[c] - mx);
        n.val[r] = mx + std::log(acc);
    }
    return {push(std::move(n))};
}

Var Tape::diag_part(Var a) {
    const Node& na = at(a);
    require(na.shape.rows == na.shape.cols, "diag_part: matrix not square");
    Node n;
    n.op = Op::DiagPart;
    n.shape = {na.shape.rows, 1};
    n.a = a.i;
    n.val.resize(na.shape.rows);
    for (int r = 0; r < na.shape.rows; ++r) n.val[r] = na.val[r * na.shape.cols + r];
    return {push(std::move(n))};
}

Var Tape::add_diag(Var a, Var d) {
    const Node& na = at(a);
    const Node& nd = at(d);
    require(na.shape.rows == na.shape.cols, "add_diag: matrix not square");
    require(nd.shape.rows == na.shape.rows && nd.shape.cols == 1, "add_diag: diag shape mismatch");
    Node n;
    n.op = Op::AddDiag;
    n.shape = na.shape;
    n.a = a.i;
    n.b = d.i;
    n.val = na.val;
    for (int r = 0; r < na.shape.rows; ++r) n.val[r * na.shape.cols + r] += nd.val[r];
    return {push(std::move(n))};
}

Var Tape::append_ones_col(Var a) {
    const Node& na = at(a);
    Node n;
    n.op = Op::AppendOnesCol;
    n.shape = {na.shape.rows, na.shape.cols + 1};
    n.a = a.i;
    n.val.resize(n.shape.size());
    for (int r = 0; r < na.shape.rows; ++r) {
        const double* src = na.val.data() + static_cast<size_t>(r) * na.shape.cols;
        double* dst = n.val.data() + static_cast<size_t>(r) * n.shape.cols;
        std::copy(src, src + na.shape.cols, dst);
        dst[na.shape.cols] = 1.0;
    }
    return {push(std::move(n))};
}

Var Tape::cholesky(Var a, double jitter) {
    const Node& na = at(a);
    DenseMatrix ma(na.shape.rows, na.shape.cols, na.val);
    LowerTriangular l = ibmeta::cholesky(ma, jitter);
    Node n;
    n.op = Op::Cholesky;
    n.shape = na.shape;
    n.a = a.i;
    n.c0 = jitter;
    n.val = std::move(l.data);
    return {push(std::move(n))};
}

Var Tape::tri_solve(Var l, Var b, bool transposed) {
    const Node& nl = at(l);
    const Node& nb = at(b);
    require(nl.shape.rows == nl.shape.cols, "tri_solve: factor not square");
    LowerTriangular lt(nl.shape.rows);
    lt.data = nl.val;
    DenseMatrix mb(nb.shape.rows, nb.shape.cols, nb.val);
    DenseMatrix x = solve_triangular(lt, mb, transposed ? TriSide::LowerTransposed : TriSide::Lower);
    Node n;
    n.op = Op::TriSolve;
    n.shape = nb.shape;
    n.a = l.i;
    n.b = b.i;
    n.flag = transposed ? 1 : 0;
    n.val = std::move(x.data);
    return {push(std::move(n))};
}

Var Tape::log_det_from_chol(Var l) {
    const Node& nl = at(l);
    require(nl.shape.rows == nl.shape.cols, "log_det_from_chol: factor not square");
    double acc = 0.0;
    for (int i = 0; i < nl.shape.rows; ++i) acc += std::log(nl.val[i * nl.shape.cols + i]);
    Node n;
    n.op = Op::LogDetFromChol;
    n.shape = {1, 1};
    n.a = l.i;
    n.val = {2.0 * acc};
    return {push(std::move(n))};
}

Var Tape::quadratic_form(Var l, Var x) {
    const Node& nl = at(l);
    const Node& nx = at(x);
    require(nx.shape.cols == 1, "quadratic_form: x must be a column");
    require(nl.shape.rows == nx.shape.rows, "quadratic_form: dimensions differ");
    LowerTriangular lt(nl.shape.rows);
    lt.data = nl.val;
    DenseMatrix w = solve_triangular(lt, DenseMatrix(nx.shape.rows, 1, nx.val), TriSide::Lower);
    Node n;
    n.op = Op::QuadraticForm;
    n.shape = {1, 1};
    n.a = l.i;
    n.b = x.i;
    n.val = {simd::active().dot(w.data.data(), w.data.data(), w.data.size())};
    n.aux = std::move(w.data);
    return {push(std::move(n))};
}

double Tape::value(Var v) const {
    require(at(v).shape.size() == 1, "Tape::value: node is not scalar");
    return at(v).val[0];
}

DenseMatrix Tape::matrix(Var v) const {
    const Node& n = at(v);
    return DenseMatrix(n.shape.rows, n.shape.cols, n.val);
}

// ---------------- Tape: buffer-mode backward ----------------

namespace {

// adj[target] += g (elementwise-times factor when given), reducing over
// broadcast dimensions of the target.
void accumulate_bcast(std::vector<double>& tgt, const Shape& tgt_shape, const Shape& out_shape,
                      const double* g, const double* factor, const Shape& factor_shape) {
    const auto& k = simd::active();
    if (same_shape(tgt_shape, out_shape)) {
        if (factor == nullptr) {
            k.axpy(1.0, g, tgt.data(), tgt.size());
            return;
        }
        if (same_shape(factor_shape, out_shape)) {
            k.mul_add(g, factor, tgt.data(), tgt.size());
            return;
        }
    }
    for (int r = 0; r < out_shape.rows; ++r)
        for (int c = 0; c < out_shape.cols; ++c) {
            const double gv = g[r * out_shape.cols + c];
            const double fv = factor ? factor[bidx(factor_shape, r, c)] : 1.0;
            tgt[bidx(tgt_shape, r, c)] += gv * fv;
        }
}

void mask_lower_inplace(DenseMatrix& m) {
    for (int r = 0; r < m.rows; ++r)
        for (int c = r + 1; c < m.cols; ++c) m.at(r, c) = 0.0;
}

}  // namespace

void Tape::backward(Var root) {
    require(at(root).shape.size() == 1, "backward: root must be scalar");
    for (auto& n : nodes_) n.adj.clear();
    nodes_[root.i].adj.assign(1, 1.0);

    auto adj_of = [&](int idx) -> std::vector<double>& {
        Node& n = nodes_[idx];
        if (n.adj.empty()) n.adj.assign(n.shape.size(), 0.0);
        return n.adj;
    };

    const auto& kr = simd::active();
    for (int i = root.i; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.adj.empty()) continue;
        const double* g = n.adj.data();
        switch (n.op) {
            case Op::Constant:
            case Op::Param:
                break;
            case Op::Add: {
                accumulate_bcast(adj_of(n.a), nodes_[n.a].shape, n.shape, g, nullptr, {});
                accumulate_bcast(adj_of(n.b), nodes_[n.b].shape, n.shape, g, nullptr, {});
                break;
            }
            case Op::Sub: {
                accumulate_bcast(adj_of(n.a), nodes_[n.a].shape, n.shape, g, nullptr, {});
                std::vector<double> ng(n.adj.size());
                for (size_t t = 0; t < ng.size(); ++t) ng[t] = -g[t];
                accumulate_bcast(adj_of(n.b), nodes_[n.b].shape, n.shape, ng.data(), nullptr, {});
                break;
            }
            case Op::Mul: {
                accumulate_bcast(adj_of(n.a), nodes_[n.a].shape, n.shape, g,
                                 nodes_[n.b].val.data(), nodes_[n.b].shape);
                accumulate_bcast(adj_of(n.b), nodes_[n.b].shape, n.shape, g,
                                 nodes_[n.a].val.data(), nodes_[n.a].shape);
                break;
            }
            case Op::ScaleAdd: {
                kr.axpy(n.c0, g, adj_of(n.a).data(), n.adj.size());
                break;
            }
            case Op::MatMul: {
                const bool ta = (n.flag & 1) != 0;
                const bool tb = (n.flag & 2) != 0;
                const Node& na = nodes_[n.a];
                const Node& nb = nodes_[n.b];
                DenseMatrix mg(n.shape.rows, n.shape.cols, n.adj);
                DenseMatrix ma(na.shape.rows, na.shape.cols, na.val);
                DenseMatrix mb(nb.shape.rows, nb.shape.cols, nb.val);
                DenseMatrix da = ta ? ibmeta::matmul(mb, mg, tb, true)
                                    : ibmeta::matmul(mg, mb, false, !tb);
                DenseMatrix db = tb ? ibmeta::matmul(mg, ma, true, ta)
                                    : ibmeta::matmul(ma, mg, !ta, false);
                kr.axpy(1.0, da.data.data(), adj_of(n.a).data(), da.data.size());
                kr.axpy(1.0, db.data.data(), adj_of(n.b).data(), db.data.size());
                break;
            }
            case Op::Exp: {
                kr.mul_add(g, n.val.data(), adj_of(n.a).data(), n.adj.size());
                break;
            }
            case Op::Log: {
                auto& tgt = adj_of(n.a);
                const auto& x = nodes_[n.a].val;
                for (size_t t = 0; t < tgt.size(); ++t) tgt[t] += g[t] / x[t];
                break;
            }
            case Op::Tanh: {
                auto& tgt = adj_of(n.a);
                for (size_t t = 0; t < tgt.size(); ++t)
                    tgt[t] += g[t] * (1.0 - n.val[t] * n.val[t]);
                break;
            }
            case Op::Relu: {
                kr.relu_mask_add(nodes_[n.a].val.data(), g, adj_of(n.a).data(), n.adj.size());
                break;
            }
            case Op::Softplus: {
                auto& tgt = adj_of(n.a);
                const auto& x = nodes_[n.a].val;
                for (size_t t = 0; t < tgt.size(); ++t)
                    tgt[t] += g[t] / (1.0 + std::exp(-x[t]));
                break;
            }
            case Op::PowC: {
                auto& tgt = adj_of(n.a);
                const auto& x = nodes_[n.a].val;
                for (size_t t = 0; t < tgt.size(); ++t)
                    tgt[t] += g[t] * n.c0 * powc_eval(x[t], n.c0 - 1.0);
                break;
            }
            case Op::Clamp: {
                auto& tgt = adj_of(n.a);
                const auto& x = nodes_[n.a].val;
                for (size_t t = 0; t < tgt.size(); ++t)
                    if (x[t] > n.c0 && x[t] < n.c1) tgt[t] += g[t];
                break;
            }
            case Op::Sum: {
                auto& tgt = adj_of(n.a);
                const double gv = g[0];
                for (auto& t : tgt) t += gv;
                break;
            }
            case Op::SumRows: {
                auto& tgt = adj_of(n.a);
                const Shape& as = nodes_[n.a].shape;
                for (int r = 0; r < as.rows; ++r) {
                    const double gv = g[r];
                    double* row = tgt.data() + static_cast<size_t>(r) * as.cols;
                    for (int c = 0; c < as.cols; ++c) row[c] += gv;
                }
                break;
            }
            case Op::SumCols: {
                auto& tgt = adj_of(n.a);
                const Shape& as = nodes_[n.a].shape;
                for (int r = 0; r < as.rows; ++r)
                    kr.axpy(1.0, g, tgt.data() + static_cast<size_t>(r) * as.cols, as.cols);
                break;
            }
            case Op::Transpose: {
                auto& tgt = adj_of(n.a);
                const Shape& as = nodes_[n.a].shape;
                for (int r = 0; r < as.rows; ++r)
                    for (int c = 0; c < as.cols; ++c)
                        tgt[r * as.cols + c] += g[c * as.rows + r];
                break;
            }
            case Op::RepeatRows: {
                auto& tgt = adj_of(n.a);
                const int copies = static_cast<int>(n.c0);
                for (int k = 0; k < copies; ++k)
                    kr.axpy(1.0, g + static_cast<size_t>(k) * tgt.size(), tgt.data(), tgt.size());
                break;
            }
            case Op::LogSumExpRows: {
                auto& tgt = adj_of(n.a);
                const Shape& as = nodes_[n.a].shape;
                const auto& x = nodes_[n.a].val;
                for (int r = 0; r < as.rows; ++r) {
                    const double gv = g[r];
                    const double lse = n.val[r];
                    for (int c = 0; c < as.cols; ++c)
                        tgt[r * as.cols + c] += gv * std::exp(x[r * as.cols + c] - lse);
                }
                break;
            }
            case Op::DiagPart: {
                auto& tgt = adj_of(n.a);
                const int m = nodes_[n.a].shape.cols;
                for (int r = 0; r < n.shape.rows; ++r) tgt[r * m + r] += g[r];
                break;
            }
            case Op::AddDiag: {
                kr.axpy(1.0, g, adj_of(n.a).data(), n.adj.size());
                auto& tgtd = adj_of(n.b);
                const int m = n.shape.cols;
                for (int r = 0; r < n.shape.rows; ++r) tgtd[r] += g[r * m + r];
                break;
            }
            case Op::AppendOnesCol: {
                auto& tgt = adj_of(n.a);
                const Shape& as = nodes_[n.a].shape;
                for (int r = 0; r < as.rows; ++r)
                    kr.axpy(1.0, g + static_cast<size_t>(r) * n.shape.cols,
                            tgt.data() + static_cast<size_t>(r) * as.cols, as.cols);
                break;
            }
            case Op::Cholesky: {
                const int d = n.shape.rows;
                LowerTriangular lt(d);
                lt.data = n.val;
                DenseMatrix lbar(d, d, n.adj);
                mask_lower_inplace(lbar);
                DenseMatrix lmat(d, d, n.val);
                DenseMatrix m = ibmeta::matmul(lmat, lbar, true, false);
                // Phi(M) + Phi(M)^T with the diagonal halved in Phi
                DenseMatrix q(d, d);
                for (int r = 0; r < d; ++r) {
                    q.at(r, r) = m.at(r, r);
                    for (int c = 0; c < r; ++c) {
                        q.at(r, c) = m.at(r, c);
                        q.at(c, r) = m.at(r, c);
                    }
                }
                DenseMatrix y = solve_triangular(lt, q, TriSide::LowerTransposed);
                DenseMatrix yt = ibmeta::transpose(y);
                DenseMatrix xt = solve_triangular(lt, yt, TriSide::LowerTransposed);
                DenseMatrix x = ibmeta::transpose(xt);
                // forward reads the lower triangle only, so fold the
                // symmetric adjoint 0.5*X onto the lower triangle
                auto& tgt = adj_of(n.a);
                for (int r = 0; r < d; ++r) {
                    tgt[r * d + r] += 0.5 * x.at(r, r);
                    for (int c = 0; c < r; ++c) tgt[r * d + c] += 0.5 * (x.at(r, c) + x.at(c, r));
                }
                break;
            }
            case Op::TriSolve: {
                const bool transposed = n.flag == 1;
                const Node& nl = nodes_[n.a];
                LowerTriangular lt(nl.shape.rows);
                lt.data = nl.val;
                DenseMatrix xbar(n.shape.rows, n.shape.cols, n.adj);
                DenseMatrix x(n.shape.rows, n.shape.cols, n.val);
                DenseMatrix bbar = solve_triangular(
                    lt, xbar, transposed ? TriSide::Lower : TriSide::LowerTransposed);
                DenseMatrix lbar = transposed ? ibmeta::matmul(x, bbar, false, true)
                                              : ibmeta::matmul(bbar, x, false, true);
                for (auto& v : lbar.data) v = -v;
                mask_lower_inplace(lbar);
                kr.axpy(1.0, lbar.data.data(), adj_of(n.a).data(), lbar.data.size());
                kr.axpy(1.0, bbar.data.data(), adj_of(n.b).data(), bbar.data.size());
                break;
            }
            case Op::LogDetFromChol: {
                auto& tgt = adj_of(n.a);
                const int d = nodes_[n.a].shape.rows;
                const auto& lv = nodes_[n.a].val;
                for (int r = 0; r < d; ++r) tgt[r * d + r] += 2.0 * g[0] / lv[r * d + r];
                break;
            }
            case Op::QuadraticForm: {
                const Node& nl = nodes_[n.a];
                const int d = nl.shape.rows;
                LowerTriangular lt(d);
                lt.data = nl.val;
                DenseMatrix w(d, 1, n.aux);
                DenseMatrix u = solve_triangular(lt, w, TriSide::LowerTransposed);
                const double gv = g[0];
                kr.axpy(2.0 * gv, u.data.data(), adj_of(n.b).data(), u.data.size());
                auto& tgtl = adj_of(n.a);
                for (int r = 0; r < d; ++r)
                    for (int c = 0; c <= r; ++c)
                        tgtl[r * d + c] += -2.0 * gv * u.at(r, 0) * w.at(c, 0);
                break;
            }
        }
    }
}

std::vector<double> Tape::gradient(Var root, const ParamSet& ps) {
    backward(root);
    std::vector<double> out;
    out.reserve(ps.total_size());
    for (int slot = 0; slot < ps.count(); ++slot) {
        const auto& e = ps.entry(slot);
        auto it = param_nodes_.find(slot);
        if (it == param_nodes_.end() || nodes_[it->second].adj.empty()) {
            out.insert(out.end(), e.value.size(), 0.0);
        } else {
            const auto& adj = nodes_[it->second].adj;
            out.insert(out.end(), adj.begin(), adj.end());
        }
    }
    for (double v : out)
        if (!std::isfinite(v)) throw NonFiniteGradient("gradient: non-finite component");
    return out;
}

// ---------------- Tape: graph-mode backward ----------------

std::vector<Var> Tape::grad_graph(Var root, const std::vector<Var>& leaves) {
    require(at(root).shape.size() == 1, "grad_graph: root must be scalar");
    const int top = root.i;
    std::vector<int> advar(static_cast<size_t>(top) + 1, -1);
    advar[top] = constant(1.0).i;

    auto accum = [&](int idx, Var contrib) {
        if (idx > top) throw DimensionMismatch("grad_graph: node ordering broken");
        advar[idx] = advar[idx] < 0 ? contrib.i : add(Var{advar[idx]}, contrib).i;
    };
    auto reduce_to = [&](Var g, Shape target) -> Var {
        const Shape gs = shape(g);
        if (same_shape(gs, target)) return g;
        if (target.rows == 1 && target.cols == 1) return sum(g);
        if (target.cols == 1 && target.rows == gs.rows) return sum_rows(g);
        if (target.rows == 1 && target.cols == gs.cols) return sum_cols(g);
        throw DimensionMismatch("grad_graph: cannot reduce adjoint to input shape");
    };

    for (int i = top; i >= 0; --i) {
        if (advar[i] < 0) continue;
        const Node snapshot = nodes_[i];  // emitting ops may reallocate nodes_
        const Var g{advar[i]};
        switch (snapshot.op) {
            case Op::Constant:
            case Op::Param:
                break;
            case Op::Add: {
                // copy the shapes out first: the emitting calls below may
                // reallocate nodes_ under a reference into it
                const Shape sa = nodes_[snapshot.a].shape;
                const Shape sb = nodes_[snapshot.b].shape;
                accum(snapshot.a, reduce_to(g, sa));
                accum(snapshot.b, reduce_to(g, sb));
                break;
            }
            case Op::Sub: {
                const Shape sa = nodes_[snapshot.a].shape;
                const Shape sb = nodes_[snapshot.b].shape;
                accum(snapshot.a, reduce_to(g, sa));
                accum(snapshot.b, reduce_to(scale_add(g, -1.0), sb));
                break;
            }
            case Op::Mul: {
                const Shape sa = nodes_[snapshot.a].shape;
                const Shape sb = nodes_[snapshot.b].shape;
                accum(snapshot.a, reduce_to(mul(g, Var{snapshot.b}), sa));
                accum(snapshot.b, reduce_to(mul(g, Var{snapshot.a}), sb));
                break;
            }
            case Op::ScaleAdd: {
                accum(snapshot.a, scale_add(g, snapshot.c0));
                break;
            }
            case Op::MatMul: {
                const bool ta = (snapshot.flag & 1) != 0;
                const bool tb = (snapshot.flag & 2) != 0;
                const Var a{snapshot.a}, b{snapshot.b};
                Var da = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                Var db = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                accum(snapshot.a, da);
                accum(snapshot.b, db);
                break;
            }
            case Op::Exp: {
                accum(snapshot.a, mul(g, Var{i}));
                break;
            }
            case Op::Log: {
                accum(snapshot.a, mul(g, powc(Var{snapshot.a}, -1.0)));
                break;
            }
            case Op::Tanh: {
                Var one = constant(1.0);
                accum(snapshot.a, mul(g, sub(one, mul(Var{i}, Var{i}))));
                break;
            }
            case Op::Relu: {
                const Node& na = nodes_[snapshot.a];
                DenseMatrix mask(na.shape.rows, na.shape.cols);
                for (size_t t = 0; t < na.val.size(); ++t)
                    mask.data[t] = na.val[t] > 0.0 ? 1.0 : 0.0;
                accum(snapshot.a, mul(g, constant(mask)));
                break;
            }
            case Op::Softplus: {
                Var one = constant(1.0);
                Var sig = powc(add(one, exp(scale_add(Var{snapshot.a}, -1.0))), -1.0);
                accum(snapshot.a, mul(g, sig));
                break;
            }
            case Op::PowC: {
                Var d = scale_add(powc(Var{snapshot.a}, snapshot.c0 - 1.0), snapshot.c0);
                accum(snapshot.a, mul(g, d));
                break;
            }
            case Op::Clamp: {
                const Node& na = nodes_[snapshot.a];
                DenseMatrix mask(na.shape.rows, na.shape.cols);
                for (size_t t = 0; t < na.val.size(); ++t)
                    mask.data[t] = (na.val[t] > snapshot.c0 && na.val[t] < snapshot.c1) ? 1.0 : 0.0;
                accum(snapshot.a, mul(g, constant(mask)));
                break;
            }
            case Op::Sum: {
                const Shape as = nodes_[snapshot.a].shape;
                DenseMatrix ones(as.rows, as.cols);
                std::fill(ones.data.begin(), ones.data.end(), 1.0);
                accum(snapshot.a, mul(constant(ones), g));
                break;
            }
            case Op::SumRows:
            case Op::SumCols: {
                const Shape as = nodes_[snapshot.a].shape;
                DenseMatrix ones(as.rows, as.cols);
                std::fill(ones.data.begin(), ones.data.end(), 1.0);
                accum(snapshot.a, mul(constant(ones), g));
                break;
            }
            case Op::Transpose: {
                accum(snapshot.a, transpose(g));
                break;
            }
            case Op::LogSumExpRows: {
                Var softmax = exp(sub(Var{snapshot.a}, Var{i}));
                accum(snapshot.a, mul(softmax, g));
                break;
            }
            case Op::AppendOnesCol: {
                const Shape as = nodes_[snapshot.a].shape;
                DenseMatrix sel(as.cols + 1, as.cols);
                for (int c = 0; c < as.cols; ++c) sel.at(c, c) = 1.0;
                accum(snapshot.a, matmul(g, constant(sel)));
                break;
            }
            case Op::AddDiag: {
                accum(snapshot.a, g);
                accum(snapshot.b, diag_part(g));
                break;
            }
            case Op::DiagPart: {
                const Shape as = nodes_[snapshot.a].shape;
                DenseMatrix ones_row(1, as.cols);
                std::fill(ones_row.data.begin(), ones_row.data.end(), 1.0);
                Var spread = matmul(g, constant(ones_row));
                accum(snapshot.a, mul(spread, constant(DenseMatrix::identity(as.rows))));
                break;
            }
            case Op::RepeatRows:
            case Op::Cholesky:
            case Op::TriSolve:
            case Op::LogDetFromChol:
            case Op::QuadraticForm:
                throw DimensionMismatch("grad_graph: op has no graph-mode backward");
        }
    }

    std::vector<Var> out;
    out.reserve(leaves.size());
    for (Var leaf : leaves) {
        if (leaf.i <= top && advar[leaf.i] >= 0) {
            out.push_back(Var{advar[leaf.i]});
        } else {
            const Shape s = shape(leaf);
            out.push_back(constant(DenseMatrix(s.rows, s.cols)));
        }
    }
    return out;
}

double check_gradient(const std::function<double(ParamSet&)>& f, ParamSet& params,
                      const std::vector<double>& analytic, double h) {
    std::vector<double> flat = params.flatten();
    require(analytic.size() == flat.size(), "check_gradient: gradient size mismatch");
    double worst = 0.0;
    for (size_t i = 0; i < flat.size(); ++i) {
        const double keep = flat[i];
        flat[i] = keep + h;
        params.set_flat(flat);
        const double up = f(params);
        flat[i] = keep - h;
        params.set_flat(flat);
        const double down = f(params);
        flat[i] = keep;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
        worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
    }
    params.set_flat(flat);
    return worst;
}

}  // namespace ibmeta::ad
