#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ibmeta/errors.hpp"
#include "ibmeta/linalg.hpp"

namespace ibmeta::ad {

// Named, ordered collection of trainable arrays. Gradient vectors are laid
// out in entry insertion order.
class ParamSet {
public:
    struct Entry {
        std::string name;
        int rows = 0;
        int cols = 0;
        std::vector<double> value;
    };

    int add(const std::string& name, int rows, int cols, std::vector<double> init);
    int add_scalar(const std::string& name, double init);
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    int find(const std::string& name) const;  // -1 when absent
    const Entry& entry(int i) const { return entries_[i]; }
    Entry& entry(int i) { return entries_[i]; }
    const Entry& entry(const std::string& name) const;
    Entry& entry(const std::string& name);
    int count() const { return static_cast<int>(entries_.size()); }
    int total_size() const;

    std::vector<double> flatten() const;
    void set_flat(const std::vector<double>& flat);

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

enum class Op : unsigned char {
    Constant,
    Param,
    Add,
    Sub,
    Mul,
    ScaleAdd,  // c0*x + c1
    MatMul,
    Exp,
    Log,
    Tanh,
    Relu,
    Softplus,
    PowC,   // x^c0 elementwise
    Clamp,  // clip to [c0, c1], zero gradient outside
    Sum,
    SumRows,
    SumCols,
    Transpose,
    RepeatRows,  // stack c0 copies vertically
    LogSumExpRows,
    DiagPart,
    AddDiag,
    AppendOnesCol,
    Cholesky,
    TriSolve,  // flag=1 solves L^T x = b
    LogDetFromChol,
    QuadraticForm,  // ||L^{-1} x||^2
};

struct Var {
    int i = -1;
    bool valid() const { return i >= 0; }
};

struct Shape {
    int rows = 1;
    int cols = 1;
    int size() const { return rows * cols; }
};

// Append-only reverse-mode tape over matrix-shaped values. Values are fixed
// at record time; backward() accumulates adjoints in value buffers, while
// grad_graph() emits the backward pass as new tape nodes so that a second
// differentiation (through an inner gradient step) stays exact.
class Tape {
public:
    struct Node {
        Op op;
        Shape shape;
        int a = -1;
        int b = -1;
        double c0 = 0.0;
        double c1 = 0.0;
        int flag = 0;        // matmul transpose bits / trisolve side
        int param_slot = -1;
        std::vector<double> val;
        std::vector<double> adj;
        std::vector<double> aux;  // op scratch kept for backward
    };

    Var constant(const DenseMatrix& m);
    Var constant(double v);
    Var constant(const std::vector<double>& column);
    // Leaf bound to a ParamSet entry; repeated binds return the same node.
    Var param(const ParamSet& ps, const std::string& name);
    Var param_slot_var(const ParamSet& ps, int slot);

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale_add(Var a, double scale, double offset = 0.0);
    Var neg(Var a) { return scale_add(a, -1.0); }
    Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
    Var exp(Var a);
    Var log(Var a);
    Var tanh(Var a);
    Var relu(Var a);
    Var softplus(Var a);
    Var powc(Var a, double p);
    Var clamp(Var a, double lo, double hi);
    Var sum(Var a);
    Var sum_rows(Var a);
    Var sum_cols(Var a);
    Var transpose(Var a);
    Var repeat_rows(Var a, int copies);
    Var logsumexp_rows(Var a);
    Var diag_part(Var a);
    Var add_diag(Var a, Var d);
    Var append_ones_col(Var a);
    Var cholesky(Var a, double jitter = 0.0);
    Var tri_solve(Var l, Var b, bool transposed = false);
    Var log_det_from_chol(Var l);
    Var quadratic_form(Var l, Var x);

    Shape shape(Var v) const { return nodes_[v.i].shape; }
    double value(Var v) const;
    const std::vector<double>& values(Var v) const { return nodes_[v.i].val; }
    DenseMatrix matrix(Var v) const;

    // Buffer-mode reverse pass from a scalar root; adjoints of earlier
    // backward runs are cleared first.
    void backward(Var root);
    const std::vector<double>& adjoint(Var v) const { return nodes_[v.i].adj; }

    // Gradient of a scalar root w.r.t. every ParamSet entry, flattened in
    // entry order; zero for entries never bound on this tape. Throws
    // NonFiniteGradient when any component is NaN or infinite.
    std::vector<double> gradient(Var root, const ParamSet& ps);

    // Emit the backward pass as tape nodes and return adjoint vars for the
    // requested leaves (zero-valued constants when a leaf is unused).
    // Supported for the dense-net op subset; Cholesky-family ops throw.
    std::vector<Var> grad_graph(Var root, const std::vector<Var>& leaves);

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int i) const { return nodes_[i]; }

private:
    friend struct GraphBackward;
    std::vector<Node> nodes_;
    std::unordered_map<int, int> param_nodes_;  // slot -> node index

    int push(Node n);
    Node& at(Var v) { return nodes_[v.i]; }
    const Node& at(Var v) const { return nodes_[v.i]; }
};

// Max relative error between analytic gradient and central finite
// differences of f at the current params, step h per coordinate.
// Denominator is max(|analytic|, |numeric|, 1e-8).
double check_gradient(const std::function<double(ParamSet&)>& f, ParamSet& params,
                      const std::vector<double>& analytic, double h = 1e-5);

}  // namespace ibmeta::ad
