#pragma once

#include <optional>

#include "ibmeta/autodiff.hpp"
#include "ibmeta/features.hpp"
#include "ibmeta/linalg.hpp"

namespace ibmeta {

// Kernel over feature vectors phi(x). Linear: (exp(v)/M) * phi^T phi';
// Cosine: exp(v) * phi^T phi' / (||phi|| ||phi'||). fixed_variance replaces
// the whole exp(v)/M scale when set (the regression runs fix it to 1/M).
struct KernelSpec {
    enum class Type { Linear, Cosine };
    Type type = Type::Linear;
    double v = 0.0;
    std::optional<double> fixed_variance;

    bool learns_v() const { return !fixed_variance.has_value(); }
};

// Tiny but nonzero norms are clamped to this floor before the cosine division;
// an exactly zero norm is a contract violation and throws ZeroFeatureVector.
constexpr double kCosineNormFloor = 1e-12;

double kernel_scale(const KernelSpec& spec, int feature_dim);

// single evaluation on feature vectors (already mapped through the net)
double kernel_eval(const std::vector<double>& phi_a, const std::vector<double>& phi_b,
                   const KernelSpec& spec);

// Gram of stacked features (n x M); exactly symmetric by construction.
DenseMatrix gram(const DenseMatrix& phi, const KernelSpec& spec);
DenseMatrix cross_gram(const DenseMatrix& phi_a, const DenseMatrix& phi_b,
                       const KernelSpec& spec);
std::vector<double> gram_diag(const DenseMatrix& phi, const KernelSpec& spec);

// Rows scaled to unit norm (with the floor); identity scale for Linear.
// Folding normalization into the features keeps every downstream identity
// (Gram, Woodbury, streaming) a plain dot-product expression.
DenseMatrix normalized_features(const DenseMatrix& phi, const KernelSpec& spec);

// Tape builders. scale_var: exp(v) based scale (or constant when fixed);
// phi vars are feature matrices already on the tape.
ad::Var kernel_scale_tape(ad::Tape& tape, const KernelSpec& spec, int feature_dim,
                          const ad::ParamSet& ps, const std::string& v_name = "kernel.v");
ad::Var normalized_features_tape(ad::Tape& tape, ad::Var phi, const KernelSpec& spec);
ad::Var gram_tape(ad::Tape& tape, ad::Var phi_norm, ad::Var scale);
ad::Var cross_gram_tape(ad::Tape& tape, ad::Var phi_norm_a, ad::Var phi_norm_b, ad::Var scale);
ad::Var gram_diag_tape(ad::Tape& tape, ad::Var phi_norm, ad::Var scale);

}  // namespace ibmeta
