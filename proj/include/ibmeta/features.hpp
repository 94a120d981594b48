#pragma once

#include <string>
#include <vector>

#include "ibmeta/autodiff.hpp"
#include "ibmeta/linalg.hpp"
#include "ibmeta/rng.hpp"

namespace ibmeta {

enum class Activation { Relu, Tanh };

// Shared feature map phi(x; theta): a small dense net whose output is the
// last hidden layer, optionally augmented with a constant 1 so linear
// functions of phi carry a bias direction.
struct FeatureNet {
    int input_dim = 1;
    std::vector<int> hidden = {40, 40};
    Activation activation = Activation::Relu;
    bool augment_bias = true;
    std::string prefix = "phi";

    // includes the appended constant when augment_bias is on
    int feature_dim() const {
        return (hidden.empty() ? input_dim : hidden.back()) + (augment_bias ? 1 : 0);
    }
    // layer params in forward order: W0, b0, W1, b1, ...
    std::vector<std::string> param_names() const;
    void init_params(ad::ParamSet& ps, Rng& rng) const;

    // x is n x input_dim (rows are points); result is n x feature_dim()
    DenseMatrix forward(const DenseMatrix& x, const ad::ParamSet& ps) const;
    ad::Var forward_tape(ad::Tape& tape, const DenseMatrix& x, const ad::ParamSet& ps) const;
    // forward under explicit weight vars (adapted parameters and the like),
    // ordered as param_names()
    ad::Var forward_vars(ad::Tape& tape, ad::Var x, const std::vector<ad::Var>& weights) const;
};

// Glorot-uniform matrix used by all net initializers.
DenseMatrix glorot_uniform(int fan_in, int fan_out, Rng& rng);

enum class EncoderKind { ExactPosterior, Amortized, Simplified };

// Encoder heads on top of phi. Amortized: per-point linear heads
// m_tilde(x), s(x); Simplified: two scalars shared across points.
// Clipping keeps m in [-20, 20] and s in [0.001, 20], with zero gradient
// outside the interval.
struct EncoderHeads {
    EncoderKind kind = EncoderKind::Simplified;
    std::string prefix = "enc";

    static constexpr double kMeanClip = 20.0;
    static constexpr double kVarLo = 0.001;
    static constexpr double kVarHi = 20.0;

    std::vector<std::string> param_names() const;
    void init_params(ad::ParamSet& ps, int feature_dim, Rng& rng) const;

    // raw per-point encoder mean before sign flip, clipped; phi is n x M
    std::vector<double> m_tilde(const DenseMatrix& phi, const ad::ParamSet& ps) const;
    std::vector<double> s_of(const DenseMatrix& phi, const ad::ParamSet& ps) const;
    ad::Var m_tilde_tape(ad::Tape& tape, ad::Var phi, const ad::ParamSet& ps) const;  // n x 1
    ad::Var s_tape(ad::Tape& tape, ad::Var phi, const ad::ParamSet& ps) const;        // n x 1
};

// head_m for a single point: clip(m_tilde, +-20) * y_sign.
double head_m(double m_tilde_raw, double y_sign);

// Per-class site means for classification: column n holds +m_tilde on the
// points labeled n and -m_tilde elsewhere.
DenseMatrix class_mean_vectors(const std::vector<int>& labels, const std::vector<double>& m_tilde,
                               int n_classes);

}  // namespace ibmeta
