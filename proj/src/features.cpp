#include "ibmeta/features.hpp"

#include <cmath>

#include "ibmeta/simd.hpp"

namespace ibmeta {

DenseMatrix glorot_uniform(int fan_in, int fan_out, Rng& rng) {
    DenseMatrix w(fan_in, fan_out);
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : w.data) v = rng.uniform(-limit, limit);
    return w;
}

std::vector<std::string> FeatureNet::param_names() const {
    std::vector<std::string> names;
    for (size_t l = 0; l < hidden.size(); ++l) {
        names.push_back(prefix + ".W" + std::to_string(l));
        names.push_back(prefix + ".b" + std::to_string(l));
    }
    return names;
}

void FeatureNet::init_params(ad::ParamSet& ps, Rng& rng) const {
    int in = input_dim;
    for (size_t l = 0; l < hidden.size(); ++l) {
        const int out = hidden[l];
        DenseMatrix w = glorot_uniform(in, out, rng);
        ps.add(prefix + ".W" + std::to_string(l), in, out, std::move(w.data));
        ps.add(prefix + ".b" + std::to_string(l), 1, out, std::vector<double>(out, 0.0));
        in = out;
    }
}

DenseMatrix FeatureNet::forward(const DenseMatrix& x, const ad::ParamSet& ps) const {
    if (x.cols != input_dim) throw DimensionMismatch("FeatureNet::forward: input width mismatch");
    const auto& k = simd::active();
    DenseMatrix h = x;
    for (size_t l = 0; l < hidden.size(); ++l) {
        const auto& w = ps.entry(prefix + ".W" + std::to_string(l));
        const auto& b = ps.entry(prefix + ".b" + std::to_string(l));
        DenseMatrix wm(w.rows, w.cols, w.value);
        DenseMatrix z = matmul(h, wm);
        for (int r = 0; r < z.rows; ++r) k.axpy(1.0, b.value.data(), z.row(r), z.cols);
        if (activation == Activation::Relu)
            k.relu(z.data.data(), z.data.data(), z.data.size());
        else
            k.tanh(z.data.data(), z.data.data(), z.data.size());
        h = std::move(z);
    }
    if (!augment_bias) return h;
    DenseMatrix out(h.rows, h.cols + 1);
    for (int r = 0; r < h.rows; ++r) {
        std::copy(h.row(r), h.row(r) + h.cols, out.row(r));
        out.at(r, h.cols) = 1.0;
    }
    return out;
}

ad::Var FeatureNet::forward_tape(ad::Tape& tape, const DenseMatrix& x,
                                 const ad::ParamSet& ps) const {
    std::vector<ad::Var> weights;
    for (const auto& name : param_names()) weights.push_back(tape.param(ps, name));
    return forward_vars(tape, tape.constant(x), weights);
}

ad::Var FeatureNet::forward_vars(ad::Tape& tape, ad::Var x,
                                 const std::vector<ad::Var>& weights) const {
    if (weights.size() != 2 * hidden.size())
        throw DimensionMismatch("FeatureNet::forward_vars: weight count mismatch");
    ad::Var h = x;
    for (size_t l = 0; l < hidden.size(); ++l) {
        ad::Var z = tape.add(tape.matmul(h, weights[2 * l]), weights[2 * l + 1]);
        h = activation == Activation::Relu ? tape.relu(z) : tape.tanh(z);
    }
    return augment_bias ? tape.append_ones_col(h) : h;
}

std::vector<std::string> EncoderHeads::param_names() const {
    if (kind == EncoderKind::Amortized)
        return {prefix + ".m_w", prefix + ".m_b", prefix + ".s_w", prefix + ".s_b"};
    if (kind == EncoderKind::Simplified) return {prefix + ".m_tilde", prefix + ".s_raw"};
    return {};
}

void EncoderHeads::init_params(ad::ParamSet& ps, int feature_dim, Rng& rng) const {
    // s_raw = softplus^{-1}(0.01), matching the likelihood noise init
    const double s_raw0 = std::log(std::expm1(0.01));
    if (kind == EncoderKind::Amortized) {
        DenseMatrix mw = glorot_uniform(feature_dim, 1, rng);
        ps.add(prefix + ".m_w", feature_dim, 1, std::move(mw.data));
        ps.add_scalar(prefix + ".m_b", 0.0);
        DenseMatrix sw = glorot_uniform(feature_dim, 1, rng);
        ps.add(prefix + ".s_w", feature_dim, 1, std::move(sw.data));
        ps.add_scalar(prefix + ".s_b", s_raw0);
    } else if (kind == EncoderKind::Simplified) {
        ps.add_scalar(prefix + ".m_tilde", 1.0);
        ps.add_scalar(prefix + ".s_raw", s_raw0);
    }
}

namespace {

std::vector<double> linear_head(const DenseMatrix& phi, const ad::ParamSet& ps,
                                const std::string& w_name, const std::string& b_name) {
    const auto& w = ps.entry(w_name);
    const auto& b = ps.entry(b_name);
    std::vector<double> out(phi.rows);
    for (int r = 0; r < phi.rows; ++r)
        out[r] = simd::active().dot(phi.row(r), w.value.data(), phi.cols) + b.value[0];
    return out;
}

double clip(double x, double lo, double hi) { return x < lo ? lo : (x > hi ? hi : x); }

double softplus1(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

}  // namespace

std::vector<double> EncoderHeads::m_tilde(const DenseMatrix& phi, const ad::ParamSet& ps) const {
    std::vector<double> out;
    if (kind == EncoderKind::Amortized) {
        out = linear_head(phi, ps, prefix + ".m_w", prefix + ".m_b");
    } else {
        out.assign(phi.rows, ps.entry(prefix + ".m_tilde").value[0]);
    }
    for (auto& v : out) v = clip(v, -kMeanClip, kMeanClip);
    return out;
}

std::vector<double> EncoderHeads::s_of(const DenseMatrix& phi, const ad::ParamSet& ps) const {
    std::vector<double> out;
    if (kind == EncoderKind::Amortized) {
        out = linear_head(phi, ps, prefix + ".s_w", prefix + ".s_b");
    } else {
        out.assign(phi.rows, ps.entry(prefix + ".s_raw").value[0]);
    }
    for (auto& v : out) v = clip(softplus1(v), kVarLo, kVarHi);
    return out;
}

ad::Var EncoderHeads::m_tilde_tape(ad::Tape& tape, ad::Var phi, const ad::ParamSet& ps) const {
    ad::Var raw;
    if (kind == EncoderKind::Amortized) {
        raw = tape.add(tape.matmul(phi, tape.param(ps, prefix + ".m_w")),
                       tape.param(ps, prefix + ".m_b"));
    } else {
        const int n = tape.shape(phi).rows;
        raw = tape.mul(tape.constant(DenseMatrix(n, 1, std::vector<double>(n, 1.0))),
                       tape.param(ps, prefix + ".m_tilde"));
    }
    return tape.clamp(raw, -kMeanClip, kMeanClip);
}

ad::Var EncoderHeads::s_tape(ad::Tape& tape, ad::Var phi, const ad::ParamSet& ps) const {
    ad::Var raw;
    if (kind == EncoderKind::Amortized) {
        raw = tape.add(tape.matmul(phi, tape.param(ps, prefix + ".s_w")),
                       tape.param(ps, prefix + ".s_b"));
    } else {
        const int n = tape.shape(phi).rows;
        raw = tape.mul(tape.constant(DenseMatrix(n, 1, std::vector<double>(n, 1.0))),
                       tape.param(ps, prefix + ".s_raw"));
    }
    return tape.clamp(tape.softplus(raw), kVarLo, kVarHi);
}

double head_m(double m_tilde_raw, double y_sign) {
    return clip(m_tilde_raw, -EncoderHeads::kMeanClip, EncoderHeads::kMeanClip) * y_sign;
}

DenseMatrix class_mean_vectors(const std::vector<int>& labels, const std::vector<double>& m_tilde,
                               int n_classes) {
    if (labels.size() != m_tilde.size())
        throw DimensionMismatch("class_mean_vectors: label/mean count mismatch");
    DenseMatrix m(static_cast<int>(labels.size()), n_classes);
    for (size_t j = 0; j < labels.size(); ++j) {
        if (labels[j] < 0 || labels[j] >= n_classes)
            throw DimensionMismatch("class_mean_vectors: label out of range");
        for (int n = 0; n < n_classes; ++n)
            m.at(static_cast<int>(j), n) = labels[j] == n ? m_tilde[j] : -m_tilde[j];
    }
    return m;
}

}  // namespace ibmeta
