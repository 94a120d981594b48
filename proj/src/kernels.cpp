#include "ibmeta/kernels.hpp"

#include <cmath>

#include "ibmeta/errors.hpp"
#include "ibmeta/simd.hpp"

namespace ibmeta {

double kernel_scale(const KernelSpec& spec, int feature_dim) {
    if (spec.fixed_variance) return *spec.fixed_variance;
    return spec.type == KernelSpec::Type::Linear ? std::exp(spec.v) / feature_dim
                                                 : std::exp(spec.v);
}

DenseMatrix normalized_features(const DenseMatrix& phi, const KernelSpec& spec) {
    if (spec.type == KernelSpec::Type::Linear) return phi;
    const auto& k = simd::active();
    DenseMatrix out = phi;
    for (int r = 0; r < phi.rows; ++r) {
        const double norm = std::sqrt(k.dot(phi.row(r), phi.row(r), phi.cols));
        if (norm == 0.0) throw ZeroFeatureVector("cosine kernel: feature vector has zero norm");
        k.scale(1.0 / std::max(norm, kCosineNormFloor), out.row(r), out.cols);
    }
    return out;
}

double kernel_eval(const std::vector<double>& phi_a, const std::vector<double>& phi_b,
                   const KernelSpec& spec) {
    if (phi_a.size() != phi_b.size()) throw DimensionMismatch("kernel_eval: feature dims differ");
    const auto& k = simd::active();
    const size_t m = phi_a.size();
    double dot = k.dot(phi_a.data(), phi_b.data(), m);
    if (spec.type == KernelSpec::Type::Cosine) {
        const double na = std::sqrt(k.dot(phi_a.data(), phi_a.data(), m));
        const double nb = std::sqrt(k.dot(phi_b.data(), phi_b.data(), m));
        if (na == 0.0 || nb == 0.0)
            throw ZeroFeatureVector("cosine kernel: feature vector has zero norm");
        dot /= std::max(na, kCosineNormFloor) * std::max(nb, kCosineNormFloor);
    }
    return kernel_scale(spec, static_cast<int>(m)) * dot;
}

DenseMatrix gram(const DenseMatrix& phi, const KernelSpec& spec) {
    const auto& k = simd::active();
    const DenseMatrix ph = normalized_features(phi, spec);
    const double c = kernel_scale(spec, phi.cols);
    DenseMatrix g(phi.rows, phi.rows);
    for (int i = 0; i < ph.rows; ++i) {
        for (int j = 0; j <= i; ++j) {
            const double v = c * k.dot(ph.row(i), ph.row(j), ph.cols);
            g.at(i, j) = v;
            g.at(j, i) = v;
        }
    }
    return g;
}

DenseMatrix cross_gram(const DenseMatrix& phi_a, const DenseMatrix& phi_b,
                       const KernelSpec& spec) {
    if (phi_a.cols != phi_b.cols) throw DimensionMismatch("cross_gram: feature dims differ");
    const auto& k = simd::active();
    const DenseMatrix pa = normalized_features(phi_a, spec);
    const DenseMatrix pb = normalized_features(phi_b, spec);
    const double c = kernel_scale(spec, phi_a.cols);
    DenseMatrix g(pa.rows, pb.rows);
    for (int i = 0; i < pa.rows; ++i)
        for (int j = 0; j < pb.rows; ++j)
            g.at(i, j) = c * k.dot(pa.row(i), pb.row(j), pa.cols);
    return g;
}

std::vector<double> gram_diag(const DenseMatrix& phi, const KernelSpec& spec) {
    const auto& k = simd::active();
    const DenseMatrix ph = normalized_features(phi, spec);
    const double c = kernel_scale(spec, phi.cols);
    std::vector<double> d(ph.rows);
    for (int i = 0; i < ph.rows; ++i) d[i] = c * k.dot(ph.row(i), ph.row(i), ph.cols);
    return d;
}

ad::Var kernel_scale_tape(ad::Tape& tape, const KernelSpec& spec, int feature_dim,
                          const ad::ParamSet& ps, const std::string& v_name) {
    if (spec.fixed_variance) return tape.constant(*spec.fixed_variance);
    ad::Var ev = tape.exp(tape.param(ps, v_name));
    return spec.type == KernelSpec::Type::Linear ? tape.scale_add(ev, 1.0 / feature_dim) : ev;
}

ad::Var normalized_features_tape(ad::Tape& tape, ad::Var phi, const KernelSpec& spec) {
    if (spec.type == KernelSpec::Type::Linear) return phi;
    ad::Var sq = tape.sum_rows(tape.mul(phi, phi));
    ad::Var norm = tape.clamp(tape.powc(sq, 0.5), kCosineNormFloor, 1e300);
    return tape.mul(phi, tape.powc(norm, -1.0));
}

ad::Var gram_tape(ad::Tape& tape, ad::Var phi_norm, ad::Var scale) {
    return tape.mul(tape.matmul(phi_norm, phi_norm, false, true), scale);
}

ad::Var cross_gram_tape(ad::Tape& tape, ad::Var phi_norm_a, ad::Var phi_norm_b, ad::Var scale) {
    return tape.mul(tape.matmul(phi_norm_a, phi_norm_b, false, true), scale);
}

ad::Var gram_diag_tape(ad::Tape& tape, ad::Var phi_norm, ad::Var scale) {
    return tape.mul(tape.sum_rows(tape.mul(phi_norm, phi_norm)), scale);
}

}  // namespace ibmeta
