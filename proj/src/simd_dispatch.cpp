#include "ibmeta/simd.hpp"

#include <cstdlib>
#include <cstring>

namespace ibmeta::simd {
namespace {

const Kernels* select(Isa isa) {
    switch (isa) {
        case Isa::Scalar:
            return &scalar_kernels();
        case Isa::Avx2:
            return avx2_available() ? &avx2_kernels() : &scalar_kernels();
        case Isa::Auto:
        default:
            return avx2_available() ? &avx2_kernels() : &scalar_kernels();
    }
}

Isa env_choice() {
    const char* v = std::getenv("IBMETA_KERNELS");
    if (v == nullptr) return Isa::Auto;
    if (std::strcmp(v, "scalar") == 0) return Isa::Scalar;
    if (std::strcmp(v, "avx2") == 0) return Isa::Avx2;
    return Isa::Auto;
}

const Kernels*& active_slot() {
    static const Kernels* slot = select(env_choice());
    return slot;
}

}  // namespace

const Kernels& active() { return *active_slot(); }

void force_isa(Isa isa) { active_slot() = select(isa); }

}  // namespace ibmeta::simd
