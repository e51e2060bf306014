// Compress a synthetic 3x3 kernel with CPD, CPD-EPC and TKD-CPD-EPC and
// print accuracy, stability and cost of each block.

#include <cstdio>

#include "stabletd.hpp"

int main() {
    using namespace stabletd;
    Rng rng = make_rng(42);
    const Index D = 3, S = 16, T = 24;
    const DenseTensor k4 = gaussian_tensor({D, D, S, T}, rng);

    std::printf("%-12s %6s %12s %14s %10s %12s\n", "method", "rank", "rel_error", "sensitivity", "params", "flops");
    for (const Method m : {Method::cpd, Method::cpd_epc, Method::tkd_cpd_epc}) {
        for (const Index R : {4, 16, 48}) {
            DecomposeOptions o;
            o.method = m;
            o.rank = R;
            if (m == Method::tkd_cpd_epc) o.ranks = std::pair<Index, Index>{12, 16};
            const DecomposeOutcome out = decompose_kernel(k4, o);
            const BlockMetrics& bm = out.block.metrics;
            std::printf("%-12s %6lld %12.4e %14.4e %10lld %12lld\n", method_name(m), static_cast<long long>(R),
                        bm.rel_error, bm.sensitivity.value_or(0.0), static_cast<long long>(bm.params),
                        static_cast<long long>(bm.flops));
        }
    }
    std::printf("dense kernel params: %lld\n", static_cast<long long>(k4.size()));
    return 0;
}
