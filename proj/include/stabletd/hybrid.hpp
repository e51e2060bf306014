#pragma once

// TKD-CPD: bound-constrained Tucker-2 compression followed by CPD + EPC of
// the core. Because U and V are orthonormal the two error contributions are
// orthogonal:  err_total^2 = err_tkd^2 + err_core^2.

#include <cmath>
#include <optional>
#include <sstream>
#include <utility>

#include "stabletd/cpd.hpp"
#include "stabletd/epc.hpp"
#include "stabletd/error.hpp"
#include "stabletd/tucker2.hpp"

namespace stabletd {

struct HybridModel {
    Matrix U;         // S x R1
    Matrix V;         // T x R2
    CPModel core_cp;  // CP model of the D^2 x R1 x R2 core

    Index r1() const noexcept { return U.cols(); }
    Index r2() const noexcept { return V.cols(); }
    Index cp_rank() const noexcept { return core_cp.rank(); }
};

struct HybridOptions {
    // Share of the squared error budget given to the Tucker-2 stage.
    double theta = 0.5;
    std::optional<std::pair<Index, Index>> ranks;  // fixed (R1, R2) instead of bound-selected
    Tucker2Options tucker;
    AlsOptions als;
    EpcOptions epc;  // delta is overwritten with the core budget
};

struct HybridResult {
    HybridModel model;
    double delta_total = 0.0;
    double err_tkd = 0.0;
    double err_core = 0.0;
    double err_total = 0.0;
    double core_cpd_error = 0.0;  // before EPC
    double core_sensitivity_before = 0.0;
    double core_sensitivity_after = 0.0;
};

// Hybrid reconstruction [[A, U B, V C]] of the kernel.
inline CPModel to_equivalent_cp(const HybridModel& h) {
    const CPModel core = absorb_weights(h.core_cp);
    return CPModel{core.A, h.U * core.B, h.V * core.C, std::nullopt};
}

inline DenseTensor reconstruct(const HybridModel& h) { return reconstruct(to_equivalent_cp(h)); }

// Merge the four 1x1 layers into a CPD block when the CP rank is below both
// multilinear ranks.
inline bool should_merge(Index r1, Index r2, Index r) { return r < r1 && r < r2; }

inline bool should_merge(const HybridModel& h) { return should_merge(h.r1(), h.r2(), h.cp_rank()); }

// delta_total: absolute bound on ||t - hybrid||_F. Without it the Tucker-2
// stage is lossless (or uses the fixed ranks) and EPC preserves the core
// CPD error.
inline HybridResult tkd_cpd_epc(const DenseTensor& t, std::optional<double> delta_total, Index R,
                                const HybridOptions& opts = {}) {
    require_order3(t, "tkd_cpd_epc");
    if (R < 1) throw InvalidArgument("tkd_cpd_epc: CP rank must be >= 1");
    if (!(opts.theta >= 0.0 && opts.theta <= 1.0)) {
        throw InvalidArgument("tkd_cpd_epc: theta must lie in [0, 1]");
    }
    const double nt = t.norm();
    if (delta_total && !(*delta_total >= 0.0)) throw InvalidArgument("tkd_cpd_epc: delta must be >= 0");

    Tucker2Options topts = opts.tucker;
    if (opts.ranks) {
        topts.fixed_r1 = opts.ranks->first;
        topts.fixed_r2 = opts.ranks->second;
    }
    const double delta_tkd = delta_total ? std::sqrt(opts.theta) * *delta_total : 0.0;
    const Tucker2Result tk = tucker2_bounded(t, delta_tkd, topts);

    HybridResult res;
    res.err_tkd = tk.error;
    double delta_core = 0.0;
    if (delta_total) {
        res.delta_total = *delta_total;
        if (tk.error > *delta_total * (1.0 + 1e-12) + 1e-14 * nt) {
            std::ostringstream os;
            os << "Tucker-2 stage error " << tk.error << " already exceeds the total bound "
               << *delta_total << "; use a larger theta or bound-selected ranks";
            throw InfeasibleBound(os.str(), tk.error);
        }
        delta_core = std::sqrt(std::max(0.0, *delta_total * *delta_total - tk.error * tk.error));
    }

    const AlsResult cp = cpd_als(tk.model.G, R, opts.als);
    const double gnorm = tk.model.G.norm();
    res.core_cpd_error = cp.rel_error * gnorm;
    if (!delta_total) {
        delta_core = res.core_cpd_error;
        res.delta_total = std::hypot(res.err_tkd, delta_core);
    } else if (res.core_cpd_error > delta_core + 1e-8 * nt) {
        std::ostringstream os;
        os << "rank-" << R << " CPD of the Tucker core reaches error " << res.core_cpd_error
           << ", above the core budget " << delta_core << "; raise the rank or lower theta";
        throw InfeasibleBound(os.str(), res.core_cpd_error);
    }

    EpcOptions eopts = opts.epc;
    eopts.delta = std::max(delta_core, res.core_cpd_error);
    const EpcResult ec = epc_correct(tk.model.G, cp.model, eopts);
    res.core_sensitivity_before = ec.sensitivity_before;
    res.core_sensitivity_after = ec.sensitivity_after;

    res.model = HybridModel{tk.model.U, tk.model.V, ec.model};
    res.err_core = distance(tk.model.G, reconstruct(ec.model));
    res.err_total = distance(t, reconstruct(res.model));
    return res;
}

}  // namespace stabletd
