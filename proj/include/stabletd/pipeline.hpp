#pragma once

// Kernel -> factorized block, shared by the CLI and the external evaluator
// path of the rank search.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "stabletd/conv.hpp"
#include "stabletd/cpd.hpp"
#include "stabletd/epc.hpp"
#include "stabletd/error.hpp"
#include "stabletd/hybrid.hpp"
#include "stabletd/io.hpp"
#include "stabletd/tensor.hpp"

namespace stabletd {

enum class Method { cpd, cpd_epc, tkd_cpd_epc, svd };

inline Method parse_method(const std::string& s) {
    if (s == "cpd") return Method::cpd;
    if (s == "cpd-epc") return Method::cpd_epc;
    if (s == "tkd-cpd-epc") return Method::tkd_cpd_epc;
    if (s == "svd") return Method::svd;
    throw InvalidArgument("unknown method '" + s + "' (expected cpd, cpd-epc, tkd-cpd-epc or svd)");
}

inline const char* method_name(Method m) {
    switch (m) {
        case Method::cpd: return "cpd";
        case Method::cpd_epc: return "cpd-epc";
        case Method::tkd_cpd_epc: return "tkd-cpd-epc";
        case Method::svd: return "svd";
    }
    return "?";
}

struct DecomposeOptions {
    Method method = Method::cpd_epc;
    Index rank = 1;
    std::optional<std::pair<Index, Index>> ranks;  // fixed Tucker-2 ranks
    std::optional<double> rel_delta;  // bound as a fraction of ||K||_F
    double theta = 0.5;
    std::uint64_t seed = 0;
    Index stride = 1;
    Index pad = 0;
    std::optional<Vector> bias;
    Index input_h = 32;
    Index input_w = 32;
    AlsOptions als{.max_iters = 1000, .tol = 1e-10, .init = AlsInit::random, .restarts = 3, .seed = 0};
    EpcOptions epc;
};

struct DecomposeOutcome {
    BlockFile block;
    nlohmann::json report;
};

namespace detail {

inline nlohmann::json cp_stats(double rel_error, const CPModel& m) {
    return {{"rel_error", rel_error}, {"sensitivity", sensitivity(m)}, {"intensity", intensity(m)}};
}

}  // namespace detail

inline DecomposeOutcome decompose_kernel(const DenseTensor& k4, const DecomposeOptions& opts) {
    if (k4.order() != 4 || k4.extent(0) != k4.extent(1)) {
        throw FormatError("kernel must be an order-4 D x D x S x T tensor, got " + shape_string(k4.shape()));
    }
    if (!k4.all_finite()) throw FormatError("kernel contains non-finite values");
    if (opts.rank < 1) throw InvalidArgument("rank must be >= 1");
    if (opts.rel_delta && !(*opts.rel_delta >= 0.0)) throw InvalidArgument("--delta must be >= 0");

    const Index D = k4.extent(0), S = k4.extent(2), T = k4.extent(3);
    ConvSpec spec{S, T, D, opts.stride, opts.pad, opts.bias};
    spec.validate();
    const DenseTensor t = reshape_kernel(k4);
    const double nt = t.norm();
    AlsOptions als = opts.als;
    als.seed = opts.seed;

    DecomposeOutcome out;
    nlohmann::json& rep = out.report;
    rep["method"] = method_name(opts.method);
    rep["rank"] = opts.rank;
    rep["kernel_shape"] = k4.shape();
    rep["kernel_norm"] = nt;
    rep["seed"] = opts.seed;

    BlockFile& bf = out.block;
    BlockMetrics& metrics = bf.metrics;

    switch (opts.method) {
        case Method::svd: {
            if (D != 1) throw InvalidArgument("svd requires 1x1 kernel");
            const Matrix M = pointwise_matrix(k4);
            bf.block = emit_svd_block(M, opts.rank, spec);
            const DenseTensor approx = block_kernel(bf.block.layers);
            const double err = distance(k4, approx);
            metrics.rel_error = nt > 0.0 ? err / nt : err;
            rep["rel_error"] = metrics.rel_error;
            break;
        }
        case Method::cpd:
        case Method::cpd_epc: {
            const AlsResult fit = cpd_als(t, opts.rank, als);
            rep["before"] = detail::cp_stats(fit.rel_error, fit.model);
            rep["als_sweeps"] = fit.error_trace.size();
            CPModel model = fit.model;
            double rel = fit.rel_error;
            if (opts.method == Method::cpd_epc) {
                EpcOptions eo = opts.epc;
                if (opts.rel_delta) eo.delta = *opts.rel_delta * nt;
                const EpcResult ec = epc_correct(t, fit.model, eo);
                model = ec.model;
                rel = nt > 0.0 ? ec.error / nt : ec.error;
                rep["delta"] = ec.delta;
                rep["after"] = detail::cp_stats(rel, model);
                rep["epc_sweeps"] = ec.trace.size() - 1;
            }
            bf.block = emit_cpd_block(model, spec);
            metrics.rel_error = rel;
            metrics.sensitivity = sensitivity(model);
            metrics.intensity = intensity(model);
            rep["rel_error"] = rel;
            break;
        }
        case Method::tkd_cpd_epc: {
            HybridOptions ho;
            ho.theta = opts.theta;
            ho.ranks = opts.ranks;
            ho.als = als;
            ho.epc = opts.epc;
            std::optional<double> delta;
            if (opts.rel_delta) delta = *opts.rel_delta * nt;
            const HybridResult hr = tkd_cpd_epc(t, delta, opts.rank, ho);
            const bool merged = should_merge(hr.model);
            bf.block = merged ? emit_cpd_block(to_equivalent_cp(hr.model), spec) : emit_tkd_cpd_block(hr.model, spec);
            metrics.rel_error = nt > 0.0 ? hr.err_total / nt : hr.err_total;
            metrics.sensitivity = sensitivity(hr.model.core_cp);
            metrics.intensity = intensity(hr.model.core_cp);
            rep["ranks"] = {hr.model.r1(), hr.model.r2(), hr.model.cp_rank()};
            rep["merged"] = merged;
            rep["delta"] = hr.delta_total;
            rep["err_tkd"] = hr.err_tkd;
            rep["err_core"] = hr.err_core;
            rep["err_total"] = hr.err_total;
            rep["before"] = {{"core_error", hr.core_cpd_error}, {"sensitivity", hr.core_sensitivity_before}};
            rep["after"] = {{"core_error", hr.err_core},
                            {"sensitivity", hr.core_sensitivity_after},
                            {"intensity", intensity(hr.model.core_cp)}};
            rep["rel_error"] = metrics.rel_error;
            break;
        }
    }

    const CostReport cost = count_params_flops(bf.block.layers, opts.input_h, opts.input_w);
    metrics.params = cost.params;
    metrics.flops = cost.flops;
    metrics.input_h = opts.input_h;
    metrics.input_w = opts.input_w;
    rep["block"] = block_kind_name(bf.block.kind);
    rep["params"] = cost.params;
    rep["flops"] = cost.flops;
    rep["original_params"] = k4.size() + (opts.bias ? T : 0);
    if (metrics.sensitivity) rep["sensitivity"] = *metrics.sensitivity;
    if (metrics.intensity) rep["intensity"] = *metrics.intensity;
    return out;
}

}  // namespace stabletd
