#pragma once

// Command-line front end: decompose, rank-search, verify.
//
// Exit codes: 0 success, 1 usage error / infeasible bound / failed check,
// 2 malformed input or inconsistent block, 3 evaluator contract violation.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stabletd/conv.hpp"
#include "stabletd/error.hpp"
#include "stabletd/io.hpp"
#include "stabletd/pipeline.hpp"
#include "stabletd/random.hpp"
#include "stabletd/ranksearch.hpp"
#include "stabletd/tensor.hpp"

namespace stabletd::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kMalformed = 2, kEvaluator = 3 };

struct VerifyReport {
    Index trials = 0;
    double implied_rel_error = 0.0;
    double reported_rel_error = 0.0;
    double max_block_deviation = 0.0;     // composed block vs block-implied kernel
    double max_original_deviation = 0.0;  // composed block vs original kernel
    double max_original_bound_ratio = 0.0;
    bool passed = false;
    std::vector<std::string> failures;
};

// Tolerances of the verify command.
inline constexpr double kVerifyForwardTol = 1e-8;
inline constexpr double kVerifyRelErrorSlack = 1e-9;

namespace detail {

inline std::pair<Index, Index> parse_pair(const std::string& s, const char* flag) {
    const auto comma = s.find(',');
    if (comma == std::string::npos) throw InvalidArgument(std::string(flag) + " expects two comma-separated integers");
    try {
        std::size_t p1 = 0, p2 = 0;
        const std::string a = s.substr(0, comma), b = s.substr(comma + 1);
        const long long x = std::stoll(a, &p1), y = std::stoll(b, &p2);
        if (p1 != a.size() || p2 != b.size()) throw std::invalid_argument(s);
        return {static_cast<Index>(x), static_cast<Index>(y)};
    } catch (const std::logic_error&) {
        throw InvalidArgument(std::string(flag) + " expects two comma-separated integers, got '" + s + "'");
    }
}

inline DenseTensor as_search_tensor(const DenseTensor& k) {
    if (k.order() == 3) return k;
    if (k.order() == 4 && k.extent(0) == k.extent(1)) return reshape_kernel(k);
    throw FormatError("expected an order-3 tensor or an order-4 D x D x S x T kernel, got " + shape_string(k.shape()));
}

inline double max_abs(const Vector& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace detail

// Checks a block file against the kernel it was derived from.
inline VerifyReport verify_block(const BlockFile& bf, const DenseTensor& kernel, Index trials, std::uint64_t seed) {
    const Block& b = bf.block;
    const ConvSpec& spec = b.spec;
    const Shape expect{spec.kernel, spec.kernel, spec.in_channels, spec.out_channels};
    if (kernel.shape() != expect) {
        throw FormatError("kernel shape " + shape_string(kernel.shape()) + " does not match block spec " +
                          shape_string(expect));
    }
    DenseTensor implied;
    ConvSpec chain;
    try {
        implied = block_kernel(b.layers);
        chain = block_spec(b.layers);
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("block is not a factorized convolution: ") + e.what());
    }
    if (implied.shape() != expect || chain.stride != spec.stride || chain.pad != spec.pad) {
        throw FormatError("block layers realize a " + shape_string(implied.shape()) + " kernel with stride " +
                          std::to_string(chain.stride) + ", pad " + std::to_string(chain.pad) +
                          "; spec says " + shape_string(expect) + ", stride " + std::to_string(spec.stride) +
                          ", pad " + std::to_string(spec.pad));
    }
    const CostReport cost = count_params_flops(b.layers, bf.metrics.input_h, bf.metrics.input_w);
    if (cost.params != bf.metrics.params || cost.flops != bf.metrics.flops) {
        throw FormatError("metrics params/flops (" + std::to_string(bf.metrics.params) + "/" +
                          std::to_string(bf.metrics.flops) + ") differ from the layers (" +
                          std::to_string(cost.params) + "/" + std::to_string(cost.flops) + ")");
    }

    VerifyReport r;
    r.trials = trials;
    const double nk = kernel.norm();
    r.reported_rel_error = bf.metrics.rel_error;
    r.implied_rel_error = nk > 0.0 ? distance(implied, kernel) / nk : distance(implied, kernel);
    if (!(r.implied_rel_error <= r.reported_rel_error * (1.0 + 1e-6) + kVerifyRelErrorSlack)) {
        std::ostringstream os;
        os << "layers reconstruct the kernel with relative error " << r.implied_rel_error << ", report says "
           << r.reported_rel_error;
        r.failures.push_back(os.str());
    }
    const bool spec_bias = spec.bias.has_value(), chain_bias = chain.bias.has_value();
    if (spec_bias != chain_bias ||
        (spec_bias && detail::max_abs(*spec.bias - *chain.bias) > 1e-12 * (1.0 + detail::max_abs(*spec.bias)))) {
        r.failures.push_back("last-layer bias does not match the spec bias");
    }

    const Index D = spec.kernel;
    const Index side = std::max<Index>(2 * D + 1, 7);
    const double overlap = std::ceil(static_cast<double>(D) / static_cast<double>(spec.stride));
    ConvSpec implied_spec = spec;
    implied_spec.bias = chain.bias;
    Rng rng = make_rng(seed, 7);
    for (Index n = 0; n < trials; ++n) {
        const DenseTensor x = gaussian_tensor({side, side, spec.in_channels}, rng);
        const double nx = x.norm();
        const DenseTensor yb = forward_chain(x, b.layers);
        const double dev_b = distance(yb, conv2d_reference(x, implied_spec, implied));
        const double dev_o = distance(yb, conv2d_reference(x, spec, kernel));
        r.max_block_deviation = std::max(r.max_block_deviation, dev_b / (1.0 + nx));
        r.max_original_deviation = std::max(r.max_original_deviation, dev_o);
        const double bound = r.reported_rel_error * nk * overlap * nx;
        const double ratio = dev_o / (bound + kVerifyForwardTol * (1.0 + nx));
        r.max_original_bound_ratio = std::max(r.max_original_bound_ratio, ratio);
    }
    if (r.max_block_deviation > kVerifyForwardTol) {
        std::ostringstream os;
        os << "composed block deviates from its implied kernel by " << r.max_block_deviation << " (relative to 1+|x|)";
        r.failures.push_back(os.str());
    }
    if (r.max_original_bound_ratio > 1.0 + 1e-9) {
        std::ostringstream os;
        os << "forward deviation from the original kernel exceeds the bound implied by rel_error (ratio "
           << r.max_original_bound_ratio << ")";
        r.failures.push_back(os.str());
    }
    r.passed = r.failures.empty();
    return r;
}

// Maps library exceptions onto exit codes, printing the message.
template <typename F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const EvaluatorError& e) {
        err << "error: " << e.what() << "\n";
        if (!e.captured_output().empty()) err << "--- evaluator output ---\n" << e.captured_output() << "\n";
        return kEvaluator;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << "\n";
        return kMalformed;
    } catch (const InfeasibleBound& e) {
        err << "error: infeasible bound: " << e.what() << "\n";
        return kFailure;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Stable low-rank factorization of convolution kernels"};
    app.require_subcommand(1);

    // decompose
    std::string d_input, d_method = "cpd-epc", d_out, d_ranks, d_bias, d_hw = "32,32";
    Index d_rank = 0, d_stride = 1, d_pad = 0;
    std::optional<double> d_delta;
    double d_theta = 0.5;
    std::uint64_t d_seed = 0;
    auto* dec = app.add_subcommand("decompose", "Factorize a kernel into a convolution block");
    dec->add_option("--input", d_input, "Kernel tensor file (D x D x S x T)")->required();
    dec->add_option("--method", d_method, "cpd | cpd-epc | tkd-cpd-epc | svd")->required();
    dec->add_option("--rank", d_rank, "CP rank R")->required();
    dec->add_option("--ranks", d_ranks, "Fixed Tucker-2 ranks R1,R2");
    dec->add_option("--delta", d_delta, "Error bound relative to ||K||_F");
    dec->add_option("--theta", d_theta, "Tucker-2 share of the squared error budget");
    dec->add_option("--seed", d_seed, "Random seed");
    dec->add_option("--stride", d_stride, "Convolution stride");
    dec->add_option("--pad", d_pad, "Zero padding");
    dec->add_option("--bias", d_bias, "Bias tensor file (length T)");
    dec->add_option("--input-hw", d_hw, "H,W used for the flop count");
    dec->add_option("--out", d_out, "Output directory")->required();

    // rank-search
    std::string r_input, r_method = "cpd-epc", r_evaluator;
    double r_eps = 0.0, r_theta = 0.5;
    std::optional<Index> r_min, r_max;
    std::uint64_t r_seed = 0;
    bool r_json = false;
    auto* rs = app.add_subcommand("rank-search", "Find the smallest rank meeting a quality threshold");
    rs->add_option("--input", r_input, "Kernel or order-3 tensor file")->required();
    rs->add_option("--method", r_method, "cpd | cpd-epc | tkd-cpd-epc | svd")->required();
    rs->add_option("--eps", r_eps, "Score threshold EPS")->required();
    rs->add_option("--evaluator", r_evaluator, "External scoring command");
    rs->add_option("--rmin", r_min, "Smallest rank");
    rs->add_option("--rmax", r_max, "Largest rank");
    rs->add_option("--theta", r_theta, "Tucker-2 share of the squared error budget");
    rs->add_option("--seed", r_seed, "Random seed");
    rs->add_flag("--json", r_json, "Machine-readable output");

    // verify
    std::string v_block, v_input;
    Index v_trials = 5;
    std::uint64_t v_seed = 0;
    auto* ver = app.add_subcommand("verify", "Check a block against its source kernel");
    ver->add_option("--block", v_block, "Block descriptor JSON")->required();
    ver->add_option("--input", v_input, "Original kernel tensor file")->required();
    ver->add_option("--trials", v_trials, "Random forward checks");
    ver->add_option("--seed", v_seed, "Random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kFailure;
    }

    if (*dec) {
        return guarded(err, [&] {
            DecomposeOptions o;
            o.method = parse_method(d_method);
            o.rank = d_rank;
            if (!d_ranks.empty()) o.ranks = detail::parse_pair(d_ranks, "--ranks");
            o.rel_delta = d_delta;
            o.theta = d_theta;
            o.seed = d_seed;
            o.stride = d_stride;
            o.pad = d_pad;
            if (!d_bias.empty()) o.bias = stabletd::detail::as_vector(read_tensor_file(d_bias).values);
            std::tie(o.input_h, o.input_w) = detail::parse_pair(d_hw, "--input-hw");
            const DenseTensor k = read_tensor_file(d_input).values;
            DecomposeOutcome res = decompose_kernel(k, o);
            const auto path = write_block_file(d_out, res.block);
            res.report["block_file"] = path.string();
            stabletd::detail::write_atomically(std::filesystem::path(d_out) / "report.json",
                                               res.report.dump(2) + "\n");
            out << res.report.dump(2) << "\n";
            return static_cast<int>(kOk);
        });
    }

    if (*rs) {
        return guarded(err, [&] {
            Evaluator ev;
            ev.eps = r_eps;
            ev.kind = r_evaluator.empty() ? EvaluatorKind::approx_error : EvaluatorKind::external_command;
            ev.command = r_evaluator;
            ev.validate();
            const Method method = parse_method(r_method);
            const DenseTensor k = read_tensor_file(r_input).values;
            if (!k.all_finite()) throw FormatError("input contains non-finite values");
            const DenseTensor t = detail::as_search_tensor(k);
            const Index I = t.extent(0), J = t.extent(1), K = t.extent(2);
            const Index lo = r_min.value_or(1);
            const Index hi = r_max.value_or(std::min({I * J, I * K, J * K}));
            RankSearchResult res;
            if (ev.kind == EvaluatorKind::approx_error) {
                ProxyOptions po;
                po.als.seed = r_seed;
                po.theta = r_theta;
                res = binary_search_rank([&](Index R) { return approx_error_proxy(t, method, R, po); }, ev.eps, lo, hi);
            } else {
                if (k.order() != 4) throw FormatError("external evaluator needs an order-4 kernel file");
                namespace fs = std::filesystem;
                std::string tmpl = (fs::temp_directory_path() / "stabletd-rs-XXXXXX").string();
                if (!::mkdtemp(tmpl.data())) throw Error("cannot create a temporary directory");
                const fs::path work = tmpl;
                DecomposeOptions base;
                base.method = method;
                base.seed = r_seed;
                base.theta = r_theta;
                const ExternalEvaluator eval(ev.command, fs::absolute(r_input), work, base);
                try {
                    res = binary_search_rank([&](Index R) { return eval(R); }, ev.eps, lo, hi);
                } catch (...) {
                    std::error_code ec;
                    fs::remove_all(work, ec);
                    throw;
                }
                std::error_code ec;
                fs::remove_all(work, ec);
            }
            nlohmann::json j = {{"rank", res.rank},           {"score", res.score},
                                {"evaluations", res.evaluations}, {"met", res.met},
                                {"heuristic", res.heuristic},     {"eps", ev.eps},
                                {"method", method_name(method)},  {"rmin", lo},
                                {"rmax", hi}};
            j["visited"] = nlohmann::json::array();
            for (const auto& [r, s] : res.visited) j["visited"].push_back({{"rank", r}, {"score", s}});
            if (r_json) {
                out << j.dump(2) << "\n";
            } else {
                out << "rank: " << res.rank << "\nscore: " << std::setprecision(10) << res.score
                    << "\nevaluations: " << res.evaluations << "\n";
                if (!res.met) out << "note: no rank in [" << lo << ", " << hi << "] met EPS\n";
                if (res.heuristic) out << "note: scores were not monotone in rank (heuristic result)\n";
            }
            return static_cast<int>(kOk);
        });
    }

    return guarded(err, [&] {
        if (v_trials < 0) throw InvalidArgument("--trials must be >= 0");
        const BlockFile bf = read_block_file(v_block);
        const DenseTensor k = read_tensor_file(v_input).values;
        const VerifyReport r = verify_block(bf, k, v_trials, v_seed);
        out << std::setprecision(6) << "trials: " << r.trials << "\n"
            << "reported rel_error: " << r.reported_rel_error << "\n"
            << "implied rel_error: " << r.implied_rel_error << "\n"
            << "max deviation (block vs implied kernel, /(1+|x|)): " << r.max_block_deviation << "\n"
            << "max deviation (block vs original kernel): " << r.max_original_deviation << "\n";
        for (const auto& f : r.failures) err << "FAIL: " << f << "\n";
        out << (r.passed ? "verify: ok" : "verify: FAILED") << "\n";
        return static_cast<int>(r.passed ? kOk : kFailure);
    });
}

}  // namespace stabletd::cli
