#pragma once

// Binary search for the smallest rank whose score (quality drop) is at most
// a threshold. Scores are assumed non-increasing in rank; if the visited
// points contradict that the result is flagged heuristic.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "stabletd/cpd.hpp"
#include "stabletd/epc.hpp"
#include "stabletd/error.hpp"
#include "stabletd/hybrid.hpp"
#include "stabletd/io.hpp"
#include "stabletd/pipeline.hpp"
#include "stabletd/tensor.hpp"

namespace stabletd {

enum class EvaluatorKind { approx_error, external_command };

struct Evaluator {
    EvaluatorKind kind = EvaluatorKind::approx_error;
    double eps = 1e-2;
    std::string command;

    void validate() const {
        if (!(eps > 0.0)) throw InvalidArgument("evaluator threshold EPS must be > 0");
        if (kind == EvaluatorKind::external_command && command.empty()) {
            throw InvalidArgument("external evaluator requires a command");
        }
    }
};

struct RankSearchResult {
    Index rank = 0;
    double score = 0.0;
    bool met = false;        // some rank in range reached score <= eps
    bool heuristic = false;  // visited scores were not monotone
    Index evaluations = 0;
    std::vector<std::pair<Index, double>> visited;  // in evaluation order
};

using ScoreFn = std::function<double(Index)>;

// At most ceil(log2(r_max - r_min + 1)) + 1 calls to `score`.
inline RankSearchResult binary_search_rank(const ScoreFn& score, double eps, Index r_min, Index r_max) {
    if (r_min < 1 || r_min > r_max) throw InvalidArgument("rank search needs 1 <= r_min <= r_max");
    if (!(eps > 0.0)) throw InvalidArgument("rank search threshold must be > 0");
    RankSearchResult res;
    std::map<Index, double> cache;
    auto eval = [&](Index r) {
        if (auto it = cache.find(r); it != cache.end()) return it->second;
        const double s = score(r);
        cache.emplace(r, s);
        res.visited.emplace_back(r, s);
        ++res.evaluations;
        return s;
    };
    Index lo = r_min, hi = r_max;
    while (lo < hi) {
        const Index mid = lo + (hi - lo) / 2;
        if (eval(mid) <= eps) hi = mid; else lo = mid + 1;
    }
    res.rank = lo;
    res.score = eval(lo);
    res.met = res.score <= eps;
    double prev = -1.0;
    bool first = true;
    for (const auto& [r, s] : cache) {
        if (!first && s > prev * (1.0 + 1e-9) + 1e-15) res.heuristic = true;
        prev = s;
        first = false;
    }
    return res;
}

struct ProxyOptions {
    AlsOptions als{.max_iters = 3000, .tol = 1e-13, .init = AlsInit::random, .restarts = 3, .seed = 0};
    double theta = 0.5;
};

// Relative reconstruction error of `method` at rank R on an order-3 tensor.
// Deterministic for fixed options.
inline double approx_error_proxy(const DenseTensor& t, Method method, Index R, const ProxyOptions& opts = {}) {
    require_order3(t, "approx_error_proxy");
    if (R < 1) throw InvalidArgument("approx_error_proxy: rank must be >= 1");
    const double nt = t.norm();
    auto rel = [nt](double err) { return nt > 0.0 ? err / nt : err; };
    switch (method) {
        case Method::cpd: return cpd_als(t, R, opts.als).rel_error;
        case Method::cpd_epc: {
            const AlsResult fit = cpd_als(t, R, opts.als);
            return rel(epc_correct(t, fit.model).error);
        }
        case Method::tkd_cpd_epc: {
            HybridOptions ho;
            ho.theta = opts.theta;
            ho.als = opts.als;
            return rel(tkd_cpd_epc(t, std::nullopt, R, ho).err_total);
        }
        case Method::svd: {
            if (t.extent(0) != 1) throw InvalidArgument("svd requires 1x1 kernel");
            const Matrix M = unfold(t, 2);  // T x S
            Eigen::JacobiSVD<Eigen::MatrixXd> svd{Eigen::MatrixXd(M)};
            const Eigen::VectorXd& sv = svd.singularValues();
            const Index k = std::min<Index>(R, sv.size());
            return rel(std::sqrt(sv.tail(sv.size() - k).squaredNorm()));
        }
    }
    return 0.0;
}

namespace detail {

inline std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') out += "'\\''"; else out += c;
    }
    return out + "'";
}

inline double parse_score(const std::string& text, const std::string& command) {
    std::istringstream is(text);
    double v = 0.0;
    std::string rest;
    if (!(is >> v) || (is >> rest) || !std::isfinite(v)) {
        throw EvaluatorError("evaluator '" + command + "' did not print a single decimal score", text);
    }
    return v;
}

}  // namespace detail

// Evaluator contract: `command <block.json> <kernel.kten>` prints one decimal
// score on stdout and exits 0. Each rank gets its own block directory under
// work_dir.
class ExternalEvaluator {
public:
    ExternalEvaluator(std::string command, std::filesystem::path kernel_path, std::filesystem::path work_dir,
                      DecomposeOptions base)
        : command_(std::move(command)), kernel_path_(std::move(kernel_path)), work_dir_(std::move(work_dir)),
          base_(std::move(base)), kernel_(read_tensor_file(kernel_path_).values) {}

    double operator()(Index R) const {
        DecomposeOptions o = base_;
        o.rank = R;
        const DecomposeOutcome out = decompose_kernel(kernel_, o);
        const auto dir = work_dir_ / ("rank_" + std::to_string(R));
        const auto block_path = write_block_file(dir, out.block);
        const std::string cmd = command_ + " " + detail::shell_quote(block_path.string()) + " " +
                                detail::shell_quote(kernel_path_.string());
        // stdout only for the score; stderr goes to the captured text on failure
        std::string captured;
        FILE* pipe = ::popen((cmd + " 2>" + detail::shell_quote((dir / "stderr.txt").string())).c_str(), "r");
        if (!pipe) throw EvaluatorError("failed to launch evaluator: " + cmd, "");
        std::array<char, 4096> buf{};
        while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) captured += buf.data();
        const int status = ::pclose(pipe);
        const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 128;
        if (code != 0) {
            std::string err;
            try {
                err = detail::read_all(dir / "stderr.txt");
            } catch (const Error&) {
            }
            throw EvaluatorError("evaluator '" + command_ + "' exited with status " + std::to_string(code),
                                 captured + err);
        }
        return detail::parse_score(captured, command_);
    }

private:
    std::string command_;
    std::filesystem::path kernel_path_;
    std::filesystem::path work_dir_;
    DecomposeOptions base_;
    DenseTensor kernel_;
};

}  // namespace stabletd
