#pragma once

// Convolution-layer descriptors for factorized kernels, a direct reference
// convolution, and parameter/FLOP accounting.
//
// Activations are H x W x C tensors (channel last). Kernels handed to
// conv2d_reference are D x D x S x T; layer weights use the
// (out, in/groups, k_h, k_w) layout, row-major.

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stabletd/cpd.hpp"
#include "stabletd/error.hpp"
#include "stabletd/hybrid.hpp"
#include "stabletd/tensor.hpp"

namespace stabletd {

struct ConvSpec {
    Index in_channels = 1;   // S
    Index out_channels = 1;  // T
    Index kernel = 1;        // D (square)
    Index stride = 1;
    Index pad = 0;
    std::optional<Vector> bias;  // length T

    void validate() const {
        if (in_channels < 1 || out_channels < 1) throw InvalidArgument("ConvSpec: channel counts must be >= 1");
        if (kernel < 1) throw InvalidArgument("ConvSpec: kernel size must be >= 1");
        if (stride < 1) throw InvalidArgument("ConvSpec: stride must be >= 1");
        if (pad < 0) throw InvalidArgument("ConvSpec: pad must be >= 0");
        if (bias && bias->size() != out_channels) throw InvalidArgument("ConvSpec: bias length must equal out_channels");
    }
};

struct LayerDescriptor {
    std::string kind = "conv2d";
    Index in = 1;
    Index out = 1;
    Index kernel_h = 1;
    Index kernel_w = 1;
    Index groups = 1;
    Index stride = 1;
    Index pad = 0;
    DenseTensor weights;  // (out, in/groups, kernel_h, kernel_w)
    std::optional<Vector> bias;

    void validate() const {
        if (kind != "conv2d") throw InvalidArgument("LayerDescriptor: unsupported kind '" + kind + "'");
        if (in < 1 || out < 1 || groups < 1 || kernel_h < 1 || kernel_w < 1 || stride < 1 || pad < 0) {
            throw InvalidArgument("LayerDescriptor: non-positive extent");
        }
        if (in % groups != 0 || out % groups != 0) {
            throw InvalidArgument("LayerDescriptor: channels not divisible by groups");
        }
        const Shape expect{out, in / groups, kernel_h, kernel_w};
        if (weights.shape() != expect) {
            throw InvalidArgument("LayerDescriptor: weights shape " + shape_string(weights.shape()) +
                                  ", expected " + shape_string(expect));
        }
        if (bias && bias->size() != out) throw InvalidArgument("LayerDescriptor: bias length must equal out");
    }
};

enum class BlockKind { cpd, tkd_cpd, svd };

inline const char* block_kind_name(BlockKind k) {
    switch (k) {
        case BlockKind::cpd: return "cpd";
        case BlockKind::tkd_cpd: return "tkd-cpd";
        case BlockKind::svd: return "svd";
    }
    return "?";
}

struct Block {
    BlockKind kind = BlockKind::cpd;
    ConvSpec spec;
    std::vector<LayerDescriptor> layers;
};

inline Index conv_output_extent(Index in, Index k, Index stride, Index pad) {
    const Index span = in + 2 * pad - k;
    if (span < 0) throw InvalidArgument("convolution window larger than padded input");
    return span / stride + 1;
}

// Y[h', w', t] = sum_{i, j, s} K[i, j, s, t] X[(h'-1)Δ + i - P, (w'-1)Δ + j - P, s]
// with zero padding, plus bias[t].
inline DenseTensor conv2d_reference(const DenseTensor& x, const ConvSpec& spec, const DenseTensor& kernel) {
    spec.validate();
    const Index D = spec.kernel, S = spec.in_channels, T = spec.out_channels;
    if (x.order() != 3 || x.extent(2) != S) {
        throw InvalidArgument("conv2d_reference: input must be H x W x " + std::to_string(S) + ", got " +
                              shape_string(x.shape()));
    }
    if (kernel.shape() != Shape{D, D, S, T}) {
        throw InvalidArgument("conv2d_reference: kernel must be " + shape_string({D, D, S, T}) + ", got " +
                              shape_string(kernel.shape()));
    }
    const Index H = x.extent(0), W = x.extent(1);
    const Index Ho = conv_output_extent(H, D, spec.stride, spec.pad);
    const Index Wo = conv_output_extent(W, D, spec.stride, spec.pad);
    DenseTensor y({Ho, Wo, T});
    for (Index ho = 0; ho < Ho; ++ho) {
        for (Index wo = 0; wo < Wo; ++wo) {
            for (Index t = 0; t < T; ++t) {
                double acc = spec.bias ? (*spec.bias)(t) : 0.0;
                for (Index i = 0; i < D; ++i) {
                    const Index h = ho * spec.stride + i - spec.pad;
                    if (h < 0 || h >= H) continue;
                    for (Index j = 0; j < D; ++j) {
                        const Index w = wo * spec.stride + j - spec.pad;
                        if (w < 0 || w >= W) continue;
                        for (Index s = 0; s < S; ++s) acc += kernel(i, j, s, t) * x(h, w, s);
                    }
                }
                y(ho, wo, t) = acc;
            }
        }
    }
    return y;
}

// Grouped convolution for one descriptor.
inline DenseTensor layer_forward(const DenseTensor& x, const LayerDescriptor& layer) {
    layer.validate();
    if (x.order() != 3 || x.extent(2) != layer.in) {
        throw InvalidArgument("layer_forward: input has shape " + shape_string(x.shape()) + ", layer expects " +
                              std::to_string(layer.in) + " channels");
    }
    const Index H = x.extent(0), W = x.extent(1);
    const Index Ho = conv_output_extent(H, layer.kernel_h, layer.stride, layer.pad);
    const Index Wo = conv_output_extent(W, layer.kernel_w, layer.stride, layer.pad);
    const Index in_g = layer.in / layer.groups, out_g = layer.out / layer.groups;
    DenseTensor y({Ho, Wo, layer.out});
    for (Index ho = 0; ho < Ho; ++ho) {
        for (Index wo = 0; wo < Wo; ++wo) {
            for (Index o = 0; o < layer.out; ++o) {
                const Index g = o / out_g;
                double acc = layer.bias ? (*layer.bias)(o) : 0.0;
                for (Index c = 0; c < in_g; ++c) {
                    const Index ci = g * in_g + c;
                    for (Index kh = 0; kh < layer.kernel_h; ++kh) {
                        const Index h = ho * layer.stride + kh - layer.pad;
                        if (h < 0 || h >= H) continue;
                        for (Index kw = 0; kw < layer.kernel_w; ++kw) {
                            const Index w = wo * layer.stride + kw - layer.pad;
                            if (w < 0 || w >= W) continue;
                            acc += layer.weights(o, c, kh, kw) * x(h, w, ci);
                        }
                    }
                }
                y(ho, wo, o) = acc;
            }
        }
    }
    return y;
}

inline void check_chain(const std::vector<LayerDescriptor>& layers) {
    if (layers.empty()) throw InvalidArgument("layer chain is empty");
    for (std::size_t n = 0; n < layers.size(); ++n) {
        layers[n].validate();
        if (n > 0 && layers[n - 1].out != layers[n].in) {
            std::ostringstream os;
            os << "broken layer chain: layer " << n - 1 << " outputs " << layers[n - 1].out
               << " channels but layer " << n << " expects " << layers[n].in;
            throw InvalidArgument(os.str());
        }
    }
}

inline DenseTensor forward_chain(const DenseTensor& x, const std::vector<LayerDescriptor>& layers) {
    check_chain(layers);
    DenseTensor y = x;
    for (const auto& layer : layers) y = layer_forward(y, layer);
    return y;
}

namespace detail {

// 1x1 layer whose weights(o, c) = W(o, c).
inline LayerDescriptor pointwise(const Matrix& W, Index stride = 1, Index pad = 0) {
    LayerDescriptor l;
    l.in = W.cols();
    l.out = W.rows();
    l.stride = stride;
    l.pad = pad;
    l.weights = DenseTensor({l.out, l.in, 1, 1});
    for (Index o = 0; o < l.out; ++o)
        for (Index c = 0; c < l.in; ++c) l.weights(o, c, 0, 0) = W(o, c);
    return l;
}

// Depthwise D x D layer; filter r is column r of A reshaped with (i, j) -> i + j*D.
inline LayerDescriptor depthwise(const Matrix& A, Index D, Index stride, Index pad) {
    LayerDescriptor l;
    const Index R = A.cols();
    l.in = l.out = l.groups = R;
    l.kernel_h = l.kernel_w = D;
    l.stride = stride;
    l.pad = pad;
    l.weights = DenseTensor({R, 1, D, D});
    for (Index r = 0; r < R; ++r)
        for (Index i = 0; i < D; ++i)
            for (Index j = 0; j < D; ++j) l.weights(r, 0, i, j) = A(i + j * D, r);
    return l;
}

}  // namespace detail

// S -> R (B), depthwise D x D (A), R -> T (C, lambda folded, spec bias).
inline Block emit_cpd_block(const CPModel& m, const ConvSpec& spec) {
    spec.validate();
    const CPModel p = absorb_weights(m);
    const Index D = spec.kernel;
    if (p.A.rows() != D * D || p.B.rows() != spec.in_channels || p.C.rows() != spec.out_channels) {
        throw InvalidArgument("emit_cpd_block: model dims " + shape_string(p.dims()) + " do not match spec " +
                              shape_string({D * D, spec.in_channels, spec.out_channels}));
    }
    Block b{BlockKind::cpd, spec, {}};
    b.layers.push_back(detail::pointwise(p.B.transpose()));
    b.layers.push_back(detail::depthwise(p.A, D, spec.stride, spec.pad));
    b.layers.push_back(detail::pointwise(p.C));
    b.layers.back().bias = spec.bias;
    return b;
}

// S -> R1 (U), R1 -> R (core B), depthwise (core A), R -> R2 (core C), R2 -> T (V).
inline Block emit_tkd_cpd_block(const HybridModel& h, const ConvSpec& spec) {
    spec.validate();
    if (should_merge(h)) {
        throw InvalidArgument("emit_tkd_cpd_block: CP rank is below both multilinear ranks; "
                              "merge with to_equivalent_cp and emit a CPD block instead");
    }
    const CPModel core = absorb_weights(h.core_cp);
    const Index D = spec.kernel;
    if (h.U.rows() != spec.in_channels || h.V.rows() != spec.out_channels || core.A.rows() != D * D ||
        core.B.rows() != h.r1() || core.C.rows() != h.r2()) {
        throw InvalidArgument("emit_tkd_cpd_block: hybrid model does not match spec");
    }
    Block b{BlockKind::tkd_cpd, spec, {}};
    b.layers.push_back(detail::pointwise(h.U.transpose()));
    b.layers.push_back(detail::pointwise(core.B.transpose()));
    b.layers.push_back(detail::depthwise(core.A, D, spec.stride, spec.pad));
    b.layers.push_back(detail::pointwise(core.C));
    b.layers.push_back(detail::pointwise(h.V));
    b.layers.back().bias = spec.bias;
    return b;
}

// Truncated SVD of a T x S pointwise kernel: S -> R (sqrt(sigma) V'), R -> T (U sqrt(sigma)).
inline Block emit_svd_block(const Matrix& kernel_1x1, Index R, const ConvSpec& spec) {
    spec.validate();
    if (spec.kernel != 1) throw InvalidArgument("svd requires 1x1 kernel");
    const Index S = spec.in_channels, T = spec.out_channels;
    if (kernel_1x1.rows() != T || kernel_1x1.cols() != S) {
        throw InvalidArgument("emit_svd_block: kernel matrix must be T x S");
    }
    if (R < 1 || R > std::min(S, T)) throw InvalidArgument("emit_svd_block: rank must lie in [1, min(S, T)]");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(kernel_1x1), Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd root = svd.singularValues().head(R).cwiseSqrt();
    const Matrix left = svd.matrixU().leftCols(R) * root.asDiagonal();    // T x R
    const Matrix right = root.asDiagonal() * svd.matrixV().leftCols(R).transpose();  // R x S
    Block b{BlockKind::svd, spec, {}};
    b.layers.push_back(detail::pointwise(right, spec.stride, spec.pad));
    b.layers.push_back(detail::pointwise(left));
    b.layers.back().bias = spec.bias;
    return b;
}

// Pointwise kernel matrix (T x S) of a 1 x 1 x S x T kernel.
inline Matrix pointwise_matrix(const DenseTensor& k4) {
    if (k4.order() != 4 || k4.extent(0) != 1 || k4.extent(1) != 1) {
        throw InvalidArgument("svd requires 1x1 kernel");
    }
    Matrix M(k4.extent(3), k4.extent(2));
    for (Index s = 0; s < k4.extent(2); ++s)
        for (Index t = 0; t < k4.extent(3); ++t) M(t, s) = k4(0, 0, s, t);
    return M;
}

struct CostReport {
    Index params = 0;
    Index flops = 0;
};

// params: weights + biases. flops: 2 * H' * W' * (in/groups) * k_h * k_w * out
// per layer (one multiply-add counts as 2).
inline CostReport count_params_flops(const std::vector<LayerDescriptor>& layers, Index H, Index W) {
    check_chain(layers);
    CostReport c;
    for (const auto& l : layers) {
        H = conv_output_extent(H, l.kernel_h, l.stride, l.pad);
        W = conv_output_extent(W, l.kernel_w, l.stride, l.pad);
        c.params += l.weights.size() + (l.bias ? l.bias->size() : 0);
        c.flops += 2 * H * W * (l.in / l.groups) * l.kernel_h * l.kernel_w * l.out;
    }
    return c;
}

// Equivalent dense D x D x S x T kernel of a chain made of 1x1 layers around
// at most one spatial layer, all unpadded 1x1 layers with stride 1 except the
// first. Biases other than on the last layer are rejected.
inline DenseTensor block_kernel(const std::vector<LayerDescriptor>& layers) {
    check_chain(layers);
    std::optional<std::size_t> spatial;
    for (std::size_t n = 0; n < layers.size(); ++n) {
        const auto& l = layers[n];
        if (l.bias && n + 1 != layers.size()) throw InvalidArgument("block_kernel: bias only allowed on last layer");
        if (l.kernel_h != 1 || l.kernel_w != 1 || l.groups != 1) {
            if (spatial) throw InvalidArgument("block_kernel: more than one spatial layer");
            if (l.kernel_h != l.kernel_w) throw InvalidArgument("block_kernel: non-square spatial layer");
            spatial = n;
        }
    }
    if (spatial) {
        for (std::size_t n = 0; n < layers.size(); ++n) {
            if (n != *spatial && (layers[n].stride != 1 || layers[n].pad != 0)) {
                throw InvalidArgument("block_kernel: 1x1 layers around a spatial layer must use stride 1, pad 0");
            }
        }
    }
    const Index S = layers.front().in;
    auto pointwise_of = [](const LayerDescriptor& l) {
        Matrix M(l.out, l.in);
        for (Index o = 0; o < l.out; ++o)
            for (Index c = 0; c < l.in; ++c) M(o, c) = l.weights(o, c, 0, 0);
        return M;
    };
    Matrix pre = Matrix::Identity(S, S);
    Matrix post;
    const std::size_t split = spatial.value_or(layers.size());
    for (std::size_t n = 0; n < split; ++n) pre = pointwise_of(layers[n]) * pre;
    if (!spatial) {
        const Index T = pre.rows();
        DenseTensor k({1, 1, S, T});
        for (Index s = 0; s < S; ++s)
            for (Index t = 0; t < T; ++t) k(0, 0, s, t) = pre(t, s);
        return k;
    }
    const auto& sp = layers[*spatial];
    post = Matrix::Identity(sp.out, sp.out);
    for (std::size_t n = *spatial + 1; n < layers.size(); ++n) post = pointwise_of(layers[n]) * post;
    const Index D = sp.kernel_h, T = post.rows();
    const Index in_g = sp.in / sp.groups, out_g = sp.out / sp.groups;
    DenseTensor k({D, D, S, T});
    for (Index i = 0; i < D; ++i) {
        for (Index j = 0; j < D; ++j) {
            // M(o, s) = sum_c W(o, c, i, j) pre(g*in_g + c, s)
            Matrix M = Matrix::Zero(sp.out, S);
            for (Index o = 0; o < sp.out; ++o) {
                const Index g = o / out_g;
                for (Index c = 0; c < in_g; ++c) M.row(o) += sp.weights(o, c, i, j) * pre.row(g * in_g + c);
            }
            const Matrix full = post * M;  // T x S
            for (Index s = 0; s < S; ++s)
                for (Index t = 0; t < T; ++t) k(i, j, s, t) = full(t, s);
        }
    }
    return k;
}

// ConvSpec matching a block's end-to-end geometry.
inline ConvSpec block_spec(const std::vector<LayerDescriptor>& layers) {
    check_chain(layers);
    ConvSpec spec;
    spec.in_channels = layers.front().in;
    spec.out_channels = layers.back().out;
    spec.bias = layers.back().bias;
    for (const auto& l : layers) {
        if (l.kernel_h != 1 || l.stride != 1 || l.pad != 0) {
            spec.kernel = l.kernel_h;
            spec.stride = l.stride;
            spec.pad = l.pad;
        }
    }
    return spec;
}

}  // namespace stabletd
