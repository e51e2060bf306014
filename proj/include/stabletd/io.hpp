#pragma once

// Tensor files and block descriptor files.
//
// Tensor file ("KTEN1"):
//     KTEN1\n
//     {"dtype":"f64","order":"C","shape":[...]}\n
//     <raw little-endian scalars, row-major>
//
// Block file: JSON with the block kind, the original convolution spec, the
// layer chain (weights stored as tensor files next to the JSON, referenced
// by relative path) and metrics.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stabletd/conv.hpp"
#include "stabletd/error.hpp"
#include "stabletd/tensor.hpp"

namespace stabletd {

enum class Dtype { f32, f64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

inline std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

struct TensorFile {
    Dtype dtype = Dtype::f64;
    DenseTensor values;  // f32 payloads are widened exactly
};

inline constexpr char kTensorMagic[] = "KTEN1\n";

namespace detail {

template <typename T>
T byteswap_if_big(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

// Writes through a sibling temp file and renames it into place.
inline void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot open " + tmp.string() + " for writing");
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw Error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_all(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace detail

inline std::string encode_tensor(const DenseTensor& t, Dtype dtype = Dtype::f64) {
    nlohmann::json header;
    header["dtype"] = dtype_name(dtype);
    header["shape"] = t.shape();
    header["order"] = "C";
    std::string out = kTensorMagic;
    out += header.dump();
    out += '\n';
    out.reserve(out.size() + static_cast<std::size_t>(t.size()) * dtype_size(dtype));
    char buf[8];
    for (double v : t.data()) {
        if (dtype == Dtype::f64) {
            const double le = detail::byteswap_if_big(v);
            std::memcpy(buf, &le, 8);
            out.append(buf, 8);
        } else {
            const float le = detail::byteswap_if_big(static_cast<float>(v));
            std::memcpy(buf, &le, 4);
            out.append(buf, 4);
        }
    }
    return out;
}

inline TensorFile decode_tensor(const std::string& bytes, const std::string& origin = "<memory>") {
    const std::string magic = kTensorMagic;
    if (bytes.compare(0, magic.size(), magic) != 0) {
        throw FormatError(origin + ": not a KTEN1 tensor file (bad magic)");
    }
    const auto eol = bytes.find('\n', magic.size());
    if (eol == std::string::npos) throw FormatError(origin + ": missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(magic.size(), eol - magic.size()));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(origin + ": malformed header: " + e.what());
    }
    TensorFile out;
    Shape shape;
    try {
        const std::string dtype = header.at("dtype").get<std::string>();
        if (dtype == "f64") out.dtype = Dtype::f64;
        else if (dtype == "f32") out.dtype = Dtype::f32;
        else throw FormatError(origin + ": unsupported dtype '" + dtype + "'");
        if (header.value("order", std::string("C")) != "C") throw FormatError(origin + ": only C order is supported");
        shape = header.at("shape").get<Shape>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(origin + ": malformed header: " + e.what());
    }
    if (shape.empty()) throw FormatError(origin + ": empty shape");
    for (Index e : shape) {
        if (e < 1) throw FormatError(origin + ": non-positive extent in shape");
    }
    const std::size_t count = static_cast<std::size_t>(shape_size(shape));
    const std::size_t payload = bytes.size() - eol - 1;
    if (payload != count * dtype_size(out.dtype)) {
        throw FormatError(origin + ": payload has " + std::to_string(payload) + " bytes, expected " +
                          std::to_string(count * dtype_size(out.dtype)));
    }
    std::vector<double> data(count);
    const char* p = bytes.data() + eol + 1;
    for (std::size_t n = 0; n < count; ++n) {
        if (out.dtype == Dtype::f64) {
            double v;
            std::memcpy(&v, p + 8 * n, 8);
            data[n] = detail::byteswap_if_big(v);
        } else {
            float v;
            std::memcpy(&v, p + 4 * n, 4);
            data[n] = static_cast<double>(detail::byteswap_if_big(v));
        }
    }
    out.values = DenseTensor(std::move(shape), std::move(data));
    return out;
}

inline void write_tensor_file(const std::filesystem::path& path, const DenseTensor& t, Dtype dtype = Dtype::f64) {
    detail::write_atomically(path, encode_tensor(t, dtype));
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
    return decode_tensor(detail::read_all(path), path.string());
}

struct BlockMetrics {
    double rel_error = 0.0;
    std::optional<double> sensitivity;
    std::optional<double> intensity;
    Index params = 0;
    Index flops = 0;
    Index input_h = 32;  // geometry the flop count refers to
    Index input_w = 32;
};

struct BlockFile {
    Block block;
    BlockMetrics metrics;
};

namespace detail {

inline Vector as_vector(const DenseTensor& t) {
    Vector v(t.size());
    for (Index n = 0; n < t.size(); ++n) v(n) = t[n];
    return v;
}

inline DenseTensor as_tensor(const Vector& v) {
    return DenseTensor({v.size()}, std::vector<double>(v.data(), v.data() + v.size()));
}

inline BlockKind parse_block_kind(const std::string& s) {
    if (s == "cpd") return BlockKind::cpd;
    if (s == "tkd-cpd") return BlockKind::tkd_cpd;
    if (s == "svd") return BlockKind::svd;
    throw FormatError("unknown block kind '" + s + "'");
}

}  // namespace detail

// Writes <dir>/<name> plus one tensor file per weight/bias array.
inline std::filesystem::path write_block_file(const std::filesystem::path& dir, const BlockFile& bf,
                                              const std::string& name = "block.json") {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j;
    j["block"] = block_kind_name(bf.block.kind);
    const ConvSpec& spec = bf.block.spec;
    j["spec"] = {{"in_channels", spec.in_channels}, {"out_channels", spec.out_channels},
                 {"kernel", spec.kernel}, {"stride", spec.stride}, {"pad", spec.pad}};
    if (spec.bias) {
        write_tensor_file(dir / "spec_bias.kten", detail::as_tensor(*spec.bias));
        j["spec"]["bias"] = "spec_bias.kten";
    }
    j["layers"] = nlohmann::json::array();
    for (std::size_t n = 0; n < bf.block.layers.size(); ++n) {
        const LayerDescriptor& l = bf.block.layers[n];
        const std::string wname = "layer" + std::to_string(n) + "_weights.kten";
        write_tensor_file(dir / wname, l.weights);
        nlohmann::json lj = {{"kind", l.kind}, {"in", l.in}, {"out", l.out},
                             {"kernel", {l.kernel_h, l.kernel_w}}, {"groups", l.groups},
                             {"stride", l.stride}, {"pad", l.pad}, {"weights", wname}};
        if (l.bias) {
            const std::string bname = "layer" + std::to_string(n) + "_bias.kten";
            write_tensor_file(dir / bname, detail::as_tensor(*l.bias));
            lj["bias"] = bname;
        }
        j["layers"].push_back(lj);
    }
    const BlockMetrics& m = bf.metrics;
    j["metrics"] = {{"rel_error", m.rel_error}, {"params", m.params}, {"flops", m.flops},
                    {"input_hw", {m.input_h, m.input_w}}};
    j["metrics"]["sensitivity"] = m.sensitivity ? nlohmann::json(*m.sensitivity) : nlohmann::json(nullptr);
    j["metrics"]["intensity"] = m.intensity ? nlohmann::json(*m.intensity) : nlohmann::json(nullptr);
    const fs::path path = dir / name;
    detail::write_atomically(path, j.dump(2) + "\n");
    return path;
}

// Parses a block file and loads the referenced tensors. Structural problems
// (missing files, bad shapes, broken chain) raise FormatError.
inline BlockFile read_block_file(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    const fs::path dir = path.parent_path();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_all(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": malformed JSON: " + e.what());
    }
    BlockFile bf;
    try {
        bf.block.kind = detail::parse_block_kind(j.at("block").get<std::string>());
        const auto& sj = j.at("spec");
        ConvSpec& spec = bf.block.spec;
        spec.in_channels = sj.at("in_channels").get<Index>();
        spec.out_channels = sj.at("out_channels").get<Index>();
        spec.kernel = sj.at("kernel").get<Index>();
        spec.stride = sj.at("stride").get<Index>();
        spec.pad = sj.at("pad").get<Index>();
        if (sj.contains("bias") && !sj["bias"].is_null()) {
            spec.bias = detail::as_vector(read_tensor_file(dir / sj["bias"].get<std::string>()).values);
        }
        for (const auto& lj : j.at("layers")) {
            LayerDescriptor l;
            l.kind = lj.at("kind").get<std::string>();
            l.in = lj.at("in").get<Index>();
            l.out = lj.at("out").get<Index>();
            const auto& k = lj.at("kernel");
            l.kernel_h = k.at(0).get<Index>();
            l.kernel_w = k.at(1).get<Index>();
            l.groups = lj.at("groups").get<Index>();
            l.stride = lj.at("stride").get<Index>();
            l.pad = lj.at("pad").get<Index>();
            l.weights = read_tensor_file(dir / lj.at("weights").get<std::string>()).values;
            if (lj.contains("bias") && !lj["bias"].is_null()) {
                l.bias = detail::as_vector(read_tensor_file(dir / lj["bias"].get<std::string>()).values);
            }
            bf.block.layers.push_back(std::move(l));
        }
        const auto& mj = j.at("metrics");
        BlockMetrics& m = bf.metrics;
        m.rel_error = mj.at("rel_error").get<double>();
        m.params = mj.at("params").get<Index>();
        m.flops = mj.at("flops").get<Index>();
        if (mj.contains("input_hw")) {
            m.input_h = mj["input_hw"].at(0).get<Index>();
            m.input_w = mj["input_hw"].at(1).get<Index>();
        }
        if (mj.contains("sensitivity") && !mj["sensitivity"].is_null()) m.sensitivity = mj["sensitivity"].get<double>();
        if (mj.contains("intensity") && !mj["intensity"].is_null()) m.intensity = mj["intensity"].get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": malformed block file: " + e.what());
    }
    try {
        bf.block.spec.validate();
        check_chain(bf.block.layers);
    } catch (const InvalidArgument& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return bf;
}

}  // namespace stabletd
