#include <gtest/gtest.h>

#include <fstream>

#include "oracles.hpp"
#include "process.hpp"

using namespace stabletd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) { return detail::read_all(p); }

void spit(const fs::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    os << s;
}

}  // namespace

TEST(TensorFile, HeaderLayout) {
    DenseTensor t({2, 3});
    const std::string bytes = encode_tensor(t, Dtype::f32);
    EXPECT_EQ(bytes.rfind("KTEN1\n", 0), 0u);
    const auto eol = bytes.find('\n', 6);
    const auto header = nlohmann::json::parse(bytes.substr(6, eol - 6));
    EXPECT_EQ(header["dtype"], "f32");
    EXPECT_EQ(header["order"], "C");
    EXPECT_EQ(header["shape"], nlohmann::json::array({2, 3}));
    EXPECT_EQ(bytes.size() - eol - 1, 6u * 4u);
}

TEST(TensorFile, RoundTripBitwiseBothDtypes) {
    Rng rng = make_rng(100);
    const auto dir = testproc::scratch("io_roundtrip");
    const DenseTensor t = gaussian_tensor({3, 3, 2, 4}, rng);
    for (const Dtype d : {Dtype::f64, Dtype::f32}) {
        const fs::path p = dir / (std::string("k_") + dtype_name(d) + ".kten");
        write_tensor_file(p, t, d);
        const std::string first = slurp(p);
        const TensorFile f = read_tensor_file(p);
        EXPECT_EQ(f.dtype, d);
        EXPECT_EQ(f.values.shape(), t.shape());
        write_tensor_file(p, f.values, d);
        EXPECT_EQ(slurp(p), first);
        if (d == Dtype::f64) EXPECT_TRUE(f.values == t);
        else EXPECT_TRUE(f.values == t.cast<float>().cast<double>());
    }
    EXPECT_FALSE(fs::exists(dir / "k_f64.kten.tmp"));
}

TEST(TensorFile, MalformedInputsRaiseFormatError) {
    const std::string good = encode_tensor(DenseTensor({2, 2}));
    EXPECT_THROW(decode_tensor("KTEN2\n{}\n"), FormatError);
    EXPECT_THROW(decode_tensor("KTEN1\n{\"dtype\":\"f64\""), FormatError);
    EXPECT_THROW(decode_tensor("KTEN1\n{\"dtype\":\"i8\",\"shape\":[1],\"order\":\"C\"}\n0"), FormatError);
    EXPECT_THROW(decode_tensor("KTEN1\n{\"dtype\":\"f64\",\"shape\":[1],\"order\":\"F\"}\n01234567"), FormatError);
    EXPECT_THROW(decode_tensor("KTEN1\n{\"dtype\":\"f64\",\"shape\":[0],\"order\":\"C\"}\n"), FormatError);
    EXPECT_THROW(decode_tensor(good.substr(0, good.size() - 1)), FormatError);
    EXPECT_THROW(decode_tensor(good + "x"), FormatError);
    EXPECT_THROW(read_tensor_file("/nonexistent/file.kten"), FormatError);
}

TEST(BlockFile, RoundTripAndMetricsMatchRecount) {
    Rng rng = make_rng(101);
    const DenseTensor k4 = gaussian_tensor({3, 3, 4, 5}, rng);
    DecomposeOptions o;
    o.method = Method::cpd_epc;
    o.rank = 3;
    o.pad = 1;
    o.bias = Vector::LinSpaced(5, 0.0, 1.0);
    const DecomposeOutcome out = decompose_kernel(k4, o);
    const auto dir = testproc::scratch("io_block");
    const fs::path path = write_block_file(dir, out.block);
    const BlockFile back = read_block_file(path);
    EXPECT_EQ(back.block.kind, BlockKind::cpd);
    ASSERT_EQ(back.block.layers.size(), 3u);
    for (std::size_t n = 0; n < 3; ++n) EXPECT_TRUE(back.block.layers[n].weights == out.block.block.layers[n].weights);
    ASSERT_TRUE(back.block.spec.bias);
    EXPECT_EQ(*back.block.spec.bias, *o.bias);
    EXPECT_EQ(back.metrics.rel_error, out.block.metrics.rel_error);
    const CostReport c = count_params_flops(back.block.layers, back.metrics.input_h, back.metrics.input_w);
    EXPECT_EQ(c.params, back.metrics.params);
    EXPECT_EQ(c.flops, back.metrics.flops);
    const auto j = nlohmann::json::parse(slurp(path));
    EXPECT_EQ(j["block"], "cpd");
    EXPECT_EQ(j["layers"][1]["groups"], 3);
    EXPECT_TRUE(j["metrics"].contains("sensitivity"));
    EXPECT_TRUE(j["metrics"].contains("intensity"));
}

TEST(BlockFile, BrokenChainAndMissingFiles) {
    Rng rng = make_rng(102);
    DecomposeOptions o;
    o.method = Method::cpd;
    o.rank = 2;
    const DecomposeOutcome out = decompose_kernel(gaussian_tensor({3, 3, 2, 2}, rng), o);
    const auto dir = testproc::scratch("io_broken");
    const fs::path path = write_block_file(dir, out.block);
    auto j = nlohmann::json::parse(slurp(path));
    j["layers"][2]["in"] = 5;
    spit(path, j.dump());
    EXPECT_THROW(read_block_file(path), FormatError);
    write_block_file(dir, out.block);
    fs::remove(dir / "layer1_weights.kten");
    EXPECT_THROW(read_block_file(path), FormatError);
    spit(path, "{ not json");
    EXPECT_THROW(read_block_file(path), FormatError);
}

TEST(DecomposeKernel, ReportsAreDeterministic) {
    Rng rng = make_rng(103);
    const DenseTensor k4 = gaussian_tensor({3, 3, 3, 4}, rng);
    DecomposeOptions o;
    o.rank = 3;
    o.seed = 5;
    EXPECT_EQ(decompose_kernel(k4, o).report.dump(), decompose_kernel(k4, o).report.dump());
}

TEST(DecomposeKernel, TkdCpdEpcMergesWhenRankIsSmall) {
    Rng rng = make_rng(104);
    const DenseTensor k4 = gaussian_tensor({3, 3, 6, 6}, rng);
    DecomposeOptions o;
    o.method = Method::tkd_cpd_epc;
    o.rank = 2;
    o.ranks = std::pair<Index, Index>{4, 4};
    const DecomposeOutcome merged = decompose_kernel(k4, o);
    EXPECT_EQ(merged.block.block.kind, BlockKind::cpd);
    EXPECT_TRUE(merged.report["merged"].get<bool>());
    o.rank = 6;
    const DecomposeOutcome kept = decompose_kernel(k4, o);
    EXPECT_EQ(kept.block.block.kind, BlockKind::tkd_cpd);
    EXPECT_EQ(kept.block.block.layers.size(), 5u);
}

TEST(DecomposeKernel, RejectsBadKernels) {
    DecomposeOptions o;
    EXPECT_THROW(decompose_kernel(DenseTensor({3, 3, 2}), o), FormatError);
    DenseTensor k({1, 1, 2, 2});
    k[0] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(decompose_kernel(k, o), FormatError);
    o.method = Method::svd;
    EXPECT_THROW(decompose_kernel(DenseTensor({3, 3, 2, 2}), o), InvalidArgument);
}
