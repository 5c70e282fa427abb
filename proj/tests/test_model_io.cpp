#include <doctest.h>

#include <cstring>
#include <fstream>
#include <json.hpp>

#include "bsnn/errors.hpp"
#include "bsnn/fixtures.hpp"
#include "bsnn/model_io.hpp"
#include "helpers.hpp"

using namespace bsnn;
using nlohmann::json;

namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes)
{
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_le(std::vector<std::uint8_t>& b, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) {
        b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_be(std::vector<std::uint8_t>& b, std::uint32_t v)
{
    for (int i = 3; i >= 0; --i) {
        b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_float(std::vector<std::uint8_t>& b, float f)
{
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_le(b, u);
}

bool bits_equal(const Tensor& a, const Tensor& b)
{
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * 4) == 0;
}

} // namespace

TEST_CASE("save then load is the identity")
{
    Rng rng(5);
    const auto dir = testing::scratch_dir("roundtrip");
    SUBCASE("mlp")
    {
        const ModelGraph m = random_mlp(rng, 7, {5, 4}, 3, 0.5, 0.1);
        save_model(m, dir);
        const ModelGraph back = load_model(dir);
        CHECK(back == m);
        CHECK(bits_equal(std::get<DenseLayer>(back.layers[1].op).weight, std::get<DenseLayer>(m.layers[1].op).weight));
    }
    SUBCASE("conv resnet with batchnorm")
    {
        const ModelGraph m = testing::random_conv_resnet(rng);
        save_model(m, dir);
        CHECK(load_model(dir) == m);
    }
    SUBCASE("property: random models and awkward floats")
    {
        for (int trial = 0; trial < 20; ++trial) {
            ModelGraph m = trial % 2 ? testing::random_bn_mlp(rng, 1 + rng.below(6), {1 + rng.below(5)}, 2)
                                     : testing::random_dense_resnet(rng, 3, 4, 2);
            auto& d = std::get<DenseLayer>(m.layers[1].op);
            d.weight[0] = -0.0f;
            d.bias[0] = 1e-40f; // subnormal
            const SerializedModel s = serialize_model(m);
            const ModelGraph back = deserialize_model(s.manifest, s.weights);
            CHECK(back == m);
            const auto& bd = std::get<DenseLayer>(back.layers[1].op);
            CHECK(std::signbit(bd.weight[0]));
            CHECK(bits_equal(bd.bias, d.bias));
            CHECK(serialize_model(back).weights == s.weights);
        }
    }
}

TEST_CASE("weights.bin is little-endian float32 at the recorded offsets")
{
    ModelGraph m;
    m.input_shape = {2};
    m.layers = {make_input({2}), make_dense(Tensor::from({1, 2}, {1.5f, -2.0f}), Tensor::from({0.25f}))};
    const SerializedModel s = serialize_model(m);
    const json j = json::parse(s.manifest);
    const std::size_t w_off = j["blobs"]["layers.1.weight"]["offset"];
    const std::size_t b_off = j["blobs"]["layers.1.bias"]["offset"];
    std::vector<std::uint8_t> want_w, want_b;
    put_float(want_w, 1.5f);
    put_float(want_w, -2.0f);
    put_float(want_b, 0.25f);
    CHECK(std::equal(want_w.begin(), want_w.end(), s.weights.begin() + static_cast<long>(w_off)));
    CHECK(std::equal(want_b.begin(), want_b.end(), s.weights.begin() + static_cast<long>(b_off)));
    CHECK(j["blobs"]["layers.1.weight"]["shape"] == json::array({1, 2}));
}

TEST_CASE("save_model validates before writing")
{
    const auto dir = testing::scratch_dir("invalid") / "out";
    SUBCASE("empty layer list")
    {
        ModelGraph m;
        m.input_shape = {3};
        try {
            save_model(m, dir);
            FAIL("expected StructureError");
        } catch (const StructureError& e) {
            CHECK(std::string(e.what()) == "model must contain an input layer");
        }
    }
    SUBCASE("dangling blob reference")
    {
        ModelGraph m;
        m.input_shape = {2};
        DenseLayer d;
        d.units = 1;
        d.bias = Tensor({1});
        m.layers = {make_input({2}), Layer{d}};
        CHECK_THROWS_AS(save_model(m, dir), ValidationError);
    }
    CHECK_FALSE(std::filesystem::exists(dir / kManifestFile));
    CHECK_FALSE(std::filesystem::exists(dir / kWeightsFile));
}

TEST_CASE("save_model to an unwritable path is an I/O error")
{
    const auto dir = testing::scratch_dir("unwritable");
    dump(dir / "file", {1});
    Rng rng(1);
    CHECK_THROWS_AS(save_model(random_mlp(rng, 2, {2}, 2, 1, 0), dir / "file" / "sub"), IoError);
}

TEST_CASE("load_model failure modes are distinct")
{
    Rng rng(6);
    const auto dir = testing::scratch_dir("failures");
    save_model(random_mlp(rng, 4, {3}, 2, 0.5, 0.1), dir);
    const auto manifest = dir / kManifestFile;
    const auto weights = dir / kWeightsFile;
    std::ifstream in(manifest);
    const json good = json::parse(in);
    const auto good_weights = slurp(weights);
    auto write_manifest = [&](const json& j) { std::ofstream(manifest) << j.dump(2); };

    SUBCASE("truncated by one byte names the blob")
    {
        auto cut = good_weights;
        cut.pop_back();
        dump(weights, cut);
        try {
            load_model(dir);
            FAIL("expected TruncationError");
        } catch (const TruncationError& e) {
            // the last blob in the file is the output layer bias
            CHECK(std::string(e.what()).find("layers.3.bias") != std::string::npos);
        }
    }
    SUBCASE("version mismatch")
    {
        json j = good;
        j["version"] = 99;
        write_manifest(j);
        CHECK_THROWS_AS(load_model(dir), VersionError);
    }
    SUBCASE("shape inconsistency")
    {
        json j = good;
        j["input_shape"] = json::array({5});
        j["layers"][0]["shape"] = json::array({5});
        write_manifest(j);
        CHECK_THROWS_AS(load_model(dir), ShapeError);
    }
    SUBCASE("missing files")
    {
        std::filesystem::remove(weights);
        CHECK_THROWS_AS(load_model(dir), IoError);
        CHECK_THROWS_AS(load_model(dir / "nowhere"), IoError);
    }
}

TEST_CASE("residual body/shortcut mismatch cites the block")
{
    Rng rng(9);
    ModelGraph m = testing::random_dense_resnet(rng, 3, 4, 2);
    const SerializedModel s = serialize_model(m);
    json j = json::parse(s.manifest);
    // give the block a 1-unit shortcut so its output no longer matches the body
    std::vector<std::uint8_t> w = s.weights;
    const std::size_t off = w.size();
    for (int i = 0; i < 5; ++i) {
        put_float(w, 0.5f);
    }
    j["blobs"]["layers.3.shortcut.0.weight"] = {{"offset", off}, {"shape", {1, 4}}};
    j["blobs"]["layers.3.shortcut.0.bias"] = {{"offset", off + 16}, {"shape", {1}}};
    j["layers"][3]["shortcut"] = json::array(
        {{{"kind", "dense"}, {"units", 1}, {"weight", "layers.3.shortcut.0.weight"}, {"bias", "layers.3.shortcut.0.bias"}}});
    try {
        deserialize_model(j.dump(), w);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("layers.3") != std::string::npos);
    }
}

TEST_CASE("property: invariant-breaking manifest mutations are rejected")
{
    Rng rng(33);
    int rejected = 0;
    const int trials = 200;
    for (int trial = 0; trial < trials; ++trial) {
        const ModelGraph m = trial % 3 == 0   ? testing::random_conv_resnet(rng)
                             : trial % 3 == 1 ? testing::random_bn_mlp(rng, 3, {4, 2}, 2)
                                              : testing::random_dense_resnet(rng, 3, 3, 2);
        const SerializedModel s = serialize_model(m);
        json j = json::parse(s.manifest);
        std::vector<std::uint8_t> w = s.weights;
        auto& blobs = j["blobs"];
        std::vector<std::string> names;
        for (auto it = blobs.begin(); it != blobs.end(); ++it) {
            names.push_back(it.key());
        }
        const std::string victim = names[rng.below(names.size())];
        const int kind = static_cast<int>(rng.below(10));
        CAPTURE(trial);
        CAPTURE(kind);
        switch (kind) {
        case 0: j["version"] = static_cast<int>(2 + rng.below(5)); break;
        case 1: blobs.erase(victim); break;
        case 2: blobs[victim]["offset"] = w.size() + 4 * rng.below(4); break;
        case 3: blobs[victim]["shape"].push_back(2); break;
        case 4: blobs["extra"] = {{"offset", 0}, {"shape", {1}}}; break;
        case 5: j["layers"].erase(0); break;
        case 6: j["input_shape"][0] = j["input_shape"][0].get<int>() + 1; break;
        case 7: j["layers"][1]["kind"] = "softmax"; break;
        case 8: {
            // batchnorm directly after the input layer
            json bn = j["layers"][1];
            bn = {{"kind", "batchnorm"}, {"mean", victim}, {"std", victim}, {"gamma", victim}, {"beta", victim}};
            j["layers"].insert(j["layers"].begin() + 1, bn);
            break;
        }
        default: w.resize(w.size() - 1 - rng.below(4)); break;
        }
        try {
            deserialize_model(j.dump(), w);
        } catch (const Error&) {
            ++rejected;
        }
    }
    CHECK(rejected == trials);
}

TEST_CASE("BSD datasets")
{
    const auto dir = testing::scratch_dir("bsd");
    SUBCASE("hand-built two-sample file")
    {
        std::vector<std::uint8_t> b{'B', 'S', 'D', '1'};
        put_le(b, 2);
        put_le(b, 2);
        put_le(b, 1);
        put_le(b, 3);
        for (float f : {0.0f, 0.5f, 1.0f, -1.0f, 2.0f, 0.25f}) {
            put_float(b, f);
        }
        b.push_back(3);
        b.push_back(1);
        dump(dir / "two.bsd", b);
        const Dataset d = load_dataset(dir / "two.bsd", DatasetFormat::bsd);
        CHECK(d.inputs.shape() == Shape{2, 1, 3});
        CHECK(d.labels == std::vector<int>{3, 1});
        CHECK(d.sample(1) == Tensor::from({1, 3}, {-1.0f, 2.0f, 0.25f}));
        save_dataset_bsd(d, dir / "again.bsd");
        CHECK(slurp(dir / "again.bsd") == b);
    }
    SUBCASE("fixture generator round-trip")
    {
        BlobConfig cfg;
        cfg.samples = 2;
        cfg.dims = 5;
        const Dataset d = make_blobs(cfg);
        save_dataset_bsd(d, dir / "fix.bsd");
        const Dataset back = load_dataset(dir / "fix.bsd", DatasetFormat::bsd);
        CHECK(back.inputs.shape() == Shape{2, 5});
        CHECK(back.inputs == d.inputs);
        CHECK(back.labels == d.labels);
    }
    SUBCASE("bad magic")
    {
        std::vector<std::uint8_t> b{'X', 'X', 'X', 'X'};
        put_le(b, 0);
        put_le(b, 1);
        put_le(b, 1);
        dump(dir / "bad.bsd", b);
        CHECK_THROWS_AS(load_dataset(dir / "bad.bsd", DatasetFormat::bsd), FormatError);
    }
    SUBCASE("element count mismatch")
    {
        std::vector<std::uint8_t> b{'B', 'S', 'D', '1'};
        put_le(b, 2);
        put_le(b, 1);
        put_le(b, 2);
        put_float(b, 1.0f);
        b.push_back(0);
        dump(dir / "short.bsd", b);
        CHECK_THROWS_AS(load_dataset(dir / "short.bsd", DatasetFormat::bsd), FormatError);
    }
    SUBCASE("missing file")
    {
        CHECK_THROWS_AS(load_dataset(dir / "none.bsd", DatasetFormat::bsd), IoError);
    }
}

TEST_CASE("IDX datasets")
{
    const auto dir = testing::scratch_dir("idx");
    std::vector<std::uint8_t> img, lab;
    put_be(img, 0x00000803);
    put_be(img, 2);
    put_be(img, 28);
    put_be(img, 28);
    for (std::size_t i = 0; i < 2 * 28 * 28; ++i) {
        img.push_back(static_cast<std::uint8_t>(i % 256));
    }
    put_be(lab, 0x00000801);
    put_be(lab, 2);
    lab.push_back(7);
    lab.push_back(2);
    dump(dir / "t10k-images-idx3-ubyte", img);
    dump(dir / "t10k-labels-idx1-ubyte", lab);

    const Dataset d = load_dataset(dir / "t10k-images-idx3-ubyte", DatasetFormat::idx);
    CHECK(d.inputs.shape() == Shape{2, 28, 28});
    CHECK(d.labels == std::vector<int>{7, 2});
    CHECK(d.inputs[255] == 255.0f);
    CHECK(d.inputs[256] == 0.0f);
    CHECK(d.inputs[28 * 28 + 1] == static_cast<float>((28 * 28 + 1) % 256));

    SUBCASE("explicit labels path and normalization")
    {
        Dataset e = load_dataset(dir / "t10k-images-idx3-ubyte", DatasetFormat::idx, dir / "t10k-labels-idx1-ubyte");
        normalize_inputs(e, {0.0, 255.0});
        CHECK(e.inputs[255] == 1.0f);
        CHECK_THROWS_AS(normalize_inputs(e, {0.0, 0.0}), DomainError);
    }
    SUBCASE("wrong magic")
    {
        img[3] = 0x01;
        dump(dir / "t10k-images-idx3-ubyte", img);
        CHECK_THROWS_AS(load_dataset(dir / "t10k-images-idx3-ubyte", DatasetFormat::idx), FormatError);
    }
    SUBCASE("format names")
    {
        CHECK(dataset_format_from_name("idx") == DatasetFormat::idx);
        CHECK(dataset_format_from_name("bsd") == DatasetFormat::bsd);
        CHECK_THROWS_AS(dataset_format_from_name("csv"), FormatError);
    }
}
