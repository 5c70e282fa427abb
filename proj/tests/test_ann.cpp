#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "bsnn/ann.hpp"
#include "bsnn/errors.hpp"
#include "bsnn/fixtures.hpp"
#include "bsnn/trainer.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace bsnn;

namespace {

// Plain loop forward pass over a dense/relu stack.
std::vector<double> brute_forward(const ModelGraph& m, const Tensor& x)
{
    std::vector<double> v(x.data().begin(), x.data().end());
    for (const Layer& l : m.layers) {
        if (const auto* d = std::get_if<DenseLayer>(&l.op)) {
            Tensor in({v.size()});
            for (std::size_t i = 0; i < v.size(); ++i) {
                in[i] = static_cast<float>(v[i]);
            }
            v = oracle::dense(d->weight, d->bias, in);
        } else if (l.kind() == LayerKind::relu) {
            for (double& e : v) {
                e = std::max(0.0, e);
            }
        }
    }
    return v;
}

Dataset random_dataset(Rng& rng, const Shape& sample, std::size_t n)
{
    Shape full{n};
    full.insert(full.end(), sample.begin(), sample.end());
    Dataset d;
    d.inputs = random_tensor(rng, full, 0.0, 1.0);
    d.labels.assign(n, 0);
    return d;
}

double max_abs_diff(const Tensor& a, const Tensor& b)
{
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    }
    return m;
}

ModelGraph one_dense(float w, float b, bool bn, float gamma = 1, float theta = 1, float mu = 0, float beta = 0)
{
    ModelGraph m;
    m.input_shape = {1};
    m.layers = {make_input({1}), make_dense(Tensor::from({1, 1}, {w}), Tensor::from({b}))};
    if (bn) {
        m.layers.push_back(make_batchnorm(Tensor::from({mu}), Tensor::from({theta}), Tensor::from({gamma}),
                                          Tensor::from({beta})));
    }
    return m;
}

} // namespace

TEST_CASE("run_inference examples")
{
    SUBCASE("identity dense then relu")
    {
        ModelGraph m;
        m.input_shape = {2};
        m.layers = {make_input({2}), make_dense(testing::identity(2), Tensor({2})), make_relu()};
        const InferenceResult r = run_inference(m, Tensor::from({-1, 2}), true);
        CHECK(r.logits == Tensor::from({0, 2}));
        CHECK(r.acts->at("layers.2") == Tensor::from({0, 2}));
    }
    SUBCASE("zero body with identity shortcut gives relu(x)")
    {
        ModelGraph m;
        m.input_shape = {3};
        std::vector<Layer> body{make_dense(Tensor({3, 3}), Tensor({3})), make_relu(),
                                make_dense(Tensor({3, 3}), Tensor({3}))};
        m.layers = {make_input({3}), make_residual(std::move(body), {})};
        const InferenceResult r = run_inference(m, Tensor::from({-1, 0.5f, 2}), true);
        CHECK(r.logits == Tensor::from({0, 0.5f, 2}));
        CHECK(r.acts->at("layers.1.in") == Tensor::from({-1, 0.5f, 2}));
        CHECK(r.acts->at("layers.1.out") == r.logits);
    }
    SUBCASE("fixture MLP matches a brute-force forward pass")
    {
        Rng rng(4);
        const ModelGraph m = random_mlp(rng, 16, {12, 8}, 4, 0.5, 0.2);
        for (int trial = 0; trial < 25; ++trial) {
            const Tensor x = random_tensor(rng, {16}, 0, 1);
            const Tensor y = run_inference(m, x).logits;
            const auto ref = brute_forward(m, x);
            for (std::size_t i = 0; i < ref.size(); ++i) {
                CHECK(std::abs(y[i] - ref[i]) <= 1e-6);
            }
        }
    }
    SUBCASE("shape mismatch")
    {
        Rng rng(4);
        CHECK_THROWS_AS(run_inference(random_mlp(rng, 3, {2}, 2, 1, 0), Tensor({4})), DimensionError);
    }
}

TEST_CASE("normalization points")
{
    Rng rng(2);
    SUBCASE("mlp")
    {
        const auto pts = normalization_points(random_mlp(rng, 3, {4, 4}, 2, 1, 0));
        REQUIRE(pts.size() == 4);
        CHECK(pts[0].id == "input");
        CHECK(pts[1].id == "layers.2");
        CHECK(pts[2].id == "layers.4");
        CHECK(pts[3].id == "output");
        for (const auto& p : pts) {
            CHECK(p.alias_of.empty());
        }
    }
    SUBCASE("residual block input aliases the feeding point")
    {
        const auto pts = normalization_points(testing::random_dense_resnet(rng, 3, 4, 2));
        std::vector<std::string> ids;
        for (const auto& p : pts) {
            ids.push_back(p.id);
        }
        CHECK(ids == std::vector<std::string>{"input", "layers.2", "layers.3.in", "layers.3.body.1", "layers.3.out",
                                              "output"});
        CHECK(pts[2].alias_of == "layers.2");
    }
    SUBCASE("a relu with no linear layer before it aliases the current point")
    {
        ModelGraph m;
        m.input_shape = {2};
        m.layers = {make_input({2}), make_relu(), make_dense(testing::identity(2), Tensor({2}))};
        const auto pts = normalization_points(m);
        CHECK(pts[1].id == "layers.1");
        CHECK(pts[1].alias_of == "input");
    }
}

TEST_CASE("fold_batchnorm examples")
{
    SUBCASE("identity parameters")
    {
        const ModelGraph folded = fold_batchnorm(one_dense(3.0f, -1.0f, true));
        CHECK_FALSE(has_batchnorm(folded));
        CHECK(folded == one_dense(3.0f, -1.0f, false));
    }
    SUBCASE("hand arithmetic")
    {
        const ModelGraph folded = fold_batchnorm(one_dense(2.0f, 1.0f, true, 0.5f, 2.0f, 0.5f, 0.1f));
        REQUIRE(folded.layers.size() == 2);
        const auto& d = std::get<DenseLayer>(folded.layers[1].op);
        CHECK(d.weight[0] == doctest::Approx(0.5));
        CHECK(d.bias[0] == doctest::Approx(0.225));
    }
    SUBCASE("random models are preserved")
    {
        Rng rng(71);
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            const ModelGraph m = trial % 2 ? testing::random_bn_mlp(rng, 6, {5, 4}, 3) : testing::random_conv_resnet(rng);
            const ModelGraph f = fold_batchnorm(m);
            CHECK_FALSE(has_batchnorm(f));
            for (int s = 0; s < 5; ++s) {
                const Tensor x = random_tensor(rng, m.input_shape, -1, 1);
                worst = std::max(worst, max_abs_diff(run_inference(m, x).logits, run_inference(f, x).logits));
            }
        }
        CHECK(worst <= 1e-5);
    }
    SUBCASE("orphan batchnorm is a structural error")
    {
        ModelGraph m;
        m.input_shape = {1};
        m.layers = {make_input({1}), make_relu(),
                    make_batchnorm(Tensor::from({0}), Tensor::from({1}), Tensor::from({1}), Tensor::from({0}))};
        CHECK_THROWS_AS(fold_batchnorm(m), StructureError);
    }
}

TEST_CASE("nearest-rank quantile")
{
    std::vector<float> ten;
    for (int i = 1; i <= 10; ++i) {
        ten.push_back(static_cast<float>(i) / 10.0f);
    }
    auto copy = ten;
    CHECK(nearest_rank_quantile(copy, 1.0) == doctest::Approx(1.0));

    Rng rng(8);
    std::vector<float> values;
    for (int i = 0; i < 999; ++i) {
        values.push_back(static_cast<float>(rng.uniform(0.0, 1.0)));
    }
    values.push_back(10.0f);
    rng.shuffle(values);
    auto sorted = values;
    std::sort(sorted.begin(), sorted.end());
    auto work = values;
    const double q = nearest_rank_quantile(work, 0.999);
    CHECK(q == sorted[998]);
    CHECK(q < 10.0);
    CHECK(q == oracle::quantile(values, 0.999));

    SUBCASE("property: agrees with the sort oracle")
    {
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<float> v(1 + rng.below(300));
            for (float& e : v) {
                e = static_cast<float>(rng.uniform(-1, 3));
            }
            const double p = trial % 4 == 0 ? 1.0 : rng.uniform(0.01, 1.0);
            auto w = v;
            CHECK(nearest_rank_quantile(w, p) == oracle::quantile(v, p));
        }
    }
}

TEST_CASE("collect_lambdas")
{
    Rng rng(12);
    SUBCASE("lambda is the max activation at p_max 1")
    {
        ModelGraph m;
        m.input_shape = {1};
        m.layers = {make_input({1}), make_dense(Tensor::from({1, 1}, {1}), Tensor({1})), make_relu()};
        Dataset d;
        d.inputs = Tensor({10, 1});
        for (int i = 0; i < 10; ++i) {
            d.inputs[static_cast<std::size_t>(i)] = static_cast<float>(i + 1) / 10.0f;
        }
        d.labels.assign(10, 0);
        const CalibrationStats s = collect_lambdas(m, d, 1.0);
        CHECK(s.at("layers.2") == doctest::Approx(1.0));
        CHECK(s.warnings.empty());
    }
    SUBCASE("dead layer guard")
    {
        ModelGraph m;
        m.input_shape = {2};
        m.layers = {make_input({2}), make_dense(Tensor({2, 2}), Tensor::from({-1, -1})), make_relu(),
                    make_dense(testing::identity(2), Tensor({2}))};
        const CalibrationStats s = collect_lambdas(m, random_dataset(rng, {2}, 20), 1.0);
        CHECK(s.at("layers.2") == 1.0);
        REQUIRE(s.warnings.size() >= 1);
        CHECK(s.warnings[0].find("layers.2") != std::string::npos);
    }
    SUBCASE("aliases share the lambda and every point is covered")
    {
        const ModelGraph m = testing::random_dense_resnet(rng, 4, 5, 3);
        const CalibrationStats s = collect_lambdas(m, random_dataset(rng, {4}, 30), 0.999);
        for (const auto& p : normalization_points(m)) {
            CHECK(s.at(p.id) > 0.0);
        }
        CHECK(s.at("layers.3.in") == s.at("layers.2"));
    }
    SUBCASE("errors")
    {
        const ModelGraph m = random_mlp(rng, 3, {2}, 2, 1, 0);
        CHECK_THROWS_AS(collect_lambdas(m, Dataset{Tensor({0, 3}), {}}, 1.0), ValidationError);
        CHECK_THROWS_AS(collect_lambdas(m, random_dataset(rng, {3}, 4), 0.0), DomainError);
        CHECK_THROWS_AS(collect_lambdas(testing::random_bn_mlp(rng, 3, {2}, 2), random_dataset(rng, {3}, 4), 1.0),
                        StructureError);
    }
    SUBCASE("thread count does not change the result")
    {
        const ModelGraph m = random_mlp(rng, 8, {6, 6}, 3, 0.6, 0.1);
        const Dataset d = random_dataset(rng, {8}, 57);
        const CalibrationStats one = collect_lambdas(m, d, 0.99, 1);
        CHECK(collect_lambdas(m, d, 0.99, 4) == one);
        CHECK(collect_lambdas(m, d, 0.99, 0) == one);
    }
    SUBCASE("lower p_max never raises lambda")
    {
        const ModelGraph m = random_mlp(rng, 8, {6, 6}, 3, 0.6, 0.1);
        const Dataset d = random_dataset(rng, {8}, 200);
        const CalibrationStats hi = collect_lambdas(m, d, 1.0);
        const CalibrationStats lo = collect_lambdas(m, d, 0.999);
        for (const auto& [id, v] : lo.lambda) {
            CHECK(v <= hi.at(id));
        }
    }
}

TEST_CASE("normalize_weights examples")
{
    SUBCASE("lambda ratio arithmetic")
    {
        ModelGraph m;
        m.input_shape = {1};
        m.layers = {make_input({1}), make_dense(Tensor::from({1, 1}, {1}), Tensor::from({2})), make_relu()};
        CalibrationStats s;
        s.lambda = {{"input", 2.0}, {"layers.2", 4.0}, {"output", 4.0}};
        const ModelGraph n = normalize_weights(m, s);
        const auto& d = std::get<DenseLayer>(n.layers[1].op);
        CHECK(d.weight[0] == 0.5f);
        CHECK(d.bias[0] == 0.5f);
    }
    SUBCASE("unit lambdas leave the model unchanged")
    {
        Rng rng(3);
        const ModelGraph m = testing::random_dense_resnet(rng, 3, 4, 2);
        CalibrationStats s;
        for (const auto& p : normalization_points(m)) {
            s.lambda[p.id] = 1.0;
        }
        CHECK(normalize_weights(m, s) == m);
    }
    SUBCASE("missing entry")
    {
        Rng rng(3);
        CalibrationStats s;
        s.lambda = {{"input", 1.0}};
        try {
            normalize_weights(random_mlp(rng, 2, {2}, 2, 1, 0), s);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("missing lambda entry") != std::string::npos);
        }
    }
}

TEST_CASE("property: normalization keeps argmax and bounds activations at p_max 1")
{
    Rng rng(91);
    for (int trial = 0; trial < 20; ++trial) {
        const ModelGraph m = trial % 2 ? random_mlp(rng, 10, {8, 6}, 4, 0.6, 0.2)
                                       : testing::random_dense_resnet(rng, 10, 6, 4);
        const Dataset calib = random_dataset(rng, {10}, 40);
        const CalibrationStats s = collect_lambdas(m, calib, 1.0);
        const ModelGraph n = normalize_weights(m, s);
        const double lin = s.at(kInputPoint);
        for (std::size_t i = 0; i < calib.count(); ++i) {
            const Tensor x = calib.sample(i);
            const InferenceResult a = run_inference(m, x);
            const InferenceResult b = run_inference(n, scale(x, static_cast<float>(1.0 / lin)), true);
            CHECK(argmax(a.logits.data()) == argmax(b.logits.data()));
            for (const auto& [id, t] : b.acts->points) {
                if (id == kOutputPoint) {
                    continue;
                }
                for (float v : t.data()) {
                    CHECK(v <= 1.0f + 1e-6f);
                }
            }
        }
        // fresh inputs: argmax is scale invariant, not just on calibration data
        for (int k = 0; k < 10; ++k) {
            const Tensor x = random_tensor(rng, {10}, 0, 1);
            CHECK(argmax(run_inference(m, x).logits.data()) ==
                  argmax(run_inference(n, scale(x, static_cast<float>(1.0 / lin))).logits.data()));
        }
    }
}

TEST_CASE("residual_scale examples")
{
    CalibrationStats s;
    s.lambda = {{"b.in", 2.0}, {"b.out", 4.0}, {"c.in", 3.0}, {"c.out", 3.0}, {"d.in", 1.0}, {"d.out", 0.0}};
    CHECK(residual_scale(s, "b") == 0.5);
    CHECK(residual_scale(s, "c") == 1.0);
    CHECK(residual_scale(s, "d") == 1.0);
    CHECK_THROWS_AS(residual_scale(s, "e"), ValidationError);

    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const ModelGraph m = testing::random_dense_resnet(rng, 4, 4, 2);
        const CalibrationStats cs = collect_lambdas(m, random_dataset(rng, {4}, 20), 1.0);
        CHECK(residual_scale(cs, "layers.3") > 0.0);
        CHECK(residual_blocks(m) == std::vector<std::string>{"layers.3"});
    }
}
