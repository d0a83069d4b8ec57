#include <gtest/gtest.h>

#include "mspcaps/errors.hpp"
#include "mspcaps/model.hpp"
#include "suites.hpp"

using namespace mspcaps;

TEST(ModelConfig, PresetParameterCounts) {
    EXPECT_EQ(MSPCaps<float>(ModelConfig::tiny(), 0).summary().total, 344320u);
    EXPECT_EQ(MSPCaps<float>(ModelConfig::large(), 0).summary().total, 10932944u);
    ModelConfig unshared = ModelConfig::tiny();
    unshared.weight_shared = false;
    EXPECT_EQ(MSPCaps<float>(unshared, 0).summary().total, 557312u);
    ModelConfig dr = ModelConfig::tiny();
    dr.routing = RoutingKind::dr;
    EXPECT_EQ(MSPCaps<float>(dr, 0).summary().total, 717056u);
}

TEST(ModelConfig, SummaryGroupsAddUp) {
    const auto s = MSPCaps<float>(ModelConfig::tiny(), 0).summary();
    std::size_t total = 0;
    for (const auto& g : s.groups) total += g.count;
    EXPECT_EQ(total, s.total);
    EXPECT_EQ(s.primary_caps, (std::vector<std::size_t>{64, 16, 4}));
    EXPECT_EQ(s.group_sizes, (std::vector<std::size_t>{4, 4}));
}

TEST(ModelConfig, ValidateNamesTheField) {
    auto expect_field = [](ModelConfig c, const std::string& field) {
        try {
            c.validate();
            ADD_FAILURE() << "no error for " << field;
        } catch (const ConfigError& e) {
            EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
        }
    };
    ModelConfig c = ModelConfig::tiny();
    c.patch = 3;
    expect_field(c, "patch");
    c = ModelConfig::tiny();
    c.dropout_rate = 1.0;
    expect_field(c, "dropout");
    c = ModelConfig::tiny();
    c.scale_mask = {false, false, false};
    expect_field(c, "scale_mask");
    c = ModelConfig::tiny();
    c.num_classes = 0;
    expect_field(c, "num_classes");
    EXPECT_NO_THROW(ModelConfig::large().validate());
}

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
    ModelConfig c = ModelConfig::large();
    c.routing = RoutingKind::dr;
    c.scale_mask = {true, false, true};
    c.input_mean = {0.1, 0.2, 0.3};
    const ModelConfig back = model_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_EQ(fingerprint(back), fingerprint(c));
    EXPECT_NE(fingerprint(c), fingerprint(ModelConfig::large()));
    EXPECT_THROW(model_config_from_json(R"({"patch": 4, "bogus": 1})"), ConfigError);
    EXPECT_THROW(model_config_from_json("{"), ConfigError);
}

TEST(MSPCaps, ForwardShapesForEveryRoutingAndMask) {
    const auto x = testkit::random_tensor({2, 3, 32, 32}, 5, 0, 1, false);
    for (auto routing : {RoutingKind::car, RoutingKind::dr}) {
        for (auto mask : {std::array{true, true, true}, std::array{true, true, false}, std::array{false, true, true}}) {
            ModelConfig c = ModelConfig::tiny();
            c.routing = routing;
            c.scale_mask = mask;
            MSPCaps<double> m(c, 1);
            const auto out = m.forward(x, Mode::eval);
            EXPECT_EQ(out.caps.shape(), (Shape{2, 10, 32})) << to_string(routing);
        }
    }
}

TEST(MSPCaps, SameSeedSameWeights) {
    MSPCaps<float> a(ModelConfig::tiny(), 42), b(ModelConfig::tiny(), 42), c(ModelConfig::tiny(), 43);
    const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].name, pb[i].name);
        EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
        differs = differs || !std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                                         pc[i].tensor.data().begin());
    }
    EXPECT_TRUE(differs);
}

TEST(MSPCaps, RejectsWrongInputGeometry) {
    MSPCaps<float> m(ModelConfig::tiny(), 0);
    EXPECT_THROW(m.forward(Tensor<float>::zeros({1, 1, 32, 32}), Mode::eval), Error);
    EXPECT_THROW(m.forward(Tensor<float>::zeros({1, 3, 28, 28}), Mode::eval), Error);
}

TEST(MSPCaps, EndToEndGradientMatchesFiniteDifferences) {
    const auto r = testkit::end_to_end_gradcheck(3);
    EXPECT_LE(r.max_rel_err, 1e-3) << r.worst;
    EXPECT_GT(r.checked, 50u);
}
