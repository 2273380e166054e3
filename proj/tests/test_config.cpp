#include <gtest/gtest.h>

#include "siamav/config.hpp"

using namespace siamav;

TEST(Config, ProfilesValidate) {
  EXPECT_NO_THROW(profile_defaults(Profile::tiny).validate());
  EXPECT_NO_THROW(profile_defaults(Profile::paper).validate());
  EXPECT_EQ(parse_profile("paper"), Profile::paper);
  EXPECT_THROW(parse_profile("huge"), ConfigError);
}

TEST(Config, PaperProfileHyperparameters) {
  const auto c = profile_defaults(Profile::paper);
  EXPECT_EQ(c.model.d, 768u);
  EXPECT_EQ(c.model.encoder_depth, 12u);
  EXPECT_EQ(c.model.heads, 12u);
  EXPECT_DOUBLE_EQ(c.contrastive.tau, 0.05);
  EXPECT_EQ(c.train.batch_size, 96u);
  EXPECT_DOUBLE_EQ(c.train.schedule.base_lr, 1e-4);
  EXPECT_DOUBLE_EQ(c.train.adam.beta1, 0.95);
  EXPECT_DOUBLE_EQ(c.train.adam.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.train.adam.weight_decay, 5e-7);
  EXPECT_EQ(c.ratios.ratios, (std::vector<double>{0.0, 0.1, 0.2, 0.3, 0.4, 0.5}));
}

TEST(Config, JsonRoundTrip) {
  for (auto p : {Profile::tiny, Profile::paper}) {
    const auto c = profile_defaults(p);
    const auto j = to_json(c);
    EXPECT_EQ(to_json(from_json(j)), j);
    EXPECT_EQ(config_hash(from_json(j)), config_hash(c));
  }
}

TEST(Config, UnknownKeysRejected) {
  try {
    load_config(Profile::tiny, json::parse(R"({"model": {"depth": 3}})"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.depth"), std::string::npos);
  }
  EXPECT_THROW(load_config(Profile::tiny, json::parse(R"({"optimizer": {}})")), ConfigError);
  EXPECT_THROW(load_config(Profile::tiny, json::parse(R"({"model": {"d": "wide"}})")), ConfigError);
}

TEST(Config, PartialOverlayKeepsDefaults) {
  const auto c = load_config(Profile::tiny, json::parse(R"({"model": {"d": 48}, "loss": {"tau": 0.1}})"));
  const auto base = profile_defaults(Profile::tiny);
  EXPECT_EQ(c.model.d, 48u);
  EXPECT_DOUBLE_EQ(c.contrastive.tau, 0.1);
  EXPECT_EQ(c.model.encoder_depth, base.model.encoder_depth);
  EXPECT_NE(config_hash(c), config_hash(base));
}

TEST(Config, HashIgnoresKeyOrder) {
  const auto a = load_config(Profile::tiny, json::parse(R"({"loss": {"tau": 0.07, "symmetric": true}, "data": {"K": 6}})"));
  const auto b = load_config(Profile::tiny, json::parse(R"({"data": {"K": 6}, "loss": {"symmetric": true, "tau": 0.07}})"));
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(Config, ValidationErrors) {
  EXPECT_THROW(load_config(Profile::tiny, json::parse(R"({"train": {"batch_size": 10}})")), ConfigError);
  EXPECT_THROW(load_config(Profile::tiny, json::parse(R"({"data": {"n_eval": 1}})")), ConfigError);
  EXPECT_THROW(load_config(Profile::tiny, json::parse(R"({"train": {"finetune": {"p_both": 0.7}}})")), ConfigError);
  EXPECT_THROW(load_config(Profile::tiny, json::parse(R"({"train": {"finetune": {"max_classes": 2}}})")), ConfigError);
  EXPECT_THROW(load_config(Profile::tiny, json::parse(R"({"loss": {"recon_mode": "partial"}})")), ConfigError);
}

TEST(Config, DiffNamesChangedKeys) {
  auto a = to_json(profile_defaults(Profile::tiny));
  auto b = a;
  b["model"]["d"] = 99;
  const auto diff = json_diff(a, b);
  ASSERT_EQ(diff.size(), 1u);
  EXPECT_EQ(diff[0].substr(0, 8), "model.d:");
}

TEST(Config, Fnv1aKnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(hex64(fnv1a64("foobar")), "85944171f73967e8");
}
