#include "mucp/config.hpp"
#include "mucp/errors.hpp"

#include <gtest/gtest.h>

namespace mucp {
namespace {

TEST(Config, DefaultsAreTheTinyRecipe) {
  ExperimentConfig c = parse_config("");
  EXPECT_EQ(c.model, tiny_spec());
  EXPECT_FALSE(c.moe_enabled);
  EXPECT_EQ(c.moe, MoESpec{});
  EXPECT_EQ(c.train.steps, 2000);
  EXPECT_EQ(c.train.batch_size, 64);
  EXPECT_EQ(c.train.warmup_steps, 100);
  EXPECT_FLOAT_EQ(c.train.adam_beta2, 0.98f);
  EXPECT_EQ(c.finetune.steps, 1000);
  EXPECT_FLOAT_EQ(c.finetune.peak_lr, c.train.peak_lr / 10);
  EXPECT_FLOAT_EQ(c.finetune.weight_decay, c.train.weight_decay / 4);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, ParsesEverySection) {
  ExperimentConfig c = parse_config(R"(# grid cell
model.backbone = shared
model.image.layers = 4
model.text.layers = 4
moe.enabled = true
moe.num_experts = 4
moe.capacity_image = 1.5   # trailing comment
moe.normalize_gates_after_routing = on
train.steps = 300
finetune.peak_lr = 5e-5
seed = 7
data.train_size = 512
output_dir = runs/a
)");
  EXPECT_EQ(c.model.backbone, Backbone::shared);
  EXPECT_EQ(c.model.image_tower.num_layers, 4);
  EXPECT_TRUE(c.moe_enabled);
  EXPECT_EQ(c.moe.num_experts, 4);
  EXPECT_EQ(c.moe.capacity_image, 1.5);
  EXPECT_TRUE(c.moe.normalize_gates_after_routing);
  EXPECT_EQ(c.train.steps, 300);
  EXPECT_FLOAT_EQ(c.finetune.peak_lr, 5e-5f);
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.finetune.seed, 7u);
  EXPECT_EQ(c.data.train_size, 512);
  EXPECT_EQ(c.output_dir, "runs/a");
  ASSERT_TRUE(c.configured_model().moe.has_value());
  EXPECT_EQ(c.configured_model().moe->num_experts, 4);
}

TEST(Config, UnknownKeyNamesLineAndKey) {
  try {
    parse_config("train.steps = 10\nmoe.experts = 8\n");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("moe.experts"), std::string::npos) << msg;
  }
}

TEST(Config, MalformedValuesAreRejected) {
  EXPECT_THROW(parse_config("train.steps = ten"), FormatError);
  EXPECT_THROW(parse_config("moe.capacity_image = 1.5x"), FormatError);
  EXPECT_THROW(parse_config("moe.enabled = maybe"), FormatError);
  EXPECT_THROW(parse_config("model.backbone = tangled"), FormatError);
  EXPECT_THROW(parse_config("just words"), FormatError);
}

TEST(Config, ValidationCatchesInconsistency) {
  EXPECT_THROW(validate(parse_config("train.warmup_steps = 5000")), ContractError);
  EXPECT_THROW(validate(parse_config("model.vocab_size = 8")), ContractError);
  EXPECT_THROW(validate(parse_config("moe.top_k = 9")), ContractError);
  EXPECT_THROW(validate(parse_config("train.batch_size = 8192")), ContractError);
}

TEST(Config, DerivedDataFieldsFollowTheModel) {
  ExperimentConfig c = parse_config("model.text.max_tokens = 12\nmodel.image_size = 48\nmodel.patch_size = 16");
  EXPECT_EQ(c.data.seq_len, 12);
  EXPECT_EQ(c.data.image_size, 48);
  EXPECT_EQ(c.model.image_tower.max_tokens, 10);
}

TEST(Config, FormatRoundTrips) {
  ExperimentConfig c = parse_config(R"(model.backbone = shared
moe.num_experts = 4
moe.capacity_text = 0.75
moe.balance_weight = 0.02
train.peak_lr = 0.0007
finetune.steps = 333
data.noise = 0.1
output_dir = x/y
)");
  const std::string text = format_config(c);
  ExperimentConfig back = parse_config(text);
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(back.model, c.model);
  EXPECT_EQ(back.moe, c.moe);
  EXPECT_EQ(back.train, c.train);
  EXPECT_EQ(back.finetune, c.finetune);
  EXPECT_EQ(back.output_dir, c.output_dir);
  EXPECT_FLOAT_EQ(back.data.noise, 0.1f);
}

}  // namespace
}  // namespace mucp
