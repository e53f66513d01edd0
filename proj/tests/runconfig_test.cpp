// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "balcony/runconfig.hpp"

namespace balcony {
namespace {

TEST(RunConfig, DefaultsNormalizeIdempotently) {
  const RunConfig rc = RunConfig::parse("");
  const std::string once = rc.normalized();
  EXPECT_EQ(RunConfig::parse(once).normalized(), once);
  EXPECT_EQ(RunConfig::parse(once).hash(), rc.hash());
  EXPECT_EQ(rc.hash().size(), 16u);
  EXPECT_NE(once.find("[bench]\nprompt_len = 32"), std::string::npos);
}

TEST(RunConfig, ParsesEverySection) {
  const RunConfig rc = RunConfig::parse(R"(
# toy run
[model]
n_layers = 6
d_model = 64   # narrower
n_heads = 2
d_ff = 128

[train]
loss_mode = kl_plus_ce
steps = 40
lr_max = 1e-3

[exits]
layers = 1, 3
variant = mlp_only
init_mode = random

[bench]
ratios = 0.5
axis = depth
repeats = 7
)");
  EXPECT_EQ(rc.model.n_layers, 6);
  EXPECT_EQ(rc.model.head_dim, 32);
  EXPECT_EQ(rc.train.loss_mode, LossMode::kl_plus_ce);
  EXPECT_EQ(rc.train.steps, 40);
  EXPECT_EQ(rc.exits.layers, (std::vector<int>{1, 3}));
  EXPECT_EQ(rc.exits.variant, BalconyVariant::mlp_only);
  EXPECT_EQ(rc.exits.init_mode, InitMode::random);
  EXPECT_EQ(rc.bench.ratios, (std::vector<double>{0.5}));
  EXPECT_EQ(rc.bench.axes.size(), 1u);
  EXPECT_EQ(rc.bench.latency.repeats, 7);
  EXPECT_EQ(RunConfig::parse(rc.normalized()).normalized(), rc.normalized());
  EXPECT_NE(rc.hash(), RunConfig::parse("").hash());
}

void expect_error(const std::string& text, const std::string& needle) {
  try {
    RunConfig::parse(text);
    ADD_FAILURE() << "accepted: " << text;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(RunConfig, RejectsUnknownAndInvalid) {
  expect_error("[model]\nwidth = 3\n", "model.width");
  expect_error("[optim]\n", "[optim]");
  expect_error("[train]\nsteps = many\n", "steps");
  expect_error("[train]\nsteps = 1\nsteps = 2\n", "duplicate");
  expect_error("steps = 1\n", "outside any section");
  expect_error("[exits]\nlayers = 2,8\n", "exits");
  expect_error("[model]\nd_ff = 64\n", "d_ff");
  expect_error("[train]\nloss_mode = ce_joint_avg\n", "train");
  expect_error("[bench]\nratios = 0.5,1.5\n", "ratio");
  expect_error("[bench]\naxis = diagonal\n", "axis");
  expect_error("[bench]\ngen_len = 400\n", "max_seq_len");
  expect_error("[model]\nn_layers\n", "key = value");
}

TEST(Csv, HeaderCommentAndQuoting) {
  CsvTable t{{"a", "b"}, {{"1", "x,y"}, {"2", "say \"hi\""}}};
  EXPECT_EQ(to_csv(t, "00ff", 7),
            "# config_hash=00ff seed=7\n"
            "a,b\n"
            "1,\"x,y\"\n"
            "2,\"say \"\"hi\"\"\"\n");
  t.rows.push_back({"only"});
  EXPECT_THROW(to_csv(t, "", 0), DimensionError);
}

TEST(Lists, ParseAndReject) {
  EXPECT_EQ(parse_int_list("2, 4,6"), (std::vector<int>{2, 4, 6}));
  EXPECT_TRUE(parse_int_list("").empty());
  EXPECT_THROW(parse_int_list("2,x"), ConfigError);
  EXPECT_EQ(parse_real_list("0.75,0.5"), (std::vector<double>{0.75, 0.5}));
  EXPECT_THROW(parse_real_list("0.5q"), ConfigError);
}

}  // namespace
}  // namespace balcony
