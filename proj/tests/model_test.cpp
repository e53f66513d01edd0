// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "balcony/model.hpp"
#include "balcony/rng.hpp"
#include "balcony/train.hpp"

namespace balcony {
namespace {

TokenBatch random_tokens(int64_t batch, int64_t seq, uint64_t seed, int64_t vocab = 256) {
  TokenBatch t(batch, seq);
  Rng rng(seed);
  for (auto& id : t.ids) id = static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab)));
  return t;
}

ModelConfig small_config() { return ModelConfig::make(3, 32, 2, 64, 256, 32); }

// Plain-loop reference for one decoder layer on a single sequence [S, D].
std::vector<double> oracle_layer(const std::vector<double>& x, int64_t S,
                                 const DecoderLayer<double>& layer, const ModelConfig& c) {
  const int64_t D = c.d_model, H = c.n_heads, hd = c.head_dim, F = c.d_ff;
  auto W = [](const Tensor<double>& t, int64_t r, int64_t col) {
    return t.data()[static_cast<size_t>(r * t.dim(1) + col)];
  };
  auto rms = [&](const std::vector<double>& in, const Tensor<double>& w) {
    std::vector<double> out(in.size());
    for (int64_t s = 0; s < S; ++s) {
      double ss = 0;
      for (int64_t d = 0; d < D; ++d) ss += in[s * D + d] * in[s * D + d];
      const double inv = 1.0 / std::sqrt(ss / double(D) + c.norm_eps);
      for (int64_t d = 0; d < D; ++d) out[s * D + d] = in[s * D + d] * inv * w.data()[d];
    }
    return out;
  };
  auto proj = [&](const std::vector<double>& in, const Tensor<double>& w, int64_t in_w,
                  int64_t out_w) {
    std::vector<double> out(static_cast<size_t>(S * out_w), 0.0);
    for (int64_t s = 0; s < S; ++s)
      for (int64_t o = 0; o < out_w; ++o) {
        double acc = 0;
        for (int64_t i = 0; i < in_w; ++i) acc += in[s * in_w + i] * W(w, i, o);
        out[s * out_w + o] = acc;
      }
    return out;
  };
  auto rotate = [&](std::vector<double>& v) {
    const int64_t half = hd / 2;
    for (int64_t s = 0; s < S; ++s)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t i = 0; i < half; ++i) {
          const double angle = double(s) * std::pow(c.rope_theta, -2.0 * double(i) / double(hd));
          double& a = v[s * H * hd + h * hd + i];
          double& b = v[s * H * hd + h * hd + i + half];
          const double a0 = a, b0 = b;
          a = a0 * std::cos(angle) - b0 * std::sin(angle);
          b = a0 * std::sin(angle) + b0 * std::cos(angle);
        }
  };

  const auto& at = *layer.attn;
  const int64_t A = H * hd;
  std::vector<double> n = rms(x, at.norm);
  std::vector<double> q = proj(n, at.wq, D, A), k = proj(n, at.wk, D, A), v = proj(n, at.wv, D, A);
  rotate(q);
  rotate(k);
  std::vector<double> att(static_cast<size_t>(S * A), 0.0);
  for (int64_t h = 0; h < H; ++h)
    for (int64_t s = 0; s < S; ++s) {
      std::vector<double> score(static_cast<size_t>(s + 1));
      double mx = -1e300;
      for (int64_t p = 0; p <= s; ++p) {
        double dot = 0;
        for (int64_t i = 0; i < hd; ++i) dot += q[s * A + h * hd + i] * k[p * A + h * hd + i];
        score[p] = dot / std::sqrt(double(hd));
        mx = std::max(mx, score[p]);
      }
      double z = 0;
      for (auto& e : score) z += (e = std::exp(e - mx));
      for (int64_t p = 0; p <= s; ++p)
        for (int64_t i = 0; i < hd; ++i)
          att[s * A + h * hd + i] += score[p] / z * v[p * A + h * hd + i];
    }
  std::vector<double> o = proj(att, at.wo, A, D);
  std::vector<double> h1(x.size());
  for (size_t i = 0; i < x.size(); ++i) h1[i] = x[i] + o[i];

  const auto& m = *layer.mlp;
  std::vector<double> n2 = rms(h1, m.norm);
  std::vector<double> g = proj(n2, m.w_gate, D, F), u = proj(n2, m.w_up, D, F);
  for (size_t i = 0; i < g.size(); ++i) g[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
  std::vector<double> down = proj(g, m.w_down, F, D);
  for (size_t i = 0; i < h1.size(); ++i) h1[i] += down[i];
  return h1;
}

TEST(LayerForward, ZeroWeightsPassThroughResidual) {
  TransformerTrunk<float> trunk(small_config());
  HiddenState<float> x{Tensor<float>::zeros({2, 5, 32}), 0};
  Rng rng(3);
  for (float& v : x.values.mutable_data()) v = static_cast<float>(rng.normal());
  HiddenState<float> y = trunk.layer_forward(x, 1);
  EXPECT_TRUE(y.values.bitwise_equal(x.values));
  EXPECT_EQ(y.layer_index, 1);
}

TEST(LayerForward, MatchesStraightLineOracle) {
  ModelConfig c = ModelConfig::make(1, 16, 2, 40, 64, 16);
  auto trunk = TransformerTrunk<double>::random(c, 11);
  // Larger weights than the default init so the attention pattern is far from uniform.
  const ParamGroup<double> params = trunk.parameters();
  for (const auto& [path, t] : params.entries()) {
    Tensor<double> h = t;
    if (h.rank() == 2) for (double& v : h.mutable_data()) v *= 20.0;
  }
  const int64_t S = 7;
  HiddenState<double> x{Tensor<double>::zeros({1, S, 16}), 0};
  Rng rng(5);
  for (double& v : x.values.mutable_data()) v = rng.normal();
  std::vector<double> xin(x.values.data().begin(), x.values.data().end());
  const std::vector<double> expect = oracle_layer(xin, S, trunk.layer(1), c);
  HiddenState<double> y = trunk.layer_forward(x, 1);
  double max_err = 0;
  for (size_t i = 0; i < expect.size(); ++i) max_err = std::max(max_err, std::abs(expect[i] - y.values.data()[i]));
  EXPECT_LT(max_err, 1e-5);
}

TEST(LayerForward, RejectsWrongLayerIndexAndRange) {
  auto trunk = TransformerTrunk<float>::random(small_config(), 1);
  HiddenState<float> h = trunk.embed(random_tokens(1, 4, 1));
  EXPECT_THROW(trunk.layer_forward(h, 2), RangeError);
  EXPECT_THROW(trunk.layer_forward(h, 0), RangeError);
  EXPECT_THROW(trunk.layer_forward(h, 4), RangeError);
  EXPECT_THROW(trunk.forward_full(random_tokens(1, 33, 1)), RangeError);
}

TEST(Causality, FutureTokensDoNotAffectPast) {
  auto trunk = TransformerTrunk<float>::random(small_config(), 2);
  TokenBatch a = random_tokens(2, 12, 9);
  const Tensor<float> base = trunk.forward_full(a);
  for (int64_t t : {0, 5, 11}) {
    TokenBatch b = a;
    b.at(0, t) = (b.at(0, t) + 17) % 256;
    b.at(1, t) = (b.at(1, t) + 91) % 256;
    const Tensor<float> pert = trunk.forward_full(b);
    const int64_t V = 256;
    for (int64_t bi = 0; bi < 2; ++bi) {
      for (int64_t s = 0; s < 12; ++s) {
        bool same = true;
        for (int64_t v = 0; v < V; ++v) {
          const size_t i = static_cast<size_t>((bi * 12 + s) * V + v);
          same = same && base.data()[i] == pert.data()[i];
        }
        if (s < t) {
          EXPECT_TRUE(same) << "position " << s << " changed by token " << t;
        } else if (s == t) {
          EXPECT_FALSE(same);
        }
      }
    }
  }
}

TEST(ForwardToLayer, FullDepthThenHeadEqualsForwardFull) {
  auto trunk = TransformerTrunk<float>::random(small_config(), 4);
  TokenBatch t = random_tokens(2, 9, 4);
  HiddenState<float> h = trunk.forward_to_layer(t, 3);
  EXPECT_EQ(h.layer_index, 3);
  EXPECT_TRUE(trunk.head(h.values).bitwise_equal(trunk.forward_full(t)));
}

TEST(ForwardToLayer, ZeroIsEmbedding) {
  auto trunk = TransformerTrunk<float>::random(small_config(), 4);
  TokenBatch t = random_tokens(1, 6, 2);
  HiddenState<float> h = trunk.forward_to_layer(t, 0);
  EXPECT_EQ(h.layer_index, 0);
  const auto table = trunk.embedding_table().data();
  for (int64_t s = 0; s < 6; ++s)
    for (int64_t d = 0; d < 32; ++d)
      EXPECT_EQ(h.values.data()[s * 32 + d], table[t.at(0, s) * 32 + d]);
  EXPECT_THROW(trunk.forward_to_layer(t, 4), RangeError);
  EXPECT_THROW(trunk.forward_to_layer(t, -1), RangeError);
}

TEST(ForwardToLayer, PrefixConsistencyIsBitwise) {
  auto trunk = TransformerTrunk<float>::random(small_config(), 6);
  TokenBatch t = random_tokens(2, 10, 6);
  auto trace = trunk.forward_trace(t);
  for (int j = 1; j <= 3; ++j) {
    HiddenState<float> direct = trunk.forward_to_layer(t, j);
    HiddenState<float> step = trunk.layer_forward(trunk.forward_to_layer(t, j - 1), j);
    EXPECT_TRUE(direct.values.bitwise_equal(step.values)) << j;
    EXPECT_TRUE(direct.values.bitwise_equal(trace.states[j].values)) << j;
  }
  EXPECT_TRUE(trace.logits.bitwise_equal(trunk.forward_full(t)));
}

TEST(ForwardFull, ShapeAndDeterminism) {
  auto trunk = TransformerTrunk<float>::random(small_config(), 8);
  TokenBatch t = random_tokens(3, 5, 8);
  const Tensor<float> a = trunk.forward_full(t);
  EXPECT_EQ(a.shape(), (Shape{3, 5, 256}));
  EXPECT_TRUE(a.bitwise_equal(trunk.forward_full(t)));
  EXPECT_TRUE(a.bitwise_equal(trunk.clone().forward_full(t)));
}

TEST(ForwardFull, LearnsAlternatingString) {
  ModelConfig c = ModelConfig::make(2, 32, 2, 64, 256, 32);
  auto trunk = TransformerTrunk<float>::random(c, 21);
  trunk.set_frozen(false);
  std::string text;
  while (text.size() < 200) text += "ab";
  BalconySet<float> none;
  AdamW<float> opt(trunk.parameters().trainable(), {});
  Rng rng(4);
  for (int step = 0; step < 80; ++step) {
    const LmBatch batch = sample_batch(text, 4, 16, rng);
    joint_pretrain_step(trunk, none, batch);
    opt.step(1e-2);
    opt.zero_grad();
  }
  std::vector<int32_t> seq = {'a', 'b', 'a'};
  for (int i = 0; i < 10; ++i) {
    TokenBatch t(1, static_cast<int64_t>(seq.size()), seq);
    const Tensor<float> logits = trunk.forward_full(t);
    const auto row = logits.data().subspan(static_cast<size_t>((seq.size() - 1) * 256), 256);
    seq.push_back(static_cast<int32_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  EXPECT_EQ(tokens_to_text(seq), "abababababab" "a");
}

TEST(CountParams, Width4096DecoderLayer) {
  ModelConfig c = ModelConfig::make(1, 4096, 32, 11008, 32000, 4096);
  const int64_t layer = decoder_layer_params(c);
  EXPECT_EQ(layer, 4LL * 4096 * 4096 + 3LL * 4096 * 11008 + 2LL * 4096);
  EXPECT_EQ(layer, 202383360);
  EXPECT_NEAR(double(layer), 202e6, 0.01 * 202e6);
}

TEST(CountParams, LinearInDepth) {
  ModelConfig c = ModelConfig::make(32, 256, 8, 688);
  ModelConfig half = c;
  half.n_layers = 16;
  const int64_t full = count_params(c, false), halved = count_params(half, false);
  EXPECT_LE(std::llabs(2 * halved - full), decoder_layer_params(c));
}

TEST(CountParams, MatchesTensorEnumeration) {
  ModelConfig c = ModelConfig::make(4, 64, 4, 256);
  TransformerTrunk<float> trunk(c);
  const ParamGroup<float> params = trunk.parameters();
  int64_t nonembed = 0;
  for (const auto& [path, t] : params.entries()) {
    if (path != "embed" && path != "lm_head") nonembed += t.numel();
  }
  EXPECT_EQ(count_params(c, false), nonembed);
  EXPECT_EQ(count_params(c, true), params.total_elements());
  EXPECT_EQ(trunk.layer(1).param_count(), decoder_layer_params(c));
}

TEST(Freeze, FrozenTrunkGetsNoGradients) {
  auto trunk = TransformerTrunk<float>::random(small_config(), 3);
  trunk.set_frozen(true);
  EXPECT_TRUE(trunk.all_frozen());
  Tensor<float> w = Tensor<float>::full({256}, 1.0f, true);
  Tape<float> tape;
  {
    TapeScope<float> scope(tape);
    Tensor<float> loss = sum(mul(trunk.forward_full(random_tokens(2, 6, 3)),
                                 reshape(add(Tensor<float>::zeros({2, 6, 256}), w), {2, 6, 256})));
    tape.backward(loss);
  }
  EXPECT_TRUE(w.has_grad());
  const ParamGroup<float> params = trunk.parameters();
  for (const auto& [path, t] : params.entries()) EXPECT_FALSE(t.has_grad()) << path;
}

TEST(ModelConfig, ValidatesInvariants) {
  EXPECT_NO_THROW(ModelConfig{}.validate());
  EXPECT_THROW(ModelConfig::make(8, 130, 4, 512).validate(), ConfigError);
  EXPECT_THROW(ModelConfig::make(8, 128, 4, 100).validate(), ConfigError);
  EXPECT_THROW(ModelConfig::make(0, 128, 4, 512).validate(), ConfigError);
  ModelConfig pruned = ModelConfig::make(8, 128, 4, 128);
  pruned.n_heads = 1;
  EXPECT_NO_THROW(pruned.validate());
}

TEST(ModelConfig, KeyValueRoundTrip) {
  ModelConfig c = ModelConfig::make(6, 96, 3, 300, 200, 64);
  c.rope_theta = 5e5;
  std::map<std::string, std::string> kv;
  for (auto& [k, v] : c.to_kv()) kv[k] = v;
  EXPECT_EQ(ModelConfig::from_kv(kv), c);
  ModelConfig d = c;
  d.d_ff = 301;
  EXPECT_EQ(c.first_difference(d), "d_ff");
  EXPECT_EQ(c.first_difference(c), "");
  kv["d_ff"] = "12x";
  EXPECT_THROW(ModelConfig::from_kv(kv), ConfigError);
}

TEST(TransformerTrunk, CastToDoubleKeepsValues) {
  auto trunk = TransformerTrunk<float>::random(small_config(), 12);
  auto wide = trunk.cast<double>();
  const ParamGroup<float> a = trunk.parameters();
  const ParamGroup<double> b = wide.parameters();
  for (const auto& [path, t] : a.entries()) {
    const auto x = t.data();
    const auto y = b.at(path).data();
    for (size_t i = 0; i < x.size(); ++i) ASSERT_EQ(double(x[i]), y[i]) << path;
  }
}

}  // namespace
}  // namespace balcony
