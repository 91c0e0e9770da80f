#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "poisonlab/train.hpp"

using namespace poisonlab;

TEST_CASE("parameter counts match hand-computed sizes") {
  Model mlp = build_model(MlpSpec{{32, 64, 10}}, 1);
  CHECK(mlp.param_count() == 32 * 64 + 64 + 64 * 10 + 10);  // 2762
  CHECK(mlp.feature_dim == 64);
  CHECK(mlp.feature_boundary == 2);

  Model cnn = build_model(CnnSpec{}, 1);
  // 3x3 kernels: (3*9+ bias)*16, (16*9+1)*32, (32*9+1)*64, head 1024*10+10.
  int64_t want = (3 * 9 * 16 + 16) + (16 * 9 * 32 + 32) + (32 * 9 * 64 + 64) + (1024 * 10 + 10);
  CHECK(cnn.param_count() == want);
  CHECK(cnn.feature_dim == 64 * 4 * 4);
  CHECK(cnn.classes == 10);
}

TEST_CASE("initialization is seed-deterministic with zero biases") {
  Model a = build_model(MlpSpec{{8, 6, 3}}, 42);
  Model b = build_model(MlpSpec{{8, 6, 3}}, 42);
  Model c = build_model(MlpSpec{{8, 6, 3}}, 43);
  for (size_t i = 0; i < a.params.size(); ++i) CHECK(a.params[i].v == b.params[i].v);
  CHECK(a.params[0].v != c.params[0].v);
  for (double v : a.params[1].v) CHECK(v == 0.0);
  for (double v : a.params[3].v) CHECK(v == 0.0);
  // Kaiming-uniform bound sqrt(6/fan_in).
  double bound = std::sqrt(6.0 / 8.0);
  for (double v : a.params[0].v) CHECK(std::abs(v) <= bound);
}

TEST_CASE("uniform logits give ln(C) cross-entropy and uniform softmax") {
  Model m = build_model(MlpSpec{{4, 5}}, 3);
  for (auto& p : m.params)
    for (double& v : p.v) v = 0.0;  // all-zero net -> uniform logits
  Batch b;
  b.images = Tensor::zeros({2, 4});
  b.labels = {1, 4};
  EvalOut out = evaluate(m, b);
  CHECK(out.loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  Tensor p = softmax_rows(out.logits);
  for (double v : p.v) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
  double row = 0;
  for (int64_t j = 0; j < 5; ++j) row += p[j];
  CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("learning rate schedule drops by 10x after 3/8, 5/8, 7/8 of epochs") {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.epochs = 40;
  CHECK(cfg.lr_at_epoch(1) == 0.1);
  CHECK(cfg.lr_at_epoch(15) == 0.1);                               // 15 == 3/8*40, not yet dropped
  CHECK(cfg.lr_at_epoch(16) == doctest::Approx(0.01));
  CHECK(cfg.lr_at_epoch(25) == doctest::Approx(0.01));
  CHECK(cfg.lr_at_epoch(26) == doctest::Approx(0.001));
  CHECK(cfg.lr_at_epoch(35) == doctest::Approx(0.001));
  CHECK(cfg.lr_at_epoch(36) == doctest::Approx(0.0001));
  CHECK(cfg.lr_at_epoch(40) == doctest::Approx(0.0001));
}

TEST_CASE("training separable blobs reaches near-perfect accuracy") {
  auto [train_set, val_set] = split_train_val(synth_blobs(3, 8, 50, 4.5, 7), 10);
  Model m = build_model(MlpSpec{{8, 16, 3}}, 7);
  TrainConfig cfg;
  cfg.epochs = 16;
  cfg.batch_size = 32;
  cfg.augment = AugmentPolicy::None;
  cfg.seed = 7;
  std::vector<EpochStats> history;
  m = train(std::move(m), train_set, &val_set, cfg, {}, &history);
  REQUIRE(history.size() == 16);
  CHECK(history.back().train_acc >= 0.99);
  CHECK(accuracy(m, val_set) >= 0.95);
  CHECK(history.back().train_loss < history.front().train_loss);
}

TEST_CASE("training is seed-deterministic") {
  Dataset d = synth_blobs(2, 6, 20, 2.0, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.augment = AugmentPolicy::None;
  cfg.seed = 11;
  Model a = train(build_model(MlpSpec{{6, 8, 2}}, 11), d, nullptr, cfg);
  Model b = train(build_model(MlpSpec{{6, 8, 2}}, 11), d, nullptr, cfg);
  for (size_t i = 0; i < a.params.size(); ++i) CHECK(a.params[i].v == b.params[i].v);
  cfg.seed = 12;
  Model c = train(build_model(MlpSpec{{6, 8, 2}}, 11), d, nullptr, cfg);
  CHECK(a.params[0].v != c.params[0].v);
}

TEST_CASE("transfer keeps features bit-identical and retrains the head") {
  Dataset d = synth_blobs(3, 6, 25, 2.0, 5);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.augment = AugmentPolicy::None;
  cfg.seed = 5;
  Model base = train(build_model(MlpSpec{{6, 10, 3}}, 5), d, nullptr, cfg);
  TrainConfig re = cfg;
  re.seed = 99;
  Model m = retrain_for_scenario(base, Scenario::Transfer, d, nullptr, re);
  for (size_t i = 0; i < base.feature_boundary; ++i) CHECK(m.params[i].v == base.params[i].v);
  CHECK(m.params[base.feature_boundary].v != base.params[base.feature_boundary].v);

  Model ft = retrain_for_scenario(base, Scenario::FineTuning, d, nullptr, re);
  CHECK(ft.params[0].v != base.params[0].v);  // everything moves when fine-tuning

  Model fs = retrain_for_scenario(base, Scenario::FromScratch, d, nullptr, re);
  CHECK(fs.params[0].v != base.params[0].v);
}

TEST_CASE("gradient hook sees and controls the update") {
  Dataset d = synth_blobs(2, 4, 10, 2.0, 6);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.weight_decay = 0.0;
  cfg.augment = AugmentPolicy::None;
  cfg.seed = 6;
  Model before = build_model(MlpSpec{{4, 2}}, 6);
  int calls = 0;
  GradHook zero_hook = [&](std::vector<Tensor>& grads, SplitRng&) {
    ++calls;
    for (Tensor& g : grads)
      for (double& v : g.v) v = 0.0;
  };
  Model after = train(before, d, nullptr, cfg, {}, nullptr, zero_hook);
  CHECK(calls > 0);
  for (size_t i = 0; i < before.params.size(); ++i) CHECK(after.params[i].v == before.params[i].v);
}

TEST_CASE("checkpoints round trip through 32-bit parameters") {
  Model m = build_model(CnnSpec{3, 8, 8, {4}, 3}, 21);
  m.frozen[0] = true;
  save_checkpoint(m, "model_rt.bin");
  Model back = load_checkpoint("model_rt.bin");
  CHECK(back.param_count() == m.param_count());
  CHECK(back.feature_dim == m.feature_dim);
  CHECK(back.frozen == m.frozen);
  for (size_t i = 0; i < m.params.size(); ++i)
    for (int64_t j = 0; j < m.params[i].size(); ++j)
      CHECK(back.params[i][j] == static_cast<double>(static_cast<float>(m.params[i][j])));
  // Saving the loaded model is a fixed point.
  save_checkpoint(back, "model_rt2.bin");
  Model again = load_checkpoint("model_rt2.bin");
  for (size_t i = 0; i < m.params.size(); ++i) CHECK(again.params[i].v == back.params[i].v);
  CHECK_THROWS_AS(load_checkpoint("missing_model.bin"), FormatError);
}

TEST_CASE("head reinitialization is seeded and leaves features alone") {
  Model a = build_model(MlpSpec{{5, 7, 4}}, 2);
  Model b = a;
  reinit_head(a, 50);
  reinit_head(b, 50);
  CHECK(a.params[2].v == b.params[2].v);
  CHECK(a.params[0].v == b.params[0].v);
  Model c = build_model(MlpSpec{{5, 7, 4}}, 2);
  reinit_head(c, 51);
  CHECK(a.params[2].v != c.params[2].v);
  for (double v : a.params[3].v) CHECK(v == 0.0);
}

TEST_CASE("config validation rejects bad settings") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.drop_points = {0.5, 0.25};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(build_model(MlpSpec{{4}}, 0), ConfigError);
  Dataset empty;
  CHECK_THROWS_AS(train(build_model(MlpSpec{{4, 2}}, 0), empty, nullptr, TrainConfig{}), ConfigError);
}
