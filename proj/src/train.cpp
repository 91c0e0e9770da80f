#include "poisonlab/train.hpp"

#include <algorithm>

namespace poisonlab {

Model train(Model model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
            const DefenseHook& hook, std::vector<EpochStats>* history, const GradHook& grad_hook) {
  cfg.validate();
  if (train_set.n() == 0) throw ConfigError("train: empty dataset");
  SplitRng root(cfg.seed);
  std::vector<SgdNesterovState> opt;
  for (const auto& p : model.params) opt.push_back(SgdNesterovState::init(p.shape, cfg.momentum));

  std::vector<Tensor> frozen_snapshot;
  for (size_t i = 0; i < model.params.size(); ++i)
    if (model.frozen[i]) frozen_snapshot.push_back(model.params[i]);

  int64_t n = train_set.n();
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr_at_epoch(epoch + 1);
    auto perm = root.derive("shuffle").derive(static_cast<uint64_t>(epoch)).permutation(n);
    double loss_sum = 0;
    int64_t seen = 0, correct = 0;
    for (int64_t start = 0, step = 0; start < n; start += cfg.batch_size, ++step) {
      int64_t end = std::min(n, start + cfg.batch_size);
      std::vector<int64_t> pos(perm.begin() + start, perm.begin() + end);
      Batch batch = train_set.batch(pos);
      if (cfg.augment != AugmentPolicy::None) {
        SplitRng arng =
            root.derive("augment").derive(static_cast<uint64_t>(epoch)).derive(static_cast<uint64_t>(step));
        batch = augment(batch, cfg.augment, arng, train_set.image_shape);
      }
      if (hook) {
        SplitRng drng =
            root.derive("defense").derive(static_cast<uint64_t>(epoch)).derive(static_cast<uint64_t>(step));
        batch = hook(model, batch, drng);
      }
      try {
        Graph g;
        std::vector<Graph::Id> params;
        std::vector<Graph::Id> trainable;
        std::vector<size_t> trainable_idx;
        for (size_t i = 0; i < model.params.size(); ++i) {
          if (model.frozen[i]) {
            params.push_back(g.constant(model.params[i]));
          } else {
            params.push_back(g.variable(model.params[i]));
            trainable.push_back(params.back());
            trainable_idx.push_back(i);
          }
        }
        Graph::Id x = g.constant(batch.images);
        auto fwd = model_forward(g, model, params, x, batch.size());
        Graph::Id loss = batch.soft_labels ? cross_entropy_soft(g, fwd.logits, *batch.soft_labels)
                                           : cross_entropy(g, fwd.logits, batch.labels);
        auto grads = g.gradient(loss, trainable);
        std::vector<Tensor> grad_vals;
        grad_vals.reserve(trainable.size());
        for (Graph::Id gid : grads) grad_vals.push_back(g.val(gid));
        if (grad_hook) {
          SplitRng grng =
              root.derive("gradhook").derive(static_cast<uint64_t>(epoch)).derive(static_cast<uint64_t>(step));
          grad_hook(grad_vals, grng);
        }
        for (size_t k = 0; k < trainable.size(); ++k) {
          size_t i = trainable_idx[k];
          Tensor& grad = grad_vals[k];
          if (cfg.weight_decay > 0)
            for (int64_t j = 0; j < grad.size(); ++j) grad[j] += cfg.weight_decay * model.params[i][j];
          opt[i].step(model.params[i], grad, lr);
        }
        loss_sum += g.val(loss).item() * static_cast<double>(batch.size());
        seen += batch.size();
        const Tensor& logits = g.val(fwd.logits);
        int64_t C = model.classes;
        for (int64_t i = 0; i < batch.size(); ++i) {
          int best = 0;
          for (int64_t j = 1; j < C; ++j)
            if (logits[i * C + j] > logits[i * C + best]) best = static_cast<int>(j);
          if (best == batch.labels[static_cast<size_t>(i)]) ++correct;
        }
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + " step " +
                           std::to_string(step + 1) + ": " + e.what());
      }
    }
    if (history) {
      EpochStats st;
      st.train_loss = loss_sum / static_cast<double>(seen);
      st.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
      st.val_acc = val_set ? accuracy(model, *val_set) : 0.0;
      history->push_back(st);
    }
  }

  size_t fi = 0;
  for (size_t i = 0; i < model.params.size(); ++i) {
    if (!model.frozen[i]) continue;
    if (model.params[i].v != frozen_snapshot[fi++].v)
      throw std::logic_error("frozen parameter changed during training");
  }
  return model;
}

Model retrain_for_scenario(const Model& base, Scenario scenario, const Dataset& train_set, const Dataset* val_set,
                           TrainConfig cfg, const DefenseHook& hook, std::vector<EpochStats>* history,
                           const GradHook& grad_hook) {
  switch (scenario) {
    case Scenario::FromScratch: {
      Model fresh = build_model(base.spec, cfg.seed);
      return train(std::move(fresh), train_set, val_set, cfg, hook, history, grad_hook);
    }
    case Scenario::Transfer: {
      if (base.params.empty()) throw ConfigError("transfer scenario requires a trained base model");
      Model m = base;
      reinit_head(m, cfg.seed);
      for (size_t i = 0; i < m.params.size(); ++i) m.frozen[i] = i < m.feature_boundary;
      cfg.lr = 0.1;  // linear-probe learning rate, schedule shape unchanged
      return train(std::move(m), train_set, val_set, cfg, hook, history, grad_hook);
    }
    case Scenario::FineTuning: {
      Model m = base;
      reinit_head(m, cfg.seed);
      std::fill(m.frozen.begin(), m.frozen.end(), false);
      cfg.lr = 0.001;  // fine-tuning learning rate, schedule shape unchanged
      return train(std::move(m), train_set, val_set, cfg, hook, history, grad_hook);
    }
  }
  throw ConfigError("unknown scenario");
}

}  // namespace poisonlab
