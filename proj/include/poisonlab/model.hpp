#pragma once

#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "poisonlab/dataset.hpp"
#include "poisonlab/graph.hpp"

namespace poisonlab {

struct MlpSpec {
  std::vector<int64_t> widths;  // input, hidden..., classes
};

// 3x3 stride-1 convolutions (zero padding 1), each followed by relu and 2x2
// average pooling; flattened activations after the last pool are the feature
// representation, a single linear layer is the head.
struct CnnSpec {
  int64_t in_ch = 3;
  int64_t height = 32;
  int64_t width = 32;
  std::vector<int64_t> channels = {16, 32, 64};
  int64_t classes = 10;
};

using ModelSpec = std::variant<MlpSpec, CnnSpec>;

struct ConvPlan;  // cached per-image linear maps for the conv stack

struct Model {
  ModelSpec spec;
  std::vector<Tensor> params;
  size_t feature_boundary = 0;  // index of the first head parameter
  std::vector<bool> frozen;
  int64_t input_dim = 0;
  int64_t feature_dim = 0;
  int64_t classes = 0;
  std::shared_ptr<const ConvPlan> plan;  // null for MLPs

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Model build_model(const ModelSpec& spec, uint64_t seed);
// Reinitializes head parameters only (transfer / fine-tuning scenarios).
void reinit_head(Model& m, uint64_t seed);

template <class S = double>
struct ForwardIds {
  typename BasicGraph<S>::Id logits;
  typename BasicGraph<S>::Id features;
};

// Parameters enter as caller-provided node ids so attacks can make them
// variables or unrolled intermediates.
ForwardIds<double> model_forward(Graph& g, const Model& m, const std::vector<Graph::Id>& param_ids, Graph::Id x,
                                 int64_t batch);

std::vector<Graph::Id> param_nodes(Graph& g, const Model& m, bool as_variables);

// Mean cross-entropy. Hard labels or soft per-class weights.
Graph::Id cross_entropy(Graph& g, Graph::Id logits, const std::vector<int>& labels);
Graph::Id cross_entropy_soft(Graph& g, Graph::Id logits, const Tensor& weights);

// Plain-value forward for evaluation.
struct EvalOut {
  Tensor logits;    // [B, classes]
  Tensor features;  // [B, feature_dim]
  double loss = 0;
};
EvalOut evaluate(const Model& m, const Batch& batch);
Tensor softmax_rows(const Tensor& logits);
std::vector<int> predict(const Model& m, const Batch& batch);
double accuracy(const Model& m, const Dataset& d, int64_t batch_size = 256);

void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace poisonlab
