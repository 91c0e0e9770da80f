#include "poisonlab/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "poisonlab/rng.hpp"

namespace poisonlab {

struct ConvPlan {
  struct Layer {
    int64_t in_ch, h, w, out_ch;
    int64_t hw;  // h*w
    int64_t cols;  // in_ch*9
    LinMapPtr im2col;   // [C,H,W] -> [HW, C9], per image
    LinMapPtr permute;  // [HW, OC] -> [OC, HW], per image
    LinMapPtr pool;     // [OC,H,W] -> [OC,H/2,W/2], per image
    LinMapPtr bias;     // [OC] -> [OC], repeated per output position
  };
  std::vector<Layer> layers;
  int64_t feature_dim = 0;
};

namespace {

std::shared_ptr<const ConvPlan> make_plan(const CnnSpec& s) {
  auto plan = std::make_shared<ConvPlan>();
  int64_t c = s.in_ch, h = s.height, w = s.width;
  for (int64_t oc : s.channels) {
    if (h % 2 != 0 || w % 2 != 0) throw ConfigError("conv input extent must be even for 2x2 pooling");
    ConvPlan::Layer L;
    L.in_ch = c;
    L.h = h;
    L.w = w;
    L.out_ch = oc;
    L.hw = h * w;
    L.cols = c * 9;
    auto im2col = std::make_shared<LinMap>(c * h * w, L.hw * L.cols);
    for (int64_t oy = 0; oy < h; ++oy)
      for (int64_t ox = 0; ox < w; ++ox)
        for (int64_t ic = 0; ic < c; ++ic)
          for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx) {
              int64_t iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              im2col->add((oy * w + ox) * L.cols + ic * 9 + ky * 3 + kx, (ic * h + iy) * w + ix);
            }
    L.im2col = im2col;
    auto permute = std::make_shared<LinMap>(L.hw * oc, oc * L.hw);
    for (int64_t p = 0; p < L.hw; ++p)
      for (int64_t ic = 0; ic < oc; ++ic) permute->add(ic * L.hw + p, p * oc + ic);
    L.permute = permute;
    int64_t h2 = h / 2, w2 = w / 2;
    auto pool = std::make_shared<LinMap>(oc * h * w, oc * h2 * w2);
    for (int64_t ic = 0; ic < oc; ++ic)
      for (int64_t y = 0; y < h2; ++y)
        for (int64_t x = 0; x < w2; ++x)
          for (int64_t ky = 0; ky < 2; ++ky)
            for (int64_t kx = 0; kx < 2; ++kx)
              pool->add((ic * h2 + y) * w2 + x, (ic * h + 2 * y + ky) * w + 2 * x + kx, 0.25f);
    L.pool = pool;
    auto bias = std::make_shared<LinMap>(0, oc);
    for (int64_t ic = 0; ic < oc; ++ic) bias->add(ic, ic);
    L.bias = bias;
    plan->layers.push_back(std::move(L));
    c = oc;
    h = h2;
    w = w2;
  }
  plan->feature_dim = c * h * w;
  return plan;
}

Tensor kaiming_uniform(Shape shape, int64_t fan_in, SplitRng rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& x : t.v) x = rng.uniform(-bound, bound);
  return t;
}

LinMapPtr row_broadcast(int64_t n) {
  auto m = std::make_shared<LinMap>(0, n);
  for (int64_t i = 0; i < n; ++i) m->add(i, i);
  return m;
}

}  // namespace

Model build_model(const ModelSpec& spec, uint64_t seed) {
  Model m;
  m.spec = spec;
  SplitRng rng = SplitRng(seed).derive("init");
  if (const auto* mlp = std::get_if<MlpSpec>(&spec)) {
    if (mlp->widths.size() < 2) throw ConfigError("MLP needs at least input and output widths");
    m.input_dim = mlp->widths.front();
    m.classes = mlp->widths.back();
    m.feature_dim = mlp->widths[mlp->widths.size() - 2];
    for (size_t l = 0; l + 1 < mlp->widths.size(); ++l) {
      int64_t in = mlp->widths[l], out = mlp->widths[l + 1];
      m.params.push_back(kaiming_uniform({in, out}, in, rng.derive(2 * l)));
      m.params.push_back(Tensor::zeros({out}));
    }
    m.feature_boundary = m.params.size() - 2;
  } else {
    const auto& cnn = std::get<CnnSpec>(spec);
    m.plan = make_plan(cnn);
    m.input_dim = cnn.in_ch * cnn.height * cnn.width;
    m.classes = cnn.classes;
    m.feature_dim = m.plan->feature_dim;
    for (size_t l = 0; l < m.plan->layers.size(); ++l) {
      const auto& L = m.plan->layers[l];
      m.params.push_back(kaiming_uniform({L.cols, L.out_ch}, L.cols, rng.derive(2 * l)));
      m.params.push_back(Tensor::zeros({L.out_ch}));
    }
    m.params.push_back(kaiming_uniform({m.feature_dim, m.classes}, m.feature_dim, rng.derive("head")));
    m.params.push_back(Tensor::zeros({m.classes}));
    m.feature_boundary = m.params.size() - 2;
  }
  m.frozen.assign(m.params.size(), false);
  return m;
}

void reinit_head(Model& m, uint64_t seed) {
  SplitRng rng = SplitRng(seed).derive("head-reinit");
  m.params[m.feature_boundary] = kaiming_uniform(m.params[m.feature_boundary].shape, m.feature_dim, rng);
  m.params[m.feature_boundary + 1] = Tensor::zeros(m.params[m.feature_boundary + 1].shape);
}

std::vector<Graph::Id> param_nodes(Graph& g, const Model& m, bool as_variables) {
  std::vector<Graph::Id> ids;
  ids.reserve(m.params.size());
  for (const auto& p : m.params) ids.push_back(as_variables ? g.variable(p) : g.constant(p));
  return ids;
}

ForwardIds<double> model_forward(Graph& g, const Model& m, const std::vector<Graph::Id>& param_ids, Graph::Id x,
                                 int64_t batch) {
  if (param_ids.size() != m.params.size()) throw ConfigError("model_forward: wrong parameter node count");
  Graph::Id h = x;
  if (std::holds_alternative<MlpSpec>(m.spec)) {
    size_t nlayers = m.params.size() / 2;
    Graph::Id features = h;
    for (size_t l = 0; l < nlayers; ++l) {
      int64_t out = g.val(param_ids[2 * l]).shape[1];
      Graph::Id z = g.matmul(h, param_ids[2 * l]);
      z = g.add(z, g.linmap(param_ids[2 * l + 1], row_broadcast(out), batch, {batch, out}));
      if (l + 1 < nlayers) {
        h = g.relu(z);
        features = h;
      } else {
        h = z;
      }
    }
    return {h, features};
  }
  const ConvPlan& plan = *m.plan;
  for (size_t l = 0; l < plan.layers.size(); ++l) {
    const auto& L = plan.layers[l];
    try {
      Graph::Id cols = g.linmap(h, L.im2col, batch, {batch * L.hw, L.cols});
      Graph::Id z = g.matmul(cols, param_ids[2 * l]);
      z = g.add(z, g.linmap(param_ids[2 * l + 1], L.bias, batch * L.hw, {batch * L.hw, L.out_ch}));
      z = g.relu(z);
      Graph::Id y = g.linmap(z, L.permute, batch, {batch, L.out_ch * L.hw});
      h = g.linmap(y, L.pool, batch, {batch, L.out_ch * L.hw / 4});
    } catch (const NumericError& e) {
      throw NumericError("conv layer " + std::to_string(l) + ": " + e.what());
    }
  }
  Graph::Id features = g.reshape(h, {batch, m.feature_dim});
  Graph::Id logits = g.matmul(features, param_ids[m.feature_boundary]);
  logits = g.add(logits, g.linmap(param_ids[m.feature_boundary + 1], row_broadcast(m.classes), batch,
                                  {batch, m.classes}));
  return {logits, features};
}

namespace {
Graph::Id log_sum_exp_rows(Graph& g, Graph::Id logits) {
  const Tensor& t = g.val(logits);
  int64_t B = t.shape[0], C = t.shape[1];
  Tensor rowmax_full = Tensor::zeros({B, C});
  Tensor rowmax_col = Tensor::zeros({B, 1});
  for (int64_t i = 0; i < B; ++i) {
    double m = t[i * C];
    for (int64_t j = 1; j < C; ++j) m = std::max(m, t[i * C + j]);
    rowmax_col[i] = m;
    for (int64_t j = 0; j < C; ++j) rowmax_full[i * C + j] = m;
  }
  // The row max enters as a constant shift; gradients are unaffected.
  Graph::Id e = g.exp_(g.sub(logits, g.constant(rowmax_full)));
  Graph::Id rowsum = g.matmul(e, g.constant(Tensor::full({C, 1}, 1.0)));
  return g.add(g.log_(rowsum), g.constant(rowmax_col));
}
}  // namespace

Graph::Id cross_entropy(Graph& g, Graph::Id logits, const std::vector<int>& labels) {
  const Tensor& t = g.val(logits);
  int64_t B = t.shape[0], C = t.shape[1];
  if (static_cast<int64_t>(labels.size()) != B) throw ShapeError("cross_entropy: label count mismatch");
  Tensor onehot = Tensor::zeros({B, C});
  for (int64_t i = 0; i < B; ++i) onehot[i * C + labels[static_cast<size_t>(i)]] = 1.0;
  return cross_entropy_soft(g, logits, onehot);
}

Graph::Id cross_entropy_soft(Graph& g, Graph::Id logits, const Tensor& weights) {
  const Tensor& t = g.val(logits);
  int64_t B = t.shape[0];
  if (weights.shape != t.shape) throw ShapeError("cross_entropy_soft: weight shape mismatch");
  Graph::Id lse = log_sum_exp_rows(g, logits);
  Graph::Id picked = g.sum(g.mul(logits, g.constant(weights)));
  return g.scale(g.sub(g.sum(lse), picked), 1.0 / static_cast<double>(B));
}

EvalOut evaluate(const Model& m, const Batch& batch) {
  Graph g;
  auto params = param_nodes(g, m, false);
  Graph::Id x = g.constant(batch.images);
  auto fwd = model_forward(g, m, params, x, batch.size());
  EvalOut out;
  out.logits = g.val(fwd.logits);
  out.features = g.val(fwd.features);
  if (batch.soft_labels)
    out.loss = g.val(cross_entropy_soft(g, fwd.logits, *batch.soft_labels)).item();
  else if (!batch.labels.empty())
    out.loss = g.val(cross_entropy(g, fwd.logits, batch.labels)).item();
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  int64_t B = logits.shape[0], C = logits.shape[1];
  Tensor p = logits;
  for (int64_t i = 0; i < B; ++i) {
    double m = p[i * C];
    for (int64_t j = 1; j < C; ++j) m = std::max(m, p[i * C + j]);
    double s = 0;
    for (int64_t j = 0; j < C; ++j) {
      p[i * C + j] = std::exp(p[i * C + j] - m);
      s += p[i * C + j];
    }
    for (int64_t j = 0; j < C; ++j) p[i * C + j] /= s;
  }
  return p;
}

std::vector<int> predict(const Model& m, const Batch& batch) {
  EvalOut out = evaluate(m, batch);
  int64_t B = out.logits.shape[0], C = out.logits.shape[1];
  std::vector<int> pred(static_cast<size_t>(B));
  for (int64_t i = 0; i < B; ++i) {
    int best = 0;
    for (int64_t j = 1; j < C; ++j)
      if (out.logits[i * C + j] > out.logits[i * C + best]) best = static_cast<int>(j);
    pred[static_cast<size_t>(i)] = best;
  }
  return pred;
}

double accuracy(const Model& m, const Dataset& d, int64_t batch_size) {
  int64_t correct = 0;
  for (int64_t start = 0; start < d.n(); start += batch_size) {
    int64_t end = std::min(d.n(), start + batch_size);
    std::vector<int64_t> pos;
    for (int64_t i = start; i < end; ++i) pos.push_back(i);
    Batch b = d.batch(pos);
    auto pred = predict(m, b);
    for (size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == b.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(d.n());
}

namespace {
constexpr char kModelMagic[8] = {'P', 'L', 'A', 'B', 'M', 'O', 'D', 'L'};
template <class T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw FormatError("truncated checkpoint");
  return v;
}
}  // namespace

void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  f.write(kModelMagic, 8);
  put<uint32_t>(f, 1);  // version
  if (const auto* mlp = std::get_if<MlpSpec>(&m.spec)) {
    put<uint8_t>(f, 0);
    put<int64_t>(f, static_cast<int64_t>(mlp->widths.size()));
    for (int64_t w : mlp->widths) put<int64_t>(f, w);
  } else {
    const auto& cnn = std::get<CnnSpec>(m.spec);
    put<uint8_t>(f, 1);
    put<int64_t>(f, cnn.in_ch);
    put<int64_t>(f, cnn.height);
    put<int64_t>(f, cnn.width);
    put<int64_t>(f, static_cast<int64_t>(cnn.channels.size()));
    for (int64_t c : cnn.channels) put<int64_t>(f, c);
    put<int64_t>(f, cnn.classes);
  }
  put<int64_t>(f, static_cast<int64_t>(m.feature_boundary));
  put<int64_t>(f, static_cast<int64_t>(m.params.size()));
  for (size_t i = 0; i < m.params.size(); ++i) {
    put<uint8_t>(f, m.frozen[i] ? 1 : 0);
    const Tensor& p = m.params[i];
    put<int64_t>(f, static_cast<int64_t>(p.shape.size()));
    for (int64_t d : p.shape) put<int64_t>(f, d);
    for (double x : p.v) put<float>(f, static_cast<float>(x));  // little-endian f32 blob
  }
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kModelMagic, 8) != 0) throw FormatError(path + ": bad magic");
  uint32_t version = get<uint32_t>(f);
  if (version != 1) throw FormatError(path + ": unknown checkpoint version");
  uint8_t kind = get<uint8_t>(f);
  ModelSpec spec;
  if (kind == 0) {
    MlpSpec mlp;
    int64_t n = get<int64_t>(f);
    for (int64_t i = 0; i < n; ++i) mlp.widths.push_back(get<int64_t>(f));
    spec = mlp;
  } else {
    CnnSpec cnn;
    cnn.in_ch = get<int64_t>(f);
    cnn.height = get<int64_t>(f);
    cnn.width = get<int64_t>(f);
    int64_t n = get<int64_t>(f);
    cnn.channels.clear();
    for (int64_t i = 0; i < n; ++i) cnn.channels.push_back(get<int64_t>(f));
    cnn.classes = get<int64_t>(f);
    spec = cnn;
  }
  Model m = build_model(spec, 0);
  int64_t fb = get<int64_t>(f);
  int64_t np = get<int64_t>(f);
  if (fb != static_cast<int64_t>(m.feature_boundary) || np != static_cast<int64_t>(m.params.size()))
    throw FormatError(path + ": parameter layout mismatch");
  for (size_t i = 0; i < m.params.size(); ++i) {
    m.frozen[i] = get<uint8_t>(f) != 0;
    int64_t nd = get<int64_t>(f);
    Shape sh;
    for (int64_t j = 0; j < nd; ++j) sh.push_back(get<int64_t>(f));
    if (sh != m.params[i].shape) throw FormatError(path + ": parameter shape mismatch");
    for (auto& x : m.params[i].v) x = static_cast<double>(get<float>(f));
  }
  return m;
}

}  // namespace poisonlab
