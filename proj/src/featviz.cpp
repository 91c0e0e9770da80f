#include "poisonlab/featviz.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <unordered_set>

namespace poisonlab {

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.shape[0], t.shape[1]);
  for (int64_t i = 0; i < t.shape[0]; ++i)
    for (int64_t j = 0; j < t.shape[1]; ++j) m(i, j) = t[i * t.shape[1] + j];
  return m;
}

Tensor unit_from(const Eigen::VectorXd& v) {
  Tensor out = Tensor::zeros({static_cast<int64_t>(v.size())});
  double n = v.norm();
  for (int64_t i = 0; i < v.size(); ++i) out[i] = v(i) / n;
  // Deterministic sign: first component of visible magnitude is positive.
  for (int64_t i = 0; i < out.size(); ++i) {
    if (std::abs(out[i]) > 1e-12) {
      if (out[i] < 0)
        for (int64_t j = 0; j < out.size(); ++j) out[j] = -out[j];
      break;
    }
  }
  return out;
}

double dot_rows(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::string fmt17(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

const char* role_color(PointRole role) {
  switch (role) {
    case PointRole::TargetClass: return "#1f77b4";
    case PointRole::PoisonClass: return "#2ca02c";
    case PointRole::PoisonedExample: return "#d62728";
    case PointRole::TargetPoint: return "#000000";
  }
  return "#888888";
}

}  // namespace

const char* role_name(PointRole role) {
  switch (role) {
    case PointRole::TargetClass: return "target-class";
    case PointRole::PoisonClass: return "poison-class";
    case PointRole::PoisonedExample: return "poisoned-example";
    case PointRole::TargetPoint: return "target-point";
  }
  return "unknown";
}

ProjectionAxes projection_axes(const Tensor& poison_class_features, const Tensor& target_class_features) {
  if (poison_class_features.shape.size() != 2 || target_class_features.shape.size() != 2 ||
      poison_class_features.shape[1] != target_class_features.shape[1])
    throw ShapeError("projection axes: feature matrices must share a column count");
  int64_t F = poison_class_features.shape[1];
  int64_t np = poison_class_features.shape[0], nt = target_class_features.shape[0];
  if (np == 0 || nt == 0) throw ConfigError("projection axes: both classes must be present");

  Eigen::MatrixXd P = to_eigen(poison_class_features);
  Eigen::MatrixXd T = to_eigen(target_class_features);
  Eigen::VectorXd cp = P.colwise().mean();
  Eigen::VectorXd ct = T.colwise().mean();
  Eigen::VectorXd gap = cp - ct;

  ProjectionAxes axes;
  axes.center = Tensor::zeros({F});
  for (int64_t j = 0; j < F; ++j) axes.center[j] = 0.5 * (cp(j) + ct(j));

  Eigen::MatrixXd all(np + nt, F);
  all.topRows(np) = P;
  all.bottomRows(nt) = T;
  Eigen::RowVectorXd mean = all.colwise().mean();
  all.rowwise() -= mean;

  if (gap.norm() < 1e-10) {
    std::cerr << "projection axes: class centroids coincide, falling back to the top two principal directions\n";
    axes.pca_fallback = true;
    Eigen::BDCSVD<Eigen::MatrixXd> svd(all, Eigen::ComputeThinV);
    if (svd.matrixV().cols() < 2) throw ConfigError("projection axes: feature dimension must be at least 2");
    axes.axis1 = unit_from(svd.matrixV().col(0));
    axes.axis2 = unit_from(svd.matrixV().col(1));
    return axes;
  }

  axes.axis1 = unit_from(gap);
  // Residual after removing the centroid axis; its top principal direction is
  // orthogonal to axis1 by construction.
  Eigen::VectorXd a1(F);
  for (int64_t j = 0; j < F; ++j) a1(j) = axes.axis1[j];
  Eigen::MatrixXd residual = all - (all * a1) * a1.transpose();
  if (residual.norm() < 1e-12) {
    // Degenerate cloud on the axis: any orthogonal unit vector serves.
    Eigen::VectorXd e = Eigen::VectorXd::Zero(F);
    int64_t pick = 0;
    for (int64_t j = 1; j < F; ++j)
      if (std::abs(a1(j)) < std::abs(a1(pick))) pick = j;
    e(pick) = 1.0;
    e -= e.dot(a1) * a1;
    axes.axis2 = unit_from(e);
    return axes;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(residual, Eigen::ComputeThinV);
  axes.axis2 = unit_from(svd.matrixV().col(0));
  return axes;
}

FeatureProjection project_features(const Model& model, const Dataset& data, int poison_class, int target_class,
                                   const std::vector<int64_t>& poison_ids, const Tensor* target_image) {
  std::vector<int64_t> pos_p, pos_t;
  for (int64_t i = 0; i < data.n(); ++i) {
    int y = data.labels[static_cast<size_t>(i)];
    if (y == poison_class) pos_p.push_back(i);
    if (y == target_class) pos_t.push_back(i);
  }
  if (pos_p.empty() || pos_t.empty()) throw ConfigError("feature projection: both classes must be present");

  auto features_of = [&](const std::vector<int64_t>& positions, Tensor* probs) {
    Tensor out = Tensor::zeros({static_cast<int64_t>(positions.size()), model.feature_dim});
    if (probs) *probs = Tensor::zeros({static_cast<int64_t>(positions.size())});
    int64_t bs = 256;
    for (size_t start = 0; start < positions.size(); start += static_cast<size_t>(bs)) {
      std::vector<int64_t> chunk(positions.begin() + static_cast<int64_t>(start),
                                 positions.begin() + static_cast<int64_t>(std::min(positions.size(), start + static_cast<size_t>(bs))));
      EvalOut e = evaluate(model, data.batch(chunk));
      std::copy(e.features.v.begin(), e.features.v.end(),
                out.v.begin() + static_cast<int64_t>(start) * model.feature_dim);
      if (probs) {
        Tensor sm = softmax_rows(e.logits);
        for (size_t i = 0; i < chunk.size(); ++i)
          (*probs)[static_cast<int64_t>(start + i)] = sm[static_cast<int64_t>(i) * model.classes + poison_class];
      }
    }
    return out;
  };

  Tensor probs_p, probs_t;
  Tensor fp = features_of(pos_p, &probs_p);
  Tensor ft = features_of(pos_t, &probs_t);
  ProjectionAxes axes = projection_axes(fp, ft);

  FeatureProjection proj;
  proj.axis1 = axes.axis1;
  proj.axis2 = axes.axis2;
  proj.center = axes.center;
  proj.pca_fallback = axes.pca_fallback;

  std::unordered_set<int64_t> poisoned(poison_ids.begin(), poison_ids.end());
  auto emit = [&](const Tensor& feats, const Tensor& probs, const std::vector<int64_t>& positions, PointRole base) {
    int64_t F = model.feature_dim;
    for (size_t i = 0; i < positions.size(); ++i) {
      ProjectedPoint pt;
      pt.id = data.ids[static_cast<size_t>(positions[i])];
      pt.role = base == PointRole::PoisonClass && poisoned.count(pt.id) ? PointRole::PoisonedExample : base;
      Tensor row = Tensor::zeros({F});
      for (int64_t j = 0; j < F; ++j) row[j] = feats[static_cast<int64_t>(i) * F + j] - proj.center[j];
      pt.u = dot_rows(row, proj.axis1);
      pt.v = dot_rows(row, proj.axis2);
      pt.z = probs[static_cast<int64_t>(i)];
      proj.points.push_back(pt);
    }
  };
  emit(ft, probs_t, pos_t, PointRole::TargetClass);
  emit(fp, probs_p, pos_p, PointRole::PoisonClass);

  if (target_image) {
    Batch b;
    b.images = *target_image;
    b.images.shape = {1, target_image->size()};
    b.labels = {0};
    b.ids = {-1};
    EvalOut e = evaluate(model, b);
    ProjectedPoint pt;
    pt.id = -1;
    pt.role = PointRole::TargetPoint;
    Tensor row = Tensor::zeros({model.feature_dim});
    for (int64_t j = 0; j < model.feature_dim; ++j) row[j] = e.features[j] - proj.center[j];
    pt.u = dot_rows(row, proj.axis1);
    pt.v = dot_rows(row, proj.axis2);
    pt.z = softmax_rows(e.logits)[poison_class];
    proj.points.push_back(pt);
  }
  return proj;
}

std::string projection_to_csv(const FeatureProjection& p) {
  std::ostringstream os;
  os << "id,role,u,v,z\n";
  for (const auto& pt : p.points)
    os << pt.id << ',' << role_name(pt.role) << ',' << fmt17(pt.u) << ',' << fmt17(pt.v) << ',' << fmt17(pt.z)
       << '\n';
  return os.str();
}

FeatureProjection projection_from_csv(const std::string& csv) {
  FeatureProjection p;
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line) || line != "id,role,u,v,z") throw FormatError("projection csv: bad header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id_s, role_s, u_s, v_s, z_s;
    if (!std::getline(ls, id_s, ',') || !std::getline(ls, role_s, ',') || !std::getline(ls, u_s, ',') ||
        !std::getline(ls, v_s, ',') || !std::getline(ls, z_s))
      throw FormatError("projection csv: short row");
    ProjectedPoint pt;
    pt.id = std::stoll(id_s);
    bool known = false;
    for (PointRole r : {PointRole::TargetClass, PointRole::PoisonClass, PointRole::PoisonedExample,
                        PointRole::TargetPoint}) {
      if (role_s == role_name(r)) {
        pt.role = r;
        known = true;
      }
    }
    if (!known) throw FormatError("projection csv: unknown role " + role_s);
    pt.u = std::strtod(u_s.c_str(), nullptr);
    pt.v = std::strtod(v_s.c_str(), nullptr);
    pt.z = std::strtod(z_s.c_str(), nullptr);
    p.points.push_back(pt);
  }
  return p;
}

std::string projection_to_svg(const FeatureProjection& p) {
  double lo_u = 0, hi_u = 1, lo_v = 0, hi_v = 1;
  if (!p.points.empty()) {
    lo_u = hi_u = p.points[0].u;
    lo_v = hi_v = p.points[0].v;
    for (const auto& pt : p.points) {
      lo_u = std::min(lo_u, pt.u);
      hi_u = std::max(hi_u, pt.u);
      lo_v = std::min(lo_v, pt.v);
      hi_v = std::max(hi_v, pt.v);
    }
  }
  double span_u = hi_u - lo_u > 1e-12 ? hi_u - lo_u : 1.0;
  double span_v = hi_v - lo_v > 1e-12 ? hi_v - lo_v : 1.0;
  const double W = 640, H = 640, margin = 40;
  auto sx = [&](double u) { return margin + (u - lo_u) / span_u * (W - 2 * margin); };
  auto sy = [&](double v) { return H - margin - (v - lo_v) / span_v * (H - 2 * margin); };

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  for (const auto& pt : p.points) {
    double r = pt.role == PointRole::TargetPoint ? 7.0 : 3.5;
    os << "  <circle cx=\"" << sx(pt.u) << "\" cy=\"" << sy(pt.v) << "\" r=\"" << r << "\" fill=\""
       << role_color(pt.role) << "\" fill-opacity=\"" << std::max(0.08, pt.z) << "\"/>\n";
  }
  os << "  <g font-family=\"sans-serif\" font-size=\"13\">\n";
  double ly = 18;
  for (PointRole r : {PointRole::TargetClass, PointRole::PoisonClass, PointRole::PoisonedExample,
                      PointRole::TargetPoint}) {
    os << "    <rect x=\"14\" y=\"" << ly - 10 << "\" width=\"10\" height=\"10\" fill=\"" << role_color(r)
       << "\"/>\n";
    os << "    <text x=\"30\" y=\"" << ly << "\">" << role_name(r) << "</text>\n";
    ly += 18;
  }
  os << "  </g>\n</svg>\n";
  return os.str();
}

void save_text_file(const std::string& text, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace poisonlab
