#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "poisonlab/featviz.hpp"

using namespace poisonlab;

namespace {

Tensor cluster(int64_t n, int64_t dim, const std::vector<double>& center, double spread, uint64_t seed) {
  SplitRng r(seed);
  Tensor out = Tensor::zeros({n, dim});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < dim; ++j) out[i * dim + j] = center[static_cast<size_t>(j)] + spread * r.normal();
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double project_row(const Tensor& feats, int64_t row, const ProjectionAxes& axes, const Tensor& axis) {
  int64_t F = feats.shape[1];
  double s = 0;
  for (int64_t j = 0; j < F; ++j) s += (feats[row * F + j] - axes.center[j]) * axis[j];
  return s;
}

}  // namespace

TEST_CASE("class means land near plus/minus half the centroid gap on the first axis") {
  Tensor fp = cluster(80, 5, {4, 0, 0, 0, 0}, 0.05, 1);
  Tensor ft = cluster(80, 5, {0, 0, 0, 0, 0}, 0.05, 2);
  ProjectionAxes axes = projection_axes(fp, ft);
  CHECK_FALSE(axes.pca_fallback);
  double up = 0, ut = 0;
  for (int64_t i = 0; i < 80; ++i) {
    up += project_row(fp, i, axes, axes.axis1) / 80.0;
    ut += project_row(ft, i, axes, axes.axis1) / 80.0;
  }
  // Gap is ~4 along the first coordinate, so the means sit near +-2.
  CHECK(up == doctest::Approx(2.0).epsilon(0.05));
  CHECK(ut == doctest::Approx(-2.0).epsilon(0.05));
}

TEST_CASE("the two axes are orthonormal within 1e-10") {
  Tensor fp = cluster(40, 6, {1, 2, 0, 0, 1, 0}, 0.3, 3);
  Tensor ft = cluster(40, 6, {0, 0, 1, 0, 0, 2}, 0.3, 4);
  ProjectionAxes axes = projection_axes(fp, ft);
  CHECK(std::abs(dot(axes.axis1, axes.axis2)) < 1e-10);
  CHECK(dot(axes.axis1, axes.axis1) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(dot(axes.axis2, axes.axis2) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("identical centroids fall back to principal directions") {
  Tensor fp = cluster(30, 4, {1, 1, 0, 0}, 0.5, 5);
  ProjectionAxes axes = projection_axes(fp, fp);
  CHECK(axes.pca_fallback);
  CHECK(std::abs(dot(axes.axis1, axes.axis2)) < 1e-10);
}

TEST_CASE("projections survive uniform translation exactly and rotation up to axis sign") {
  Tensor fp = cluster(50, 4, {3, 1, 0, 2}, 0.4, 6);
  Tensor ft = cluster(50, 4, {0, 0, 1, 0}, 0.4, 7);
  ProjectionAxes base = projection_axes(fp, ft);

  Tensor fp_t = fp, ft_t = ft;
  std::vector<double> shift = {5.0, -2.0, 0.7, 11.0};
  for (int64_t i = 0; i < fp_t.shape[0]; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      fp_t[i * 4 + j] += shift[static_cast<size_t>(j)];
      ft_t[i * 4 + j] += shift[static_cast<size_t>(j)];
    }
  ProjectionAxes shifted = projection_axes(fp_t, ft_t);
  for (int64_t i = 0; i < 50; i += 7) {
    CHECK(project_row(fp, i, base, base.axis1) == doctest::Approx(project_row(fp_t, i, shifted, shifted.axis1)).epsilon(1e-9));
    CHECK(project_row(fp, i, base, base.axis2) == doctest::Approx(project_row(fp_t, i, shifted, shifted.axis2)).epsilon(1e-9));
  }

  // Givens rotation in the (0,2) plane applied to every row.
  double c = std::cos(0.83), s = std::sin(0.83);
  auto rotate = [&](const Tensor& f) {
    Tensor out = f;
    for (int64_t i = 0; i < f.shape[0]; ++i) {
      double a = f[i * 4 + 0], b = f[i * 4 + 2];
      out[i * 4 + 0] = c * a - s * b;
      out[i * 4 + 2] = s * a + c * b;
    }
    return out;
  };
  ProjectionAxes rotated = projection_axes(rotate(fp), rotate(ft));
  Tensor fp_r = rotate(fp);
  for (int64_t i = 0; i < 50; i += 7) {
    CHECK(project_row(fp, i, base, base.axis1) == doctest::Approx(project_row(fp_r, i, rotated, rotated.axis1)).epsilon(1e-9));
    CHECK(std::abs(project_row(fp, i, base, base.axis2)) ==
          doctest::Approx(std::abs(project_row(fp_r, i, rotated, rotated.axis2))).epsilon(1e-9));
  }
}

TEST_CASE("a model projection tags roles and keeps confidences in range") {
  Dataset d = synth_blobs(3, 6, 40, 4.0, 8);
  Model m = build_model(MlpSpec{{6, 8, 3}}, 9);
  std::vector<int64_t> poison_ids;
  for (int64_t i = 0; i < d.n() && poison_ids.size() < 5; ++i)
    if (d.labels[static_cast<size_t>(i)] == 1) poison_ids.push_back(d.ids[static_cast<size_t>(i)]);
  Tensor target = d.image_tensor(0);
  FeatureProjection p = project_features(m, d, 1, 2, poison_ids, &target);

  int64_t n_poisoned = 0, n_target_pt = 0, n_poison = 0, n_target = 0;
  for (const auto& pt : p.points) {
    CHECK(pt.z >= 0.0);
    CHECK(pt.z <= 1.0);
    switch (pt.role) {
      case PointRole::PoisonedExample: ++n_poisoned; break;
      case PointRole::TargetPoint: ++n_target_pt; break;
      case PointRole::PoisonClass: ++n_poison; break;
      case PointRole::TargetClass: ++n_target; break;
    }
  }
  CHECK(n_poisoned == 5);
  CHECK(n_target_pt == 1);
  CHECK(n_poison == 35);
  CHECK(n_target == 40);
  CHECK(std::abs(dot(p.axis1, p.axis2)) < 1e-10);

  CHECK_THROWS_AS(project_features(m, d, 1, 5, {}, nullptr), ConfigError);
}

TEST_CASE("csv round trip is bit exact and the empty projection is header only") {
  FeatureProjection p;
  CHECK(projection_to_csv(p) == "id,role,u,v,z\n");

  SplitRng r(10);
  for (int i = 0; i < 20; ++i) {
    ProjectedPoint pt;
    pt.id = i;
    pt.role = static_cast<PointRole>(i % 4);
    pt.u = r.normal() * 1e3;
    pt.v = r.normal() * 1e-7;
    pt.z = r.uniform();
    p.points.push_back(pt);
  }
  FeatureProjection q = projection_from_csv(projection_to_csv(p));
  REQUIRE(q.points.size() == p.points.size());
  for (size_t i = 0; i < p.points.size(); ++i) {
    CHECK(q.points[i].id == p.points[i].id);
    CHECK(q.points[i].role == p.points[i].role);
    CHECK(q.points[i].u == p.points[i].u);
    CHECK(q.points[i].v == p.points[i].v);
    CHECK(q.points[i].z == p.points[i].z);
  }
  CHECK_THROWS_AS(projection_from_csv("nope\n"), FormatError);
}

TEST_CASE("svg output is well formed with one marker per point") {
  FeatureProjection p;
  for (int i = 0; i < 7; ++i) {
    ProjectedPoint pt;
    pt.id = i;
    pt.u = i;
    pt.v = -i;
    pt.z = 0.5;
    p.points.push_back(pt);
  }
  std::string svg = projection_to_svg(p);
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  size_t count = 0;
  for (size_t at = svg.find("<circle"); at != std::string::npos; at = svg.find("<circle", at + 1)) ++count;
  CHECK(count == 7);
}
