#pragma once

#include <string>

#include "poisonlab/model.hpp"

namespace poisonlab {

enum class PointRole { TargetClass, PoisonClass, PoisonedExample, TargetPoint };

struct ProjectedPoint {
  int64_t id = -1;
  PointRole role = PointRole::TargetClass;
  double u = 0.0;  // centroid-axis coordinate
  double v = 0.0;  // orthogonal principal direction
  double z = 0.0;  // softmax probability of the poison class
};

struct FeatureProjection {
  std::vector<ProjectedPoint> points;
  Tensor axis1;  // normalized centroid difference (poison minus target)
  Tensor axis2;  // top principal direction of the residual
  Tensor center; // midpoint of the two class centroids
  bool pca_fallback = false;  // centroids coincided; both axes from PCA
};

// Axes from raw feature rows; exposed separately so the geometry is testable
// without a model. Falls back to the top two principal directions (with a
// warning) when the class centroids coincide.
struct ProjectionAxes {
  Tensor axis1, axis2, center;
  bool pca_fallback = false;
};
ProjectionAxes projection_axes(const Tensor& poison_class_features, const Tensor& target_class_features);

// Features and softmax come from the model; the projection covers every
// dataset example of the two classes plus the (optional) held-out target.
FeatureProjection project_features(const Model& model, const Dataset& data, int poison_class, int target_class,
                                   const std::vector<int64_t>& poison_ids, const Tensor* target_image = nullptr);

// Columns: id, role, u, v, z; 17 significant digits so a re-parse is exact.
std::string projection_to_csv(const FeatureProjection& p);
FeatureProjection projection_from_csv(const std::string& csv);

// 2D scatter, one element per point, z encoded as fill opacity.
std::string projection_to_svg(const FeatureProjection& p);

void save_text_file(const std::string& text, const std::string& path);

const char* role_name(PointRole role);

}  // namespace poisonlab
