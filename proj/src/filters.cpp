#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <iostream>

#include "poisonlab/defenses.hpp"

namespace poisonlab {

namespace {

std::vector<std::vector<int64_t>> by_class(const std::vector<int>& labels, int64_t classes) {
  std::vector<std::vector<int64_t>> out(static_cast<size_t>(classes));
  for (size_t i = 0; i < labels.size(); ++i) out[static_cast<size_t>(labels[i])].push_back(static_cast<int64_t>(i));
  return out;
}

void check_features(const Tensor& features, const std::vector<int>& labels) {
  if (features.shape.size() != 2 || features.shape[0] != static_cast<int64_t>(labels.size()))
    throw ShapeError("filter: features must be [N, F] matching the label count");
}

}  // namespace

std::vector<int64_t> filter_spectral(const Tensor& features, const std::vector<int>& labels, int64_t classes,
                                     int64_t budget_count, double overestimate) {
  check_features(features, labels);
  if (budget_count < 1) throw ConfigError("filter_spectral: budget count must be >= 1");
  int64_t remove = std::max<int64_t>(1, static_cast<int64_t>(std::llround(overestimate * static_cast<double>(budget_count))));
  int64_t F = features.shape[1];
  auto groups = by_class(labels, classes);

  // Per class: squared projection of centered features onto the top right
  // singular direction. The class whose strongest candidates stand out the
  // most is declared affected, and only that class loses examples.
  std::vector<double> scores(labels.size(), 0.0);
  double best_signal = -1.0;
  int64_t best_class = -1;
  for (int64_t c = 0; c < classes; ++c) {
    const auto& idx = groups[static_cast<size_t>(c)];
    if (idx.empty()) continue;
    int64_t n = static_cast<int64_t>(idx.size());
    Eigen::MatrixXd M(n, F);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < F; ++j) M(i, j) = features[idx[static_cast<size_t>(i)] * F + j];
    Eigen::RowVectorXd mean = M.colwise().mean();
    M.rowwise() -= mean;
    if (M.norm() < 1e-12) continue;  // all identical: nothing sticks out
    Eigen::BDCSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinV);
    Eigen::VectorXd v = svd.matrixV().col(0);
    std::vector<double> cls_scores(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      double proj = M.row(i).dot(v);
      cls_scores[static_cast<size_t>(i)] = proj * proj;
      scores[static_cast<size_t>(idx[static_cast<size_t>(i)])] = proj * proj;
    }
    std::vector<double> sorted = cls_scores;
    std::sort(sorted.rbegin(), sorted.rend());
    int64_t top = std::min<int64_t>(remove, n);
    double signal = 0;
    for (int64_t i = 0; i < top; ++i) signal += sorted[static_cast<size_t>(i)] / static_cast<double>(top);
    if (signal > best_signal) {
      best_signal = signal;
      best_class = c;
    }
  }
  if (best_class < 0) {
    // Degenerate input (e.g. every feature identical): tie-break by lowest index.
    std::vector<int64_t> out;
    for (int64_t i = 0; i < std::min<int64_t>(remove, static_cast<int64_t>(labels.size())); ++i) out.push_back(i);
    return out;
  }
  auto& idx = groups[static_cast<size_t>(best_class)];
  if (remove > static_cast<int64_t>(idx.size())) {
    std::cerr << "filter_spectral: class " << best_class << " holds only " << idx.size() << " examples, removing all "
              << "(requested " << remove << ")\n";
    return idx;
  }
  // Highest score first; ties resolved toward the lowest index.
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
      return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
    return a < b;
  });
  std::vector<int64_t> out(idx.begin(), idx.begin() + remove);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int64_t> filter_deep_knn(const Tensor& features, const std::vector<int>& labels, int64_t classes,
                                     int64_t k, int64_t budget_count, double overestimate) {
  check_features(features, labels);
  int64_t n = features.shape[0], F = features.shape[1];
  if (k < 1 || k >= n) throw ConfigError("filter_deep_knn: k must satisfy 1 <= k < dataset size");
  if (budget_count < 1) throw ConfigError("filter_deep_knn: budget count must be >= 1");
  int64_t remove = std::max<int64_t>(1, static_cast<int64_t>(std::llround(overestimate * static_cast<double>(budget_count))));

  struct Flagged {
    int64_t idx;
    int64_t margin;  // plurality count minus own-label count among neighbors
  };
  std::vector<Flagged> flagged;
  std::vector<std::pair<double, int64_t>> dist(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double d = 0;
      for (int64_t q = 0; q < F; ++q) {
        double diff = features[i * F + q] - features[j * F + q];
        d += diff * diff;
      }
      dist[static_cast<size_t>(j)] = {d, j};
    }
    dist[static_cast<size_t>(i)].first = std::numeric_limits<double>::infinity();  // exclude self
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::vector<int64_t> counts(static_cast<size_t>(classes), 0);
    for (int64_t q = 0; q < k; ++q) ++counts[static_cast<size_t>(labels[static_cast<size_t>(dist[static_cast<size_t>(q)].second)])];
    int plural = 0;
    for (int64_t c = 1; c < classes; ++c)
      if (counts[static_cast<size_t>(c)] > counts[static_cast<size_t>(plural)]) plural = static_cast<int>(c);
    int own = labels[static_cast<size_t>(i)];
    if (plural != own)
      flagged.push_back({i, counts[static_cast<size_t>(plural)] - counts[static_cast<size_t>(own)]});
  }
  std::stable_sort(flagged.begin(), flagged.end(), [](const Flagged& a, const Flagged& b) {
    if (a.margin != b.margin) return a.margin > b.margin;
    return a.idx < b.idx;
  });
  std::vector<int64_t> out;
  for (const Flagged& f : flagged) {
    if (static_cast<int64_t>(out.size()) >= remove) break;
    out.push_back(f.idx);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int64_t> filter_activation_clustering(const Tensor& features, const std::vector<int>& labels,
                                                  int64_t classes, double threshold) {
  check_features(features, labels);
  int64_t F = features.shape[1];
  auto groups = by_class(labels, classes);
  std::vector<int64_t> out;
  for (int64_t c = 0; c < classes; ++c) {
    const auto& idx = groups[static_cast<size_t>(c)];
    int64_t n = static_cast<int64_t>(idx.size());
    if (n < 2) continue;
    auto row = [&](int64_t i) { return features.v.data() + idx[static_cast<size_t>(i)] * F; };
    auto sqdist = [&](const double* a, const double* b) {
      double d = 0;
      for (int64_t q = 0; q < F; ++q) d += (a[q] - b[q]) * (a[q] - b[q]);
      return d;
    };
    // Deterministic seeding: the point farthest from the class mean, then the
    // point farthest from that one.
    std::vector<double> mean(static_cast<size_t>(F), 0.0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t q = 0; q < F; ++q) mean[static_cast<size_t>(q)] += row(i)[q] / static_cast<double>(n);
    int64_t s1 = 0;
    double best = -1;
    for (int64_t i = 0; i < n; ++i) {
      double d = sqdist(row(i), mean.data());
      if (d > best) { best = d; s1 = i; }
    }
    int64_t s2 = 0;
    best = -1;
    for (int64_t i = 0; i < n; ++i) {
      double d = sqdist(row(i), row(s1));
      if (d > best) { best = d; s2 = i; }
    }
    std::vector<double> c1(row(s1), row(s1) + F), c2(row(s2), row(s2) + F);
    std::vector<char> assign(static_cast<size_t>(n), 0);
    bool converged = false;
    for (int iter = 0; iter < 100 && !converged; ++iter) {
      converged = true;
      for (int64_t i = 0; i < n; ++i) {
        char a = sqdist(row(i), c1.data()) <= sqdist(row(i), c2.data()) ? 0 : 1;
        if (a != assign[static_cast<size_t>(i)]) {
          assign[static_cast<size_t>(i)] = a;
          converged = false;
        }
      }
      std::fill(c1.begin(), c1.end(), 0.0);
      std::fill(c2.begin(), c2.end(), 0.0);
      int64_t n1 = 0, n2 = 0;
      for (int64_t i = 0; i < n; ++i) {
        auto& ctr = assign[static_cast<size_t>(i)] == 0 ? c1 : c2;
        (assign[static_cast<size_t>(i)] == 0 ? n1 : n2) += 1;
        for (int64_t q = 0; q < F; ++q) ctr[static_cast<size_t>(q)] += row(i)[q];
      }
      if (n1 == 0 || n2 == 0) break;  // collapsed: treat as a single cluster
      for (int64_t q = 0; q < F; ++q) {
        c1[static_cast<size_t>(q)] /= static_cast<double>(n1);
        c2[static_cast<size_t>(q)] /= static_cast<double>(n2);
      }
    }
    if (!converged) std::cerr << "filter_activation_clustering: class " << c << " did not converge, using best-so-far\n";
    int64_t n1 = 0;
    for (char a : assign) n1 += a == 0 ? 1 : 0;
    int64_t n2 = n - n1;
    if (n1 == 0 || n2 == 0) continue;
    char small = n1 <= n2 ? 0 : 1;
    double frac = static_cast<double>(std::min(n1, n2)) / static_cast<double>(n);
    if (frac >= threshold) continue;
    for (int64_t i = 0; i < n; ++i)
      if (assign[static_cast<size_t>(i)] == small) out.push_back(idx[static_cast<size_t>(i)]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace poisonlab
