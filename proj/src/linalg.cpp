#include "transferlab/linalg.hpp"

#include <algorithm>
#include <cmath>

#include "transferlab/errors.hpp"

namespace tlab {

namespace {

void require_same_size(const Vec& u, const Vec& v) {
  if (u.size() != v.size()) {
    throw DimensionMismatch("cosine: vector sizes differ (" + std::to_string(u.size()) + " vs " +
                            std::to_string(v.size()) + ")");
  }
}

}  // namespace

double cosine(const Vec& u, const Vec& v) {
  require_same_size(u, v);
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu < kNormFloor || nv < kNormFloor) {
    throw DegenerateEmbedding("cosine: near-zero vector");
  }
  return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

Vec cosine_gradient(const Vec& x, const Vec& ref) {
  require_same_size(x, ref);
  const double nx = x.norm();
  const double nr = ref.norm();
  if (nx < kNormFloor || nr < kNormFloor) {
    throw DegenerateEmbedding("cosine_gradient: near-zero vector");
  }
  const double cos = x.dot(ref) / (nx * nr);
  Vec grad = (ref / nr - x * (cos / nx)) / nx;
  // Remove the rounding residue along x so the orthogonality invariant holds tightly.
  grad -= x * (grad.dot(x) / (nx * nx));
  return grad;
}

Vec softmax(const Vec& logits) {
  const double top = logits.maxCoeff();
  Vec p = (logits.array() - top).exp().matrix();
  p /= p.sum();
  return p;
}

Eigen::Index argmax(const Vec& v) {
  Eigen::Index idx = 0;
  v.maxCoeff(&idx);
  return idx;
}

bool all_finite(const Vec& v) { return v.allFinite(); }
bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace tlab
