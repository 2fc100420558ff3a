#pragma once

#include <Eigen/Dense>

namespace tlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Norms below this are treated as the zero vector by every cosine helper.
inline constexpr double kNormFloor = 1e-12;

/// Cosine similarity in [-1, 1]. Throws DegenerateEmbedding on a near-zero input.
double cosine(const Vec& u, const Vec& v);

/// Closed-form gradient of cosine(x, ref) with respect to x:
///   (1/|x|) (ref/|ref| - (x/|x|) cos(x, ref)).
/// The result is orthogonal to x.
Vec cosine_gradient(const Vec& x, const Vec& ref);

/// Numerically stable softmax.
Vec softmax(const Vec& logits);

Eigen::Index argmax(const Vec& v);

bool all_finite(const Vec& v);
bool all_finite(const Mat& m);

}  // namespace tlab
