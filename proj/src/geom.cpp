#include "geom.hpp"

#include <Eigen/Dense>
#include <algorithm>

namespace sao::geom {

Vec3 normalize(const Vec3& v) {
  double n = v.norm();
  if (n < 1e-12) fail(ErrorCode::DegenerateDihedral, "cannot normalize near-zero vector");
  return v * (1.0 / n);
}

Rotation Rotation::compose(const Rotation& o) const {
  Rotation r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += at(i, k) * o.at(k, j);
      r.at(i, j) = s;
    }
  return r;
}

Rotation Rotation::transpose() const {
  Rotation r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.at(i, j) = at(j, i);
  return r;
}

double Rotation::orthonormality_error() const {
  double err = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += at(k, i) * at(k, j);
      err = std::max(err, std::abs(s - (i == j ? 1.0 : 0.0)));
    }
  double det = m[0] * (m[4] * m[8] - m[5] * m[7]) -
               m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
  return std::max(err, std::abs(det - 1.0));
}

Rotation rotation_from_so3(const So3Vector& sv) {
  const Vec3& v = sv.v;
  double theta = v.norm();
  // Rodrigues: R = I + a*K + b*K^2, K = skew(v), with series near zero.
  double a, b;
  if (theta < 1e-8) {
    double t2 = theta * theta;
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / (theta * theta);
  }
  double wx = v.x, wy = v.y, wz = v.z;
  Rotation r;
  r.m = {1 - b * (wy * wy + wz * wz), -a * wz + b * wx * wy, a * wy + b * wx * wz,
         a * wz + b * wx * wy,        1 - b * (wx * wx + wz * wz), -a * wx + b * wy * wz,
         -a * wy + b * wx * wz,       a * wx + b * wy * wz,        1 - b * (wx * wx + wy * wy)};
  return r;
}

So3Vector so3_from_rotation(const Rotation& r) {
  double cos_theta = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  double theta = std::acos(cos_theta);
  Vec3 skew{r.at(2, 1) - r.at(1, 2), r.at(0, 2) - r.at(2, 0),
            r.at(1, 0) - r.at(0, 1)};
  if (theta < 1e-7) {
    return {skew * 0.5};
  }
  if (theta > M_PI - 1e-5) {
    // Near the half-turn branch: axis from the largest diagonal of
    // (R + I) / 2 = axis axis^T at theta = pi.
    int k = 0;
    if (r.at(1, 1) > r.at(k, k)) k = 1;
    if (r.at(2, 2) > r.at(k, k)) k = 2;
    std::array<double, 3> a{};
    a[k] = std::sqrt(std::max(0.0, (r.at(k, k) + 1.0) / 2.0));
    // Off-diagonals of (R + I)/2 at theta = pi are a_k * a_j.
    const double* rm = r.m.data();
    for (int j = 0; j < 3; ++j)
      if (j != k) a[j] = (rm[k * 3 + j] + rm[j * 3 + k]) / (4.0 * a[k]);
    Vec3 axis = normalize({a[0], a[1], a[2]});
    // Sign from the skew part when it is not fully degenerate.
    if (axis.dot(skew) < 0.0) axis = -axis;
    return {axis * theta};
  }
  double scale = theta / (2.0 * std::sin(theta));
  return {skew * scale};
}

Frame frame_compose(const Frame& a, const Frame& b) {
  return {a.rotation.compose(b.rotation),
          a.rotation.apply(b.translation) + a.translation};
}

Frame frame_invert(const Frame& t) {
  Rotation rt = t.rotation.transpose();
  return {rt, -rt.apply(t.translation)};
}

Vec3 frame_apply(const Frame& t, const Vec3& x) {
  return t.rotation.apply(x) + t.translation;
}

Vec3 frame_apply_inverse(const Frame& t, const Vec3& x) {
  return t.rotation.apply_transpose(x - t.translation);
}

Frame frame_from_backbone(const Vec3& n, const Vec3& ca, const Vec3& c) {
  Vec3 v1 = c - ca;
  double n1 = v1.norm();
  if (n1 < 1e-6) fail(ErrorCode::CollinearAtoms, "CA and C coincide");
  Vec3 e1 = v1 * (1.0 / n1);
  Vec3 v2 = n - ca;
  Vec3 u2 = v2 - e1 * e1.dot(v2);
  double n2 = u2.norm();
  if (n2 < 1e-6) fail(ErrorCode::CollinearAtoms, "N, CA, C are collinear");
  Vec3 e2 = u2 * (1.0 / n2);
  Vec3 e3 = e1.cross(e2);
  Rotation r;
  r.m = {e1.x, e2.x, e3.x, e1.y, e2.y, e3.y, e1.z, e2.z, e3.z};
  return {r, ca};
}

BackboneResidue standard_backbone() {
  BackboneResidue b;
  b.ca = {0.0, 0.0, 0.0};
  b.c = {1.523, 0.0, 0.0};
  b.n = {-0.525, 1.363, 0.0};
  b.o = {2.152, -1.059, 0.0};
  return b;
}

BackboneResidue backbone_from_frame(const Frame& f) {
  BackboneResidue s = standard_backbone();
  return {frame_apply(f, s.n), frame_apply(f, s.ca), frame_apply(f, s.c),
          frame_apply(f, s.o)};
}

double dihedral(const Vec3& p1, const Vec3& p2, const Vec3& p3, const Vec3& p4) {
  Vec3 b1 = p2 - p1, b2 = p3 - p2, b3 = p4 - p3;
  Vec3 n1 = b1.cross(b2);
  Vec3 n2 = b2.cross(b3);
  if (n1.norm() < 1e-9 || n2.norm() < 1e-9 || b2.norm() < 1e-9)
    fail(ErrorCode::DegenerateDihedral, "degenerate dihedral geometry");
  Vec3 m = n1.cross(b2 * (1.0 / b2.norm()));
  double x = n1.dot(n2);
  double y = m.dot(n2);
  double angle = std::atan2(y, x);
  if (angle <= -M_PI) angle = M_PI;  // canonical range (-pi, pi]
  return angle;
}

double kabsch_rmsd(const std::vector<Vec3>& xs, const std::vector<Vec3>& ys) {
  if (xs.size() != ys.size())
    fail(ErrorCode::LengthMismatch, "kabsch_rmsd: point counts differ");
  if (xs.size() < 3)
    fail(ErrorCode::LengthMismatch, "kabsch_rmsd: need at least 3 points");
  const int n = static_cast<int>(xs.size());
  Eigen::Vector3d cx = Eigen::Vector3d::Zero(), cy = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    cx += Eigen::Vector3d(xs[i].x, xs[i].y, xs[i].z);
    cy += Eigen::Vector3d(ys[i].x, ys[i].y, ys[i].z);
  }
  cx /= n;
  cy /= n;
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d a = Eigen::Vector3d(xs[i].x, xs[i].y, xs[i].z) - cx;
    Eigen::Vector3d b = Eigen::Vector3d(ys[i].x, ys[i].y, ys[i].z) - cy;
    h += b * a.transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  double d = (v * u.transpose()).determinant();
  Eigen::Matrix3d corr = Eigen::Matrix3d::Identity();
  corr(2, 2) = d < 0 ? -1.0 : 1.0;
  Eigen::Matrix3d rot = v * corr * u.transpose();
  double ss = 0.0;
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d a = Eigen::Vector3d(xs[i].x, xs[i].y, xs[i].z) - cx;
    Eigen::Vector3d b = Eigen::Vector3d(ys[i].x, ys[i].y, ys[i].z) - cy;
    ss += (rot * b - a).squaredNorm();
  }
  return std::sqrt(ss / n);
}

}  // namespace sao::geom
