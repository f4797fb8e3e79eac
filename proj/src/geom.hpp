#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "error.hpp"

namespace sao::geom {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }
};

Vec3 normalize(const Vec3& v);

/// 3x3 rotation matrix, row-major.
struct Rotation {
  std::array<double, 9> m = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Rotation identity() { return Rotation{}; }

  double at(int r, int c) const { return m[r * 3 + c]; }
  double& at(int r, int c) { return m[r * 3 + c]; }

  Vec3 apply(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Vec3 apply_transpose(const Vec3& v) const {
    return {m[0] * v.x + m[3] * v.y + m[6] * v.z,
            m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z};
  }
  Rotation compose(const Rotation& o) const;
  Rotation transpose() const;
  double trace() const { return m[0] + m[4] + m[8]; }

  /// Max deviation from orthonormality (|R^T R - I| entries and |det - 1|).
  double orthonormality_error() const;
  bool valid(double tol = 1e-9) const { return orthonormality_error() <= tol; }
};

/// Axis-angle vector; |v| is the rotation angle in radians.
struct So3Vector {
  Vec3 v;
};

/// Rigid transform: x -> rotation * x + translation.
struct Frame {
  Rotation rotation;
  Vec3 translation;

  static Frame identity() { return Frame{}; }
};

struct BackboneResidue {
  Vec3 n, ca, c, o;
};

Rotation rotation_from_so3(const So3Vector& v);
So3Vector so3_from_rotation(const Rotation& r);

Frame frame_compose(const Frame& a, const Frame& b);
Frame frame_invert(const Frame& t);
Vec3 frame_apply(const Frame& t, const Vec3& x);
Vec3 frame_apply_inverse(const Frame& t, const Vec3& x);

/// Gram-Schmidt frame: e1 along CA->C, e2 the orthogonalized CA->N direction,
/// e3 = e1 x e2; rotation columns are (e1, e2, e3), translation is CA.
Frame frame_from_backbone(const Vec3& n, const Vec3& ca, const Vec3& c);

/// Idealized backbone with CA at the origin, placed so that
/// frame_from_backbone(standard) is the identity frame.
BackboneResidue standard_backbone();

BackboneResidue backbone_from_frame(const Frame& f);

/// Signed torsion in (-pi, pi]. Sign convention: looking down p2->p3,
/// a positive angle rotates the p1 side counterclockwise onto the p4 side;
/// the planar cis arrangement is 0 and trans is pi.
double dihedral(const Vec3& p1, const Vec3& p2, const Vec3& p3, const Vec3& p4);

/// RMSD after optimal rigid superposition of ys onto xs.
double kabsch_rmsd(const std::vector<Vec3>& xs, const std::vector<Vec3>& ys);

}  // namespace sao::geom
