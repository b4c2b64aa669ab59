//! Shape models (plane, cylinder, sphere), their local frames, the
//! 3D <-> 2D surface parameterizations and grid discretization.
//!
//! All three shapes share one parameter convention: `(u, v)` are meters in
//! the local frame. Planes use the in-plane coordinates along the local
//! axes. Cylinders unroll to `u in [0, 2 pi r]` (angle scaled by radius)
//! with `v` the height along the axis. Spheres unfold through an
//! octahedron onto the square `[-pi r / 2, pi r / 2]^2`, which keeps cell
//! distortion low everywhere, including the poles.

use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Plane,
    Cylinder,
    Sphere,
}

/// A plane, cylinder or sphere with a local frame.
///
/// `axis_x` and `axis_y` are orthonormal. The plane normal and the cylinder
/// axis are both `axis_x x axis_y`; the sphere zenith uses the same vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeModel {
    pub kind: ShapeKind,
    /// Origin point: a point of the plane, a point on the cylinder axis,
    /// or the sphere center.
    pub origin: Vector3<f64>,
    pub axis_x: Vector3<f64>,
    pub axis_y: Vector3<f64>,
    /// Radius for cylinders and spheres; unused (0) for planes.
    pub radius: f64,
}

fn assert_frame(x: &Vector3<f64>, y: &Vector3<f64>) {
    debug_assert!((x.norm() - 1.0).abs() < 1e-6, "axis_x must be unit");
    debug_assert!((y.norm() - 1.0).abs() < 1e-6, "axis_y must be unit");
    debug_assert!(x.dot(y).abs() < 1e-6, "local axes must be orthogonal");
}

impl ShapeModel {
    pub fn plane(origin: Vector3<f64>, axis_x: Vector3<f64>, axis_y: Vector3<f64>) -> Self {
        assert_frame(&axis_x, &axis_y);
        Self { kind: ShapeKind::Plane, origin, axis_x, axis_y, radius: 0.0 }
    }

    /// Plane through `origin` with the given normal and an arbitrary but
    /// deterministic in-plane frame.
    pub fn plane_from_normal(origin: Vector3<f64>, normal: Vector3<f64>) -> Self {
        let n = normal.normalize();
        let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let x = (seed - n.dot(&seed) * n).normalize();
        let y = n.cross(&x);
        Self::plane(origin, x, y)
    }

    pub fn cylinder(
        origin: Vector3<f64>,
        axis_x: Vector3<f64>,
        axis_y: Vector3<f64>,
        radius: f64,
    ) -> Self {
        assert_frame(&axis_x, &axis_y);
        assert!(radius > 0.0, "cylinder radius must be positive");
        Self { kind: ShapeKind::Cylinder, origin, axis_x, axis_y, radius }
    }

    /// Cylinder from an axis direction, with a deterministic frame
    /// orthogonal to it.
    pub fn cylinder_from_axis(origin: Vector3<f64>, axis: Vector3<f64>, radius: f64) -> Self {
        let a = axis.normalize();
        let seed = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let x = (seed - a.dot(&seed) * a).normalize();
        let y = a.cross(&x);
        // axis_x x axis_y = a.
        Self::cylinder(origin, x, y, radius)
    }

    pub fn sphere(
        center: Vector3<f64>,
        axis_x: Vector3<f64>,
        axis_y: Vector3<f64>,
        radius: f64,
    ) -> Self {
        assert_frame(&axis_x, &axis_y);
        assert!(radius > 0.0, "sphere radius must be positive");
        Self { kind: ShapeKind::Sphere, origin: center, axis_x, axis_y, radius }
    }

    /// Plane normal, cylinder axis direction, or sphere zenith.
    #[inline]
    pub fn axis(&self) -> Vector3<f64> {
        self.axis_x.cross(&self.axis_y)
    }

    /// Signed distance to the surface, positive on the outward-normal side.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let pc = p - self.origin;
        match self.kind {
            ShapeKind::Plane => pc.dot(&self.axis()),
            ShapeKind::Cylinder => {
                let a = self.axis();
                let radial = pc - pc.dot(&a) * a;
                radial.norm() - self.radius
            }
            ShapeKind::Sphere => pc.norm() - self.radius,
        }
    }

    /// Outward surface normal at the footpoint of `p`.
    ///
    /// `None` for degenerate positions (cylinder axis or sphere center).
    pub fn normal_at(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let pc = p - self.origin;
        match self.kind {
            ShapeKind::Plane => Some(self.axis()),
            ShapeKind::Cylinder => {
                let a = self.axis();
                let radial = pc - pc.dot(&a) * a;
                let len = radial.norm();
                (len > 1e-12).then(|| radial / len)
            }
            ShapeKind::Sphere => {
                let len = pc.norm();
                (len > 1e-12).then(|| pc / len)
            }
        }
    }

    /// Surface coordinates of a point (assumed on or near the surface).
    ///
    /// `None` only for the sphere center, where the direction is undefined.
    pub fn parameterize(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let pc = p - self.origin;
        match self.kind {
            ShapeKind::Plane => Some((pc.dot(&self.axis_x), pc.dot(&self.axis_y))),
            ShapeKind::Cylinder => {
                let angle = pc.dot(&self.axis_y).atan2(pc.dot(&self.axis_x));
                let u = self.radius * (std::f64::consts::PI + angle);
                let v = pc.dot(&self.axis());
                Some((u, v))
            }
            ShapeKind::Sphere => {
                let len = pc.norm();
                if len < 1e-12 {
                    return None;
                }
                let d = pc / len;
                let x = d.dot(&self.axis_x);
                let y = d.dot(&self.axis_y);
                let z = d.dot(&self.axis());
                let n = x.abs() + y.abs() + z.abs();
                let scale = std::f64::consts::FRAC_PI_2 * self.radius;
                let u = if z >= 0.0 {
                    x / n
                } else if x >= 0.0 {
                    1.0 - y.abs() / n
                } else {
                    y.abs() / n - 1.0
                };
                let v = if z >= 0.0 {
                    y / n
                } else if y >= 0.0 {
                    1.0 - x.abs() / n
                } else {
                    x.abs() / n - 1.0
                };
                Some((scale * u, scale * v))
            }
        }
    }

    /// Surface point and outward normal for parameter coordinates.
    ///
    /// `None` when `(u, v)` falls outside the valid parameter domain.
    pub fn unparameterize(&self, u: f64, v: f64) -> Option<(Vector3<f64>, Vector3<f64>)> {
        match self.kind {
            ShapeKind::Plane => {
                let n = self.axis();
                Some((self.origin + u * self.axis_x + v * self.axis_y, n))
            }
            ShapeKind::Cylinder => {
                let circ = 2.0 * std::f64::consts::PI * self.radius;
                if !(0.0..=circ).contains(&u) {
                    return None;
                }
                let angle = u / self.radius - std::f64::consts::PI;
                let radial = angle.cos() * self.axis_x + angle.sin() * self.axis_y;
                Some((self.origin + self.radius * radial + v * self.axis(), radial))
            }
            ShapeKind::Sphere => {
                let scale = std::f64::consts::FRAC_PI_2 * self.radius;
                let a = u / scale;
                let b = v / scale;
                if a.abs() > 1.0 + 1e-9 || b.abs() > 1.0 + 1e-9 {
                    return None;
                }
                let z = 1.0 - a.abs() - b.abs();
                let (x, y) = if z >= 0.0 {
                    (a, b)
                } else {
                    (a.signum() * (1.0 - b.abs()), b.signum() * (1.0 - a.abs()))
                };
                let dir =
                    (x * self.axis_x + y * self.axis_y + z * self.axis()).normalize();
                Some((self.origin + self.radius * dir, dir))
            }
        }
    }

    /// Nearest intersection of the ray from `origin` through `through` with
    /// the surface, or `None` when the ray misses.
    pub fn project_along_ray(
        &self,
        ray_origin: &Vector3<f64>,
        through: &Vector3<f64>,
    ) -> Option<Vector3<f64>> {
        let dir = through - ray_origin;
        let len = dir.norm();
        if len < 1e-12 {
            return None;
        }
        let dir = dir / len;
        let t = self.intersect_ray(ray_origin, &dir)?;
        Some(ray_origin + t * dir)
    }

    /// Smallest positive ray parameter hitting the surface (`dir` unit).
    pub fn intersect_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        self.ray_hits(origin, dir).into_iter().flatten().next()
    }

    /// Up to two positive ray parameters, sorted ascending (`dir` unit).
    pub fn ray_hits(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> [Option<f64>; 2] {
        const T_MIN: f64 = 1e-9;
        let oc = origin - self.origin;
        let hits = match self.kind {
            ShapeKind::Plane => {
                let n = self.axis();
                let denom = dir.dot(&n);
                if denom.abs() < 1e-12 {
                    [None, None]
                } else {
                    let t = -oc.dot(&n) / denom;
                    [(t > T_MIN).then_some(t), None]
                }
            }
            ShapeKind::Sphere => {
                let b = oc.dot(dir);
                let c = oc.dot(&oc) - self.radius * self.radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    [None, None]
                } else {
                    let s = disc.sqrt();
                    let (t0, t1) = (-b - s, -b + s);
                    [(t0 > T_MIN).then_some(t0), (t1 > T_MIN).then_some(t1)]
                }
            }
            ShapeKind::Cylinder => {
                let a_dir = self.axis();
                let d = dir - dir.dot(&a_dir) * a_dir;
                let o = oc - oc.dot(&a_dir) * a_dir;
                let a = d.dot(&d);
                if a < 1e-18 {
                    // Ray parallel to the axis.
                    [None, None]
                } else {
                    let b = o.dot(&d) / a;
                    let c = (o.dot(&o) - self.radius * self.radius) / a;
                    let disc = b * b - c;
                    if disc < 0.0 {
                        [None, None]
                    } else {
                        let s = disc.sqrt();
                        let (t0, t1) = (-b - s, -b + s);
                        [(t0 > T_MIN).then_some(t0), (t1 > T_MIN).then_some(t1)]
                    }
                }
            }
        };
        // Compact: ascending, Nones last.
        match hits {
            [None, Some(t)] => [Some(t), None],
            other => other,
        }
    }
}

/// Discretization of a shape's parameter domain into square cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Cell side length, meters.
    pub cell_size: f64,
    /// Log2 of color points per cell side.
    pub color_res_log2: u8,
    /// Valid `u` interval, if the domain is bounded in u.
    pub u_domain: Option<(f64, f64)>,
    /// Valid `v` interval, if the domain is bounded in v.
    pub v_domain: Option<(f64, f64)>,
    /// Period after which `u` wraps (cylinder circumference).
    pub u_wrap: Option<f64>,
}

impl GridSpec {
    pub fn for_shape(shape: &ShapeModel, cell_size: f64, color_res_log2: u8) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        match shape.kind {
            ShapeKind::Plane => Self {
                cell_size,
                color_res_log2,
                u_domain: None,
                v_domain: None,
                u_wrap: None,
            },
            ShapeKind::Cylinder => {
                let circ = 2.0 * std::f64::consts::PI * shape.radius;
                Self {
                    cell_size,
                    color_res_log2,
                    u_domain: Some((0.0, circ)),
                    v_domain: None,
                    u_wrap: Some(circ),
                }
            }
            ShapeKind::Sphere => {
                let half = std::f64::consts::FRAC_PI_2 * shape.radius;
                Self {
                    cell_size,
                    color_res_log2,
                    u_domain: Some((-half, half)),
                    v_domain: Some((-half, half)),
                    u_wrap: None,
                }
            }
        }
    }

    /// Color points per cell side.
    #[inline]
    pub fn color_res(&self) -> usize {
        1usize << self.color_res_log2
    }

    /// Cell index of a parameter point. Cylinder `u` wraps modulo the
    /// circumference before flooring, so `u = 2 pi r` lands in column 0.
    #[inline]
    pub fn cell_of(&self, u: f64, v: f64) -> (i64, i64) {
        let u = match self.u_wrap {
            Some(period) => u.rem_euclid(period),
            None => u,
        };
        (
            (u / self.cell_size).floor() as i64,
            (v / self.cell_size).floor() as i64,
        )
    }

    /// Number of distinct wrapped columns, when the grid wraps in u.
    pub fn wrap_columns(&self) -> Option<i64> {
        self.u_wrap.map(|p| (p / self.cell_size).ceil().max(1.0) as i64)
    }

    /// Parameter coordinates of the cell center, clamped into the domain.
    pub fn cell_center(&self, i: i64, j: i64) -> (f64, f64) {
        let u = (i as f64 + 0.5) * self.cell_size;
        let v = (j as f64 + 0.5) * self.cell_size;
        self.clamp(u, v)
    }

    /// Clamp parameter coordinates into the valid domain.
    pub fn clamp(&self, u: f64, v: f64) -> (f64, f64) {
        let u = match self.u_domain {
            Some((lo, hi)) => u.clamp(lo, hi),
            None => u,
        };
        let v = match self.v_domain {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        };
        (u, v)
    }
}
