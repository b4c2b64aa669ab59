//! RGB-D frame ingestion: camera model, depth pre-filtering, normal
//! estimation and the sensor noise model.
//!
//! The camera model is equiangular per axis: pixel column `c` looks along
//! the horizontal angle `-fov_h/2 + c * fov_h/(res_h-1)`, and likewise for
//! rows, so the outermost pixel rays lie exactly on the frustum boundary.
//! Depth is the z coordinate in camera space (0 marks an invalid pixel).

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Pinhole-style field-of-view camera description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Horizontal field of view, radians, in (0, pi).
    pub fov_h: f64,
    /// Vertical field of view, radians, in (0, pi).
    pub fov_v: f64,
    /// Image width in pixels.
    pub res_h: usize,
    /// Image height in pixels.
    pub res_v: usize,
    /// Meters per stored depth unit on disk.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(fov_h: f64, fov_v: f64, res_h: usize, res_v: usize, depth_scale: f64) -> Self {
        assert!(fov_h > 0.0 && fov_h < std::f64::consts::PI, "fov_h out of range");
        assert!(fov_v > 0.0 && fov_v < std::f64::consts::PI, "fov_v out of range");
        assert!(res_h >= 1 && res_v >= 1, "resolution must be at least 1x1");
        assert!(depth_scale > 0.0, "depth_scale must be positive");
        Self { fov_h, fov_v, res_h, res_v, depth_scale }
    }

    /// Area covered by one pixel on a fronto-parallel surface at depth `z`:
    /// `tan(fov_h/res_h) * tan(fov_v/res_v) * z^2`.
    pub fn pixel_area(&self, z: f64) -> f64 {
        (self.fov_h / self.res_h as f64).tan() * (self.fov_v / self.res_v as f64).tan() * z * z
    }

    /// Horizontal viewing angle of pixel column `c` (continuous).
    fn col_angle(&self, c: f64) -> f64 {
        if self.res_h == 1 {
            0.0
        } else {
            -0.5 * self.fov_h + c * self.fov_h / (self.res_h - 1) as f64
        }
    }

    /// Vertical viewing angle of pixel row `r` (continuous).
    fn row_angle(&self, r: f64) -> f64 {
        if self.res_v == 1 {
            0.0
        } else {
            -0.5 * self.fov_v + r * self.fov_v / (self.res_v - 1) as f64
        }
    }

    /// Camera-space ray direction through pixel `(row, col)`, unnormalized
    /// with unit z so that `dir * depth` is the surface point.
    pub fn ray(&self, row: f64, col: f64) -> Vector3<f64> {
        Vector3::new(self.col_angle(col).tan(), self.row_angle(row).tan(), 1.0)
    }

    /// Camera-space point for pixel `(row, col)` at depth `z` (z > 0).
    pub fn unproject(&self, row: usize, col: usize, z: f64) -> Vector3<f64> {
        self.ray(row as f64, col as f64) * z
    }

    /// Continuous pixel coordinates `(row, col)` of a camera-space point,
    /// or `None` when the point is behind the camera or out of the frustum.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let ah = (p.x / p.z).atan();
        let av = (p.y / p.z).atan();
        let col = (ah + 0.5 * self.fov_h) / self.fov_h * (self.res_h - 1) as f64;
        let row = (av + 0.5 * self.fov_v) / self.fov_v * (self.res_v - 1) as f64;
        if row < -0.5
            || col < -0.5
            || row > self.res_v as f64 - 0.5
            || col > self.res_h as f64 - 0.5
        {
            return None;
        }
        Some((row, col))
    }

    /// Nearest integer pixel of a camera-space point, if inside the image.
    pub fn project_pixel(&self, p: &Vector3<f64>) -> Option<(usize, usize)> {
        let (row, col) = self.project(p)?;
        let (r, c) = (row.round(), col.round());
        if r < 0.0 || c < 0.0 || r as usize >= self.res_v || c as usize >= self.res_h {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

/// Camera-to-world rigid motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let pose = Self { rotation, translation };
        assert!(pose.is_valid(), "rotation must be orthonormal with determinant +1");
        pose
    }

    /// Orthonormality within 1e-6 and determinant +1.
    pub fn is_valid(&self) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).norm() < 1e-6 && (self.rotation.determinant() - 1.0).abs() < 1e-6
    }

    /// Camera axes: x right, y down (image row direction), z forward,
    /// looking from `eye` toward `target`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut y = -up + up.dot(&z) * z;
        if y.norm() < 1e-12 {
            // Degenerate up; pick any direction orthogonal to z.
            y = z.cross(&Vector3::x());
            if y.norm() < 1e-12 {
                y = z.cross(&Vector3::y());
            }
        }
        let y = y.normalize();
        let x = y.cross(&z);
        Self { rotation: Matrix3::from_columns(&[x, y, z]), translation: eye }
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.translation)
    }

    pub fn dir_to_world(&self, d_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d_cam
    }

    pub fn dir_to_camera(&self, d_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * d_world
    }
}

/// One timestamped depth + color image pair.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    /// Row-major depth in meters; 0 marks an invalid pixel.
    pub depth: Vec<f32>,
    /// Row-major RGB triples; same dimensions as `depth`.
    pub color: Vec<[u8; 3]>,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub index: usize,
}

impl RgbdFrame {
    pub fn new(
        depth: Vec<f32>,
        color: Vec<[u8; 3]>,
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
        index: usize,
    ) -> Self {
        let n = intrinsics.res_h * intrinsics.res_v;
        assert_eq!(depth.len(), n, "depth dimensions do not match intrinsics");
        assert_eq!(color.len(), n, "color dimensions do not match intrinsics");
        debug_assert!(depth.iter().all(|d| *d >= 0.0));
        Self { depth, color, intrinsics, pose, index }
    }

    #[inline]
    pub fn pixel_index(&self, row: usize, col: usize) -> usize {
        row * self.intrinsics.res_h + col
    }

    #[inline]
    pub fn depth_at(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.intrinsics.res_h + col]
    }

    /// Camera-space point of a pixel, or `None` when the depth is invalid.
    pub fn unproject(&self, row: usize, col: usize) -> Option<Vector3<f64>> {
        let z = self.depth_at(row, col);
        if z <= 0.0 {
            return None;
        }
        Some(self.intrinsics.unproject(row, col, z as f64))
    }
}

/// Per-pixel oriented samples extracted from one frame.
///
/// Positions are finite camera-space points, normals are unit vectors
/// facing the camera, and `pixel_of[i]` is the flat source pixel index.
#[derive(Debug, Clone, Default)]
pub struct OrientedPointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
    pub pixel_of: Vec<usize>,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Transform all samples by a camera-to-world pose.
    pub fn to_world(&self, pose: &CameraPose) -> OrientedPointCloud {
        OrientedPointCloud {
            positions: self.positions.iter().map(|p| pose.to_world(p)).collect(),
            normals: self.normals.iter().map(|n| pose.dir_to_world(n)).collect(),
            colors: self.colors.clone(),
            pixel_of: self.pixel_of.clone(),
        }
    }

    /// Sub-cloud restricted to the given sample indices.
    pub fn subset(&self, indices: &[usize]) -> OrientedPointCloud {
        OrientedPointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            pixel_of: indices.iter().map(|&i| self.pixel_of[i]).collect(),
        }
    }
}

/// Axial depth noise model: `sigma_z(z) = base + quad * (max(z, vertex) - vertex)^2`.
///
/// Clamping at the vertex keeps the threshold monotone in z and equal to
/// `base` over the close range where the quadratic fit bottoms out.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub base: f64,
    pub quad: f64,
    pub vertex: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { base: 0.0012, quad: 0.0019, vertex: 0.4 }
    }
}

impl NoiseModel {
    /// Noise threshold at camera distance `z` (z > 0), meters.
    pub fn threshold(&self, z: f64) -> f64 {
        assert!(z > 0.0, "noise threshold is defined for positive depth only");
        let dz = (z.max(self.vertex)) - self.vertex;
        self.base + self.quad * dz * dz
    }
}

/// Gaussian bilateral pre-filter of the depth component.
///
/// Spatial weights are a 2D Gaussian of the given sigma over a radius of
/// `ceil(3 sigma)` pixels; neighbors whose depth differs from the center by
/// more than `range_limit` contribute nothing, so depth discontinuities are
/// never blended. Invalid pixels stay invalid and are skipped as neighbors.
pub fn bilateral_prefilter(frame: &RgbdFrame, spatial_sigma: f64, range_limit: f64) -> RgbdFrame {
    assert!(spatial_sigma > 0.0);
    let radius = (3.0 * spatial_sigma).ceil() as i64;
    let width = frame.intrinsics.res_h as i64;
    let height = frame.intrinsics.res_v as i64;
    let inv_two_sigma2 = 1.0 / (2.0 * spatial_sigma * spatial_sigma);

    // Precomputed spatial kernel.
    let side = (2 * radius + 1) as usize;
    let mut kernel = vec![0.0f64; side * side];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let w = (-((dx * dx + dy * dy) as f64) * inv_two_sigma2).exp();
            kernel[((dy + radius) * (2 * radius + 1) + dx + radius) as usize] = w;
        }
    }

    let mut out = frame.clone();
    out.depth
        .par_chunks_mut(frame.intrinsics.res_h)
        .enumerate()
        .for_each(|(row, out_row)| {
            let row = row as i64;
            for col in 0..width {
                let center = frame.depth[(row * width + col) as usize];
                if center <= 0.0 {
                    continue;
                }
                let center = center as f64;
                let mut sum = 0.0;
                let mut wsum = 0.0;
                for dy in (-radius).max(-row)..=radius.min(height - 1 - row) {
                    for dx in (-radius).max(-col)..=radius.min(width - 1 - col) {
                        let d = frame.depth[((row + dy) * width + col + dx) as usize];
                        if d <= 0.0 || (d as f64 - center).abs() > range_limit {
                            continue;
                        }
                        let w = kernel[((dy + radius) * (2 * radius + 1) + dx + radius) as usize];
                        sum += w * d as f64;
                        wsum += w;
                    }
                }
                if wsum > 0.0 {
                    out_row[col as usize] = (sum / wsum) as f32;
                }
            }
        });
    out
}

/// Per-pixel normals from central differences of unprojected neighbors.
///
/// A sample is emitted only when all four direct neighbors carry valid
/// depth; the normal is the normalized cross product of the horizontal and
/// vertical position differences, oriented toward the camera.
pub fn estimate_normals(frame: &RgbdFrame) -> OrientedPointCloud {
    let width = frame.intrinsics.res_h;
    let height = frame.intrinsics.res_v;

    let rows: Vec<OrientedPointCloud> = (0..height)
        .into_par_iter()
        .map(|row| {
            let mut out = OrientedPointCloud::default();
            if row == 0 || row + 1 >= height {
                return out;
            }
            for col in 1..width.saturating_sub(1) {
                let Some(p) = frame.unproject(row, col) else { continue };
                let (Some(px0), Some(px1), Some(py0), Some(py1)) = (
                    frame.unproject(row, col - 1),
                    frame.unproject(row, col + 1),
                    frame.unproject(row - 1, col),
                    frame.unproject(row + 1, col),
                ) else {
                    continue;
                };
                let mut n = (px1 - px0).cross(&(py1 - py0));
                let len = n.norm();
                if len < 1e-12 {
                    continue;
                }
                n /= len;
                if n.dot(&p) > 0.0 {
                    n = -n;
                }
                out.positions.push(p);
                out.normals.push(n);
                out.colors.push(frame.color[frame.pixel_index(row, col)]);
                out.pixel_of.push(frame.pixel_index(row, col));
            }
            out
        })
        .collect();

    let mut cloud = OrientedPointCloud::default();
    for mut r in rows {
        cloud.positions.append(&mut r.positions);
        cloud.normals.append(&mut r.normals);
        cloud.colors.append(&mut r.colors);
        cloud.pixel_of.append(&mut r.pixel_of);
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(
            60f64.to_radians(),
            45f64.to_radians(),
            321,
            241,
            0.001,
        )
    }

    fn constant_frame(intr: CameraIntrinsics, z: f32) -> RgbdFrame {
        let n = intr.res_h * intr.res_v;
        RgbdFrame::new(vec![z; n], vec![[128; 3]; n], intr, CameraPose::identity(), 0)
    }

    #[test]
    fn pixel_area_reference_value() {
        let intr = CameraIntrinsics::new(60f64.to_radians(), 45f64.to_radians(), 320, 240, 0.001);
        assert!((intr.pixel_area(8.0) - 0.00068539).abs() < 1e-8);
    }

    #[test]
    fn unproject_center_pixel_is_principal_ray() {
        let intr = test_intrinsics();
        let p = intr.unproject(120, 160, 2.0);
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.z, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn unproject_corner_pixel_hits_frustum_boundary() {
        let intr = test_intrinsics();
        let p = intr.unproject(0, 0, 3.0);
        let ah = (p.x / p.z).atan();
        let av = (p.y / p.z).atan();
        assert_relative_eq!(ah.abs(), intr.fov_h / 2.0, epsilon = 1e-6);
        assert_relative_eq!(av.abs(), intr.fov_v / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn project_unproject_round_trip() {
        let intr = test_intrinsics();
        for &(r, c) in &[(0usize, 0usize), (120, 160), (240, 320), (7, 255)] {
            let p = intr.unproject(r, c, 1.7);
            let (row, col) = intr.project(&p).unwrap();
            assert_relative_eq!(row, r as f64, epsilon = 1e-9);
            assert_relative_eq!(col, c as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn noise_threshold_reference_values() {
        let m = NoiseModel::default();
        assert_relative_eq!(m.threshold(0.4), 0.0012, epsilon = 1e-12);
        assert_relative_eq!(m.threshold(1.0), 0.0012 + 0.0019 * 0.36, epsilon = 1e-12);
        // Monotone non-decreasing.
        let mut prev = 0.0;
        for i in 1..200 {
            let t = m.threshold(i as f64 * 0.05);
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    #[should_panic]
    fn noise_threshold_rejects_nonpositive_depth() {
        NoiseModel::default().threshold(0.0);
    }

    #[test]
    fn bilateral_keeps_constant_frame() {
        let frame = constant_frame(test_intrinsics(), 2.0);
        let out = bilateral_prefilter(&frame, 2.0, 0.2);
        assert_eq!(out.depth, frame.depth);
    }

    #[test]
    fn bilateral_does_not_bleed_across_discontinuity() {
        // Two half-planes 0.4 m apart; range limit 0.2 m keeps them separate.
        let intr = test_intrinsics();
        let mut frame = constant_frame(intr, 1.0);
        let half = intr.res_h / 2;
        for row in 0..intr.res_v {
            for col in half..intr.res_h {
                frame.depth[row * intr.res_h + col] = 1.4;
            }
        }
        let out = bilateral_prefilter(&frame, 2.0, 0.2);
        // Direct-summation oracle: with a constant side and zero cross-range
        // weight, every pixel must keep its value exactly on both sides.
        assert_eq!(out.depth, frame.depth);
    }

    #[test]
    fn bilateral_reduces_noise_variance() {
        // Monte-Carlo oracle: i.i.d. noise around 1 m must come out with
        // strictly smaller variance at the probed pixel.
        use rand::prelude::*;
        use rand_distr::Normal;
        let intr = CameraIntrinsics::new(1.0, 1.0, 21, 21, 0.001);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let dist = Normal::new(0.0, 0.005).unwrap();
        let mut in_var = 0.0;
        let mut out_var = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let n = intr.res_h * intr.res_v;
            let depth: Vec<f32> =
                (0..n).map(|_| (1.0 + dist.sample(&mut rng)) as f32).collect();
            let frame =
                RgbdFrame::new(depth, vec![[0; 3]; n], intr, CameraPose::identity(), 0);
            let out = bilateral_prefilter(&frame, 1.5, 0.2);
            let center = frame.pixel_index(10, 10);
            in_var += (frame.depth[center] as f64 - 1.0).powi(2);
            out_var += (out.depth[center] as f64 - 1.0).powi(2);
        }
        assert!(
            out_var < in_var,
            "filter did not reduce variance: {out_var} >= {in_var}"
        );
    }

    #[test]
    fn all_invalid_frame_passes_through() {
        let frame = constant_frame(test_intrinsics(), 0.0);
        let out = bilateral_prefilter(&frame, 2.0, 0.2);
        assert!(out.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn normals_of_frontoparallel_plane_face_camera() {
        let frame = constant_frame(test_intrinsics(), 2.0);
        let cloud = estimate_normals(&frame);
        assert!(!cloud.is_empty());
        for n in &cloud.normals {
            assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-4);
        }
    }

    #[test]
    fn normals_of_tilted_plane_match_analytic_normal() {
        // Plane z = 2 + x (45 degrees about the y axis): normal along
        // (1, 0, -1)/sqrt(2) when oriented toward the camera.
        let intr = test_intrinsics();
        let n_px = intr.res_h * intr.res_v;
        let mut depth = vec![0.0f32; n_px];
        for row in 0..intr.res_v {
            for col in 0..intr.res_h {
                // Solve z = 2 + x with x = z * tan(col angle).
                let t = intr.ray(row as f64, col as f64);
                let z = 2.0 / (1.0 - t.x);
                if z > 0.0 && z < 20.0 {
                    depth[row * intr.res_h + col] = z as f32;
                }
            }
        }
        let frame =
            RgbdFrame::new(depth, vec![[0; 3]; n_px], intr, CameraPose::identity(), 0);
        let cloud = estimate_normals(&frame);
        let expected = Vector3::new(1.0, 0.0, -1.0).normalize();
        for (p, n) in cloud.positions.iter().zip(&cloud.normals) {
            let angle = n.dot(&expected).clamp(-1.0, 1.0).acos();
            assert!(
                angle < 0.5f64.to_radians(),
                "normal {n:?} at {p:?} deviates {} deg",
                angle.to_degrees()
            );
        }
    }

    #[test]
    fn isolated_pixel_yields_no_sample() {
        let intr = test_intrinsics();
        let n = intr.res_h * intr.res_v;
        let mut depth = vec![0.0f32; n];
        depth[120 * intr.res_h + 160] = 2.0;
        let frame = RgbdFrame::new(depth, vec![[0; 3]; n], intr, CameraPose::identity(), 0);
        assert!(estimate_normals(&frame).is_empty());
    }

    #[test]
    fn emitted_normals_are_unit_and_camera_facing() {
        let frame = constant_frame(test_intrinsics(), 1.5);
        let cloud = estimate_normals(&frame);
        for (p, n) in cloud.positions.iter().zip(&cloud.normals) {
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-6);
            assert!(n.dot(&p.normalize()) < 0.0);
        }
    }

    #[test]
    fn look_at_is_proper_rotation() {
        let pose = CameraPose::look_at(
            Vector3::new(1.0, 2.0, -3.0),
            Vector3::new(0.5, 1.0, 4.0),
            Vector3::y(),
        );
        assert!(pose.is_valid());
        // Forward axis points from eye to target.
        let fwd = pose.rotation.column(2);
        let expect = (Vector3::new(0.5, 1.0, 4.0) - Vector3::new(1.0, 2.0, -3.0)).normalize();
        assert!((fwd - expect).norm() < 1e-9);
    }
}
