//! RANSAC detection of planes, cylinders and spheres in an oriented point
//! cloud.
//!
//! Greedy extraction in the efficient-RANSAC style: minimal sets are drawn
//! with octree-localized sampling, every draw is fitted to all enabled
//! shape kinds, candidates are scored by extrapolating their inlier count
//! over a random subset, and the best candidate is extracted once the
//! probability of having missed a better shape drops low enough. Extracted
//! inliers are removed and the search repeats until no shape above the
//! minimum size is likely to remain.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::DetectionConfig;
use crate::frame::{NoiseModel, OrientedPointCloud};
use crate::shape::{ShapeKind, ShapeModel};

/// Distance threshold at viewing range `z`: the base epsilon, widened by
/// the modeled sensor noise where that is larger.
pub fn effective_epsilon(base: f64, noise_scale: f64, noise: &NoiseModel, z: f64) -> f64 {
    base.max(noise_scale * noise.threshold(z.max(1e-3)))
}

/// Inlier test shared by detection and proxy tracking: the point must lie
/// within the (noise-modulated) distance band of the surface and its normal
/// must agree with the shape normal at the footpoint.
pub fn is_inlier(
    shape: &ShapeModel,
    p: &Vector3<f64>,
    n: &Vector3<f64>,
    camera_origin: &Vector3<f64>,
    base_epsilon: f64,
    noise_scale: f64,
    noise: &NoiseModel,
    cos_normal_tol: f64,
) -> bool {
    let range = (p - camera_origin).norm();
    let eps = effective_epsilon(base_epsilon, noise_scale, noise, range);
    if shape.signed_distance(p).abs() >= eps {
        return false;
    }
    match shape.normal_at(p) {
        Some(sn) => sn.dot(n) > cos_normal_tol,
        None => false,
    }
}

/// Fit a shape to a minimal oriented sample: 3 points for a plane, the
/// first 2 for spheres and cylinders. `None` on degenerate configurations.
pub fn fit_minimal(
    kind: ShapeKind,
    points: &[Vector3<f64>],
    normals: &[Vector3<f64>],
) -> Option<ShapeModel> {
    match kind {
        ShapeKind::Plane => {
            let [p0, p1, p2] = points[..3] else { return None };
            let mut n = (p1 - p0).cross(&(p2 - p0));
            let len = n.norm();
            let scale = (p1 - p0).norm().max((p2 - p0).norm()).max(1e-12);
            if len < 1e-9 * scale * scale {
                return None; // collinear
            }
            n /= len;
            let mean_normal = normals[0] + normals[1] + normals[2];
            if n.dot(&mean_normal) < 0.0 {
                n = -n;
            }
            Some(ShapeModel::plane_from_normal((p0 + p1 + p2) / 3.0, n))
        }
        ShapeKind::Sphere => {
            let (p0, p1) = (points[0], points[1]);
            let (n0, n1) = (normals[0], normals[1]);
            // Least-squares midpoint of the two normal lines.
            let b = n0.dot(&n1);
            let denom = 1.0 - b * b;
            if denom < 1e-6 {
                // Antipodal case: opposed normals along the chord give an
                // exact intersection at the midpoint. Same-direction
                // normals never intersect.
                let d = p1 - p0;
                let chord = d.norm();
                if b < 0.0 && chord > 1e-6 && d.cross(&n0).norm() < 1e-6 * chord {
                    let center = (p0 + p1) / 2.0;
                    return Some(ShapeModel::sphere(
                        center,
                        Vector3::x(),
                        Vector3::y(),
                        chord / 2.0,
                    ));
                }
                return None;
            }
            let d = p1 - p0;
            let d0 = n0.dot(&d);
            let d1 = n1.dot(&d);
            let t = (d0 - b * d1) / denom;
            let s = (b * d0 - d1) / denom;
            let c0 = p0 + t * n0;
            let c1 = p1 + s * n1;
            let center = (c0 + c1) / 2.0;
            let r0 = (center - p0).norm();
            let r1 = (center - p1).norm();
            let r = 0.5 * (r0 + r1);
            if r < 1e-4 || (r0 - r1).abs() > 0.1 * r + 0.02 {
                return None;
            }
            Some(ShapeModel::sphere(center, Vector3::x(), Vector3::y(), r))
        }
        ShapeKind::Cylinder => {
            let (p0, p1) = (points[0], points[1]);
            let (n0, n1) = (normals[0], normals[1]);
            let axis = n0.cross(&n1);
            let len = axis.norm();
            if len < 1e-3 {
                return None; // parallel normals
            }
            let axis = axis / len;
            // Intersect the projected normal lines in the plane orthogonal
            // to the axis.
            let flat = |v: &Vector3<f64>| v - v.dot(&axis) * axis;
            let q0 = flat(&p0);
            let q1 = flat(&p1);
            let m0 = flat(&n0);
            let m1 = flat(&n1);
            let cross = m0.cross(&m1).dot(&axis);
            if cross.abs() < 1e-9 {
                return None;
            }
            let dq = q1 - q0;
            let t = dq.cross(&m1).dot(&axis) / cross;
            let center_flat = q0 + t * m0;
            let r0 = (q0 - center_flat).norm();
            let r1 = (q1 - center_flat).norm();
            let r = 0.5 * (r0 + r1);
            if r < 1e-4 || (r0 - r1).abs() > 0.1 * r + 0.02 {
                return None;
            }
            // Anchor the axis near the samples.
            let center = center_flat + 0.5 * (p0 + p1).dot(&axis) * axis;
            Some(ShapeModel::cylinder_from_axis(center, axis, r))
        }
    }
}

/// Least-squares re-estimate of a shape from its inliers.
///
/// Falls back to the input shape when the system is rank deficient or the
/// refit does not improve the mean absolute inlier distance.
pub fn refit(shape: &ShapeModel, points: &[Vector3<f64>]) -> ShapeModel {
    refit_oriented(shape, points, &[])
}

/// Like [`refit`], additionally using inlier normals when available.
///
/// Cylinders profit most: their surface normals all lie in the plane
/// orthogonal to the axis, so the smallest principal direction of the
/// normal scatter re-estimates the axis far more robustly than the two
/// normals of the minimal sample.
pub fn refit_oriented(
    shape: &ShapeModel,
    points: &[Vector3<f64>],
    normals: &[Vector3<f64>],
) -> ShapeModel {
    let min_count = match shape.kind {
        ShapeKind::Plane => 3,
        _ => 2,
    };
    if points.len() < min_count {
        return *shape;
    }
    let candidate = match shape.kind {
        ShapeKind::Plane => refit_plane(shape, points),
        ShapeKind::Sphere => refit_sphere(points),
        ShapeKind::Cylinder => refit_cylinder(shape, points, normals),
    };
    match candidate {
        Some(new_shape) => {
            let mean = |s: &ShapeModel| {
                points.iter().map(|p| s.signed_distance(p).abs()).sum::<f64>()
                    / points.len() as f64
            };
            if mean(&new_shape) <= mean(shape) + 1e-12 {
                new_shape
            } else {
                *shape
            }
        }
        None => *shape,
    }
}

fn refit_plane(shape: &ShapeModel, points: &[Vector3<f64>]) -> Option<ShapeModel> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let (mut idx, mut best) = (0, f64::MAX);
    for i in 0..3 {
        if eig.eigenvalues[i] < best {
            best = eig.eigenvalues[i];
            idx = i;
        }
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(idx).into();
    if normal.norm() < 1e-9 {
        return None;
    }
    normal = normal.normalize();
    if normal.dot(&shape.axis()) < 0.0 {
        normal = -normal;
    }
    Some(ShapeModel::plane_from_normal(centroid, normal))
}

fn refit_sphere(points: &[Vector3<f64>]) -> Option<ShapeModel> {
    // Algebraic fit: |p|^2 = 2 p . c + (r^2 - |c|^2), linear in (c, rho).
    let mut ata = Matrix4::zeros();
    let mut atb = Vector4::zeros();
    for p in points {
        let row = Vector4::new(2.0 * p.x, 2.0 * p.y, 2.0 * p.z, 1.0);
        ata += row * row.transpose();
        atb += row * p.norm_squared();
    }
    let sol = ata.lu().solve(&atb)?;
    let center = Vector3::new(sol.x, sol.y, sol.z);
    let rho = sol.w + center.norm_squared();
    if rho <= 0.0 {
        return None;
    }
    Some(ShapeModel::sphere(center, Vector3::x(), Vector3::y(), rho.sqrt()))
}

fn refit_cylinder(
    shape: &ShapeModel,
    points: &[Vector3<f64>],
    normals: &[Vector3<f64>],
) -> Option<ShapeModel> {
    // Axis first: smallest principal direction of the normal scatter when
    // normals are available, otherwise the current axis.
    let mut axis = shape.axis();
    if normals.len() >= 3 {
        let mut cov = Matrix3::zeros();
        for n in normals {
            cov += n * n.transpose();
        }
        let eig = cov.symmetric_eigen();
        let (mut idx, mut best) = (0, f64::MAX);
        for i in 0..3 {
            if eig.eigenvalues[i] < best {
                best = eig.eigenvalues[i];
                idx = i;
            }
        }
        let refined: Vector3<f64> = eig.eigenvectors.column(idx).into();
        if refined.norm() > 1e-9 {
            axis = refined.normalize();
            if axis.dot(&shape.axis()) < 0.0 {
                axis = -axis;
            }
        }
    }
    // Frame orthogonal to the refined axis, continuous with the old one.
    let mut ex = shape.axis_x - shape.axis_x.dot(&axis) * axis;
    if ex.norm() < 1e-9 {
        ex = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        ex -= ex.dot(&axis) * axis;
    }
    let ex = ex.normalize();
    let ey = axis.cross(&ex);

    // 2D algebraic circle fit in the (ex, ey) plane.
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    let origin = shape.origin;
    for p in points {
        let d = p - origin;
        let x = d.dot(&ex);
        let y = d.dot(&ey);
        let row = Vector3::new(2.0 * x, 2.0 * y, 1.0);
        ata += row * row.transpose();
        atb += row * (x * x + y * y);
    }
    let sol = ata.lu().solve(&atb)?;
    let rho = sol.z + sol.x * sol.x + sol.y * sol.y;
    if rho <= 0.0 {
        return None;
    }
    let mut center = origin + sol.x * ex + sol.y * ey;
    // Keep the anchor near the inlier centroid along the axis.
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    center += (centroid - center).dot(&axis) * axis;
    Some(ShapeModel::cylinder(center, ex, ey, rho.sqrt()))
}

/// Octree-style multi-level spatial hash used for localized sampling.
struct SamplingOctree {
    origin: Vector3<f64>,
    root_size: f64,
    levels: u32,
    cells: HashMap<(u32, i32, i32, i32), Vec<u32>>,
}

impl SamplingOctree {
    fn build(cloud: &OrientedPointCloud, indices: &[u32], levels: u32) -> Self {
        let mut lo = Vector3::repeat(f64::MAX);
        let mut hi = Vector3::repeat(f64::MIN);
        for &i in indices {
            let p = &cloud.positions[i as usize];
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let root_size = (hi - lo).max().max(1e-6);
        let mut cells: HashMap<(u32, i32, i32, i32), Vec<u32>> = HashMap::new();
        for &i in indices {
            let p = cloud.positions[i as usize] - lo;
            for level in 1..=levels {
                let size = root_size / (1u32 << level) as f64;
                let key = (
                    level,
                    (p.x / size) as i32,
                    (p.y / size) as i32,
                    (p.z / size) as i32,
                );
                cells.entry(key).or_default().push(i);
            }
        }
        Self { origin: lo, root_size, levels, cells }
    }

    /// Companion samples from a random cell containing the seed point.
    fn companions(
        &self,
        cloud: &OrientedPointCloud,
        seed_idx: u32,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<Vec<u32>> {
        let level = rng.random_range(1..=self.levels);
        let size = self.root_size / (1u32 << level) as f64;
        let p = cloud.positions[seed_idx as usize] - self.origin;
        let key = (level, (p.x / size) as i32, (p.y / size) as i32, (p.z / size) as i32);
        let bucket = self.cells.get(&key)?;
        if bucket.len() < count + 1 {
            return None;
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..8 * count {
            let pick = bucket[rng.random_range(0..bucket.len())];
            if pick != seed_idx && !out.contains(&pick) {
                out.push(pick);
                if out.len() == count {
                    return Some(out);
                }
            }
        }
        None
    }
}

struct Candidate {
    shape: ShapeModel,
    kind: ShapeKind,
    estimated: f64,
}

/// Greedy multi-shape extraction. Returns detected shapes with their inlier
/// indices into `cloud`; the inlier sets are disjoint.
///
/// `camera_origin` is the sensor position in the cloud's coordinate frame,
/// used to modulate the inlier distance threshold with viewing range.
pub fn detect_shapes(
    cloud: &OrientedPointCloud,
    camera_origin: &Vector3<f64>,
    config: &DetectionConfig,
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> Vec<(ShapeModel, Vec<usize>)> {
    let n_input = cloud.len();
    let min_inliers =
        ((config.min_inlier_fraction * n_input as f64).ceil() as usize).max(config.min_inliers_abs);
    let mut kinds = Vec::new();
    if config.detect_planes {
        kinds.push(ShapeKind::Plane);
    }
    if config.detect_cylinders {
        kinds.push(ShapeKind::Cylinder);
    }
    if config.detect_spheres {
        kinds.push(ShapeKind::Sphere);
    }
    if kinds.is_empty() || n_input < min_inliers.max(3) {
        return Vec::new();
    }

    let cos_tol = config.normal_epsilon_deg.to_radians().cos();
    let mut remaining: Vec<u32> = (0..n_input as u32).collect();
    let mut results: Vec<(ShapeModel, Vec<usize>)> = Vec::new();

    'outer: while remaining.len() >= min_inliers.max(3) {
        let octree = SamplingOctree::build(cloud, &remaining, config.octree_levels);
        let subset = draw_subset(&remaining, config.subset_count, rng);
        let mini = &subset[..subset.len().min(256)];
        let extrapolate = remaining.len() as f64 / subset.len() as f64;
        let extrapolate_mini = remaining.len() as f64 / mini.len() as f64;

        let mut candidates: Vec<Candidate> = Vec::new();
        let mut draws = 0usize;

        loop {
            // One round of localized minimal-set draws; every draw is
            // fitted to all enabled kinds.
            let mut fresh: Vec<Candidate> = Vec::new();
            for _ in 0..config.candidates_per_round {
                draws += 1;
                let seed = remaining[rng.random_range(0..remaining.len())];
                let Some(mates) = octree.companions(cloud, seed, 2, rng) else { continue };
                let idx = [seed, mates[0], mates[1]];
                let pts: Vec<Vector3<f64>> =
                    idx.iter().map(|&i| cloud.positions[i as usize]).collect();
                let nms: Vec<Vector3<f64>> =
                    idx.iter().map(|&i| cloud.normals[i as usize]).collect();
                for &kind in &kinds {
                    if let Some(shape) = fit_minimal(kind, &pts, &nms) {
                        if shape.radius <= config_max_radius(config) {
                            fresh.push(Candidate { shape, kind, estimated: 0.0 });
                        }
                    }
                }
            }

            // Two-tier scoring: a cheap mini-subset pass discards hopeless
            // candidates, survivors are scored on the full subset.
            let scored: Vec<Option<f64>> = fresh
                .par_iter()
                .map(|cand| {
                    let hits = count_inliers(
                        &cand.shape, cloud, mini, camera_origin, config, noise, cos_tol,
                    );
                    let est = hits as f64 * extrapolate_mini;
                    if est < 0.5 * min_inliers as f64 {
                        return None;
                    }
                    let hits = count_inliers(
                        &cand.shape, cloud, &subset, camera_origin, config, noise, cos_tol,
                    );
                    Some(hits as f64 * extrapolate)
                })
                .collect();
            for (mut cand, est) in fresh.into_iter().zip(scored) {
                if let Some(est) = est {
                    cand.estimated = est;
                    candidates.push(cand);
                }
            }

            let best = candidates
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.estimated.total_cmp(&b.1.estimated))
                .map(|(i, _)| i);

            if let Some(best_idx) = best {
                let best_est = candidates[best_idx].estimated;
                let k = minimal_count(candidates[best_idx].kind);
                if best_est >= min_inliers as f64
                    && missed_probability(best_est, remaining.len(), k, config, draws)
                        < 1.0 - config.success_probability
                {
                    // Extract: exact inliers over the remaining cloud, then
                    // refit and re-collect once.
                    let cand = candidates.swap_remove(best_idx);
                    let inliers = collect_inliers(
                        &cand.shape, cloud, &remaining, camera_origin, config, noise, cos_tol,
                    );
                    if inliers.len() < min_inliers {
                        continue; // over-estimated candidate, drop it
                    }
                    let pts: Vec<Vector3<f64>> =
                        inliers.iter().map(|&i| cloud.positions[i as usize]).collect();
                    let nms: Vec<Vector3<f64>> =
                        inliers.iter().map(|&i| cloud.normals[i as usize]).collect();
                    let shape = refit_oriented(&cand.shape, &pts, &nms);
                    let inliers = collect_inliers(
                        &shape, cloud, &remaining, camera_origin, config, noise, cos_tol,
                    );
                    if inliers.len() < min_inliers {
                        continue;
                    }
                    let inlier_set: std::collections::HashSet<u32> =
                        inliers.iter().copied().collect();
                    remaining.retain(|i| !inlier_set.contains(i));
                    results.push((shape, inliers.iter().map(|&i| i as usize).collect()));
                    continue 'outer;
                }
            }

            // Probability that a shape of the minimum size was missed by
            // every draw so far; once low enough, stop searching.
            let max_k = kinds.iter().map(|&k| minimal_count(k)).max().unwrap();
            if missed_probability(min_inliers as f64, remaining.len(), max_k, config, draws)
                < 1.0 - config.success_probability
            {
                break 'outer;
            }
            if draws >= config.max_draws {
                break 'outer;
            }
        }
    }
    results
}

fn config_max_radius(_config: &DetectionConfig) -> f64 {
    // Indoor scenes; larger fits are almost-planes and noise magnets.
    10.0
}

fn minimal_count(kind: ShapeKind) -> usize {
    match kind {
        ShapeKind::Plane => 3,
        _ => 2,
    }
}

/// Probability that `draws` localized minimal sets all missed a shape with
/// `size` inliers in a cloud of `n` samples.
fn missed_probability(
    size: f64,
    n: usize,
    k: usize,
    config: &DetectionConfig,
    draws: usize,
) -> f64 {
    let p_single =
        (size / n as f64).min(1.0) * config.localized_hit_rate.powi(k as i32 - 1);
    (1.0 - p_single).powi(draws as i32)
}

fn draw_subset(remaining: &[u32], cap: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if remaining.len() <= cap {
        return remaining.to_vec();
    }
    rand::seq::index::sample(rng, remaining.len(), cap)
        .into_iter()
        .map(|i| remaining[i])
        .collect()
}

fn count_inliers(
    shape: &ShapeModel,
    cloud: &OrientedPointCloud,
    indices: &[u32],
    camera_origin: &Vector3<f64>,
    config: &DetectionConfig,
    noise: &NoiseModel,
    cos_tol: f64,
) -> usize {
    indices
        .iter()
        .filter(|&&i| {
            is_inlier(
                shape,
                &cloud.positions[i as usize],
                &cloud.normals[i as usize],
                camera_origin,
                config.dist_epsilon,
                config.noise_scale,
                noise,
                cos_tol,
            )
        })
        .count()
}

fn collect_inliers(
    shape: &ShapeModel,
    cloud: &OrientedPointCloud,
    indices: &[u32],
    camera_origin: &Vector3<f64>,
    config: &DetectionConfig,
    noise: &NoiseModel,
    cos_tol: f64,
) -> Vec<u32> {
    indices
        .iter()
        .copied()
        .filter(|&i| {
            is_inlier(
                shape,
                &cloud.positions[i as usize],
                &cloud.normals[i as usize],
                camera_origin,
                config.dist_epsilon,
                config.noise_scale,
                noise,
                cos_tol,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::Normal;

    fn cloud_from(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> OrientedPointCloud {
        let n = points.len();
        OrientedPointCloud {
            positions: points,
            normals,
            colors: vec![[0; 3]; n],
            pixel_of: (0..n).collect(),
        }
    }

    /// Uniform samples of the z=0 square with upward normals.
    fn plane_cloud(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> OrientedPointCloud {
        let dist = Normal::new(0.0, noise.max(1e-12)).unwrap();
        let mut pts = Vec::with_capacity(n);
        let mut nms = Vec::with_capacity(n);
        for _ in 0..n {
            let x = rng.random::<f64>() * 4.0 - 2.0;
            let y = rng.random::<f64>() * 4.0 - 2.0;
            let z = if noise > 0.0 { dist.sample(rng) } else { 0.0 };
            pts.push(Vector3::new(x, y, z));
            nms.push(Vector3::z());
        }
        cloud_from(pts, nms)
    }

    fn sphere_cloud(
        center: Vector3<f64>,
        r: f64,
        n: usize,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> OrientedPointCloud {
        let dist = Normal::new(0.0, noise.max(1e-12)).unwrap();
        let mut pts = Vec::with_capacity(n);
        let mut nms = Vec::with_capacity(n);
        while pts.len() < n {
            let d = Vector3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            if d.norm() < 1e-3 || d.norm() > 1.0 {
                continue;
            }
            let d = d.normalize();
            let rr = r + if noise > 0.0 { dist.sample(rng) } else { 0.0 };
            pts.push(center + rr * d);
            nms.push(d);
        }
        cloud_from(pts, nms)
    }

    #[test]
    fn minimal_plane_from_three_points() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let nms = [Vector3::z(); 3];
        let shape = fit_minimal(ShapeKind::Plane, &pts, &nms).unwrap();
        assert_eq!(shape.kind, ShapeKind::Plane);
        assert!((shape.axis() - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(2.0, 2.0, 2.0),
        ];
        let nms = [Vector3::z(); 3];
        assert!(fit_minimal(ShapeKind::Plane, &pts, &nms).is_none());
    }

    #[test]
    fn minimal_sphere_from_antipodal_points() {
        let pts = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, -1.0)];
        let nms = [Vector3::new(0.0, 0.0, -1.0), Vector3::new(0.0, 0.0, 1.0)];
        let shape = fit_minimal(ShapeKind::Sphere, &pts, &nms).unwrap();
        assert!(shape.origin.norm() < 1e-9);
        assert_relative_eq!(shape.radius, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn parallel_normals_cannot_seed_a_sphere() {
        let pts = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)];
        let nms = [Vector3::z(), Vector3::z()];
        assert!(fit_minimal(ShapeKind::Sphere, &pts, &nms).is_none());
        assert!(fit_minimal(ShapeKind::Cylinder, &pts, &nms).is_none());
    }

    #[test]
    fn minimal_cylinder_recovers_axis_and_radius() {
        // Unit-radius cylinder along z through the origin.
        let pts = [Vector3::new(1.0, 0.0, 0.3), Vector3::new(0.0, 1.0, -0.4)];
        let nms = [Vector3::x(), Vector3::y()];
        let shape = fit_minimal(ShapeKind::Cylinder, &pts, &nms).unwrap();
        assert_relative_eq!(shape.radius, 1.0, epsilon = 1e-9);
        assert!(shape.axis().cross(&Vector3::z()).norm() < 1e-9);
        assert!(shape.signed_distance(&pts[0]).abs() < 1e-9);
    }

    #[test]
    fn refit_keeps_exact_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = plane_cloud(500, 0.0, &mut rng);
        let input = ShapeModel::plane_from_normal(Vector3::zeros(), Vector3::z());
        let out = refit(&input, &cloud.positions);
        assert!((out.axis() - Vector3::z()).norm() < 1e-9);
        assert!(out.signed_distance(&Vector3::zeros()).abs() < 1e-9);
    }

    #[test]
    fn refit_bisects_symmetric_offsets() {
        // Half the points at -1 mm, half at +1 mm: the refit plane runs
        // through the middle.
        let mut pts = Vec::new();
        for i in 0..100 {
            let x = (i % 10) as f64 * 0.1;
            let y = (i / 10) as f64 * 0.1;
            let z = if i % 2 == 0 { -0.001 } else { 0.001 };
            pts.push(Vector3::new(x, y, z));
        }
        let input = ShapeModel::plane_from_normal(Vector3::zeros(), Vector3::z());
        let out = refit(&input, &pts);
        let mean: f64 = pts.iter().map(|p| out.signed_distance(p)).sum::<f64>() / 100.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn refit_cylinder_recovers_axis_from_normals() {
        // Noisy samples of a cylinder, seeded with a 5-degree axis error:
        // normals pull the axis back, keeping the radius tight.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dist = Normal::new(0.0, 0.002).unwrap();
        let truth = ShapeModel::cylinder_from_axis(Vector3::zeros(), Vector3::z(), 0.3);
        let mut pts = Vec::new();
        let mut nms = Vec::new();
        for _ in 0..5000 {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let h = rng.random::<f64>() * 2.0 - 1.0;
            let n = Vector3::new(theta.cos(), theta.sin(), 0.0);
            pts.push(truth.origin + (0.3 + dist.sample(&mut rng)) * n + h * Vector3::z());
            nms.push(n);
        }
        let tilted = ShapeModel::cylinder_from_axis(
            Vector3::new(0.01, -0.02, 0.0),
            Vector3::new(5f64.to_radians().sin(), 0.0, 5f64.to_radians().cos()),
            0.32,
        );
        let out = refit_oriented(&tilted, &pts, &nms);
        let axis_err = out.axis().dot(&Vector3::z()).abs().clamp(-1.0, 1.0).acos();
        assert!(axis_err < 0.2f64.to_radians(), "axis error {} deg", axis_err.to_degrees());
        assert!((out.radius - 0.3).abs() < 5e-4, "radius error {}", (out.radius - 0.3).abs());
    }

    #[test]
    fn refit_sphere_radius_is_tight_on_noisy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = sphere_cloud(Vector3::new(0.3, -0.2, 1.5), 0.8, 10_000, 0.001, &mut rng);
        let rough = ShapeModel::sphere(
            Vector3::new(0.31, -0.18, 1.52),
            Vector3::x(),
            Vector3::y(),
            0.79,
        );
        let out = refit(&rough, &cloud.positions);
        assert!((out.radius - 0.8).abs() < 1e-4, "radius error {}", (out.radius - 0.8).abs());
    }

    fn quiet_config() -> DetectionConfig {
        DetectionConfig { min_inliers_abs: 30, ..DetectionConfig::default() }
    }

    #[test]
    fn detects_single_noiseless_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cloud = plane_cloud(10_000, 0.0, &mut rng);
        let found = detect_shapes(
            &cloud,
            &Vector3::new(0.0, 0.0, 3.0),
            &quiet_config(),
            &NoiseModel::default(),
            &mut rng,
        );
        assert_eq!(found.len(), 1, "expected one plane, found {}", found.len());
        let (shape, inliers) = &found[0];
        assert_eq!(shape.kind, ShapeKind::Plane);
        let angle = shape.axis().dot(&Vector3::z()).abs().clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-4, "normal error {angle}");
        assert!(inliers.len() >= 9900, "only {} inliers recovered", inliers.len());
    }

    #[test]
    fn detects_plane_and_sphere_among_outliers() {
        let mut failures = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cloud = plane_cloud(6000, 0.002, &mut rng);
            let sphere = sphere_cloud(Vector3::new(0.0, 0.0, 1.0), 0.5, 3000, 0.002, &mut rng);
            cloud.positions.extend(sphere.positions);
            cloud.normals.extend(sphere.normals);
            cloud.colors.extend(sphere.colors);
            cloud.pixel_of.extend(sphere.pixel_of);
            // 5% uniform outliers.
            for _ in 0..450 {
                cloud.positions.push(Vector3::new(
                    rng.random::<f64>() * 6.0 - 3.0,
                    rng.random::<f64>() * 6.0 - 3.0,
                    rng.random::<f64>() * 6.0 - 3.0,
                ));
                let d = Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                );
                cloud.normals.push(d.normalize());
                cloud.colors.push([0; 3]);
                cloud.pixel_of.push(0);
            }
            let found = detect_shapes(
                &cloud,
                &Vector3::new(0.0, 0.0, 4.0),
                &quiet_config(),
                &NoiseModel::default(),
                &mut rng,
            );
            let plane_ok = found.iter().any(|(s, _)| {
                s.kind == ShapeKind::Plane
                    && s.axis().dot(&Vector3::z()).abs() > 0.999
            });
            let sphere_ok = found.iter().any(|(s, _)| {
                s.kind == ShapeKind::Sphere && (s.radius - 0.5).abs() < 0.005
            });
            if !(plane_ok && sphere_ok) {
                failures += 1;
            }
        }
        assert!(failures <= 2, "{failures}/20 runs missed a shape");
    }

    #[test]
    fn three_collinear_points_give_empty_list() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
        ];
        let nms = vec![Vector3::z(); 3];
        let cloud = cloud_from(pts, nms);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let found = detect_shapes(
            &cloud,
            &Vector3::zeros(),
            &quiet_config(),
            &NoiseModel::default(),
            &mut rng,
        );
        assert!(found.is_empty());
    }

    #[test]
    fn detection_is_deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cloud = plane_cloud(4000, 0.002, &mut rng);
        let run = |cloud: &OrientedPointCloud| {
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            detect_shapes(
                cloud,
                &Vector3::new(0.0, 0.0, 3.0),
                &quiet_config(),
                &NoiseModel::default(),
                &mut rng,
            )
        };
        let a = run(&cloud);
        let b = run(&cloud);
        assert_eq!(a.len(), b.len());
        for ((sa, ia), (sb, ib)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            assert_eq!(sa.origin, sb.origin);
            assert_eq!(sa.radius, sb.radius);
        }
    }

    #[test]
    fn extracted_inlier_sets_are_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut cloud = plane_cloud(5000, 0.002, &mut rng);
        let sphere = sphere_cloud(Vector3::new(0.0, 0.0, 1.2), 0.5, 2500, 0.002, &mut rng);
        cloud.positions.extend(sphere.positions);
        cloud.normals.extend(sphere.normals);
        cloud.colors.extend(sphere.colors);
        cloud.pixel_of.extend(sphere.pixel_of);
        let found = detect_shapes(
            &cloud,
            &Vector3::new(0.0, 0.0, 4.0),
            &quiet_config(),
            &NoiseModel::default(),
            &mut rng,
        );
        let mut seen = std::collections::HashSet::new();
        for (_, inliers) in &found {
            for &i in inliers {
                assert!(seen.insert(i), "index {i} claimed twice");
            }
        }
    }
}
