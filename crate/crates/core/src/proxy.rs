//! The proxy superstructure: tracked shapes with statistics grids.
//!
//! Proxies are born from detected shapes, aligned to the scene's Manhattan
//! frame, and then live through a vote-driven lifecycle: samples of each
//! new frame vote for the first proxy they are an inlier of, supported
//! proxies accumulate those samples into their cell grids and refine their
//! parameters through running statistics, unsupported ones fall into
//! probation and are eventually purged unless they have been seen long
//! enough to count as veterans.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::detect::{self, is_inlier};
use crate::frame::{CameraIntrinsics, NoiseModel, OrientedPointCloud};
use crate::shape::{GridSpec, ShapeKind, ShapeModel};
use crate::stats::{color_neighborhood, color_splat_targets, Cell};

pub type ProxyId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyStatus {
    Active,
    Probation,
}

/// Running mean/variance over a fixed-size parameter vector (Welford).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamStats {
    dim: usize,
    count: f64,
    mean: [f64; 7],
    m2: [f64; 7],
}

impl ParamStats {
    pub fn new(dim: usize) -> Self {
        assert!(dim <= 7);
        Self { dim, count: 0.0, mean: [0.0; 7], m2: [0.0; 7] }
    }

    pub fn push(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.dim);
        self.count += 1.0;
        for i in 0..self.dim {
            let delta = values[i] - self.mean[i];
            self.mean[i] += delta / self.count;
            self.m2[i] += delta * (values[i] - self.mean[i]);
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean[..self.dim]
    }

    pub fn variance(&self) -> [f64; 7] {
        let mut v = [0.0; 7];
        if self.count > 1.0 {
            for i in 0..self.dim {
                v[i] = self.m2[i] / (self.count - 1.0);
            }
        }
        v
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    /// Combine two streams (parallel Welford merge).
    pub fn merge(&mut self, other: &ParamStats) {
        assert_eq!(self.dim, other.dim);
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        for i in 0..self.dim {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.count / n;
            self.m2[i] += other.m2[i] + delta * delta * self.count * other.count / n;
        }
        self.count = n;
    }
}

/// Scalar running mean.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningScalar {
    count: f64,
    mean: f64,
}

impl RunningScalar {
    pub fn push(&mut self, v: f64) {
        self.count += 1.0;
        self.mean += (v - self.mean) / self.count;
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn merge(&mut self, other: &RunningScalar) {
        if other.count == 0.0 {
            return;
        }
        let n = self.count + other.count;
        self.mean = (self.mean * self.count + other.mean * other.count) / n;
        self.count = n;
    }
}

/// A tracked shape with its statistics grid.
#[derive(Debug, Clone)]
pub struct Proxy {
    pub id: ProxyId,
    /// World-space shape with the Manhattan-aligned local frame.
    pub shape: ShapeModel,
    pub spec: GridSpec,
    pub cells: BTreeMap<(i64, i64), Cell>,
    pub status: ProxyStatus,
    /// Frames in which this proxy was supported.
    pub frames_seen: u32,
    /// Consecutive frames without support (probation age).
    pub frames_since_support: u32,
    /// Running mean/variance of the shape parameter vector.
    pub param_stats: ParamStats,
    /// Running mean viewing distance; sets the histogram bandwidth of new
    /// cells.
    pub mean_view: RunningScalar,
}

impl Proxy {
    fn param_dim(kind: ShapeKind) -> usize {
        match kind {
            ShapeKind::Plane => 4,
            ShapeKind::Cylinder => 7,
            ShapeKind::Sphere => 4,
        }
    }

    /// Parameter vector of a shape, gauge-fixed against this proxy.
    fn param_vector(&self, shape: &ShapeModel) -> Vec<f64> {
        match shape.kind {
            ShapeKind::Plane => {
                let mut n = shape.axis();
                if n.dot(&self.shape.axis()) < 0.0 {
                    n = -n;
                }
                let offset = shape.origin.dot(&n);
                vec![n.x, n.y, n.z, offset]
            }
            ShapeKind::Cylinder => {
                let mut a = shape.axis();
                if a.dot(&self.shape.axis()) < 0.0 {
                    a = -a;
                }
                // Anchor the axis point closest to the current origin.
                let c = shape.origin + (self.shape.origin - shape.origin).dot(&a) * a;
                vec![a.x, a.y, a.z, c.x, c.y, c.z, shape.radius]
            }
            ShapeKind::Sphere => {
                vec![shape.origin.x, shape.origin.y, shape.origin.z, shape.radius]
            }
        }
    }

    /// Rebuild the shape from the running parameter mean, keeping the grid
    /// frame as close to the previous one as possible.
    fn rebuild_from_mean(&mut self, cell_size: f64, color_res_log2: u8) {
        let m = self.param_stats.mean().to_vec();
        match self.shape.kind {
            ShapeKind::Plane => {
                let n = Vector3::new(m[0], m[1], m[2]);
                if n.norm() < 1e-9 {
                    return;
                }
                let n = n.normalize();
                let origin = self.shape.origin - (self.shape.origin.dot(&n) - m[3]) * n;
                let mut x = self.shape.axis_x - self.shape.axis_x.dot(&n) * n;
                if x.norm() < 1e-9 {
                    x = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
                    x -= x.dot(&n) * n;
                }
                let x = x.normalize();
                let y = n.cross(&x);
                self.shape = ShapeModel::plane(origin, x, y);
            }
            ShapeKind::Cylinder => {
                let a = Vector3::new(m[0], m[1], m[2]);
                if a.norm() < 1e-9 || m[6] <= 0.0 {
                    return;
                }
                let a = a.normalize();
                let c = Vector3::new(m[3], m[4], m[5]);
                let origin = c + (self.shape.origin - c).dot(&a) * a;
                let mut x = self.shape.axis_x - self.shape.axis_x.dot(&a) * a;
                if x.norm() < 1e-9 {
                    x = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
                    x -= x.dot(&a) * a;
                }
                let x = x.normalize();
                let y = a.cross(&x);
                self.shape = ShapeModel::cylinder(origin, x, y, m[6]);
            }
            ShapeKind::Sphere => {
                if m[3] <= 0.0 {
                    return;
                }
                self.shape = ShapeModel::sphere(
                    Vector3::new(m[0], m[1], m[2]),
                    self.shape.axis_x,
                    self.shape.axis_y,
                    m[3],
                );
            }
        }
        self.spec = GridSpec::for_shape(&self.shape, cell_size, color_res_log2);
    }

    /// Canonical cell key (wraps the column index on closed grids).
    pub fn wrap_cell(&self, (i, j): (i64, i64)) -> (i64, i64) {
        match self.spec.wrap_columns() {
            Some(cols) => (i.rem_euclid(cols), j),
            None => (i, j),
        }
    }

    pub fn cell(&self, key: (i64, i64)) -> Option<&Cell> {
        self.cells.get(&self.wrap_cell(key))
    }

    /// Index bounds (imin, imax, jmin, jmax) over cells; active-only when
    /// `active_only`.
    pub fn cell_bounds(&self, active_only: bool) -> Option<(i64, i64, i64, i64)> {
        let mut bounds: Option<(i64, i64, i64, i64)> = None;
        for (&(i, j), cell) in &self.cells {
            if active_only && !cell.is_active() {
                continue;
            }
            bounds = Some(match bounds {
                None => (i, i, j, j),
                Some((i0, i1, j0, j1)) => (i0.min(i), i1.max(i), j0.min(j), j1.max(j)),
            });
        }
        bounds
    }

    /// World position of a cell center on the shape surface.
    pub fn cell_world_center(&self, key: (i64, i64)) -> Option<Vector3<f64>> {
        let (u, v) = self.spec.cell_center(key.0, key.1);
        self.shape.unparameterize(u, v).map(|(p, _)| p)
    }

    /// Number of activated (or filled) cells.
    pub fn active_cell_count(&self) -> usize {
        self.cells.values().filter(|c| c.is_active()).count()
    }

    /// World-space bounding box of cell centers, padded by one cell.
    fn world_aabb(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut lo = Vector3::repeat(f64::MAX);
        let mut hi = Vector3::repeat(f64::MIN);
        let mut any = false;
        for &key in self.cells.keys() {
            if let Some(p) = self.cell_world_center(key) {
                lo = lo.inf(&p);
                hi = hi.sup(&p);
                any = true;
            }
        }
        any.then(|| {
            let pad = Vector3::repeat(2.0 * self.spec.cell_size);
            (lo - pad, hi + pad)
        })
    }

    /// Accumulate one voting sample into its cell.
    ///
    /// The cell is found by projecting the sample onto the shape along the
    /// camera ray; the signed orthogonal distance feeds the cell histogram
    /// and the color is splatted over the depth-dependent neighborhood.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_sample(
        &mut self,
        p: &Vector3<f64>,
        rgb: [u8; 3],
        z_cam: f64,
        camera_origin: &Vector3<f64>,
        intr: &CameraIntrinsics,
        config: &Config,
        noise: &NoiseModel,
    ) -> Option<(i64, i64)> {
        let hit = self.shape.project_along_ray(camera_origin, p)?;
        let (u, v) = self.shape.parameterize(&hit)?;
        let key = self.wrap_cell(self.spec.cell_of(u, v));
        let d = self.shape.signed_distance(p);

        let sigma_seed = if self.mean_view.count > 0.0 { self.mean_view.mean() } else { z_cam };
        let sigma = config.slh_sigma_floor.max(noise.threshold(sigma_seed.max(1e-3)));
        let window = config.activation_window;
        let res = self.spec.color_res();
        let cell = self.cells.entry(key).or_insert_with(|| {
            Cell::new(sigma, config.slh_merge_width, window, config.color_res_log2)
        });
        cell.visited_this_frame = true;
        cell.hist.insert(d);

        // Color splat over the discrete neighborhood.
        let (_, n) = color_neighborhood(z_cam.max(1e-3), &self.spec, intr);
        let wrapped_u = match self.spec.u_wrap {
            Some(period) => u.rem_euclid(period),
            None => u,
        };
        let fx = (wrapped_u / self.spec.cell_size - key.0 as f64).clamp(0.0, 1.0 - 1e-12);
        let fy = (v / self.spec.cell_size - key.1 as f64).clamp(0.0, 1.0 - 1e-12);
        let pi = ((fx * res as f64) as usize).min(res - 1);
        let pj = ((fy * res as f64) as usize).min(res - 1);
        if n == 0 {
            if let Some(cell) = self.cells.get_mut(&key) {
                cell.colors.deposit(pi, pj, rgb, 1.0);
            }
        } else {
            for ((cdu, cdv), (ti, tj), w) in
                color_splat_targets(pi, pj, n, config.color_alpha, res)
            {
                let nkey = self.wrap_cell((key.0 + cdu, key.1 + cdv));
                // Existing cells only; the hit cell always exists.
                if let Some(cell) = self.cells.get_mut(&nkey) {
                    cell.colors.deposit(ti, tj, rgb, w);
                }
            }
        }
        Some(key)
    }

    /// Push the per-frame visited flags of every cell and clear the
    /// scratch marks.
    fn close_frame(&mut self, ratio: f64) {
        for cell in self.cells.values_mut() {
            let visited = cell.visited_this_frame;
            cell.visit.push(visited, ratio);
            cell.visited_this_frame = false;
        }
    }

    /// Recompute cached mode counts after the frame's inserts.
    pub fn refresh_stats(&mut self) {
        for cell in self.cells.values_mut() {
            cell.hist.refresh();
        }
    }
}

/// Scene orientation estimated from early frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManhattanFrame {
    /// Orthonormal axes; `axes[up_index]` points against gravity.
    pub axes: [Vector3<f64>; 3],
    pub up_index: usize,
    /// False when no qualifying planes were found and the identity frame
    /// was assumed.
    pub from_planes: bool,
}

impl ManhattanFrame {
    pub fn identity_fallback(up_hint: Vector3<f64>) -> Self {
        let up = if up_hint.norm() > 1e-9 { up_hint.normalize() } else { Vector3::y() };
        let mut h1 = Vector3::x() - Vector3::x().dot(&up) * up;
        if h1.norm() < 1e-6 {
            h1 = Vector3::z() - Vector3::z().dot(&up) * up;
        }
        let h1 = h1.normalize();
        let h2 = up.cross(&h1);
        Self { axes: [h1, up, h2], up_index: 1, from_planes: false }
    }

    pub fn up(&self) -> Vector3<f64> {
        self.axes[self.up_index]
    }

    fn horizontals(&self) -> [Vector3<f64>; 2] {
        let mut out = [Vector3::zeros(); 2];
        let mut k = 0;
        for (i, a) in self.axes.iter().enumerate() {
            if i != self.up_index {
                out[k] = *a;
                k += 1;
            }
        }
        out
    }
}

/// The full tracked scene.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub proxies: Vec<Proxy>,
    pub manhattan: ManhattanFrame,
    pub frame_index: u32,
    pub next_id: ProxyId,
}

impl SceneState {
    pub fn new(up_hint: Vector3<f64>) -> Self {
        Self {
            proxies: Vec::new(),
            manhattan: ManhattanFrame::identity_fallback(up_hint),
            frame_index: 0,
            next_id: 0,
        }
    }

    pub fn proxy_by_id(&self, id: ProxyId) -> Option<&Proxy> {
        self.proxies.iter().find(|p| p.id == id)
    }

    pub fn refresh_stats(&mut self) {
        for proxy in &mut self.proxies {
            proxy.refresh_stats();
        }
    }
}

/// Estimate the Manhattan frame from the first frames' clouds.
///
/// Looks for near-horizontal planes (floor or ceiling) to fix the vertical
/// axis and near-vertical planes (walls) to fix one horizontal axis; the
/// third is their cross product. Falls back to an identity frame (flagged)
/// when no qualifying planes exist.
pub fn init_manhattan(
    frames: &[(OrientedPointCloud, Vector3<f64>)],
    config: &Config,
    rng: &mut ChaCha8Rng,
) -> ManhattanFrame {
    let up_hint = Vector3::new(config.up_hint[0], config.up_hint[1], config.up_hint[2]);
    let up_hint =
        if up_hint.norm() > 1e-9 { up_hint.normalize() } else { Vector3::y() };

    let mut planes_cfg = config.detect.clone();
    planes_cfg.detect_cylinders = false;
    planes_cfg.detect_spheres = false;

    let tol = config.manhattan_tol_deg.to_radians();
    let mut best_floor: Option<(f64, Vector3<f64>)> = None; // (weight, normal toward up)
    let mut best_wall: Option<(f64, Vector3<f64>)> = None;

    for (cloud, origin) in frames {
        if cloud.len() < 3 {
            continue;
        }
        for (shape, inliers) in
            detect::detect_shapes(cloud, origin, &planes_cfg, &config.noise, rng)
        {
            let n = shape.axis();
            let weight = inliers.len() as f64;
            let alignment = n.dot(&up_hint).abs().clamp(-1.0, 1.0);
            if alignment.acos() < tol {
                // Near-horizontal surface: normal close to vertical.
                let v = if n.dot(&up_hint) >= 0.0 { n } else { -n };
                if best_floor.is_none_or(|(w, _)| weight > w) {
                    best_floor = Some((weight, v));
                }
            } else if alignment.asin() < tol {
                // Near-vertical surface: normal close to horizontal.
                if best_wall.is_none_or(|(w, _)| weight > w) {
                    best_wall = Some((weight, n));
                }
            }
        }
    }

    match (best_floor, best_wall) {
        (None, None) => ManhattanFrame::identity_fallback(up_hint),
        (Some((_, up)), wall) => {
            let mut h1 = match wall {
                Some((_, n)) => n - n.dot(&up) * up,
                None => {
                    let mut h = Vector3::x() - Vector3::x().dot(&up) * up;
                    if h.norm() < 1e-6 {
                        h = Vector3::z() - Vector3::z().dot(&up) * up;
                    }
                    h
                }
            };
            if h1.norm() < 1e-9 {
                h1 = Vector3::x();
            }
            let h1 = h1.normalize();
            let h2 = up.cross(&h1);
            ManhattanFrame { axes: [h1, up, h2], up_index: 1, from_planes: true }
        }
        (None, Some((_, wall_n))) => {
            let up = (up_hint - up_hint.dot(&wall_n) * wall_n).normalize();
            let h1 = wall_n.normalize();
            let h2 = up.cross(&h1);
            ManhattanFrame { axes: [h1, up, h2], up_index: 1, from_planes: true }
        }
    }
}

/// Votes collected by tracking one frame against the current proxies.
#[derive(Debug, Clone)]
pub struct TrackOutcome {
    /// Per proxy (parallel to `state.proxies`): voting sample indices.
    pub votes: Vec<Vec<usize>>,
    /// Per proxy: vote count reached the support threshold.
    pub supported: Vec<bool>,
    /// Per sample: cast a vote for some proxy.
    pub marked: Vec<bool>,
}

impl TrackOutcome {
    pub fn residual_indices(&self) -> Vec<usize> {
        self.marked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
            .collect()
    }
}

/// Let every sample vote for the first proxy (lowest id) it is an inlier
/// of, within the support band around each shape.
pub fn track(
    state: &SceneState,
    cloud: &OrientedPointCloud,
    camera_origin: &Vector3<f64>,
    config: &Config,
) -> TrackOutcome {
    let n = cloud.len();
    let cos_tol = config.detect.normal_epsilon_deg.to_radians().cos();
    if state.proxies.is_empty() {
        return TrackOutcome {
            votes: Vec::new(),
            supported: Vec::new(),
            marked: vec![false; n],
        };
    }

    let choice: Vec<Option<u32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = &cloud.positions[i];
            let nv = &cloud.normals[i];
            for (pi, proxy) in state.proxies.iter().enumerate() {
                if is_inlier(
                    &proxy.shape,
                    p,
                    nv,
                    camera_origin,
                    config.support_band,
                    config.detect.noise_scale,
                    &config.noise,
                    cos_tol,
                ) {
                    return Some(pi as u32);
                }
            }
            None
        })
        .collect();

    let mut votes = vec![Vec::new(); state.proxies.len()];
    let mut marked = vec![false; n];
    for (i, c) in choice.iter().enumerate() {
        if let Some(pi) = c {
            votes[*pi as usize].push(i);
            marked[i] = true;
        }
    }
    let supported = votes.iter().map(|v| v.len() >= config.keep_threshold).collect();
    TrackOutcome { votes, supported, marked }
}

/// A sample's accumulation target, used later by the stream filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mark {
    pub proxy: ProxyId,
    pub cell: (i64, i64),
}

/// Update supported proxies with their voters: refit parameters into the
/// running statistics and accumulate every voter into its cell.
///
/// `depths` is the (pre-filtered) frame depth buffer indexed by
/// `cloud.pixel_of`. Returns per-sample accumulation marks.
#[allow(clippy::too_many_arguments)]
pub fn accumulate(
    state: &mut SceneState,
    cloud: &OrientedPointCloud,
    outcome: &TrackOutcome,
    depths: &[f32],
    camera_origin: &Vector3<f64>,
    intr: &CameraIntrinsics,
    config: &Config,
) -> Vec<Option<Mark>> {
    let mut marks = vec![None; cloud.len()];
    let cos_tol = config.detect.normal_epsilon_deg.to_radians().cos();
    for (pi, votes) in outcome.votes.iter().enumerate() {
        if !outcome.supported[pi] {
            continue;
        }
        let proxy = &mut state.proxies[pi];

        // Refit from the tight inliers only, then fold into the running
        // parameter statistics.
        let tight: Vec<usize> = votes
            .iter()
            .copied()
            .filter(|&i| {
                is_inlier(
                    &proxy.shape,
                    &cloud.positions[i],
                    &cloud.normals[i],
                    camera_origin,
                    config.detect.dist_epsilon,
                    config.detect.noise_scale,
                    &config.noise,
                    cos_tol,
                )
            })
            .collect();
        let min_fit = match proxy.shape.kind {
            ShapeKind::Plane => 3,
            _ => 2,
        };
        if tight.len() >= min_fit.max(8) {
            let pts: Vec<Vector3<f64>> = tight.iter().map(|&i| cloud.positions[i]).collect();
            let nms: Vec<Vector3<f64>> = tight.iter().map(|&i| cloud.normals[i]).collect();
            let refitted = detect::refit_oriented(&proxy.shape, &pts, &nms);
            let params = proxy.param_vector(&refitted);
            proxy.param_stats.push(&params);
            proxy.rebuild_from_mean(config.cell_size, config.color_res_log2);
        }

        for &i in votes {
            let z = depths[cloud.pixel_of[i]] as f64;
            proxy.mean_view.push(z);
            if let Some(cell) = proxy.accumulate_sample(
                &cloud.positions[i],
                cloud.colors[i],
                z,
                camera_origin,
                intr,
                config,
                &config.noise,
            ) {
                marks[i] = Some(Mark { proxy: proxy.id, cell });
            }
        }
        proxy.close_frame(config.activation_ratio);
    }
    marks
}

/// Register a freshly detected shape as a new proxy.
///
/// The local frame is aligned to the Manhattan axes, the grid is seeded
/// from the inliers, and the proxy starts Active.
pub fn register_candidate(
    state: &mut SceneState,
    shape: &ShapeModel,
    inliers: &[usize],
    cloud: &OrientedPointCloud,
    depths: &[f32],
    camera_origin: &Vector3<f64>,
    intr: &CameraIntrinsics,
    config: &Config,
) -> Option<(ProxyId, Vec<(usize, Mark)>)> {
    if inliers.is_empty() {
        return None;
    }
    let aligned = align_to_manhattan(shape, &state.manhattan);

    // Anchor the origin near the observed region.
    let centroid =
        inliers.iter().map(|&i| cloud.positions[i]).sum::<Vector3<f64>>() / inliers.len() as f64;
    let mut aligned = aligned;
    match aligned.kind {
        ShapeKind::Plane => {
            let n = aligned.axis();
            aligned.origin = centroid - n.dot(&(centroid - aligned.origin)) * n;
        }
        ShapeKind::Cylinder => {
            let a = aligned.axis();
            aligned.origin += (centroid - aligned.origin).dot(&a) * a;
        }
        ShapeKind::Sphere => {}
    }

    let id = state.next_id;
    state.next_id += 1;
    let mut proxy = Proxy {
        id,
        shape: aligned,
        spec: GridSpec::for_shape(&aligned, config.cell_size, config.color_res_log2),
        cells: BTreeMap::new(),
        status: ProxyStatus::Active,
        frames_seen: 1,
        frames_since_support: 0,
        param_stats: ParamStats::new(Proxy::param_dim(aligned.kind)),
        mean_view: RunningScalar::default(),
    };
    let seed_params = proxy.param_vector(&aligned);
    proxy.param_stats.push(&seed_params);

    let mut marks = Vec::with_capacity(inliers.len());
    for &i in inliers {
        let z = depths[cloud.pixel_of[i]] as f64;
        proxy.mean_view.push(z);
        if let Some(cell) = proxy.accumulate_sample(
            &cloud.positions[i],
            cloud.colors[i],
            z,
            camera_origin,
            intr,
            config,
            &config.noise,
        ) {
            marks.push((i, Mark { proxy: id, cell }));
        }
    }
    proxy.close_frame(config.activation_ratio);
    state.proxies.push(proxy);
    Some((id, marks))
}

/// Choose Manhattan-aligned local axes for a detected shape, keeping its
/// geometry untouched.
fn align_to_manhattan(shape: &ShapeModel, frame: &ManhattanFrame) -> ShapeModel {
    let up = frame.up();
    let [h1, h2] = frame.horizontals();
    match shape.kind {
        ShapeKind::Plane => {
            let n = shape.axis();
            // Walls get a horizontal u axis and an upward v axis; floors
            // and ceilings get both axes along the wall directions.
            let in_plane = |e: &Vector3<f64>| (e - e.dot(&n) * n).norm();
            let mut x = if in_plane(&h1) >= in_plane(&h2) { h1 } else { h2 };
            x -= x.dot(&n) * n;
            if x.norm() < 1e-6 {
                return *shape;
            }
            let mut x = x.normalize();
            if n.cross(&x).dot(&up) < -1e-9 {
                x = -x; // keep v pointing upward on walls
            }
            let y = n.cross(&x);
            ShapeModel::plane(shape.origin, x, y)
        }
        ShapeKind::Cylinder => {
            let mut a = shape.axis();
            let snap = *[h1, up, h2]
                .iter()
                .max_by(|e, f| a.dot(e).abs().total_cmp(&a.dot(f).abs()))
                .unwrap();
            if a.dot(&snap) < 0.0 {
                a = -a;
            }
            // u reference: the most orthogonal Manhattan axis.
            let mut x = *[h1, up, h2]
                .iter()
                .min_by(|e, f| a.dot(e).abs().total_cmp(&a.dot(f).abs()))
                .unwrap();
            x -= x.dot(&a) * a;
            let x = x.normalize();
            let y = a.cross(&x);
            ShapeModel::cylinder(shape.origin, x, y, shape.radius)
        }
        ShapeKind::Sphere => {
            // Zenith along the scene up axis.
            let x = h1;
            let y = up.cross(&x);
            ShapeModel::sphere(shape.origin, x, y, shape.radius)
        }
    }
}

/// Apply the support outcome to proxy lifecycles: probation, recovery,
/// purge. Veterans are never purged.
pub fn lifecycle_step(state: &mut SceneState, supported_ids: &[ProxyId], config: &Config) {
    let supported: std::collections::HashSet<ProxyId> = supported_ids.iter().copied().collect();
    let veteran_after = config.veteran_after as u32;
    let purge_after = config.purge_after as u32;
    state.proxies.retain_mut(|proxy| {
        if supported.contains(&proxy.id) {
            proxy.status = ProxyStatus::Active;
            proxy.frames_seen += 1;
            proxy.frames_since_support = 0;
            true
        } else {
            proxy.status = ProxyStatus::Probation;
            proxy.frames_since_support += 1;
            proxy.frames_since_support <= purge_after || proxy.frames_seen >= veteran_after
        }
    });
}

/// Merge pairs of proxies whose shapes nearly coincide and whose grids
/// overlap. The older identity wins; cells, windows, colors and parameter
/// statistics are combined.
pub fn merge_similar(state: &mut SceneState, config: &Config) {
    loop {
        let mut merged_any = false;
        'search: for i in 0..state.proxies.len() {
            for j in (i + 1)..state.proxies.len() {
                if !mergeable(&state.proxies[i], &state.proxies[j], config) {
                    continue;
                }
                let (keep_idx, drop_idx) =
                    if state.proxies[i].id <= state.proxies[j].id { (i, j) } else { (j, i) };
                let dropped = state.proxies.remove(drop_idx);
                let keeper = &mut state.proxies[if keep_idx > drop_idx {
                    keep_idx - 1
                } else {
                    keep_idx
                }];
                merge_into(keeper, dropped, config);
                merged_any = true;
                break 'search;
            }
        }
        if !merged_any {
            break;
        }
    }
}

fn mergeable(a: &Proxy, b: &Proxy, config: &Config) -> bool {
    if a.shape.kind != b.shape.kind {
        return false;
    }
    let angle_tol = config.merge_angle_deg.to_radians();
    let params_close = match a.shape.kind {
        ShapeKind::Plane => {
            let na = a.shape.axis();
            let nb = b.shape.axis();
            let angle = na.dot(&nb).abs().clamp(-1.0, 1.0).acos();
            let offset = (b.shape.origin - a.shape.origin).dot(&na).abs();
            angle < angle_tol && offset < config.merge_offset
        }
        ShapeKind::Cylinder => {
            let aa = a.shape.axis();
            let ab = b.shape.axis();
            let angle = aa.dot(&ab).abs().clamp(-1.0, 1.0).acos();
            let d = b.shape.origin - a.shape.origin;
            let axis_dist = (d - d.dot(&aa) * aa).norm();
            angle < angle_tol
                && axis_dist < config.merge_offset
                && (a.shape.radius - b.shape.radius).abs() < config.merge_radius
        }
        ShapeKind::Sphere => {
            (a.shape.origin - b.shape.origin).norm() < config.merge_offset
                && (a.shape.radius - b.shape.radius).abs() < config.merge_radius
        }
    };
    if !params_close {
        return false;
    }
    match (a.world_aabb(), b.world_aabb()) {
        (Some((alo, ahi)), Some((blo, bhi))) => {
            (0..3).all(|k| alo[k] <= bhi[k] && blo[k] <= ahi[k])
        }
        _ => false,
    }
}

fn merge_into(keeper: &mut Proxy, dropped: Proxy, config: &Config) {
    // Re-index every dropped cell into the keeper's grid; kernel means are
    // shifted by the local surface offset between the two shapes.
    for (&key, cell) in &dropped.cells {
        let (u, v) = dropped.spec.cell_center(key.0, key.1);
        let Some((point, _)) = dropped.shape.unparameterize(u, v) else { continue };
        let Some((ku, kv)) = keeper.shape.parameterize(&point) else { continue };
        let tkey = keeper.wrap_cell(keeper.spec.cell_of(ku, kv));
        let shift = keeper.shape.signed_distance(&point);

        let sigma = cell.hist.sigma();
        let target = keeper.cells.entry(tkey).or_insert_with(|| {
            Cell::new(
                sigma,
                config.slh_merge_width,
                config.activation_window,
                config.color_res_log2,
            )
        });
        target.hist.merge_shifted(&cell.hist, shift);
        target.visit.merge(&cell.visit, config.activation_ratio);
        target.colors.merge(&cell.colors);
        target.filled |= cell.filled;
    }

    // Parameter statistics: gauge-fix the dropped stream onto the keeper
    // (sign of normals/axes, axis anchor point), then a standard Welford
    // merge, which weights by observation count.
    let mut other = dropped.param_stats;
    let gauge = keeper.param_vector(&dropped.shape);
    for (i, v) in gauge.iter().enumerate() {
        other.mean[i] = *v;
    }
    keeper.param_stats.merge(&other);
    keeper.rebuild_from_mean(config.cell_size, config.color_res_log2);

    keeper.mean_view.merge(&dropped.mean_view);
    keeper.frames_seen += dropped.frames_seen;
    keeper.frames_since_support = keeper.frames_since_support.min(dropped.frames_since_support);
    if dropped.status == ProxyStatus::Active {
        keeper.status = ProxyStatus::Active;
    }
}

/// Re-export of the per-cell visitation window (lives with the cell
/// statistics).
pub use crate::stats::VisitWindow as CellVisitWindow;
