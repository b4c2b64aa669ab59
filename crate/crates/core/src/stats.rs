//! Per-cell statistics: occupancy windows, smoothed local histograms of
//! shape distance, and the sub-cell color point grid.

use serde::{Deserialize, Serialize};

use crate::frame::CameraIntrinsics;
use crate::shape::GridSpec;

/// Sliding window of per-frame visited flags with monotone activation.
///
/// The window holds the most recent `window` flags (at most 128). A cell
/// activates once the visited count inside a full-length window reaches
/// `ceil(ratio * window)` and never deactivates afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitWindow {
    bits: u128,
    window: u16,
    count: u16,
    activated: bool,
}

impl VisitWindow {
    pub fn new(window: u16) -> Self {
        assert!(window >= 1 && window <= 128, "window must be in 1..=128");
        Self { bits: 0, window, count: 0, activated: false }
    }

    /// Push one frame's visited flag and re-check activation.
    pub fn push(&mut self, visited: bool, ratio: f64) {
        let evict_bit = 1u128 << (self.window - 1);
        if self.bits & evict_bit != 0 {
            self.count -= 1;
        }
        self.bits = (self.bits << 1) & !(u128::MAX << self.window);
        if visited {
            self.bits |= 1;
            self.count += 1;
        }
        let needed = (ratio * self.window as f64).ceil() as u16;
        if self.count >= needed.max(1) {
            self.activated = true;
        }
    }

    pub fn activated(&self) -> bool {
        self.activated
    }

    /// Force activation (used when decoding archives and when a cell is
    /// produced by hole filling).
    pub fn force_activate(&mut self) {
        self.activated = true;
    }

    pub fn visited_count(&self) -> u16 {
        self.count
    }

    pub fn window_len(&self) -> u16 {
        self.window
    }

    /// Merge another window into this one: visited flags are combined
    /// frame-wise and activation is kept monotone.
    pub fn merge(&mut self, other: &VisitWindow, ratio: f64) {
        self.bits |= other.bits & !(u128::MAX << self.window);
        self.count = self.bits.count_ones() as u16;
        self.activated |= other.activated;
        let needed = (ratio * self.window as f64).ceil() as u16;
        if self.count >= needed.max(1) {
            self.activated = true;
        }
    }
}

/// One Gaussian kernel of a smoothed local histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    /// Running mean of the samples folded into this kernel.
    pub mean: f64,
    /// Bandwidth.
    pub sigma: f64,
    /// Number of samples folded in.
    pub weight: f64,
}

/// Compressed distribution of per-sample distances to the shape, stored as
/// a short list of Gaussian kernels.
///
/// A new sample within `merge_width * sigma` of the nearest kernel is
/// folded into its running mean; otherwise it seeds a new kernel. The mode
/// count of the kernel mixture separates flat cells (one mode) from salient
/// ones (several).
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedHistogram {
    kernels: Vec<Kernel>,
    sigma: f64,
    merge_width: f64,
    weighted_sum: f64,
    total_weight: f64,
    cached_modes: u32,
    dirty: bool,
}

impl SmoothedHistogram {
    pub fn new(sigma: f64, merge_width: f64) -> Self {
        assert!(sigma > 0.0 && merge_width > 0.0);
        Self {
            kernels: Vec::new(),
            sigma,
            merge_width,
            weighted_sum: 0.0,
            total_weight: 0.0,
            cached_modes: 0,
            dirty: false,
        }
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    /// Insert one distance sample. Non-finite values are rejected.
    pub fn insert(&mut self, d: f64) {
        if !d.is_finite() {
            return;
        }
        self.insert_weighted(d, 1.0);
    }

    fn insert_weighted(&mut self, d: f64, w: f64) {
        let nearest = self
            .kernels
            .iter_mut()
            .min_by(|a, b| (a.mean - d).abs().total_cmp(&(b.mean - d).abs()));
        match nearest {
            Some(k) if (k.mean - d).abs() <= self.merge_width * k.sigma => {
                k.weight += w;
                k.mean += (d - k.mean) * w / k.weight;
            }
            _ => self.kernels.push(Kernel { mean: d, sigma: self.sigma, weight: w }),
        }
        self.weighted_sum += d * w;
        self.total_weight += w;
        self.dirty = true;
    }

    /// Weighted mean distance over all kernels.
    pub fn mean_distance(&self) -> f64 {
        if self.total_weight == 0.0 {
            0.0
        } else {
            self.weighted_sum / self.total_weight
        }
    }

    /// Number of local maxima of the kernel mixture.
    ///
    /// Found by scanning the analytic derivative of the weighted kernel sum
    /// at quarter-bandwidth resolution and counting falling zero crossings.
    pub fn mode_count(&self) -> u32 {
        if !self.dirty {
            return self.cached_modes;
        }
        self.count_modes()
    }

    /// Recompute and cache the mode count after an insert batch.
    pub fn refresh(&mut self) {
        if self.dirty {
            self.cached_modes = self.count_modes();
            self.dirty = false;
        }
    }

    fn count_modes(&self) -> u32 {
        if self.kernels.is_empty() {
            return 0;
        }
        if self.kernels.len() == 1 {
            return 1;
        }
        let min_sigma = self.kernels.iter().map(|k| k.sigma).fold(f64::MAX, f64::min);
        let lo = self
            .kernels
            .iter()
            .map(|k| k.mean - 3.0 * k.sigma)
            .fold(f64::MAX, f64::min);
        let hi = self
            .kernels
            .iter()
            .map(|k| k.mean + 3.0 * k.sigma)
            .fold(f64::MIN, f64::max);
        let step = min_sigma / 4.0;
        let steps = ((hi - lo) / step).ceil() as usize + 1;
        let mut modes = 0;
        let mut last_sign = 1i32; // density rises out of the left tail
        for i in 0..=steps {
            let s = lo + i as f64 * step;
            let d = self.derivative(s);
            let sign = if d > 1e-300 {
                1
            } else if d < -1e-300 {
                -1
            } else {
                last_sign
            };
            if last_sign > 0 && sign < 0 {
                modes += 1;
            }
            last_sign = sign;
        }
        modes.max(1)
    }

    /// Derivative of the weighted kernel sum at `s`.
    fn derivative(&self, s: f64) -> f64 {
        self.kernels
            .iter()
            .map(|k| {
                let t = (s - k.mean) / k.sigma;
                let g = (-0.5 * t * t).exp()
                    / (k.sigma * (2.0 * std::f64::consts::PI).sqrt());
                -k.weight * (s - k.mean) / (k.sigma * k.sigma) * g
            })
            .sum()
    }

    /// Fold another histogram in, shifting its kernel means by `shift`.
    pub fn merge_shifted(&mut self, other: &SmoothedHistogram, shift: f64) {
        for k in &other.kernels {
            self.insert_weighted(k.mean + shift, k.weight);
        }
    }
}

/// One color accumulator of the sub-cell grid.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ColorPoint {
    pub rgb: [f32; 3],
    pub weight: f32,
}

/// Fixed `2^r x 2^r` grid of running color means inside one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorGrid {
    res: usize,
    points: Vec<ColorPoint>,
}

impl ColorGrid {
    pub fn new(res_log2: u8) -> Self {
        let res = 1usize << res_log2;
        Self { res, points: vec![ColorPoint::default(); res * res] }
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn point(&self, i: usize, j: usize) -> &ColorPoint {
        &self.points[j * self.res + i]
    }

    /// Fold a color into the running mean of point `(i, j)`.
    pub fn deposit(&mut self, i: usize, j: usize, rgb: [u8; 3], weight: f64) {
        if weight <= 0.0 {
            return;
        }
        let p = &mut self.points[j * self.res + i];
        let w = weight as f32;
        p.weight += w;
        for c in 0..3 {
            p.rgb[c] += (rgb[c] as f32 - p.rgb[c]) * w / p.weight;
        }
    }

    /// Quantized mean color, or None when the point was never observed.
    pub fn mean_u8(&self, i: usize, j: usize) -> Option<[u8; 3]> {
        let p = self.point(i, j);
        (p.weight > 0.0).then(|| {
            [
                p.rgb[0].round().clamp(0.0, 255.0) as u8,
                p.rgb[1].round().clamp(0.0, 255.0) as u8,
                p.rgb[2].round().clamp(0.0, 255.0) as u8,
            ]
        })
    }

    /// Overwrite a point with a fixed color (archive decoding).
    pub fn set(&mut self, i: usize, j: usize, rgb: [u8; 3], weight: f32) {
        self.points[j * self.res + i] =
            ColorPoint { rgb: [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32], weight };
    }

    /// Merge another grid point-wise by accumulated weight.
    pub fn merge(&mut self, other: &ColorGrid) {
        assert_eq!(self.res, other.res);
        for (a, b) in self.points.iter_mut().zip(&other.points) {
            if b.weight <= 0.0 {
                continue;
            }
            let total = a.weight + b.weight;
            for c in 0..3 {
                a.rgb[c] = (a.rgb[c] * a.weight + b.rgb[c] * b.weight) / total;
            }
            a.weight = total;
        }
    }
}

/// One bin of a proxy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub visit: VisitWindow,
    pub hist: SmoothedHistogram,
    pub colors: ColorGrid,
    /// Set by hole filling; filled cells contribute the bare shape surface.
    pub filled: bool,
    /// Summary pair used when the histogram is absent (decoded archives).
    fixed_summary: Option<(f64, u32)>,
    /// Scratch flag: visited by at least one sample this frame.
    pub(crate) visited_this_frame: bool,
}

impl Cell {
    pub fn new(sigma: f64, merge_width: f64, window: u16, color_res_log2: u8) -> Self {
        Self {
            visit: VisitWindow::new(window),
            hist: SmoothedHistogram::new(sigma, merge_width),
            colors: ColorGrid::new(color_res_log2),
            filled: false,
            fixed_summary: None,
            visited_this_frame: false,
        }
    }

    /// Cell created by decoding an archive record: no raw histogram, only
    /// the summary pair survives.
    pub fn from_summary(
        mean_dist: f64,
        modes: u32,
        window: u16,
        color_res_log2: u8,
        filled: bool,
    ) -> Self {
        let mut visit = VisitWindow::new(window);
        if !filled {
            visit.force_activate();
        }
        Self {
            visit,
            hist: SmoothedHistogram::new(1e-3, 2.0),
            colors: ColorGrid::new(color_res_log2),
            filled,
            fixed_summary: Some((mean_dist, modes)),
            visited_this_frame: false,
        }
    }

    pub fn is_active(&self) -> bool {
        self.visit.activated() || self.filled
    }

    /// Mean distance to the shape and mode count for this cell.
    ///
    /// Filled cells and decoded cells without live samples report their
    /// fixed summary; filled cells default to the bare surface (0, 1 mode).
    pub fn summary(&self) -> (f64, u32) {
        if !self.hist.is_empty() {
            (self.hist.mean_distance(), self.hist.mode_count())
        } else if let Some(s) = self.fixed_summary {
            s
        } else {
            (0.0, 1)
        }
    }
}

/// Influence radius and discrete color neighborhood of a depth sample.
///
/// `rho` is half the unprojected pixel size at depth `z`; `n` is that
/// radius expressed in color-point steps, floored.
pub fn color_neighborhood(z: f64, spec: &GridSpec, intr: &CameraIntrinsics) -> (f64, usize) {
    assert!(z > 0.0);
    let rho = 0.5 * z * (intr.fov_h / intr.res_h as f64).tan();
    let n = (rho * spec.color_res() as f64 / spec.cell_size).floor() as usize;
    (rho, n)
}

/// Contribution weight of a depth sample to the color point at integer
/// offset `(du, dv)` from the hit point, for neighborhood radius `n`.
pub fn color_weight(du: i64, dv: i64, n: usize, alpha: f64, res: usize) -> f64 {
    let sigma = alpha * res as f64;
    let r2 = (du * du + dv * dv) as f64;
    (-r2 / (2.0 * sigma * sigma)).exp() / (1.0 + 2.0 * (n * n) as f64)
}

/// Targets of one color splat: per neighbor, the relative cell offset, the
/// color point index inside that cell, and the contribution weight.
pub fn color_splat_targets(
    point_i: usize,
    point_j: usize,
    n: usize,
    alpha: f64,
    res: usize,
) -> Vec<((i64, i64), (usize, usize), f64)> {
    let mut out = Vec::with_capacity((2 * n + 1) * (2 * n + 1));
    let n_i = n as i64;
    for dv in -n_i..=n_i {
        for du in -n_i..=n_i {
            let gi = point_i as i64 + du;
            let gj = point_j as i64 + dv;
            let cell_du = gi.div_euclid(res as i64);
            let cell_dv = gj.div_euclid(res as i64);
            let pi = gi.rem_euclid(res as i64) as usize;
            let pj = gj.rem_euclid(res as i64) as usize;
            out.push(((cell_du, cell_dv), (pi, pj), color_weight(du, dv, n, alpha, res)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::{GridSpec, ShapeModel};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    #[test]
    fn window_activates_at_quarter_visitation() {
        let mut w = VisitWindow::new(100);
        for i in 0..24 {
            w.push(true, 0.25);
            assert!(!w.activated(), "activated too early at {i}");
        }
        w.push(true, 0.25);
        assert!(w.activated());
    }

    #[test]
    fn window_below_threshold_never_activates() {
        let mut w = VisitWindow::new(100);
        // 24 visits per 100 frames, sliding forever.
        for round in 0..30 {
            for i in 0..100 {
                w.push(i < 24, 0.25);
                assert!(!w.activated(), "round {round} frame {i}");
            }
        }
    }

    #[test]
    fn activation_is_monotone() {
        let mut w = VisitWindow::new(100);
        for _ in 0..25 {
            w.push(true, 0.25);
        }
        assert!(w.activated());
        for _ in 0..100 {
            w.push(false, 0.25);
        }
        assert!(w.activated());
        assert_eq!(w.visited_count(), 0);
    }

    #[test]
    fn slh_single_location_gives_one_kernel() {
        let mut h = SmoothedHistogram::new(0.005, 2.0);
        for _ in 0..100 {
            h.insert(0.0);
        }
        assert_eq!(h.kernels().len(), 1);
        assert_relative_eq!(h.kernels()[0].mean, 0.0);
        assert_relative_eq!(h.kernels()[0].weight, 100.0);
        assert_eq!(h.mode_count(), 1);
        assert_relative_eq!(h.mean_distance(), 0.0);
    }

    #[test]
    fn slh_two_separated_groups_are_bimodal() {
        // -2 cm and +3 cm with sigma 5 mm: separation is 10 sigma.
        let mut h = SmoothedHistogram::new(0.005, 2.0);
        for _ in 0..50 {
            h.insert(-0.02);
            h.insert(0.03);
        }
        assert_eq!(h.kernels().len(), 2);
        assert_eq!(h.mode_count(), 2);

        // Dense-evaluation oracle: count maxima of the summed kernels on a
        // fine grid and compare.
        let dense_modes = {
            let f = |s: f64| -> f64 {
                h.kernels()
                    .iter()
                    .map(|k| {
                        let t = (s - k.mean) / k.sigma;
                        k.weight * (-0.5 * t * t).exp() / k.sigma
                    })
                    .sum()
            };
            let mut count = 0;
            let mut prev2 = f(-0.05);
            let mut prev = f(-0.0499);
            let mut s = -0.0498;
            while s < 0.06 {
                let cur = f(s);
                if prev > prev2 && prev >= cur {
                    count += 1;
                }
                prev2 = prev;
                prev = cur;
                s += 0.0001;
            }
            count
        };
        assert_eq!(dense_modes, 2);
    }

    #[test]
    fn slh_nearby_kernels_merge_into_one_mode() {
        let mut h = SmoothedHistogram::new(0.005, 0.5);
        // Two kernels one sigma apart: mixture stays unimodal.
        for _ in 0..50 {
            h.insert(0.0);
            h.insert(0.005);
        }
        assert_eq!(h.kernels().len(), 2);
        assert_eq!(h.mode_count(), 1);
    }

    #[test]
    fn slh_tracks_gaussian_input() {
        use rand::prelude::*;
        use rand_distr::Normal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dist = Normal::new(0.01, 0.0025).unwrap();
        let mut h = SmoothedHistogram::new(0.005, 2.0);
        for _ in 0..100 {
            h.insert(dist.sample(&mut rng));
        }
        assert_eq!(h.mode_count(), 1);
        assert!((h.mean_distance() - 0.01).abs() < 0.001);
    }

    #[test]
    fn slh_weight_counts_accepted_inserts() {
        let mut h = SmoothedHistogram::new(0.005, 2.0);
        for i in 0..137 {
            h.insert((i % 7) as f64 * 0.001);
        }
        h.insert(f64::NAN); // rejected
        let total: f64 = h.kernels().iter().map(|k| k.weight).sum();
        assert_relative_eq!(total, 137.0);
        assert_relative_eq!(h.total_weight(), 137.0);
    }

    #[test]
    fn slh_is_order_insensitive_in_the_mean() {
        use rand::prelude::*;
        let mut values: Vec<f64> = (0..1000).map(|i| ((i * 37) % 100) as f64 * 1e-4).collect();
        let mut a = SmoothedHistogram::new(0.005, 2.0);
        for &v in &values {
            a.insert(v);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        values.shuffle(&mut rng);
        let mut b = SmoothedHistogram::new(0.005, 2.0);
        for &v in &values {
            b.insert(v);
        }
        assert!((a.mean_distance() - b.mean_distance()).abs() < 1e-9);
        assert_eq!(a.mode_count(), b.mode_count());
    }

    #[test]
    fn slh_kernel_count_is_bounded_by_span() {
        let sigma = 0.005;
        let merge = 2.0;
        let mut h = SmoothedHistogram::new(sigma, merge);
        let span = 0.1;
        for i in 0..10_000 {
            h.insert((i as f64 * 0.6180339887).fract() * span);
        }
        let bound = (span / (merge * sigma)).ceil() as usize + 1;
        assert!(h.kernels().len() <= bound, "{} > {}", h.kernels().len(), bound);
    }

    #[test]
    fn color_neighborhood_reference_values() {
        let intr = CameraIntrinsics::new(
            60f64.to_radians(),
            45f64.to_radians(),
            320,
            240,
            0.001,
        );
        let shape = ShapeModel::plane(Vector3::zeros(), Vector3::x(), Vector3::y());
        let spec = GridSpec::for_shape(&shape, 0.05, 2);
        let (rho, n) = color_neighborhood(2.0, &spec, &intr);
        assert!((rho - 0.00327).abs() < 1e-5);
        assert_eq!(n, 0);
        let (rho, n) = color_neighborhood(8.0, &spec, &intr);
        assert!((rho - 0.01309).abs() < 1e-5);
        assert_eq!(n, 1);
        let (_, n) = color_neighborhood(1e-6, &spec, &intr);
        assert_eq!(n, 0);
    }

    #[test]
    fn color_weight_center_is_one_for_zero_neighborhood() {
        assert_relative_eq!(color_weight(0, 0, 0, 3.0, 4), 1.0);
    }

    #[test]
    fn color_splat_spans_neighbor_cells() {
        let targets = color_splat_targets(0, 0, 1, 3.0, 4);
        assert_eq!(targets.len(), 9);
        // Hitting the corner point reaches the three adjacent cells.
        let cells: std::collections::BTreeSet<(i64, i64)> =
            targets.iter().map(|t| t.0).collect();
        assert!(cells.contains(&(0, 0)));
        assert!(cells.contains(&(-1, 0)));
        assert!(cells.contains(&(0, -1)));
        assert!(cells.contains(&(-1, -1)));
    }

    #[test]
    fn uniform_color_makes_every_mean_that_color() {
        let mut g = ColorGrid::new(2);
        for _ in 0..10 {
            for i in 0..4 {
                for j in 0..4 {
                    g.deposit(i, j, [255, 0, 0], 0.7);
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(g.mean_u8(i, j), Some([255, 0, 0]));
            }
        }
    }

    #[test]
    fn color_means_stay_inside_observed_range() {
        let mut g = ColorGrid::new(1);
        g.deposit(0, 0, [10, 200, 30], 1.0);
        g.deposit(0, 0, [90, 100, 50], 0.25);
        let m = g.mean_u8(0, 0).unwrap();
        assert!(m[0] >= 10 && m[0] <= 90);
        assert!(m[1] >= 100 && m[1] <= 200);
        assert!(m[2] >= 30 && m[2] <= 50);
    }

    #[test]
    fn neighbor_blending_reduces_contrast() {
        // Checkerboard colors splatted with n = 1 blend neighbors; with
        // n = 0 they stay pure. Oracle is the direct weighted mean.
        let res = 4usize;
        let mut sharp = ColorGrid::new(2);
        let mut blended = ColorGrid::new(2);
        for j in 0..res {
            for i in 0..res {
                let rgb = if (i + j) % 2 == 0 { [255, 255, 255] } else { [0, 0, 0] };
                sharp.deposit(i, j, rgb, 1.0);
                for ((cdu, cdv), (pi, pj), w) in color_splat_targets(i, j, 1, 3.0, res) {
                    if cdu == 0 && cdv == 0 {
                        blended.deposit(pi, pj, rgb, w);
                    }
                }
            }
        }
        let contrast = |g: &ColorGrid| {
            let mut lo = f32::MAX;
            let mut hi = f32::MIN;
            for j in 0..res {
                for i in 0..res {
                    let v = g.point(i, j).rgb[0];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            hi - lo
        };
        assert!(contrast(&blended) < contrast(&sharp));
    }
}
