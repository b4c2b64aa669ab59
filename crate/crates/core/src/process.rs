//! Stream enhancement operators over the proxy superstructure: the
//! histogram-guided depth filter, hole filling and resampling.

use std::collections::BTreeSet;

use nalgebra::Vector3;

use crate::config::Config;
use crate::frame::{OrientedPointCloud, RgbdFrame};
use crate::proxy::{Mark, Proxy, ProxyId, SceneState};
use crate::shape::ShapeKind;
use crate::stats::Cell;

/// Filter a frame through the accumulated cell statistics.
///
/// Every marked sample (an inlier accumulated into some proxy cell this
/// frame) is rewritten depending on its cell: unimodal cells snap the
/// point onto the shape along the camera ray, re-applying the cell's mean
/// offset when it exceeds the noise threshold at that distance; multimodal
/// cells and unmarked pixels pass through bit-identical.
pub fn filter_frame(
    frame: &RgbdFrame,
    state: &SceneState,
    cloud: &OrientedPointCloud,
    marks: &[Option<Mark>],
    config: &Config,
) -> RgbdFrame {
    let mut out = frame.clone();
    let camera = frame.pose.translation;
    for (i, mark) in marks.iter().enumerate() {
        let Some(mark) = mark else { continue };
        let Some(proxy) = state.proxy_by_id(mark.proxy) else { continue };
        let Some(cell) = proxy.cell(mark.cell) else { continue };
        let (mean_dist, modes) = cell.summary();
        if modes != 1 {
            continue; // salient cell: keep the raw measurement
        }
        let pixel = cloud.pixel_of[i];
        let z = frame.depth[pixel] as f64;
        if z <= 0.0 {
            continue;
        }
        let p = cloud.positions[i];
        let Some(hit) = proxy.shape.project_along_ray(&camera, &p) else { continue };
        let alpha = config.noise.threshold(z);
        let filtered = if mean_dist.abs() <= alpha {
            hit
        } else {
            let Some(normal) = proxy.shape.normal_at(&hit) else { continue };
            hit + mean_dist * normal
        };
        let cam_pt = frame.pose.to_camera(&filtered);
        if cam_pt.z > 0.0 {
            out.depth[pixel] = cam_pt.z as f32;
        }
    }
    out
}

/// Optional cross-bilateral post-pass using the proxy id as range term:
/// depth is averaged over spatial neighbors belonging to the same proxy.
pub fn cross_bilateral(
    frame: &RgbdFrame,
    pixel_proxy: &[Option<ProxyId>],
    spatial_sigma: f64,
) -> RgbdFrame {
    assert!(spatial_sigma > 0.0);
    let radius = (2.0 * spatial_sigma).ceil() as i64;
    let width = frame.intrinsics.res_h as i64;
    let height = frame.intrinsics.res_v as i64;
    let inv = 1.0 / (2.0 * spatial_sigma * spatial_sigma);
    let mut out = frame.clone();
    for row in 0..height {
        for col in 0..width {
            let idx = (row * width + col) as usize;
            let Some(id) = pixel_proxy[idx] else { continue };
            if frame.depth[idx] <= 0.0 {
                continue;
            }
            let mut sum = 0.0;
            let mut wsum = 0.0;
            for dy in (-radius).max(-row)..=radius.min(height - 1 - row) {
                for dx in (-radius).max(-col)..=radius.min(width - 1 - col) {
                    let nidx = ((row + dy) * width + col + dx) as usize;
                    if pixel_proxy[nidx] != Some(id) || frame.depth[nidx] <= 0.0 {
                        continue;
                    }
                    let w = (-((dx * dx + dy * dy) as f64) * inv).exp();
                    sum += w * frame.depth[nidx] as f64;
                    wsum += w;
                }
            }
            if wsum > 0.0 {
                out.depth[idx] = (sum / wsum) as f32;
            }
        }
    }
    out
}

/// Binary closing (dilation then erosion) with a square element, used as
/// the mask oracle and by [`fill_holes`]. `wrap_cols` wraps the x axis.
pub fn close_mask(
    mask: &[bool],
    width: usize,
    height: usize,
    element: usize,
    wrap_cols: bool,
) -> Vec<bool> {
    assert!(element % 2 == 1, "structural element side must be odd");
    let r = (element / 2) as i64;
    let pass = |src: &[bool], erode: bool| {
        // Horizontal then vertical window scan; separable for squares.
        let mut tmp = vec![false; src.len()];
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let mut acc = erode;
                for dx in -r..=r {
                    let nx = if wrap_cols {
                        (x + dx).rem_euclid(width as i64)
                    } else {
                        x + dx
                    };
                    let v = if nx < 0 || nx >= width as i64 {
                        false
                    } else {
                        src[(y * width as i64 + nx) as usize]
                    };
                    if erode {
                        acc &= v;
                    } else {
                        acc |= v;
                    }
                }
                tmp[(y * width as i64 + x) as usize] = acc;
            }
        }
        let mut dst = vec![false; src.len()];
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let mut acc = erode;
                for dy in -r..=r {
                    let ny = y + dy;
                    let v = if ny < 0 || ny >= height as i64 {
                        false
                    } else {
                        tmp[(ny * width as i64 + x) as usize]
                    };
                    if erode {
                        acc &= v;
                    } else {
                        acc |= v;
                    }
                }
                dst[(y * width as i64 + x) as usize] = acc;
            }
        }
        dst
    };
    let dilated = pass(mask, false);
    pass(&dilated, true)
}

/// Fill holes in the proxy grids.
///
/// Two mechanisms: (1) activated regions of near-orthogonal intersecting
/// planes are extrapolated up to their intersection line, completing
/// unseen corners; (2) each proxy's activation mask is closed with a
/// square structural element, filling holes smaller than the element
/// while leaving larger openings (doorways, windows) untouched. Filled
/// cells carry the bare surface: zero offset, one mode, no color.
pub fn fill_holes(state: &mut SceneState, config: &Config) {
    extrapolate_plane_pairs(state, config);
    for proxy in &mut state.proxies {
        close_proxy_mask(proxy, config);
    }
}

fn filled_cell(config: &Config) -> Cell {
    Cell::from_summary(0.0, 1, config.activation_window, config.color_res_log2, true)
}

fn extrapolate_plane_pairs(state: &mut SceneState, config: &Config) {
    let min_cos = config.extrapolate_max_deg.to_radians().cos(); // 120 deg -> -0.5
    let max_cos = config.extrapolate_min_deg.to_radians().cos(); // 60 deg -> 0.5
    let n = state.proxies.len();
    for a in 0..n {
        for b in (a + 1)..n {
            let (pa, pb) = (&state.proxies[a], &state.proxies[b]);
            if pa.shape.kind != ShapeKind::Plane || pb.shape.kind != ShapeKind::Plane {
                continue;
            }
            let na = pa.shape.axis();
            let nb = pb.shape.axis();
            let cos = na.dot(&nb);
            if cos < min_cos || cos > max_cos {
                continue; // dihedral angle outside the near-orthogonal range
            }
            // Intersection line of the two planes.
            let dir = na.cross(&nb);
            if dir.norm() < 1e-9 {
                continue;
            }
            let dir = dir.normalize();
            let c1 = pa.shape.origin.dot(&na);
            let c2 = pb.shape.origin.dot(&nb);
            let k = na.dot(&nb);
            let denom = 1.0 - k * k;
            let pa_coef = (c1 - k * c2) / denom;
            let pb_coef = (c2 - k * c1) / denom;
            let line_point = pa_coef * na + pb_coef * nb;

            for idx in [a, b] {
                extrapolate_toward_line(&mut state.proxies[idx], &line_point, &dir, config);
            }
        }
    }
}

/// Activate (as filled) the inactive cells between a plane's activated
/// region and its intersection line with another plane.
fn extrapolate_toward_line(
    proxy: &mut Proxy,
    line_point: &Vector3<f64>,
    line_dir: &Vector3<f64>,
    config: &Config,
) {
    // The intersection line lies on the plane: map it into (u, v).
    let rel = line_point - proxy.shape.origin;
    let p0 = (rel.dot(&proxy.shape.axis_x), rel.dot(&proxy.shape.axis_y));
    let d = (line_dir.dot(&proxy.shape.axis_x), line_dir.dot(&proxy.shape.axis_y));
    let d_norm = (d.0 * d.0 + d.1 * d.1).sqrt();
    if d_norm < 1e-9 {
        return;
    }
    let d = (d.0 / d_norm, d.1 / d_norm);
    // Unit perpendicular; signed distance of a (u,v) point to the line.
    let perp = (-d.1, d.0);
    let signed = |u: f64, v: f64| (u - p0.0) * perp.0 + (v - p0.1) * perp.1;

    let w = proxy.spec.cell_size;
    let active: Vec<(i64, i64)> = proxy
        .cells
        .iter()
        .filter(|(_, c)| c.is_active())
        .map(|(&k, _)| k)
        .collect();
    let mut to_fill: BTreeSet<(i64, i64)> = BTreeSet::new();
    for (i, j) in active {
        let (cu, cv) = proxy.spec.cell_center(i, j);
        let s = signed(cu, cv);
        if s.abs() > config.extrapolate_gap || s.abs() < w {
            continue;
        }
        // Walk from the cell toward the line in half-cell steps.
        let toward = if s > 0.0 { (-perp.0, -perp.1) } else { (perp.0, perp.1) };
        let steps = (s.abs() / (w / 2.0)).ceil() as usize;
        for step in 1..=steps {
            let t = step as f64 * (w / 2.0);
            if t >= s.abs() {
                break;
            }
            let (uu, vv) = (cu + toward.0 * t, cv + toward.1 * t);
            let key = proxy.wrap_cell(proxy.spec.cell_of(uu, vv));
            if proxy.cells.get(&key).is_none_or(|c| !c.is_active()) {
                to_fill.insert(key);
            }
        }
    }
    for key in to_fill {
        proxy
            .cells
            .entry(key)
            .and_modify(|c| c.filled = true)
            .or_insert_with(|| filled_cell(config));
    }
}

fn close_proxy_mask(proxy: &mut Proxy, config: &Config) {
    let Some((i0, i1, j0, j1)) = proxy.cell_bounds(true) else { return };
    let r = (config.closing_size / 2) as i64;
    let wrap_cols = proxy.spec.wrap_columns();

    // Mask over the padded bounds; fully wrapped grids skip u padding.
    let (ox, width, wrap) = match wrap_cols {
        Some(cols) if i1 - i0 + 1 >= cols => (0i64, cols as usize, true),
        _ => (i0 - r, (i1 - i0 + 1 + 2 * r) as usize, false),
    };
    let oy = j0 - r;
    let height = (j1 - j0 + 1 + 2 * r) as usize;
    let mut mask = vec![false; width * height];
    for (&(i, j), cell) in &proxy.cells {
        if !cell.is_active() {
            continue;
        }
        let x = (i - ox) as usize;
        let y = (j - oy) as usize;
        mask[y * width + x] = true;
    }
    let closed = close_mask(&mask, width, height, config.closing_size, wrap);
    for y in 0..height {
        for x in 0..width {
            if !closed[y * width + x] || mask[y * width + x] {
                continue;
            }
            let key = (ox + x as i64, oy + y as i64);
            if !cell_in_domain(proxy, key) {
                continue;
            }
            proxy
                .cells
                .entry(key)
                .and_modify(|c| c.filled = true)
                .or_insert_with(|| filled_cell(config));
        }
    }
}

/// A cell belongs to the grid when its center lies inside the shape's
/// parameter domain (within half a cell of slack for partial edge cells).
fn cell_in_domain(proxy: &Proxy, key: (i64, i64)) -> bool {
    let w = proxy.spec.cell_size;
    let u = (key.0 as f64 + 0.5) * w;
    let v = (key.1 as f64 + 0.5) * w;
    let ok = |dom: Option<(f64, f64)>, x: f64| match dom {
        Some((lo, hi)) => x >= lo - w / 2.0 && x <= hi + w / 2.0,
        None => true,
    };
    ok(proxy.spec.u_domain, u) && ok(proxy.spec.v_domain, v)
}

/// Resample every activated or filled cell into `density^2` surface points
/// with colors from the nearest color point.
pub fn resample(state: &SceneState, density: usize) -> OrientedPointCloud {
    assert!(density >= 1);
    let mut out = OrientedPointCloud::default();
    for proxy in &state.proxies {
        let res = proxy.spec.color_res();
        for (&(i, j), cell) in &proxy.cells {
            if !cell.is_active() {
                continue;
            }
            let (mean_dist, modes) = cell.summary();
            let offset = if modes == 1 { mean_dist } else { 0.0 };
            for sj in 0..density {
                for si in 0..density {
                    let u = (i as f64 + (si as f64 + 0.5) / density as f64)
                        * proxy.spec.cell_size;
                    let v = (j as f64 + (sj as f64 + 0.5) / density as f64)
                        * proxy.spec.cell_size;
                    let (u, v) = proxy.spec.clamp(u, v);
                    let Some((p, n)) = proxy.shape.unparameterize(u, v) else { continue };
                    let p = p + offset * n;
                    let fi = (si * res / density).min(res - 1);
                    let fj = (sj * res / density).min(res - 1);
                    let color = cell.colors.mean_u8(fi, fj).unwrap_or([0, 0, 0]);
                    out.positions.push(p);
                    out.normals.push(n);
                    out.colors.push(color);
                    out.pixel_of.push(0);
                }
            }
        }
    }
    out
}

/// Write a resampled cloud as a plain point list: `x y z nx ny nz r g b`.
pub fn write_point_list(
    path: &std::path::Path,
    cloud: &OrientedPointCloud,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let n = cloud.normals[i];
        let c = cloud.colors[i];
        writeln!(
            f,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {} {} {}",
            p.x, p.y, p.z, n.x, n.y, n.z, c[0], c[1], c[2]
        )?;
    }
    Ok(())
}
