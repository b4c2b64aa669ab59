//! Proxy archive serialization, depth re-synthesis and quality metrics.
//!
//! The archive replaces the depth stream with the proxy superstructure: a
//! header plus one record per proxy holding the shape, the activation and
//! filled masks over the active bounds, per-cell quantized mean distance
//! and mode count, and (optionally) the color point grids.
//!
//! # Byte layout (little endian)
//!
//! ```text
//! magic            4  b"PRXY"
//! version          u16 (currently 1)
//! flags            u16 (bit 0: color grids present)
//! fov_h, fov_v     f64, f64
//! res_h, res_v     u32, u32
//! depth_scale      f64
//! axes             9 x f64 (three world axes)
//! up_index         u8
//! from_planes      u8
//! frame_index      u32
//! next_id          u32
//! proxy_count      u32
//! -- per proxy --
//! id               u32
//! kind             u8 (0 plane, 1 cylinder, 2 sphere)
//! status           u8 (0 active, 1 probation)
//! frames_seen      u32
//! since_support    u32
//! origin           3 x f64
//! axis_x, axis_y   3 x f64 each
//! radius           f64
//! cell_size        f64
//! color_res_log2   u8
//! mean_view        f64
//! has_cells        u8
//! -- if has_cells --
//! imin imax jmin jmax   4 x i32 (inclusive bounds of active cells)
//! active mask      ceil(w*h / 8) bytes, row-major, LSB first
//! filled mask      same size
//! -- per active cell, row-major --
//! dc_q             i16 (mean distance / quantization step)
//! modes            u8
//! colors           (2^r)^2 x 3 u8, only when flags bit 0 is set
//! ```
//!
//! Cells that never activated are not stored: the archive is a lossy
//! substitute for the stream, not a checkpoint of the full state.

use std::collections::HashSet;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rayon::prelude::*;

use crate::frame::{CameraIntrinsics, CameraPose};
use crate::proxy::{ManhattanFrame, ParamStats, Proxy, ProxyId, ProxyStatus, RunningScalar, SceneState};
use crate::shape::{GridSpec, ShapeKind, ShapeModel};
use crate::stats::Cell;

pub const MAGIC: [u8; 4] = *b"PRXY";
pub const VERSION: u16 = 1;
const FLAG_COLOR: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {found} at offset {offset}")]
    UnsupportedVersion { found: u16, offset: usize },
    #[error("truncated archive at offset {offset}")]
    Truncated { offset: usize },
    #[error("corrupt archive at offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
}

#[derive(Debug, Clone, Copy)]
pub struct EncodeOptions {
    /// Serialize the per-cell color grids.
    pub include_color: bool,
    /// Quantization step for cell mean distances, meters.
    pub quantization_step: f64,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self { include_color: true, quantization_step: 0.0005 }
    }
}

/// Encode the scene, optionally restricted to a subset of proxies (used
/// for frame-wise size accounting).
pub fn encode_subset(
    state: &SceneState,
    intrinsics: &CameraIntrinsics,
    opts: &EncodeOptions,
    only: Option<&HashSet<ProxyId>>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.write_u16::<LittleEndian>(VERSION).unwrap();
    let flags = if opts.include_color { FLAG_COLOR } else { 0 };
    out.write_u16::<LittleEndian>(flags).unwrap();
    out.write_f64::<LittleEndian>(intrinsics.fov_h).unwrap();
    out.write_f64::<LittleEndian>(intrinsics.fov_v).unwrap();
    out.write_u32::<LittleEndian>(intrinsics.res_h as u32).unwrap();
    out.write_u32::<LittleEndian>(intrinsics.res_v as u32).unwrap();
    out.write_f64::<LittleEndian>(intrinsics.depth_scale).unwrap();
    for axis in &state.manhattan.axes {
        for c in axis.iter() {
            out.write_f64::<LittleEndian>(*c).unwrap();
        }
    }
    out.push(state.manhattan.up_index as u8);
    out.push(state.manhattan.from_planes as u8);
    out.write_u32::<LittleEndian>(state.frame_index).unwrap();
    out.write_u32::<LittleEndian>(state.next_id).unwrap();

    let selected: Vec<&Proxy> = state
        .proxies
        .iter()
        .filter(|p| only.is_none_or(|ids| ids.contains(&p.id)))
        .collect();
    out.write_u32::<LittleEndian>(selected.len() as u32).unwrap();

    for proxy in selected {
        out.write_u32::<LittleEndian>(proxy.id).unwrap();
        out.push(match proxy.shape.kind {
            ShapeKind::Plane => 0,
            ShapeKind::Cylinder => 1,
            ShapeKind::Sphere => 2,
        });
        out.push(match proxy.status {
            ProxyStatus::Active => 0,
            ProxyStatus::Probation => 1,
        });
        out.write_u32::<LittleEndian>(proxy.frames_seen).unwrap();
        out.write_u32::<LittleEndian>(proxy.frames_since_support).unwrap();
        for v in [&proxy.shape.origin, &proxy.shape.axis_x, &proxy.shape.axis_y] {
            for c in v.iter() {
                out.write_f64::<LittleEndian>(*c).unwrap();
            }
        }
        out.write_f64::<LittleEndian>(proxy.shape.radius).unwrap();
        out.write_f64::<LittleEndian>(proxy.spec.cell_size).unwrap();
        out.push(proxy.spec.color_res_log2);
        out.write_f64::<LittleEndian>(proxy.mean_view.mean()).unwrap();

        let bounds = proxy.cell_bounds(true);
        out.push(bounds.is_some() as u8);
        let Some((i0, i1, j0, j1)) = bounds else { continue };
        for b in [i0, i1, j0, j1] {
            out.write_i32::<LittleEndian>(b as i32).unwrap();
        }
        let w = (i1 - i0 + 1) as usize;
        let h = (j1 - j0 + 1) as usize;
        let mut active = vec![0u8; (w * h).div_ceil(8)];
        let mut filled = vec![0u8; (w * h).div_ceil(8)];
        for (&(i, j), cell) in &proxy.cells {
            if !cell.is_active() || i < i0 || i > i1 || j < j0 || j > j1 {
                continue;
            }
            let bit = (j - j0) as usize * w + (i - i0) as usize;
            active[bit / 8] |= 1 << (bit % 8);
            if cell.filled {
                filled[bit / 8] |= 1 << (bit % 8);
            }
        }
        out.extend_from_slice(&active);
        out.extend_from_slice(&filled);

        let res = proxy.spec.color_res();
        for j in j0..=j1 {
            for i in i0..=i1 {
                let bit = (j - j0) as usize * w + (i - i0) as usize;
                if active[bit / 8] & (1 << (bit % 8)) == 0 {
                    continue;
                }
                let cell = &proxy.cells[&(i, j)];
                let (mean_dist, modes) = cell.summary();
                let q = (mean_dist / opts.quantization_step)
                    .round()
                    .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                out.write_i16::<LittleEndian>(q).unwrap();
                out.push(modes.min(255) as u8);
                if opts.include_color {
                    for pj in 0..res {
                        for pi in 0..res {
                            let rgb = cell.colors.mean_u8(pi, pj).unwrap_or([0, 0, 0]);
                            out.extend_from_slice(&rgb);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Encode the whole scene with default options.
pub fn encode(state: &SceneState, intrinsics: &CameraIntrinsics) -> Vec<u8> {
    encode_subset(state, intrinsics, &EncodeOptions::default(), None)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(self.take(2)?.read_u16::<LittleEndian>().unwrap())
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(self.take(4)?.read_u32::<LittleEndian>().unwrap())
    }

    fn i16(&mut self) -> Result<i16, CodecError> {
        Ok(self.take(2)?.read_i16::<LittleEndian>().unwrap())
    }

    fn i32(&mut self) -> Result<i32, CodecError> {
        Ok(self.take(4)?.read_i32::<LittleEndian>().unwrap())
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(self.take(8)?.read_f64::<LittleEndian>().unwrap())
    }

    fn vec3(&mut self) -> Result<Vector3<f64>, CodecError> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }
}

/// Decoded archive: the scene state plus the intrinsics it was built for.
#[derive(Debug, Clone)]
pub struct DecodedArchive {
    pub state: SceneState,
    pub intrinsics: CameraIntrinsics,
    pub quantization_step: f64,
}

/// Decode an archive produced by [`encode`]/[`encode_subset`].
pub fn decode(bytes: &[u8]) -> Result<DecodedArchive, CodecError> {
    decode_with_step(bytes, EncodeOptions::default().quantization_step)
}

pub fn decode_with_step(bytes: &[u8], step: f64) -> Result<DecodedArchive, CodecError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CodecError::BadMagic { offset: 0 });
    }
    let version_offset = r.pos;
    let version = r.u16()?;
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion { found: version, offset: version_offset });
    }
    let flags = r.u16()?;
    let has_color = flags & FLAG_COLOR != 0;

    let fov_h = r.f64()?;
    let fov_v = r.f64()?;
    let res_h = r.u32()? as usize;
    let res_v = r.u32()? as usize;
    let depth_scale = r.f64()?;
    if !(fov_h > 0.0 && fov_h < std::f64::consts::PI && res_h >= 1 && res_v >= 1) {
        return Err(CodecError::Corrupt { offset: 8, reason: "intrinsics out of range".into() });
    }
    let intrinsics = CameraIntrinsics::new(fov_h, fov_v, res_h, res_v, depth_scale);

    let axes = [r.vec3()?, r.vec3()?, r.vec3()?];
    let up_index = r.u8()? as usize;
    let from_planes = r.u8()? != 0;
    if up_index > 2 {
        return Err(CodecError::Corrupt { offset: r.pos, reason: "up_index out of range".into() });
    }
    let frame_index = r.u32()?;
    let next_id = r.u32()?;
    let count = r.u32()? as usize;

    let mut state = SceneState::new(axes[up_index]);
    state.manhattan = ManhattanFrame { axes, up_index, from_planes };
    state.frame_index = frame_index;
    state.next_id = next_id;

    for _ in 0..count {
        let id = r.u32()?;
        let kind_offset = r.pos;
        let kind = match r.u8()? {
            0 => ShapeKind::Plane,
            1 => ShapeKind::Cylinder,
            2 => ShapeKind::Sphere,
            other => {
                return Err(CodecError::Corrupt {
                    offset: kind_offset,
                    reason: format!("unknown shape kind {other}"),
                })
            }
        };
        let status = match r.u8()? {
            0 => ProxyStatus::Active,
            _ => ProxyStatus::Probation,
        };
        let frames_seen = r.u32()?;
        let frames_since_support = r.u32()?;
        let origin = r.vec3()?;
        let axis_x = r.vec3()?;
        let axis_y = r.vec3()?;
        let radius = r.f64()?;
        let cell_size = r.f64()?;
        let color_res_log2 = r.u8()?;
        let mean_view = r.f64()?;
        if cell_size <= 0.0 || color_res_log2 > 6 {
            return Err(CodecError::Corrupt { offset: r.pos, reason: "bad grid spec".into() });
        }
        let shape = match kind {
            ShapeKind::Plane => ShapeModel::plane(origin, axis_x, axis_y),
            ShapeKind::Cylinder => {
                if radius <= 0.0 {
                    return Err(CodecError::Corrupt {
                        offset: r.pos,
                        reason: "non-positive radius".into(),
                    });
                }
                ShapeModel::cylinder(origin, axis_x, axis_y, radius)
            }
            ShapeKind::Sphere => {
                if radius <= 0.0 {
                    return Err(CodecError::Corrupt {
                        offset: r.pos,
                        reason: "non-positive radius".into(),
                    });
                }
                ShapeModel::sphere(origin, axis_x, axis_y, radius)
            }
        };
        let mut proxy = Proxy {
            id,
            shape,
            spec: GridSpec::for_shape(&shape, cell_size, color_res_log2),
            cells: Default::default(),
            status,
            frames_seen,
            frames_since_support,
            param_stats: ParamStats::new(match kind {
                ShapeKind::Cylinder => 7,
                _ => 4,
            }),
            mean_view: RunningScalar::default(),
        };
        proxy.mean_view.push(mean_view);

        if r.u8()? != 0 {
            let i0 = r.i32()? as i64;
            let i1 = r.i32()? as i64;
            let j0 = r.i32()? as i64;
            let j1 = r.i32()? as i64;
            if i1 < i0 || j1 < j0 || (i1 - i0 + 1) * (j1 - j0 + 1) > 16_000_000 {
                return Err(CodecError::Corrupt {
                    offset: r.pos,
                    reason: "bad cell bounds".into(),
                });
            }
            let w = (i1 - i0 + 1) as usize;
            let h = (j1 - j0 + 1) as usize;
            let mask_len = (w * h).div_ceil(8);
            let active = r.take(mask_len)?.to_vec();
            let filled = r.take(mask_len)?.to_vec();
            let res = 1usize << color_res_log2;
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let bit = (j - j0) as usize * w + (i - i0) as usize;
                    if active[bit / 8] & (1 << (bit % 8)) == 0 {
                        continue;
                    }
                    let is_filled = filled[bit / 8] & (1 << (bit % 8)) != 0;
                    let q = r.i16()?;
                    let modes = r.u8()? as u32;
                    let mut cell = Cell::from_summary(
                        q as f64 * step,
                        modes,
                        100,
                        color_res_log2,
                        is_filled,
                    );
                    if has_color {
                        for pj in 0..res {
                            for pi in 0..res {
                                let rgb = r.take(3)?;
                                cell.colors.set(pi, pj, [rgb[0], rgb[1], rgb[2]], 1.0);
                            }
                        }
                    }
                    proxy.cells.insert((i, j), cell);
                }
            }
        }
        state.proxies.push(proxy);
    }
    Ok(DecodedArchive { state, intrinsics, quantization_step: step })
}

/// Re-synthesize a depth map from the proxies by casting one ray per pixel
/// and keeping the nearest intersection that lands in an activated or
/// filled cell (offset by the cell mean distance when unimodal).
pub fn decompress_frame(
    state: &SceneState,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Vec<f32> {
    decompress_frame_tracked(state, intrinsics, pose).0
}

/// Like [`decompress_frame`], also reporting which proxies contributed at
/// least one pixel (the frame-visible set used by size accounting).
pub fn decompress_frame_tracked(
    state: &SceneState,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> (Vec<f32>, HashSet<ProxyId>) {
    let w = intrinsics.res_h;
    let h = intrinsics.res_v;
    let rows: Vec<(Vec<f32>, HashSet<ProxyId>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut depth = vec![0.0f32; w];
            let mut used = HashSet::new();
            for col in 0..w {
                let dir_cam = intrinsics.ray(row as f64, col as f64);
                let dir = pose.dir_to_world(&dir_cam.normalize());
                let mut best: Option<(f64, usize, Vector3<f64>)> = None;
                for (pi, proxy) in state.proxies.iter().enumerate() {
                    for t in proxy.shape.ray_hits(&pose.translation, &dir).into_iter().flatten() {
                        if best.as_ref().is_some_and(|b| b.0 <= t) {
                            break; // hits are ascending
                        }
                        let p = pose.translation + t * dir;
                        let Some((u, v)) = proxy.shape.parameterize(&p) else { continue };
                        let key = proxy.wrap_cell(proxy.spec.cell_of(u, v));
                        if proxy.cells.get(&key).is_some_and(|c| c.is_active()) {
                            best = Some((t, pi, p));
                            break;
                        }
                    }
                }
                if let Some((_, pi, p)) = best {
                    let proxy = &state.proxies[pi];
                    let (u, v) = proxy.shape.parameterize(&p).unwrap();
                    let key = proxy.wrap_cell(proxy.spec.cell_of(u, v));
                    let (mean_dist, modes) = proxy.cells[&key].summary();
                    let point = if modes == 1 {
                        match proxy.shape.normal_at(&p) {
                            Some(n) => p + mean_dist * n,
                            None => p,
                        }
                    } else {
                        p
                    };
                    let z = pose.to_camera(&point).z;
                    if z > 0.0 {
                        depth[col] = z as f32;
                        used.insert(proxy.id);
                    }
                }
            }
            (depth, used)
        })
        .collect();

    let mut depth = Vec::with_capacity(w * h);
    let mut used = HashSet::new();
    for (d, u) in rows {
        depth.extend(d);
        used.extend(u);
    }
    (depth, used)
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no overlapping valid pixels")]
    NoOverlap,
}

/// Depth comparison over pixels valid in both maps.
#[derive(Debug, Clone, Copy)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub psnr_db: f64,
    pub compared: usize,
}

/// PSNR between two depth maps: `20 log10(peak / RMSE)` over the pixels
/// valid in both. Identical inputs report infinite PSNR.
pub fn psnr(raw: &[f32], reconstructed: &[f32], peak: f64) -> Result<DepthMetrics, MetricsError> {
    assert_eq!(raw.len(), reconstructed.len());
    let mut sq = 0.0f64;
    let mut n = 0usize;
    for (&a, &b) in raw.iter().zip(reconstructed) {
        if a > 0.0 && b > 0.0 {
            sq += (a as f64 - b as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoOverlap);
    }
    let rmse = (sq / n as f64).sqrt();
    let psnr_db = if rmse == 0.0 { f64::INFINITY } else { 20.0 * (peak / rmse).log10() };
    Ok(DepthMetrics { rmse, psnr_db, compared: n })
}

/// Raw storage size of one depth frame (16-bit depth).
pub fn raw_frame_bytes(intrinsics: &CameraIntrinsics) -> usize {
    intrinsics.res_h * intrinsics.res_v * 2
}

/// Scene-level compression ratio: total raw depth bytes over archive size.
pub fn scene_ratio(frames: usize, intrinsics: &CameraIntrinsics, archive_bytes: usize) -> f64 {
    (frames * raw_frame_bytes(intrinsics)) as f64 / archive_bytes.max(1) as f64
}
