//! Meshing of activated proxy grids into textured surface models.
//!
//! Each activated (or filled) cell becomes a quad over its four lattice
//! corners; where exactly three of the four cells around a lattice corner
//! are active, a triangle bevels the re-entrant notch. Corner vertices are
//! displaced along the surface normal by the average mean-distance of the
//! incident unimodal cells. Revolution shapes are closed by welding
//! coincident vertices (cylinder seam, octahedral sphere boundary).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use image::{ImageBuffer, Rgb, RgbImage};
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::proxy::{Proxy, ProxyId, SceneState};
use crate::shape::ShapeKind;

/// One polygon: 3 or 4 corners of (position index, texcoord index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Face {
    pub corners: Vec<(u32, u32)>,
}

/// An indexed mesh with per-corner texture coordinates.
#[derive(Debug, Clone, Default)]
pub struct ProxyMesh {
    pub positions: Vec<Vector3<f64>>,
    pub texcoords: Vec<[f64; 2]>,
    pub faces: Vec<Face>,
}

impl ProxyMesh {
    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.faces.iter().filter(|f| f.corners.len() == 3).count()
    }

    pub fn quad_count(&self) -> usize {
        self.faces.iter().filter(|f| f.corners.len() == 4).count()
    }

    /// Undirected edges with their face incidence counts.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::new();
        for face in &self.faces {
            let n = face.corners.len();
            for k in 0..n {
                let a = face.corners[k].0;
                let b = face.corners[(k + 1) % n].0;
                let key = (a.min(b), a.max(b));
                *edges.entry(key).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Edges incident to exactly one face.
    pub fn boundary_edges(&self) -> Vec<(u32, u32)> {
        self.edge_counts().into_iter().filter(|(_, c)| *c == 1).map(|(e, _)| e).collect()
    }

    /// V - E + F over the indexed buffers.
    pub fn euler_characteristic(&self) -> i64 {
        let v = self.positions.len() as i64;
        let e = self.edge_counts().len() as i64;
        let f = self.faces.len() as i64;
        v - e + f
    }
}

/// Mesh the activated cells of one proxy (no periodic closure yet).
pub fn mesh_proxy(proxy: &Proxy) -> ProxyMesh {
    let active: BTreeSet<(i64, i64)> = proxy
        .cells
        .iter()
        .filter(|(_, c)| c.is_active())
        .map(|(&k, _)| k)
        .collect();
    let mut mesh = ProxyMesh::default();
    if active.is_empty() {
        return mesh;
    }
    let (i0, i1, j0, j1) = proxy.cell_bounds(true).unwrap();
    let cols = (i1 - i0 + 1) as f64;
    let rows = (j1 - j0 + 1) as f64;
    let w = proxy.spec.cell_size;

    // Mean offset at a lattice corner: unimodal incident active cells
    // contribute their mean distance, multimodal ones contribute zero.
    let corner_offset = |i: i64, j: i64| -> f64 {
        let mut sum = 0.0;
        let mut count = 0;
        for key in [(i - 1, j - 1), (i, j - 1), (i - 1, j), (i, j)] {
            let wrapped = proxy.wrap_cell(key);
            if let Some(cell) = proxy.cells.get(&wrapped) {
                if cell.is_active() {
                    let (d, m) = cell.summary();
                    sum += if m == 1 { d } else { 0.0 };
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };

    let mut vertex_ids: BTreeMap<(i64, i64), u32> = BTreeMap::new();
    let mut uv_ids: BTreeMap<(i64, i64), u32> = BTreeMap::new();
    let corner = |mesh: &mut ProxyMesh,
                      vertex_ids: &mut BTreeMap<(i64, i64), u32>,
                      uv_ids: &mut BTreeMap<(i64, i64), u32>,
                      i: i64,
                      j: i64|
     -> Option<(u32, u32)> {
        let vid = match vertex_ids.get(&(i, j)) {
            Some(&v) => v,
            None => {
                let (u, v) = proxy.spec.clamp(i as f64 * w, j as f64 * w);
                let (p, n) = proxy.shape.unparameterize(u, v)?;
                let p = p + corner_offset(i, j) * n;
                let id = mesh.positions.len() as u32;
                mesh.positions.push(p);
                vertex_ids.insert((i, j), id);
                id
            }
        };
        let tid = match uv_ids.get(&(i, j)) {
            Some(&t) => t,
            None => {
                let id = mesh.texcoords.len() as u32;
                mesh.texcoords
                    .push([(i - i0) as f64 / cols, 1.0 - (j - j0) as f64 / rows]);
                uv_ids.insert((i, j), id);
                id
            }
        };
        Some((vid, tid))
    };

    // Cell quads.
    for &(i, j) in &active {
        let quad = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
        let mut corners = Vec::with_capacity(4);
        for (ci, cj) in quad {
            match corner(&mut mesh, &mut vertex_ids, &mut uv_ids, ci, cj) {
                Some(c) => corners.push(c),
                None => break,
            }
        }
        if corners.len() == 4 {
            mesh.faces.push(Face { corners });
        }
    }

    // Bevel triangles at three-cell junctions.
    let mut junctions: BTreeSet<(i64, i64)> = BTreeSet::new();
    for &(i, j) in &active {
        junctions.extend([(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]);
    }
    for &(i, j) in &junctions {
        let around = [(i - 1, j - 1), (i, j - 1), (i - 1, j), (i, j)];
        let is_active =
            |key: (i64, i64)| -> bool { active.contains(&proxy.wrap_cell(key)) };
        let actives: Vec<bool> = around.iter().map(|&k| is_active(k)).collect();
        if actives.iter().filter(|&&a| a).count() != 3 {
            continue;
        }
        let missing = around[actives.iter().position(|&a| !a).unwrap()];
        let su = if missing.0 == i { 1 } else { -1 };
        let sv = if missing.1 == j { 1 } else { -1 };
        // Skip seam notches whose support corners were never meshed.
        if !vertex_ids.contains_key(&(i + su, j)) || !vertex_ids.contains_key(&(i, j + sv)) {
            continue;
        }
        let tri = [(i + su, j), (i, j), (i, j + sv)];
        let mut corners = Vec::with_capacity(3);
        for (ci, cj) in tri {
            match corner(&mut mesh, &mut vertex_ids, &mut uv_ids, ci, cj) {
                Some(c) => corners.push(c),
                None => break,
            }
        }
        if corners.len() == 3 {
            mesh.faces.push(Face { corners });
        }
    }

    orient_outward(proxy, &mut mesh);
    mesh
}

/// Flip faces whose geometric normal opposes the shape's outward normal.
fn orient_outward(proxy: &Proxy, mesh: &mut ProxyMesh) {
    for face in &mut mesh.faces {
        let pts: Vec<Vector3<f64>> =
            face.corners.iter().map(|&(v, _)| mesh.positions[v as usize]).collect();
        let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let geo = (pts[1] - pts[0]).cross(&(pts[2] - pts[0]));
        if let Some(out) = proxy.shape.normal_at(&centroid) {
            if geo.dot(&out) < 0.0 {
                face.corners.reverse();
            }
        }
    }
}

/// Weld coincident vertices of revolution-shape meshes: the cylinder seam
/// columns and the folded octahedral sphere boundary. Vertices within
/// `1e-6 * radius` collapse to one, positioned at their mean.
pub fn close_periodic(proxy: &Proxy, mesh: &mut ProxyMesh) {
    if !matches!(proxy.shape.kind, ShapeKind::Cylinder | ShapeKind::Sphere) {
        return;
    }
    let eps = 1e-6 * proxy.shape.radius.max(1e-3);
    let key_of = |p: &Vector3<f64>| {
        (
            (p.x / eps).round() as i64,
            (p.y / eps).round() as i64,
            (p.z / eps).round() as i64,
        )
    };
    let mut groups: HashMap<(i64, i64, i64), u32> = HashMap::new();
    let mut remap = vec![0u32; mesh.positions.len()];
    let mut new_positions: Vec<Vector3<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for (vid, p) in mesh.positions.iter().enumerate() {
        let key = key_of(p);
        match groups.get(&key) {
            Some(&g) => {
                remap[vid] = g;
                let n = counts[g as usize] as f64;
                new_positions[g as usize] = (new_positions[g as usize] * n + p) / (n + 1.0);
                counts[g as usize] += 1;
            }
            None => {
                let g = new_positions.len() as u32;
                groups.insert(key, g);
                new_positions.push(*p);
                counts.push(1);
                remap[vid] = g;
            }
        }
    }
    mesh.positions = new_positions;
    let mut faces = Vec::with_capacity(mesh.faces.len());
    for face in &mesh.faces {
        let mut corners: Vec<(u32, u32)> =
            face.corners.iter().map(|&(v, t)| (remap[v as usize], t)).collect();
        corners.dedup_by_key(|c| c.0);
        while corners.len() > 1 && corners.first().map(|c| c.0) == corners.last().map(|c| c.0) {
            corners.pop();
        }
        if corners.len() >= 3 {
            faces.push(Face { corners });
        }
    }
    mesh.faces = faces;
}

/// Build the welded mesh of every proxy with at least one active cell.
pub fn mesh_scene(state: &SceneState) -> Vec<(ProxyId, ProxyMesh)> {
    let mut out = Vec::new();
    for proxy in &state.proxies {
        if proxy.active_cell_count() == 0 {
            continue;
        }
        let mut mesh = mesh_proxy(proxy);
        close_periodic(proxy, &mut mesh);
        if !mesh.faces.is_empty() {
            out.push((proxy.id, mesh));
        }
    }
    out
}

/// Render the color points of a proxy into a texture image over its active
/// bounds; unobserved points come out black.
pub fn proxy_texture(proxy: &Proxy) -> Option<RgbImage> {
    let (i0, i1, j0, j1) = proxy.cell_bounds(true)?;
    let res = proxy.spec.color_res();
    let width = ((i1 - i0 + 1) as usize * res) as u32;
    let height = ((j1 - j0 + 1) as usize * res) as u32;
    let mut img = ImageBuffer::from_pixel(width, height, Rgb([0u8, 0, 0]));
    for (&(i, j), cell) in &proxy.cells {
        if !cell.is_active() || i < i0 || i > i1 || j < j0 || j > j1 {
            continue;
        }
        for pj in 0..res {
            for pi in 0..res {
                if let Some(rgb) = cell.colors.mean_u8(pi, pj) {
                    let x = (i - i0) as u32 * res as u32 + pi as u32;
                    let y = (j - j0) as u32 * res as u32 + pj as u32;
                    img.put_pixel(x, y, Rgb(rgb));
                }
            }
        }
    }
    Some(img)
}

#[derive(Debug, thiserror::Error)]
pub enum MeshIoError {
    #[error("cannot write {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("cannot encode texture {0}: {1}")]
    Image(PathBuf, #[source] image::ImageError),
    #[error("cannot parse {0}: {1}")]
    Parse(PathBuf, String),
}

#[derive(Debug, Clone)]
pub struct ExportStats {
    pub obj_path: PathBuf,
    pub proxies: usize,
    pub vertices: usize,
    pub faces: usize,
    pub meshing: Duration,
    pub writing: Duration,
}

/// Export the whole scene as `scene.obj` + `scene.mtl` + one texture image
/// per proxy into `dir`.
pub fn export_scene(state: &SceneState, dir: &Path) -> Result<ExportStats, MeshIoError> {
    std::fs::create_dir_all(dir).map_err(|e| MeshIoError::Io(dir.to_path_buf(), e))?;
    let t0 = Instant::now();
    let meshes = mesh_scene(state);
    let meshing = t0.elapsed();

    let t1 = Instant::now();
    let obj_path = dir.join("scene.obj");
    let mtl_path = dir.join("scene.mtl");
    let mut obj = String::new();
    let mut mtl = String::new();
    obj.push_str("mtllib scene.mtl\n");
    let mut v_base = 1usize; // OBJ indices are 1-based
    let mut t_base = 1usize;
    let mut total_v = 0;
    let mut total_f = 0;
    for (id, mesh) in &meshes {
        let material = format!("proxy_{id}");
        mtl.push_str(&format!(
            "newmtl {material}\nKa 1 1 1\nKd 1 1 1\nmap_Kd proxy_{id}.png\n\n"
        ));
        obj.push_str(&format!("o proxy_{id}\nusemtl {material}\n"));
        for p in &mesh.positions {
            obj.push_str(&format!("v {:.6} {:.6} {:.6}\n", p.x, p.y, p.z));
        }
        for t in &mesh.texcoords {
            obj.push_str(&format!("vt {:.6} {:.6}\n", t[0], t[1]));
        }
        for face in &mesh.faces {
            obj.push('f');
            for &(v, t) in &face.corners {
                obj.push_str(&format!(
                    " {}/{}",
                    v as usize + v_base,
                    t as usize + t_base
                ));
            }
            obj.push('\n');
        }
        v_base += mesh.positions.len();
        t_base += mesh.texcoords.len();
        total_v += mesh.positions.len();
        total_f += mesh.faces.len();
        if let Some(proxy) = state.proxy_by_id(*id) {
            if let Some(img) = proxy_texture(proxy) {
                let tex_path = dir.join(format!("proxy_{id}.png"));
                img.save(&tex_path).map_err(|e| MeshIoError::Image(tex_path.clone(), e))?;
            }
        }
    }
    std::fs::write(&obj_path, obj).map_err(|e| MeshIoError::Io(obj_path.clone(), e))?;
    std::fs::write(&mtl_path, mtl).map_err(|e| MeshIoError::Io(mtl_path.clone(), e))?;
    Ok(ExportStats {
        obj_path,
        proxies: meshes.len(),
        vertices: total_v,
        faces: total_f,
        meshing,
        writing: t1.elapsed(),
    })
}

/// Minimal OBJ reader: positions and faces (vertex indices only), enough
/// for round-trip checks and reference-mesh comparison.
pub fn read_obj(path: &Path) -> Result<ProxyMesh, MeshIoError> {
    let file =
        std::fs::File::open(path).map_err(|e| MeshIoError::Io(path.to_path_buf(), e))?;
    let mut mesh = ProxyMesh::default();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MeshIoError::Io(path.to_path_buf(), e))?;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in &mut coords {
                    *c = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| {
                            MeshIoError::Parse(
                                path.to_path_buf(),
                                format!("line {}: bad vertex", lineno + 1),
                            )
                        })?;
                }
                mesh.positions.push(Vector3::new(coords[0], coords[1], coords[2]));
            }
            Some("vt") => {
                let u: f64 = tokens.next().and_then(|t| t.parse().ok()).unwrap_or(0.0);
                let v: f64 = tokens.next().and_then(|t| t.parse().ok()).unwrap_or(0.0);
                mesh.texcoords.push([u, v]);
            }
            Some("f") => {
                let mut corners = Vec::new();
                for tok in tokens {
                    let vi: i64 = tok
                        .split('/')
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| {
                            MeshIoError::Parse(
                                path.to_path_buf(),
                                format!("line {}: bad face", lineno + 1),
                            )
                        })?;
                    let ti: i64 = tok
                        .split('/')
                        .nth(1)
                        .and_then(|t| t.parse().ok())
                        .unwrap_or(1);
                    corners.push((vi as u32 - 1, ti as u32 - 1));
                }
                if corners.len() >= 3 {
                    mesh.faces.push(Face { corners });
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}

/// Sampled point-to-surface RMSE from mesh `a` to mesh `b` (quads split
/// into triangles; samples drawn area-weighted).
pub fn surface_rmse(a: &ProxyMesh, b: &ProxyMesh, samples: usize, seed: u64) -> f64 {
    let tris_b = triangles_of(b);
    if tris_b.is_empty() {
        return f64::NAN;
    }
    let tris_a = triangles_of(a);
    let areas: Vec<f64> = tris_a.iter().map(|t| triangle_area(t)).collect();
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return f64::NAN;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sq = 0.0;
    for _ in 0..samples {
        // Area-weighted triangle pick.
        let mut target = rng.random::<f64>() * total;
        let mut idx = 0;
        for (i, area) in areas.iter().enumerate() {
            if target <= *area {
                idx = i;
                break;
            }
            target -= area;
        }
        let p = sample_triangle(&tris_a[idx], &mut rng);
        let d = tris_b
            .iter()
            .map(|t| point_triangle_distance(&p, t))
            .fold(f64::MAX, f64::min);
        sq += d * d;
    }
    (sq / samples as f64).sqrt()
}

type Triangle = [Vector3<f64>; 3];

fn triangles_of(mesh: &ProxyMesh) -> Vec<Triangle> {
    let mut out = Vec::new();
    for face in &mesh.faces {
        let pts: Vec<Vector3<f64>> =
            face.corners.iter().map(|&(v, _)| mesh.positions[v as usize]).collect();
        for k in 1..pts.len() - 1 {
            out.push([pts[0], pts[k], pts[k + 1]]);
        }
    }
    out
}

fn triangle_area(t: &Triangle) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

fn sample_triangle(t: &Triangle, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let mut a = rng.random::<f64>();
    let mut b = rng.random::<f64>();
    if a + b > 1.0 {
        a = 1.0 - a;
        b = 1.0 - b;
    }
    t[0] + a * (t[1] - t[0]) + b * (t[2] - t[0])
}

/// Distance from a point to a triangle (region-based closest point).
fn point_triangle_distance(p: &Vector3<f64>, t: &Triangle) -> f64 {
    let ab = t[1] - t[0];
    let ac = t[2] - t[0];
    let ap = p - t[0];
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - t[1];
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (ap - v * ab).norm();
    }
    let cp = p - t[2];
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (ap - w * ac).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - w * (t[2] - t[1])).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (t[0] + v * ab + w * ac)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::proxy::{ParamStats, ProxyStatus, RunningScalar};
    use crate::shape::{GridSpec, ShapeModel};
    use crate::stats::Cell;

    fn bare_proxy(shape: ShapeModel) -> Proxy {
        let config = Config::default();
        Proxy {
            id: 0,
            shape,
            spec: GridSpec::for_shape(&shape, config.cell_size, config.color_res_log2),
            cells: Default::default(),
            status: ProxyStatus::Active,
            frames_seen: 1,
            frames_since_support: 0,
            param_stats: ParamStats::new(4),
            mean_view: RunningScalar::default(),
        }
    }

    fn activate(proxy: &mut Proxy, keys: &[(i64, i64)], dist: f64) {
        for &k in keys {
            proxy.cells.insert(k, Cell::from_summary(dist, 1, 100, 2, false));
        }
    }

    fn plane_proxy() -> Proxy {
        bare_proxy(ShapeModel::plane(Vector3::zeros(), Vector3::x(), Vector3::y()))
    }

    #[test]
    fn isolated_cell_gives_one_quad() {
        let mut proxy = plane_proxy();
        activate(&mut proxy, &[(0, 0)], 0.0);
        let mesh = mesh_proxy(&proxy);
        assert_eq!(mesh.vertex_count(), 4);
        assert_eq!(mesh.face_count(), 1);
        assert_eq!(mesh.quad_count(), 1);
    }

    #[test]
    fn two_by_two_block_shares_the_corner_lattice() {
        let mut proxy = plane_proxy();
        activate(&mut proxy, &[(0, 0), (1, 0), (0, 1), (1, 1)], 0.0);
        let mesh = mesh_proxy(&proxy);
        assert_eq!(mesh.vertex_count(), 9);
        assert_eq!(mesh.quad_count(), 4);
        assert_eq!(mesh.triangle_count(), 0);
    }

    #[test]
    fn l_junction_emits_a_bevel_triangle() {
        let mut proxy = plane_proxy();
        activate(&mut proxy, &[(0, 0), (1, 0), (0, 1)], 0.0);
        let mesh = mesh_proxy(&proxy);
        assert_eq!(mesh.quad_count(), 3);
        assert_eq!(mesh.triangle_count(), 1, "junction bevel triangle missing");
        // The triangle sits at the junction corner (1,1)*w.
        let tri = mesh.faces.iter().find(|f| f.corners.len() == 3).unwrap();
        let near_junction = tri.corners.iter().any(|&(v, _)| {
            (mesh.positions[v as usize] - Vector3::new(0.05, 0.05, 0.0)).norm() < 1e-9
        });
        assert!(near_junction);
    }

    #[test]
    fn faces_wind_outward() {
        let mut proxy = plane_proxy();
        activate(&mut proxy, &[(0, 0), (1, 0), (0, 1)], 0.0);
        let mesh = mesh_proxy(&proxy);
        let n = proxy.shape.axis();
        for face in &mesh.faces {
            let pts: Vec<Vector3<f64>> =
                face.corners.iter().map(|&(v, _)| mesh.positions[v as usize]).collect();
            let geo = (pts[1] - pts[0]).cross(&(pts[2] - pts[0]));
            assert!(geo.dot(&n) > 0.0);
        }
    }

    #[test]
    fn corner_offsets_average_incident_cells() {
        let mut proxy = plane_proxy();
        activate(&mut proxy, &[(0, 0)], 0.02);
        activate(&mut proxy, &[(1, 0)], 0.04);
        let mesh = mesh_proxy(&proxy);
        // The two corners shared by both cells sit at the average offset.
        let shared: Vec<&Vector3<f64>> = mesh
            .positions
            .iter()
            .filter(|p| (p.x - 0.05).abs() < 1e-9)
            .collect();
        assert_eq!(shared.len(), 2);
        for p in shared {
            assert!((p.z - 0.03).abs() < 1e-9, "corner offset {}", p.z);
        }
        // Face vertices stay within max offset of the surface.
        for p in &mesh.positions {
            assert!(proxy.shape.signed_distance(p).abs() <= 0.04 + 1e-6);
        }
    }

    fn full_cylinder_proxy() -> Proxy {
        let shape = ShapeModel::cylinder_from_axis(Vector3::zeros(), Vector3::y(), 0.3);
        let mut proxy = bare_proxy(shape);
        let cols = proxy.spec.wrap_columns().unwrap();
        for i in 0..cols {
            for j in 0..8 {
                proxy.cells.insert((i, j), Cell::from_summary(0.0, 1, 100, 2, false));
            }
        }
        proxy
    }

    #[test]
    fn full_cylinder_closes_into_a_tube() {
        let proxy = full_cylinder_proxy();
        let mut mesh = mesh_proxy(&proxy);
        let open_boundary = mesh.boundary_edges().len();
        close_periodic(&proxy, &mut mesh);
        let closed_boundary = mesh.boundary_edges().len();
        assert!(closed_boundary < open_boundary, "welding removed no seams");
        // Only the two horizontal rims remain open: every boundary edge is
        // horizontal (same height at both ends).
        for (a, b) in mesh.boundary_edges() {
            let pa = mesh.positions[a as usize];
            let pb = mesh.positions[b as usize];
            assert!(
                (pa.y - pb.y).abs() < 1e-9,
                "non-rim boundary edge after closure: {pa:?} {pb:?}"
            );
        }
        // A tube has Euler characteristic 0.
        assert_eq!(mesh.euler_characteristic(), 0);
    }

    #[test]
    fn half_cylinder_seam_stays_open() {
        let shape = ShapeModel::cylinder_from_axis(Vector3::zeros(), Vector3::y(), 0.3);
        let mut proxy = bare_proxy(shape);
        let cols = proxy.spec.wrap_columns().unwrap();
        for i in 0..cols / 2 {
            for j in 0..4 {
                proxy.cells.insert((i, j), Cell::from_summary(0.0, 1, 100, 2, false));
            }
        }
        let mut mesh = mesh_proxy(&proxy);
        let before = mesh.vertex_count();
        close_periodic(&proxy, &mut mesh);
        assert_eq!(mesh.vertex_count(), before, "half cylinder must not weld");
        // Vertical boundary edges remain at both open sides.
        let vertical = mesh
            .boundary_edges()
            .iter()
            .filter(|&&(a, b)| {
                (mesh.positions[a as usize].y - mesh.positions[b as usize].y).abs() > 1e-12
            })
            .count();
        assert!(vertical > 0);
    }

    fn full_sphere_proxy(radius: f64) -> Proxy {
        let shape =
            ShapeModel::sphere(Vector3::new(0.2, -0.1, 1.0), Vector3::x(), Vector3::y(), radius);
        let mut proxy = bare_proxy(shape);
        let half = std::f64::consts::FRAC_PI_2 * radius;
        let w = proxy.spec.cell_size;
        let lo = (-half / w).floor() as i64;
        let hi = ((half - 1e-12) / w).floor() as i64;
        for i in lo..=hi {
            for j in lo..=hi {
                proxy.cells.insert((i, j), Cell::from_summary(0.0, 1, 100, 2, false));
            }
        }
        proxy
    }

    #[test]
    fn full_sphere_mesh_is_closed_with_euler_two() {
        let proxy = full_sphere_proxy(0.5);
        let mut mesh = mesh_proxy(&proxy);
        close_periodic(&proxy, &mut mesh);
        assert!(mesh.boundary_edges().is_empty(), "sphere mesh has boundary edges");
        for (_, count) in mesh.edge_counts() {
            assert!(count == 2, "non-manifold edge with {count} faces");
        }
        assert_eq!(mesh.euler_characteristic(), 2);
    }

    #[test]
    fn south_pole_quadrants_connect_across_corners() {
        let proxy = full_sphere_proxy(0.5);
        let mut mesh = mesh_proxy(&proxy);
        close_periodic(&proxy, &mut mesh);
        // The four square corners weld into a single south-pole vertex.
        let pole = proxy.shape.origin - proxy.shape.axis() * proxy.shape.radius;
        let hits = mesh
            .positions
            .iter()
            .filter(|p| (*p - pole).norm() < 1e-6 * proxy.shape.radius)
            .count();
        assert_eq!(hits, 1, "expected one welded pole vertex, found {hits}");
    }

    #[test]
    fn export_and_reimport_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = SceneState::new(Vector3::y());
        let mut proxy = plane_proxy();
        activate(&mut proxy, &[(0, 0), (1, 0), (0, 1)], 0.0);
        proxy.cells.get_mut(&(0, 0)).unwrap().colors.set(0, 0, [255, 0, 0], 1.0);
        state.proxies.push(proxy);
        let mut sphere = full_sphere_proxy(0.4);
        sphere.id = 1;
        state.proxies.push(sphere);
        state.next_id = 2;

        let stats = export_scene(&state, dir.path()).unwrap();
        assert_eq!(stats.proxies, 2);
        assert!(dir.path().join("scene.obj").exists());
        assert!(dir.path().join("scene.mtl").exists());
        assert!(dir.path().join("proxy_0.png").exists());
        assert!(dir.path().join("proxy_1.png").exists());

        let back = read_obj(&dir.path().join("scene.obj")).unwrap();
        assert_eq!(back.vertex_count(), stats.vertices);
        assert_eq!(back.face_count(), stats.faces);
        // Texture coordinates land inside [0, 1].
        for t in &back.texcoords {
            assert!((0.0..=1.0).contains(&t[0]) && (0.0..=1.0).contains(&t[1]));
        }
    }

    #[test]
    fn surface_rmse_between_offset_planes() {
        let mut a = plane_proxy();
        activate(&mut a, &[(0, 0), (1, 0), (0, 1), (1, 1)], 0.0);
        let mesh_a = mesh_proxy(&a);
        let mut b = plane_proxy();
        activate(&mut b, &[(0, 0), (1, 0), (0, 1), (1, 1)], 0.01);
        let mesh_b = mesh_proxy(&b);
        let rmse = surface_rmse(&mesh_a, &mesh_b, 500, 7);
        assert!((rmse - 0.01).abs() < 1e-3, "rmse {rmse}");
        let zero = surface_rmse(&mesh_a, &mesh_a, 500, 7);
        assert!(zero < 1e-9);
    }
}
