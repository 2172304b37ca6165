//! Software rasterization of semantically labeled triangle meshes into
//! per-pixel label + depth views, plus the `.smesh` text format.
//!
//! The rasterizer samples triangles at integer pixel centers with a z-buffer.
//! Depth is the camera-frame z coordinate, interpolated perspective-correctly
//! (1/z is linear in screen space). Triangles are clipped against the near
//! plane and fragments beyond the far plane are discarded. Both triangle
//! faces are rendered; meshes are thin shells seen from either side.

use crate::geom::{CameraIntrinsics, Pose};
use crate::semantics::{ClassTable, LabelImage, SemanticsError};
use nalgebra::{Vector2, Vector3};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

/// Coincident-depth tolerance; ties go to the lower triangle index.
const DEPTH_TIE: f64 = 1e-9;

/// Barycentric slack so pixels exactly on shared edges are claimed by both
/// triangles (the z tie-break keeps the result deterministic).
const EDGE_EPS: f64 = 1e-12;

/// Triangles smaller than this area (m^2) are rejected as degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MeshError {
    #[error("triangle {triangle} references vertex {index} of {num_vertices}")]
    VertexIndexOutOfRange { triangle: usize, index: u32, num_vertices: usize },
    #[error("triangle {triangle} has class {class_id}, outside the class table")]
    InvalidClass { triangle: usize, class_id: u8 },
    #[error("triangle {triangle} is labeled background; background is the absence of geometry")]
    BackgroundFace { triangle: usize },
    #[error("triangle {triangle} is degenerate (area {area:.3e} m^2)")]
    DegenerateTriangle { triangle: usize, area: f64 },
}

#[derive(Debug, Error)]
pub enum MeshIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

fn parse_err(line: usize, detail: impl Into<String>) -> MeshIoError {
    MeshIoError::Parse { line, detail: detail.into() }
}

/// One face: three vertex indices plus a semantic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triangle {
    pub indices: [u32; 3],
    pub class_id: u8,
}

/// Triangle mesh in which every face carries a semantic class id.
///
/// Validated on construction: indices in range, classes inside the table and
/// never the background class, faces non-degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<Triangle>,
}

impl SemanticMesh {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<Triangle>,
        table: &ClassTable,
    ) -> Result<Self, MeshError> {
        for (t, tri) in triangles.iter().enumerate() {
            for &i in &tri.indices {
                if i as usize >= vertices.len() {
                    return Err(MeshError::VertexIndexOutOfRange {
                        triangle: t,
                        index: i,
                        num_vertices: vertices.len(),
                    });
                }
            }
            if tri.class_id >= table.num_classes() {
                return Err(MeshError::InvalidClass { triangle: t, class_id: tri.class_id });
            }
            if tri.class_id == table.background_id() {
                return Err(MeshError::BackgroundFace { triangle: t });
            }
            let [a, b, c] = tri.indices.map(|i| vertices[i as usize]);
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            if area <= MIN_TRIANGLE_AREA {
                return Err(MeshError::DegenerateTriangle { triangle: t, area });
            }
        }
        Ok(SemanticMesh { vertices, triangles })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    /// Number of faces carrying each class id (index = class id).
    pub fn class_face_counts(&self, num_classes: u8) -> Vec<usize> {
        let mut counts = vec![0usize; num_classes as usize];
        for tri in &self.triangles {
            counts[tri.class_id as usize] += 1;
        }
        counts
    }

    /// Copy containing only faces whose class is in `keep`. Vertices are left
    /// untouched so face indices remain comparable across filtered variants.
    pub fn filter_classes(&self, keep: &[u8]) -> SemanticMesh {
        let triangles = self.triangles.iter().filter(|t| keep.contains(&t.class_id)).copied().collect();
        SemanticMesh { vertices: self.vertices.clone(), triangles }
    }

    /// Rigidly transforms every vertex by `t` (used by equivariance tests).
    pub fn transformed(&self, t: &Pose) -> SemanticMesh {
        SemanticMesh {
            vertices: self.vertices.iter().map(|v| t.transform(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }
}

/// Near/far planes of the virtual camera, in meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { near: 0.1, far: 200.0 }
    }
}

/// Labels plus depth produced by the rasterizer. Depth is `+inf` exactly
/// where the label is the background class.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub labels: LabelImage,
    pub depth: Vec<f64>,
    pub background_id: u8,
}

impl RenderedView {
    #[inline]
    pub fn depth_at(&self, x: u32, y: u32) -> f64 {
        self.depth[(y * self.labels.width + x) as usize]
    }

    pub fn width(&self) -> u32 {
        self.labels.width
    }

    pub fn height(&self) -> u32 {
        self.labels.height
    }

    /// Half-resolution view keeping the top-left sample of every 2x2 cell
    /// for both labels and depth (pairs with [`CameraIntrinsics::halved`]).
    pub fn downscale(&self) -> Result<RenderedView, SemanticsError> {
        let labels = self.labels.downsample2()?;
        let (w, h) = (labels.width, labels.height);
        let mut depth = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                depth.push(self.depth_at(2 * x, 2 * y));
            }
        }
        Ok(RenderedView { labels, depth, background_id: self.background_id })
    }
}

/// A rendered-view pixel usable as an alignment anchor: it sits on a label
/// boundary, is not background, and carries the rendered depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePixel {
    pub x: u32,
    pub y: u32,
    pub class_id: u8,
    pub depth: f64,
}

/// Renders the mesh seen from `pose` (camera-to-world) into labels + depth.
pub fn render(
    mesh: &SemanticMesh,
    k: &CameraIntrinsics,
    pose: &Pose,
    background_id: u8,
    config: &RenderConfig,
) -> RenderedView {
    let w = k.width as usize;
    let h = k.height as usize;
    let mut labels = vec![background_id; w * h];
    let mut depth = vec![f64::INFINITY; w * h];
    let mut owner = vec![u32::MAX; w * h];
    let world_to_cam = pose.inverse();

    for (tri_idx, tri) in mesh.triangles().iter().enumerate() {
        let cam = tri.indices.map(|i| world_to_cam.transform(&mesh.vertices[i as usize]));
        if cam.iter().all(|p| p.z > config.far) || cam.iter().all(|p| p.z < config.near) {
            continue;
        }
        let clipped = clip_near(&cam, config.near);
        for t in 1..clipped.len().saturating_sub(1) {
            raster_triangle(
                &clipped[0],
                &clipped[t],
                &clipped[t + 1],
                k,
                config.far,
                tri_idx as u32,
                tri.class_id,
                &mut labels,
                &mut depth,
                &mut owner,
            );
        }
    }

    RenderedView {
        labels: LabelImage { width: k.width, height: k.height, labels },
        depth,
        background_id,
    }
}

/// Sutherland-Hodgman clip of one triangle against the plane `z = near`,
/// keeping the `z >= near` side. Returns 0, 3 or 4 vertices.
fn clip_near(tri: &[Vector3<f64>; 3], near: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let (ina, inb) = (a.z >= near, b.z >= near);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (near - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn raster_triangle(
    p0: &Vector3<f64>,
    p1: &Vector3<f64>,
    p2: &Vector3<f64>,
    k: &CameraIntrinsics,
    far: f64,
    tri_idx: u32,
    class_id: u8,
    labels: &mut [u8],
    depth: &mut [f64],
    owner: &mut [u32],
) {
    let proj = |p: &Vector3<f64>| Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
    let (q0, q1, q2) = (proj(p0), proj(p1), proj(p2));
    let den = (q1.x - q0.x) * (q2.y - q0.y) - (q2.x - q0.x) * (q1.y - q0.y);
    if den.abs() < 1e-12 {
        return;
    }
    let inv_den = 1.0 / den;
    let (iz0, iz1, iz2) = (1.0 / p0.z, 1.0 / p1.z, 1.0 / p2.z);

    let min_x = q0.x.min(q1.x).min(q2.x).ceil().max(0.0) as i64;
    let max_x = q0.x.max(q1.x).max(q2.x).floor().min((k.width - 1) as f64) as i64;
    let min_y = q0.y.min(q1.y).min(q2.y).ceil().max(0.0) as i64;
    let max_y = q0.y.max(q1.y).max(q2.y).floor().min((k.height - 1) as f64) as i64;

    for py in min_y..=max_y {
        let y = py as f64;
        let row = py as usize * k.width as usize;
        for px in min_x..=max_x {
            let x = px as f64;
            let l1 = ((x - q0.x) * (q2.y - q0.y) - (q2.x - q0.x) * (y - q0.y)) * inv_den;
            let l2 = ((q1.x - q0.x) * (y - q0.y) - (x - q0.x) * (q1.y - q0.y)) * inv_den;
            let l0 = 1.0 - l1 - l2;
            if l0 < -EDGE_EPS || l1 < -EDGE_EPS || l2 < -EDGE_EPS {
                continue;
            }
            let z = 1.0 / (l0 * iz0 + l1 * iz1 + l2 * iz2);
            if z > far {
                continue;
            }
            let idx = row + px as usize;
            let winner = z < depth[idx] - DEPTH_TIE
                || (z <= depth[idx] + DEPTH_TIE && tri_idx < owner[idx]);
            if winner {
                labels[idx] = class_id;
                depth[idx] = z;
                owner[idx] = tri_idx;
            }
        }
    }
}

/// Non-background pixels that touch a different label through 4-connectivity,
/// in row-major order. Pixels next to the image border have fewer neighbors;
/// out-of-image neighbors never count as different.
pub fn extract_edge_pixels(view: &RenderedView) -> Vec<EdgePixel> {
    let (w, h) = (view.width(), view.height());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let c = view.labels.at(x, y);
            if c == view.background_id {
                continue;
            }
            let differs = (x > 0 && view.labels.at(x - 1, y) != c)
                || (x + 1 < w && view.labels.at(x + 1, y) != c)
                || (y > 0 && view.labels.at(x, y - 1) != c)
                || (y + 1 < h && view.labels.at(x, y + 1) != c);
            if differs {
                out.push(EdgePixel { x, y, class_id: c, depth: view.depth_at(x, y) });
            }
        }
    }
    out
}

// --- .smesh text format -----------------------------------------------------

/// Serializes mesh + class table as `.smesh` text:
/// `# class <id> <name>` headers, `v x y z` vertices, `f i j k c` faces.
/// Vertex coordinates use the shortest exact float representation, so a
/// save/load/save cycle is byte-identical.
pub fn save_mesh(path: &Path, mesh: &SemanticMesh, table: &ClassTable) -> Result<(), MeshIoError> {
    let mut text = String::new();
    for (id, name) in table.names().enumerate() {
        writeln!(text, "# class {id} {name}").unwrap();
    }
    if table.background_id() != 0 {
        writeln!(text, "# background {}", table.background_id()).unwrap();
    }
    for v in mesh.vertices() {
        writeln!(text, "v {} {} {}", v.x, v.y, v.z).unwrap();
    }
    for t in mesh.triangles() {
        writeln!(text, "f {} {} {} {}", t.indices[0], t.indices[1], t.indices[2], t.class_id).unwrap();
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn load_mesh(path: &Path) -> Result<(SemanticMesh, ClassTable), MeshIoError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut class_names: Vec<(u8, String)> = Vec::new();
    let mut background_id = 0u8;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();

    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = no + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        match parts.next().unwrap() {
            "#" => match parts.next() {
                Some("class") => {
                    let id: u8 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(lineno, "class header needs a numeric id"))?;
                    let name = parts.collect::<Vec<_>>().join(" ");
                    if name.is_empty() {
                        return Err(parse_err(lineno, "class header needs a name"));
                    }
                    class_names.push((id, name));
                }
                Some("background") => {
                    background_id = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(lineno, "background header needs a numeric id"))?;
                }
                _ => {} // free-form comment
            },
            "v" => {
                let mut coord = || -> Result<f64, MeshIoError> {
                    parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(lineno, "vertex needs three numeric coordinates"))
                };
                vertices.push(Vector3::new(coord()?, coord()?, coord()?));
            }
            "f" => {
                let mut field = || -> Result<u32, MeshIoError> {
                    parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(lineno, "face needs three indices and a class id"))
                };
                let (i, j, k) = (field()?, field()?, field()?);
                let c = field()?;
                if c > u8::MAX as u32 {
                    return Err(parse_err(lineno, format!("class id {c} out of range")));
                }
                triangles.push(Triangle { indices: [i, j, k], class_id: c as u8 });
            }
            other => return Err(parse_err(lineno, format!("unknown record '{other}'"))),
        }
    }

    class_names.sort_by_key(|(id, _)| *id);
    if class_names.iter().enumerate().any(|(i, (id, _))| i != *id as usize) {
        return Err(parse_err(0, "class ids must be dense, starting at 0".to_string()));
    }
    let table = ClassTable::new(class_names.into_iter().map(|(_, n)| n).collect(), background_id)?;
    let mesh = SemanticMesh::new(vertices, triangles, &table)?;
    Ok((mesh, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table() -> ClassTable {
        ClassTable::new(
            vec!["background".into(), "road".into(), "marking".into(), "wall".into()],
            0,
        )
        .unwrap()
    }

    fn k_test() -> CameraIntrinsics {
        CameraIntrinsics::new(8.0, 8.0, 7.5, 5.5, 16, 12)
    }

    /// Axis-aligned square (two triangles) at depth `z`, spanning +-s.
    fn square(z: f64, s: f64, class_id: u8, table: &ClassTable) -> SemanticMesh {
        square_at(z, -s, s, -s, s, class_id, table)
    }

    fn square_at(z: f64, x0: f64, x1: f64, y0: f64, y1: f64, class_id: u8, table: &ClassTable) -> SemanticMesh {
        SemanticMesh::new(
            vec![
                Vector3::new(x0, y0, z),
                Vector3::new(x1, y0, z),
                Vector3::new(x1, y1, z),
                Vector3::new(x0, y1, z),
            ],
            vec![
                Triangle { indices: [0, 1, 2], class_id },
                Triangle { indices: [0, 2, 3], class_id },
            ],
            table,
        )
        .unwrap()
    }

    #[test]
    fn mesh_validation_rejects_bad_faces() {
        let t = table();
        let verts = vec![Vector3::zeros(), Vector3::x(), Vector3::y()];
        let bad_index = SemanticMesh::new(
            verts.clone(),
            vec![Triangle { indices: [0, 1, 9], class_id: 1 }],
            &t,
        );
        assert!(matches!(bad_index, Err(MeshError::VertexIndexOutOfRange { .. })));

        let bad_class =
            SemanticMesh::new(verts.clone(), vec![Triangle { indices: [0, 1, 2], class_id: 9 }], &t);
        assert!(matches!(bad_class, Err(MeshError::InvalidClass { .. })));

        let bg_face =
            SemanticMesh::new(verts.clone(), vec![Triangle { indices: [0, 1, 2], class_id: 0 }], &t);
        assert!(matches!(bg_face, Err(MeshError::BackgroundFace { .. })));

        let degenerate = SemanticMesh::new(
            vec![Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0],
            vec![Triangle { indices: [0, 1, 2], class_id: 1 }],
            &t,
        );
        assert!(matches!(degenerate, Err(MeshError::DegenerateTriangle { .. })));
    }

    #[test]
    fn full_view_square_renders_constant_label_and_depth() {
        let t = table();
        let mesh = square(5.0, 8.0, 3, &t);
        let view = render(&mesh, &k_test(), &Pose::identity(), 0, &RenderConfig::default());
        for y in 0..12 {
            for x in 0..16 {
                assert_eq!(view.labels.at(x, y), 3);
                assert_relative_eq!(view.depth_at(x, y), 5.0, epsilon = 1e-6);
            }
        }
        assert!(extract_edge_pixels(&view).is_empty());
    }

    #[test]
    fn background_depth_is_infinite_exactly_where_unlabeled() {
        let t = table();
        let mesh = square(5.0, 1.0, 1, &t);
        let view = render(&mesh, &k_test(), &Pose::identity(), 0, &RenderConfig::default());
        let mut saw_both = (false, false);
        for y in 0..12 {
            for x in 0..16 {
                if view.labels.at(x, y) == 0 {
                    assert_eq!(view.depth_at(x, y), f64::INFINITY);
                    saw_both.0 = true;
                } else {
                    assert!(view.depth_at(x, y).is_finite());
                    saw_both.1 = true;
                }
            }
        }
        assert_eq!(saw_both, (true, true));
    }

    #[test]
    fn nearer_surface_occludes() {
        let t = table();
        let mut mesh = square(10.0, 12.0, 1, &t);
        let near_sq = square(4.0, 1.0, 3, &t);
        let base = mesh.vertices().len() as u32;
        let mut verts = mesh.vertices().to_vec();
        verts.extend_from_slice(near_sq.vertices());
        let mut tris = mesh.triangles().to_vec();
        tris.extend(near_sq.triangles().iter().map(|tr| Triangle {
            indices: [tr.indices[0] + base, tr.indices[1] + base, tr.indices[2] + base],
            class_id: tr.class_id,
        }));
        mesh = SemanticMesh::new(verts, tris, &t).unwrap();

        let view = render(&mesh, &k_test(), &Pose::identity(), 0, &RenderConfig::default());
        // Center is covered by the nearer square, periphery by the far one.
        assert_eq!(view.labels.at(8, 6), 3);
        assert_relative_eq!(view.depth_at(8, 6), 4.0, epsilon = 1e-6);
        assert_eq!(view.labels.at(0, 0), 1);
        assert_relative_eq!(view.depth_at(0, 0), 10.0, epsilon = 1e-6);
    }

    #[test]
    fn coincident_surfaces_resolve_to_lower_triangle_index() {
        let t = table();
        let a = square(5.0, 8.0, 1, &t);
        let b = square(5.0, 8.0, 3, &t);
        let mut verts = a.vertices().to_vec();
        verts.extend_from_slice(b.vertices());
        let mut tris = a.triangles().to_vec();
        tris.extend(b.triangles().iter().map(|tr| Triangle {
            indices: tr.indices.map(|i| i + 4),
            class_id: tr.class_id,
        }));
        let mesh = SemanticMesh::new(verts, tris, &t).unwrap();
        let view = render(&mesh, &k_test(), &Pose::identity(), 0, &RenderConfig::default());
        for y in 0..12 {
            for x in 0..16 {
                assert_eq!(view.labels.at(x, y), 1, "lower-index coplanar face must win at ({x},{y})");
            }
        }
    }

    #[test]
    fn near_plane_clipping_keeps_front_part() {
        let t = table();
        // A ground-like plane passing under the camera: part behind the near
        // plane must be clipped without artifacts.
        let mesh = SemanticMesh::new(
            vec![
                Vector3::new(-20.0, 1.5, -5.0),
                Vector3::new(20.0, 1.5, -5.0),
                Vector3::new(20.0, 1.5, 50.0),
                Vector3::new(-20.0, 1.5, 50.0),
            ],
            vec![
                Triangle { indices: [0, 1, 2], class_id: 1 },
                Triangle { indices: [0, 2, 3], class_id: 1 },
            ],
            &t,
        )
        .unwrap();
        let view = render(&mesh, &k_test(), &Pose::identity(), 0, &RenderConfig::default());
        // Lower half of the image sees the plane, upper half sees background.
        assert_eq!(view.labels.at(8, 11), 1);
        assert!(view.depth_at(8, 11) >= 0.1);
        assert_eq!(view.labels.at(8, 0), 0);
    }

    #[test]
    fn rendered_depth_is_perspective_correct() {
        let t = table();
        // Slanted plane: z = 4 + 0.5 * x.
        let mesh = SemanticMesh::new(
            vec![
                Vector3::new(-8.0, -8.0, 0.0),
                Vector3::new(8.0, -8.0, 8.0),
                Vector3::new(8.0, 8.0, 8.0),
                Vector3::new(-8.0, 8.0, 0.0),
            ],
            vec![
                Triangle { indices: [0, 1, 2], class_id: 2 },
                Triangle { indices: [0, 2, 3], class_id: 2 },
            ],
            &t,
        )
        .unwrap();
        let k = k_test();
        let view = render(&mesh, &k, &Pose::identity(), 0, &RenderConfig::default());
        // Plane normal/offset from three vertices: n . p = d.
        let n = Vector3::new(-0.5, 0.0, 1.0);
        let d = 4.0;
        for y in 0..12 {
            for x in 0..16 {
                if view.labels.at(x, y) == 2 {
                    let p = k
                        .unproject(&Vector2::new(x as f64, y as f64), view.depth_at(x, y))
                        .unwrap();
                    assert_relative_eq!(n.dot(&p), d, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn far_plane_culls_distant_fragments() {
        let t = table();
        let mesh = square(250.0, 400.0, 1, &t);
        let view = render(&mesh, &k_test(), &Pose::identity(), 0, &RenderConfig::default());
        assert!(view.labels.labels.iter().all(|&l| l == 0));
        let view = render(&mesh, &k_test(), &Pose::identity(), 0, &RenderConfig { near: 0.1, far: 300.0 });
        assert_eq!(view.labels.at(8, 6), 1);
    }

    #[test]
    fn render_is_deterministic() {
        let t = table();
        let mesh = square(5.0, 3.0, 1, &t);
        let a = render(&mesh, &k_test(), &Pose::identity(), 0, &RenderConfig::default());
        let b = render(&mesh, &k_test(), &Pose::identity(), 0, &RenderConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn edge_pixels_for_vertical_two_class_split() {
        let mut labels = LabelImage::filled(4, 4, 1);
        for y in 0..4 {
            for x in 2..4 {
                labels.set(x, y, 2);
            }
        }
        let view = RenderedView { depth: vec![5.0; 16], labels, background_id: 0 };
        let edges = extract_edge_pixels(&view);
        assert_eq!(edges.len(), 8);
        // Row-major: both middle columns of each row, top to bottom.
        let coords: Vec<(u32, u32)> = edges.iter().map(|e| (e.x, e.y)).collect();
        assert_eq!(coords, vec![(1, 0), (2, 0), (1, 1), (2, 1), (1, 2), (2, 2), (1, 3), (2, 3)]);
        assert!(edges.iter().all(|e| e.depth == 5.0));
    }

    #[test]
    fn edge_pixels_exclude_background_side() {
        // Left half background, right half road: only road pixels qualify.
        let mut labels = LabelImage::filled(4, 2, 0);
        for y in 0..2 {
            for x in 2..4 {
                labels.set(x, y, 1);
            }
        }
        let mut depth = vec![f64::INFINITY; 8];
        for y in 0..2u32 {
            for x in 2..4u32 {
                depth[(y * 4 + x) as usize] = 7.0;
            }
        }
        let view = RenderedView { depth, labels, background_id: 0 };
        let edges = extract_edge_pixels(&view);
        let coords: Vec<(u32, u32)> = edges.iter().map(|e| (e.x, e.y)).collect();
        assert_eq!(coords, vec![(2, 0), (2, 1)]);
        assert!(edges.iter().all(|e| e.class_id == 1));
    }

    #[test]
    fn downscale_keeps_top_left_samples() {
        let t = table();
        let mesh = square(5.0, 1.0, 1, &t);
        let view = render(&mesh, &k_test(), &Pose::identity(), 0, &RenderConfig::default());
        let half = view.downscale().unwrap();
        assert_eq!((half.width(), half.height()), (8, 6));
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(half.labels.at(x, y), view.labels.at(2 * x, 2 * y));
                assert_eq!(half.depth_at(x, y), view.depth_at(2 * x, 2 * y));
            }
        }
        let odd = RenderedView {
            labels: LabelImage::filled(3, 2, 0),
            depth: vec![f64::INFINITY; 6],
            background_id: 0,
        };
        assert!(odd.downscale().is_err());
    }

    #[test]
    fn filter_classes_drops_faces_and_uncovers_background() {
        let t = table();
        let near_sq = square(4.0, 8.0, 3, &t);
        let far_sq = square(10.0, 8.0, 1, &t);
        let mut verts = far_sq.vertices().to_vec();
        verts.extend_from_slice(near_sq.vertices());
        let mut tris = far_sq.triangles().to_vec();
        tris.extend(near_sq.triangles().iter().map(|tr| Triangle {
            indices: tr.indices.map(|i| i + 4),
            class_id: tr.class_id,
        }));
        let mesh = SemanticMesh::new(verts, tris, &t).unwrap();

        let filtered = mesh.filter_classes(&[1]);
        assert_eq!(filtered.triangles().len(), 2);
        let view = render(&filtered, &k_test(), &Pose::identity(), 0, &RenderConfig::default());
        assert_eq!(view.labels.at(8, 6), 1, "occluder removed, far surface visible");

        let counts = mesh.class_face_counts(t.num_classes());
        assert_eq!(counts, vec![0, 2, 0, 2]);
    }

    #[test]
    fn smesh_roundtrip_is_byte_identical() {
        let t = table();
        let mesh = square(5.0, 1.25, 2, &t);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.smesh");
        let p2 = dir.path().join("b.smesh");
        save_mesh(&p1, &mesh, &t).unwrap();
        let (back_mesh, back_table) = load_mesh(&p1).unwrap();
        assert_eq!(back_mesh, mesh);
        assert_eq!(back_table, t);
        save_mesh(&p2, &back_mesh, &back_table).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn smesh_rejects_malformed_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.smesh");

        // Face referencing a missing vertex.
        std::fs::write(
            &path,
            "# class 0 background\n# class 1 road\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 5 1\n",
        )
        .unwrap();
        assert!(matches!(load_mesh(&path), Err(MeshIoError::Mesh(MeshError::VertexIndexOutOfRange { .. }))));

        // Unknown class id on a face.
        std::fs::write(
            &path,
            "# class 0 background\n# class 1 road\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2 7\n",
        )
        .unwrap();
        assert!(matches!(load_mesh(&path), Err(MeshIoError::Mesh(MeshError::InvalidClass { .. }))));

        // Gap in class ids.
        std::fs::write(&path, "# class 0 background\n# class 2 road\nv 0 0 0\n").unwrap();
        assert!(matches!(load_mesh(&path), Err(MeshIoError::Parse { .. })));

        // Malformed vertex line.
        std::fs::write(&path, "# class 0 background\n# class 1 road\nv 0 zero 0\n").unwrap();
        assert!(matches!(load_mesh(&path), Err(MeshIoError::Parse { .. })));
    }
}
