//! Marching-cubes isosurface extraction over the pyramid density field.
//!
//! The standard 256-case triangle table is generated once at startup by
//! tracing the isosurface polygons over each corner configuration: on every
//! cube face, crossed edges are paired per contiguous run of inside corners
//! (the asymptotic-decider-free resolution of the ambiguous faces; the rule
//! depends only on the face's own corner signs, so adjacent cells always
//! agree), the resulting arcs are chained into closed polygons, oriented
//! away from the inside region, and fan-triangulated. Vertices are welded by
//! lattice edge, so closed surfaces are watertight by construction.

use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::grid::{query_pyramid, Point3, PyramidTriGrid};
use crate::render::DecoderParams;

/// Triangle mesh with shared vertices.
#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.triangles {
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::invalid("degenerate triangle with repeated vertex index"));
            }
            for &i in t {
                if i as usize >= self.vertices.len() {
                    return Err(Error::invalid("triangle index out of range"));
                }
            }
        }
        Ok(())
    }
}

/// Corner positions of the unit cube, standard ordering.
const CORNER_POS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Edge endpoints, standard ordering.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Faces as corner cycles.
const FACES: [[usize; 4]; 6] = [
    [0, 1, 2, 3],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 2, 6, 7],
    [0, 3, 7, 4],
    [1, 2, 6, 5],
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(x, y)| (x == a && y == b) || (x == b && y == a))
        .expect("face cycle pair is always a cube edge")
}

/// Builds the triangle list (as edge-index triples) for one of the 256
/// corner configurations.
fn build_case(mask: u8) -> Vec<[u8; 3]> {
    let inside = |c: usize| mask & (1 << c) != 0;
    // Arcs pair crossed edges across each face, one arc per contiguous run
    // of inside corners along the face cycle.
    let mut arcs: Vec<(usize, usize)> = Vec::new();
    for face in FACES {
        let ins: Vec<bool> = face.iter().map(|&c| inside(c)).collect();
        if ins.iter().all(|b| *b) || !ins.iter().any(|b| *b) {
            continue;
        }
        let mut k = 0;
        while k < 4 {
            // Start of a run: inside corner whose predecessor is outside.
            if ins[k] && !ins[(k + 3) % 4] {
                let mut end = k;
                while ins[(end + 1) % 4] {
                    end = (end + 1) % 4;
                }
                let e_before = edge_between(face[(k + 3) % 4], face[k]);
                let e_after = edge_between(face[end], face[(end + 1) % 4]);
                arcs.push((e_before, e_after));
            }
            k += 1;
        }
    }
    if arcs.is_empty() {
        return Vec::new();
    }

    // Each crossed edge touches exactly two arcs; chain them into closed
    // polygons.
    let mut adjacency: HashMap<usize, Vec<usize>> = HashMap::new();
    for (ai, (e1, e2)) in arcs.iter().enumerate() {
        adjacency.entry(*e1).or_default().push(ai);
        adjacency.entry(*e2).or_default().push(ai);
    }
    let mut arc_used = vec![false; arcs.len()];
    let mut polygons: Vec<Vec<usize>> = Vec::new();
    for start_arc in 0..arcs.len() {
        if arc_used[start_arc] {
            continue;
        }
        let mut polygon = Vec::new();
        let mut edge = arcs[start_arc].0;
        let mut arc = start_arc;
        loop {
            arc_used[arc] = true;
            polygon.push(edge);
            let (e1, e2) = arcs[arc];
            edge = if edge == e1 { e2 } else { e1 };
            let next = adjacency[&edge]
                .iter()
                .copied()
                .find(|&a| !arc_used[a]);
            match next {
                Some(a) => arc = a,
                None => break,
            }
        }
        polygons.push(polygon);
    }

    // Orient each polygon away from the inside region and fan-triangulate.
    let edge_mid = |e: usize| -> [f64; 3] {
        let (a, b) = EDGES[e];
        std::array::from_fn(|i| (CORNER_POS[a][i] as f64 + CORNER_POS[b][i] as f64) * 0.5)
    };
    let mut triangles = Vec::new();
    for mut polygon in polygons {
        debug_assert!(polygon.len() >= 3);
        let pts: Vec<[f64; 3]> = polygon.iter().map(|&e| edge_mid(e)).collect();
        // Newell normal.
        let mut normal = [0.0f64; 3];
        for i in 0..pts.len() {
            let p = pts[i];
            let q = pts[(i + 1) % pts.len()];
            normal[0] += (p[1] - q[1]) * (p[2] + q[2]);
            normal[1] += (p[2] - q[2]) * (p[0] + q[0]);
            normal[2] += (p[0] - q[0]) * (p[1] + q[1]);
        }
        // Mean inside-to-outside direction over the polygon's edges.
        let mut outward = [0.0f64; 3];
        for &e in &polygon {
            let (a, b) = EDGES[e];
            let (inn, out) = if inside(a) { (a, b) } else { (b, a) };
            for i in 0..3 {
                outward[i] += CORNER_POS[out][i] as f64 - CORNER_POS[inn][i] as f64;
            }
        }
        let dot: f64 = normal.iter().zip(&outward).map(|(n, o)| n * o).sum();
        if dot < 0.0 {
            polygon.reverse();
        }
        for i in 1..polygon.len() - 1 {
            triangles.push([polygon[0] as u8, polygon[i] as u8, polygon[i + 1] as u8]);
        }
    }
    triangles
}

fn triangle_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|mask| build_case(mask as u8)))
}

/// Marches a scalar field sampled on a `resolution^3` lattice over
/// `[-1,1]^3`, indexed `(ix * resolution + iy) * resolution + iz`. The
/// surface uses the convention inside = `value > iso`, with linear edge
/// interpolation; an iso level above the global maximum yields an empty
/// mesh, which is valid.
pub fn extract_mesh_from_field(field: &[f32], resolution: usize, iso: f32) -> Result<Mesh> {
    if resolution < 8 {
        return Err(Error::invalid(format!("lattice resolution must be >= 8, got {resolution}")));
    }
    if field.len() != resolution.pow(3) {
        return Err(Error::shape(format!(
            "field length {} != {resolution}^3",
            field.len()
        )));
    }
    let table = triangle_table();
    let res = resolution;
    let flat = |x: usize, y: usize, z: usize| (x * res + y) * res + z;
    let mut vertices: Vec<[f32; 3]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut edge_vertices: HashMap<(u32, u32), u32> = HashMap::new();
    // Vertices weld by the lattice edge they sit on, so neighboring cells
    // share them exactly.
    fn vertex_for_edge(
        e: usize,
        cell: [usize; 3],
        field: &[f32],
        res: usize,
        iso: f32,
        vertices: &mut Vec<[f32; 3]>,
        edge_vertices: &mut HashMap<(u32, u32), u32>,
    ) -> u32 {
        let coord = |i: usize| -1.0 + 2.0 * i as f32 / (res - 1) as f32;
        let flat = |p: [usize; 3]| (p[0] * res + p[1]) * res + p[2];
        let (a, b) = EDGES[e];
        let pa_i = [cell[0] + CORNER_POS[a][0], cell[1] + CORNER_POS[a][1], cell[2] + CORNER_POS[a][2]];
        let pb_i = [cell[0] + CORNER_POS[b][0], cell[1] + CORNER_POS[b][1], cell[2] + CORNER_POS[b][2]];
        let (ia, ib) = (flat(pa_i) as u32, flat(pb_i) as u32);
        let key = if ia < ib { (ia, ib) } else { (ib, ia) };
        *edge_vertices.entry(key).or_insert_with(|| {
            let (va, vb) = (field[ia as usize], field[ib as usize]);
            let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
            let pa = [coord(pa_i[0]), coord(pa_i[1]), coord(pa_i[2])];
            let pb = [coord(pb_i[0]), coord(pb_i[1]), coord(pb_i[2])];
            vertices.push([
                pa[0] + t * (pb[0] - pa[0]),
                pa[1] + t * (pb[1] - pa[1]),
                pa[2] + t * (pb[2] - pa[2]),
            ]);
            (vertices.len() - 1) as u32
        })
    }
    for cx in 0..res - 1 {
        for cy in 0..res - 1 {
            for cz in 0..res - 1 {
                let mut mask = 0u8;
                for (c, pos) in CORNER_POS.iter().enumerate() {
                    if field[flat(cx + pos[0], cy + pos[1], cz + pos[2])] > iso {
                        mask |= 1 << c;
                    }
                }
                for t in &table[mask as usize] {
                    let tri = std::array::from_fn(|i| {
                        vertex_for_edge(
                            t[i] as usize,
                            [cx, cy, cz],
                            field,
                            res,
                            iso,
                            &mut vertices,
                            &mut edge_vertices,
                        )
                    });
                    triangles.push(tri);
                }
            }
        }
    }
    let mesh = Mesh { vertices, triangles };
    mesh.validate()?;
    Ok(mesh)
}

/// Density of the scene at every lattice point of a `resolution^3` grid over
/// `[-1,1]^3`; exactly the pyramid query plus decoder, so extraction and
/// rendering see the same field.
pub fn density_lattice(
    pyr: &PyramidTriGrid,
    decoder: &DecoderParams,
    resolution: usize,
) -> Result<Vec<f32>> {
    use rayon::prelude::*;
    let res = resolution;
    let coord = |i: usize| -1.0 + 2.0 * i as f32 / (res - 1) as f32;
    let field: Vec<f32> = (0..res * res * res)
        .into_par_iter()
        .map(|idx| {
            let x = idx / (res * res);
            let y = (idx / res) % res;
            let z = idx % res;
            let features = query_pyramid(pyr, Point3::new(coord(x), coord(y), coord(z)))
                .expect("lattice points are finite");
            let mut hidden = vec![0.0f32; decoder.hidden];
            let mut colors = vec![0.0f32; decoder.color_features];
            decoder.forward(&features, &mut hidden, &mut colors)
        })
        .collect();
    Ok(field)
}

/// Marching cubes over the scene's density field.
pub fn extract_mesh(
    pyr: &PyramidTriGrid,
    decoder: &DecoderParams,
    resolution: usize,
    iso: f32,
) -> Result<Mesh> {
    if pyr.channels() != decoder.channels {
        return Err(Error::shape("pyramid/decoder channel mismatch"));
    }
    let field = density_lattice(pyr, decoder, resolution)?;
    extract_mesh_from_field(&field, resolution, iso)
}

/// Every undirected edge belongs to exactly two triangles.
pub fn mesh_is_watertight(mesh: &Mesh) -> bool {
    let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
    for t in &mesh.triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            let key = if a < b { (a, b) } else { (b, a) };
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    !counts.is_empty() && counts.values().all(|c| *c == 2)
}

/// ASCII OBJ export (vertices + 1-based faces).
pub fn write_obj<W: Write>(mesh: &Mesh, mut out: W) -> Result<()> {
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

/// Signed-distance-style ball fixture: positive inside radius, crossing zero
/// exactly at the surface.
pub fn sphere_field(resolution: usize, radius: f32) -> Vec<f32> {
    let res = resolution;
    let coord = |i: usize| -1.0 + 2.0 * i as f32 / (res - 1) as f32;
    let mut field = vec![0.0f32; res * res * res];
    for x in 0..res {
        for y in 0..res {
            for z in 0..res {
                let p = [coord(x), coord(y), coord(z)];
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                field[(x * res + y) * res + z] = radius - r;
            }
        }
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TriGrid;
    use crate::rng::seeded_rng;
    use rand::Rng;

    #[test]
    fn table_cases_have_bounded_triangle_counts() {
        let table = triangle_table();
        assert!(table[0].is_empty());
        assert!(table[255].is_empty());
        for (mask, tris) in table.iter().enumerate() {
            // Up to four polygons of at most six edges fit in a cube cell.
            assert!(tris.len() <= 6, "case {mask} has {} triangles", tris.len());
            if mask != 0 && mask != 255 {
                assert!(!tris.is_empty(), "case {mask} lost its surface");
            }
            for t in tris {
                assert!(t.iter().all(|&e| e < 12));
            }
        }
    }

    #[test]
    fn single_corner_case_is_one_triangle() {
        let table = triangle_table();
        for c in 0..8usize {
            assert_eq!(table[1 << c].len(), 1, "corner {c}");
        }
    }

    #[test]
    fn sphere_vertices_sit_within_one_cell_of_the_radius() {
        let res = 64;
        let field = sphere_field(res, 0.5);
        let mesh = extract_mesh_from_field(&field, res, 0.0).unwrap();
        assert!(!mesh.is_empty());
        let cell = 2.0 / (res as f32 - 1.0);
        for v in &mesh.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 0.5).abs() <= cell, "vertex radius {r}");
        }
    }

    #[test]
    fn sphere_mesh_is_watertight() {
        let field = sphere_field(32, 0.5);
        let mesh = extract_mesh_from_field(&field, 32, 0.0).unwrap();
        assert!(mesh_is_watertight(&mesh), "{} triangles", mesh.triangles.len());
    }

    #[test]
    fn random_smooth_fields_extract_watertight_surfaces() {
        // Random band-limited fields hit many table cases, including the
        // ambiguous ones; interior surfaces must still close up.
        let res = 24;
        let mut rng = seeded_rng(9);
        for _ in 0..3 {
            let waves: Vec<[f32; 4]> = (0..5)
                .map(|_| {
                    [
                        rng.gen_range(-3.0f32..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(0.0..std::f32::consts::TAU),
                    ]
                })
                .collect();
            let coord = |i: usize| -1.0 + 2.0 * i as f32 / (res as f32 - 1.0);
            let mut field = vec![0.0f32; res * res * res];
            for x in 0..res {
                for y in 0..res {
                    for z in 0..res {
                        let p = [coord(x), coord(y), coord(z)];
                        // Window vanishing on the whole lattice boundary so
                        // surfaces close inside it.
                        let window = (1.0 - p[0] * p[0]) * (1.0 - p[1] * p[1]) * (1.0 - p[2] * p[2]);
                        let mut s = -0.4;
                        for w in &waves {
                            s += 0.3 * (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + w[3]).sin();
                        }
                        field[(x * res + y) * res + z] = s * window - 0.05;
                    }
                }
            }
            let mesh = extract_mesh_from_field(&field, res, 0.0).unwrap();
            if !mesh.is_empty() {
                assert!(mesh_is_watertight(&mesh));
            }
        }
    }

    #[test]
    fn iso_above_global_max_gives_empty_mesh() {
        let field = sphere_field(16, 0.5);
        let mesh = extract_mesh_from_field(&field, 16, 1.0).unwrap();
        assert!(mesh.is_empty());
    }

    #[test]
    fn lattice_density_matches_direct_query() {
        let mut rng = seeded_rng(10);
        let mut level = TriGrid::zeros(8, 3, 6).unwrap();
        for v in level.values_mut() {
            *v = rng.gen_range(-1.0f32..1.0);
        }
        let pyr = PyramidTriGrid::from_levels(vec![level]).unwrap();
        let decoder = DecoderParams::seeded(3, 6, 16, 4);
        let res = 8;
        let field = density_lattice(&pyr, &decoder, res).unwrap();
        let coord = |i: usize| -1.0 + 2.0 * i as f32 / (res as f32 - 1.0);
        for (x, y, z) in [(0usize, 0usize, 0usize), (3, 5, 2), (7, 7, 7)] {
            let features =
                query_pyramid(&pyr, Point3::new(coord(x), coord(y), coord(z))).unwrap();
            let mut hidden = vec![0.0f32; decoder.hidden];
            let mut colors = vec![0.0f32; decoder.color_features];
            let sigma = decoder.forward(&features, &mut hidden, &mut colors);
            assert_eq!(field[(x * res + y) * res + z], sigma);
        }
    }

    #[test]
    fn obj_export_is_one_based() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let mut buf = Vec::new();
        write_obj(&mesh, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("v 0 0 0"));
        assert!(text.trim_end().ends_with("f 1 2 3"));
    }
}
