//! Triangulations of the unit square with rectangular holes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OedError, Result};

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains_strict(&self, p: [f64; 2]) -> bool {
        p[0] > self.x0 && p[0] < self.x1 && p[1] > self.y0 && p[1] < self.y1
    }

    /// Euclidean distance from `p` to the closed rectangle (0 inside).
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let dx = (self.x0 - p[0]).max(0.0).max(p[0] - self.x1);
        let dy = (self.y0 - p[1]).max(0.0).max(p[1] - self.y1);
        dx.hypot(dy)
    }

    /// Closed rectangles share at least one point.
    pub fn touches(&self, other: &Rect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// The two buildings of the default domain.
pub fn default_holes() -> Vec<Rect> {
    vec![Rect::new(0.25, 0.15, 0.5, 0.4), Rect::new(0.6, 0.6, 0.85, 0.85)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryTag {
    Outer,
    Building,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary: Vec<BoundaryEdge>,
    pub holes: Vec<Rect>,
}

/// Point location result: containing triangle and barycentric coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub triangle: usize,
    pub barycentric: [f64; 3],
}

pub(crate) fn signed_area(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

fn validate_holes(holes: &[Rect]) -> Result<()> {
    for (k, h) in holes.iter().enumerate() {
        if !(h.x0 < h.x1 && h.y0 < h.y1) {
            return Err(OedError::Geometry(format!("hole {k} has empty extent")));
        }
        if !(h.x0 > 0.0 && h.y0 > 0.0 && h.x1 < 1.0 && h.y1 < 1.0) {
            return Err(OedError::Geometry(format!(
                "hole {k} touches or crosses the outer boundary"
            )));
        }
        for (m, g) in holes.iter().enumerate().skip(k + 1) {
            if h.touches(g) {
                return Err(OedError::Geometry(format!("holes {k} and {m} overlap or touch")));
            }
        }
    }
    Ok(())
}

/// Uniform grid lines on [0, 1] with interior lines moved onto `targets`.
fn snapped_lines(resolution: usize, targets: &[f64]) -> Result<Vec<f64>> {
    let h = 1.0 / resolution as f64;
    let mut lines: Vec<f64> = (0..=resolution).map(|i| i as f64 * h).collect();
    let mut taken = vec![false; resolution + 1];
    let mut sorted: Vec<f64> = targets.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    for &t in &sorted {
        let mut candidates: Vec<usize> = (1..resolution).filter(|&i| !taken[i]).collect();
        candidates.sort_by(|&a, &b| ((a as f64 * h - t).abs()).total_cmp(&(b as f64 * h - t).abs()));
        let Some(&best) = candidates.first() else {
            return Err(OedError::Geometry(format!(
                "resolution {resolution} has too few grid lines for the hole edges"
            )));
        };
        taken[best] = true;
        lines[best] = t;
    }
    if lines.windows(2).any(|w| w[1] <= w[0]) {
        return Err(OedError::Geometry(format!(
            "resolution {resolution} is too coarse to resolve the holes"
        )));
    }
    Ok(lines)
}

/// Structured right-triangle mesh of `[0,1]²` minus `holes`.
///
/// Grid lines closest to hole edges are moved onto them, so hole boundaries
/// are always resolved exactly and no cell straddles a hole.
pub fn build_structured_mesh(resolution: usize, holes: &[Rect]) -> Result<Mesh> {
    if resolution < 2 {
        return Err(OedError::InvalidParameter(format!(
            "mesh resolution must be at least 2, got {resolution}"
        )));
    }
    validate_holes(holes)?;
    let xt: Vec<f64> = holes.iter().flat_map(|h| [h.x0, h.x1]).collect();
    let yt: Vec<f64> = holes.iter().flat_map(|h| [h.y0, h.y1]).collect();
    let xs = snapped_lines(resolution, &xt)?;
    let ys = snapped_lines(resolution, &yt)?;

    let r = resolution;
    let cell_kept = |i: usize, j: usize| {
        let c = [0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])];
        !holes.iter().any(|h| h.contains_strict(c))
    };
    let mut used = vec![false; (r + 1) * (r + 1)];
    let grid = |i: usize, j: usize| j * (r + 1) + i;
    for j in 0..r {
        for i in 0..r {
            if cell_kept(i, j) {
                for (a, b) in [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)] {
                    used[grid(a, b)] = true;
                }
            }
        }
    }
    let mut index = vec![usize::MAX; used.len()];
    let mut nodes = Vec::new();
    for j in 0..=r {
        for i in 0..=r {
            if used[grid(i, j)] {
                index[grid(i, j)] = nodes.len();
                nodes.push([xs[i], ys[j]]);
            }
        }
    }
    let mut triangles = Vec::with_capacity(2 * r * r);
    for j in 0..r {
        for i in 0..r {
            if !cell_kept(i, j) {
                continue;
            }
            let a = index[grid(i, j)];
            let b = index[grid(i + 1, j)];
            let c = index[grid(i + 1, j + 1)];
            let d = index[grid(i, j + 1)];
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let boundary = boundary_edges(&nodes, &triangles)?;
    let mesh = Mesh {
        nodes,
        triangles,
        boundary,
        holes: holes.to_vec(),
    };
    mesh.validate()?;
    Ok(mesh)
}

fn on_outer_boundary(p: [f64; 2]) -> [bool; 4] {
    let tol = 1e-12;
    [p[0].abs() < tol, (p[0] - 1.0).abs() < tol, p[1].abs() < tol, (p[1] - 1.0).abs() < tol]
}

fn boundary_edges(nodes: &[[f64; 2]], triangles: &[[usize; 3]]) -> Result<Vec<BoundaryEdge>> {
    let mut count: HashMap<(usize, usize), usize> = HashMap::new();
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    let mut edges = Vec::new();
    for (&(a, b), &c) in &count {
        match c {
            1 => {
                let (fa, fb) = (on_outer_boundary(nodes[a]), on_outer_boundary(nodes[b]));
                let outer = (0..4).any(|s| fa[s] && fb[s]);
                edges.push(BoundaryEdge {
                    nodes: [a, b],
                    tag: if outer { BoundaryTag::Outer } else { BoundaryTag::Building },
                });
            }
            2 => {}
            _ => {
                return Err(OedError::Geometry(format!(
                    "edge ({a}, {b}) is shared by {c} triangles"
                )))
            }
        }
    }
    edges.sort_by_key(|e| e.nodes);
    Ok(edges)
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    pub fn area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.triangle_area(t)).sum()
    }

    /// Checks positive orientation, hole clearance and conformity.
    pub fn validate(&self) -> Result<()> {
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= self.nodes.len()) {
                return Err(OedError::Geometry(format!("triangle {t} references a missing node")));
            }
            let area = self.triangle_area(t);
            if !(area > 0.0) {
                return Err(OedError::DegenerateTriangle { index: t, area });
            }
        }
        for (i, p) in self.nodes.iter().enumerate() {
            if self.holes.iter().any(|h| h.contains_strict(*p)) {
                return Err(OedError::Geometry(format!("node {i} lies inside a hole")));
            }
        }
        boundary_edges(&self.nodes, &self.triangles)?;
        Ok(())
    }

    /// True when `p` lies in the closed domain and outside every hole interior.
    pub fn in_domain(&self, p: [f64; 2]) -> bool {
        self.locate(p).is_ok()
    }

    /// Finds the triangle containing `p` and its barycentric coordinates.
    pub fn locate(&self, p: [f64; 2]) -> Result<Location> {
        if self.holes.iter().any(|h| h.contains_strict(p)) {
            return Err(OedError::Location { x: p[0], y: p[1] });
        }
        let tol = 1e-12;
        let mut best: Option<(f64, Location)> = None;
        for (t, tri) in self.triangles.iter().enumerate() {
            let [a, b, c] = tri.map(|v| self.nodes[v]);
            let area = signed_area(a, b, c);
            let l0 = signed_area(p, b, c) / area;
            let l1 = signed_area(a, p, c) / area;
            let l2 = 1.0 - l0 - l1;
            let worst = l0.min(l1).min(l2);
            if worst >= -tol && best.as_ref().is_none_or(|(w, _)| worst > *w) {
                let clamp = [l0.max(0.0), l1.max(0.0), l2.max(0.0)];
                let s: f64 = clamp.iter().sum();
                best = Some((
                    worst,
                    Location {
                        triangle: t,
                        barycentric: clamp.map(|v| v / s),
                    },
                ));
                if worst >= 0.0 {
                    break;
                }
            }
        }
        best.map(|(_, loc)| loc).ok_or(OedError::Location { x: p[0], y: p[1] })
    }

    /// Plain-text mesh: `n_nodes n_triangles`, node lines `x y`, then 0-based `i j k`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.n_nodes(), self.n_triangles());
        for p in &self.nodes {
            let _ = writeln!(s, "{:.17e} {:.17e}", p[0], p[1]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    /// Parses the plain-text format. Clockwise triangles are reoriented.
    pub fn from_text(text: &str) -> Result<Mesh> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hl, header) = lines.next().ok_or(OedError::Parse {
            line: 1,
            message: "empty mesh file".into(),
        })?;
        let counts = parse_fields::<usize>(header, 2, hl)?;
        let (nn, nt) = (counts[0], counts[1]);
        let mut nodes = Vec::with_capacity(nn);
        for _ in 0..nn {
            let (ln, l) = lines.next().ok_or(OedError::Parse {
                line: hl,
                message: format!("expected {nn} node lines"),
            })?;
            let v = parse_fields::<f64>(l, 2, ln)?;
            nodes.push([v[0], v[1]]);
        }
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = lines.next().ok_or(OedError::Parse {
                line: hl,
                message: format!("expected {nt} triangle lines"),
            })?;
            let v = parse_fields::<usize>(l, 3, ln)?;
            if v.iter().any(|&i| i >= nn) {
                return Err(OedError::Parse {
                    line: ln,
                    message: "node index out of range".into(),
                });
            }
            let mut t = [v[0], v[1], v[2]];
            if signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) < 0.0 {
                t.swap(1, 2);
            }
            triangles.push(t);
        }
        let boundary = boundary_edges(&nodes, &triangles)?;
        Ok(Mesh {
            nodes,
            triangles,
            boundary,
            holes: Vec::new(),
        })
    }

    pub fn read(path: &Path) -> Result<Mesh> {
        Mesh::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub(crate) fn parse_fields<T: std::str::FromStr>(line: &str, expected: usize, line_no: usize) -> Result<Vec<T>> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != expected {
        return Err(OedError::Parse {
            line: line_no,
            message: format!("expected {expected} fields, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<T>().map_err(|_| OedError::Parse {
                line: line_no,
                message: format!("cannot parse '{f}'"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn structured_counts() {
        let m = build_structured_mesh(2, &[]).unwrap();
        assert_eq!((m.n_nodes(), m.n_triangles()), (9, 8));
        let m = build_structured_mesh(4, &[]).unwrap();
        assert_eq!((m.n_nodes(), m.n_triangles()), (25, 32));
        assert_eq!(m.boundary.len(), 16);
        assert!(m.boundary.iter().all(|e| e.tag == BoundaryTag::Outer));
    }

    #[test]
    fn default_domain_is_near_reference_size() {
        let m = build_structured_mesh(crate::DEFAULT_RESOLUTION, &default_holes()).unwrap();
        let n = m.n_nodes() as f64;
        assert!((n - 1012.0).abs() <= 0.2 * 1012.0, "n = {n}");
        let area = 1.0 - default_holes().iter().map(Rect::area).sum::<f64>();
        assert!((m.area() - area).abs() < 1e-12);
        assert!(m.boundary.iter().any(|e| e.tag == BoundaryTag::Building));
        m.validate().unwrap();
    }

    #[test]
    fn holes_touching_boundary_or_each_other_are_rejected() {
        let touching = [Rect::new(0.0, 0.2, 0.3, 0.4)];
        assert!(matches!(build_structured_mesh(8, &touching), Err(OedError::Geometry(_))));
        let overlapping = [Rect::new(0.2, 0.2, 0.5, 0.5), Rect::new(0.4, 0.4, 0.7, 0.7)];
        assert!(matches!(build_structured_mesh(8, &overlapping), Err(OedError::Geometry(_))));
    }

    #[test]
    fn unaligned_holes_are_snapped_exactly() {
        let holes = [Rect::new(0.23, 0.31, 0.41, 0.57)];
        let m = build_structured_mesh(10, &holes).unwrap();
        assert!((m.area() - (1.0 - holes[0].area())).abs() < 1e-12);
    }

    #[test]
    fn locate_vertex_centroid_and_random_points() {
        let m = build_structured_mesh(6, &default_holes()).unwrap();
        let tri = m.triangles[5];
        let loc = m.locate(m.nodes[tri[0]]).unwrap();
        let mut b = loc.barycentric;
        b.sort_by(f64::total_cmp);
        assert!((b[2] - 1.0).abs() < 1e-12 && b[0].abs() < 1e-12);

        let c = [0, 1].map(|d| tri.iter().map(|&v| m.nodes[v][d]).sum::<f64>() / 3.0);
        let loc = m.locate(c).unwrap();
        assert_eq!(loc.triangle, 5);
        for l in loc.barycentric {
            assert!((l - 1.0 / 3.0).abs() < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 50 {
            let p = [rng.random::<f64>(), rng.random::<f64>()];
            let Ok(loc) = m.locate(p) else { continue };
            let t = m.triangles[loc.triangle];
            for d in 0..2 {
                let r: f64 = (0..3).map(|k| loc.barycentric[k] * m.nodes[t[k]][d]).sum();
                assert!((r - p[d]).abs() < 1e-12);
            }
            let s: f64 = loc.barycentric.iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            checked += 1;
        }
    }

    #[test]
    fn locate_rejects_holes_and_outside() {
        let m = build_structured_mesh(8, &default_holes()).unwrap();
        assert!(matches!(m.locate([0.3, 0.3]), Err(OedError::Location { .. })));
        assert!(matches!(m.locate([1.2, 0.5]), Err(OedError::Location { .. })));
        assert!(m.locate([0.25, 0.3]).is_ok());
    }

    #[test]
    fn text_round_trip_and_reorientation() {
        let m = build_structured_mesh(5, &[]).unwrap();
        let back = Mesh::from_text(&m.to_text()).unwrap();
        assert_eq!(back.nodes, m.nodes);
        assert_eq!(back.triangles, m.triangles);

        let cw = "3 1\n0 0\n1 0\n0 1\n0 2 1\n";
        let t = Mesh::from_text(cw).unwrap();
        assert!(t.triangle_area(0) > 0.0);
        assert!(matches!(Mesh::from_text("3 1\n0 0\n1 0\n"), Err(OedError::Parse { .. })));
    }
}
