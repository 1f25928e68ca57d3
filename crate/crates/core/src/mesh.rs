//! Structured triangulations of axis-aligned squares.
//!
//! Meshes are built as `2^l x 2^l` grids of squares, each halved along the
//! lower-left to upper-right diagonal. Vertices are numbered lexicographically
//! by `(y, x)` so that sparsity patterns and CSV output are reproducible.
//! Two refinement operators are provided: regular red refinement (four similar
//! children per triangle) and a single sweep of longest-edge bisection.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// An axis-aligned square `[lower, lower + side]^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SquareDomain {
    lower: [f64; 2],
    side: f64,
}

impl SquareDomain {
    /// Square from its lower-left and upper-right corners.
    pub fn from_corners(lower: [f64; 2], upper: [f64; 2]) -> Result<Self> {
        let sx = upper[0] - lower[0];
        let sy = upper[1] - lower[1];
        if !(sx.is_finite() && sy.is_finite() && lower.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("non-finite domain corners".into()));
        }
        if sx <= 0.0 || sy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "domain side must be positive, got {sx} x {sy}"
            )));
        }
        if (sx - sy).abs() > 1e-12 * sx.max(sy) {
            return Err(Error::InvalidArgument(format!(
                "domain must be a square, got {sx} x {sy}"
            )));
        }
        Ok(Self { lower, side: sx })
    }

    pub fn unit() -> Self {
        Self { lower: [0.0, 0.0], side: 1.0 }
    }

    /// `(-1/2, 1/2)^2`.
    pub fn centered_unit() -> Self {
        Self { lower: [-0.5, -0.5], side: 1.0 }
    }

    pub fn lower(&self) -> [f64; 2] {
        self.lower
    }

    pub fn upper(&self) -> [f64; 2] {
        [self.lower[0] + self.side, self.lower[1] + self.side]
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn area(&self) -> f64 {
        self.side * self.side
    }
}

/// Conforming 2D triangulation with counterclockwise triangles.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshStats {
    pub h: f64,
    pub gamma: f64,
    pub n_vertices: usize,
    pub n_triangles: usize,
    pub area: f64,
}

/// Result of a refinement: the fine mesh plus, for every fine vertex, the two
/// coarse vertices whose midpoint it is (a repeated index for inherited ones).
#[derive(Clone, Debug)]
pub struct Refinement {
    pub mesh: Mesh,
    pub parents: Vec<[usize; 2]>,
}

impl Mesh {
    /// Validates and wraps raw mesh data.
    ///
    /// Checks index bounds, positive (counterclockwise) element areas,
    /// distinct vertex coordinates and conformity of shared edges.
    pub fn new(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(Error::InvalidMesh("mesh has no vertices or no triangles".into()));
        }
        for (k, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidMesh(format!("triangle {k} references a missing vertex")));
            }
            let area = signed_area(&vertices, tri);
            if !(area > 0.0) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {k} has non-positive area {area:e}"
                )));
            }
        }
        let mut seen = HashMap::with_capacity(vertices.len());
        for (i, v) in vertices.iter().enumerate() {
            if !(v[0].is_finite() && v[1].is_finite()) {
                return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
            }
            if let Some(j) = seen.insert((v[0].to_bits(), v[1].to_bits()), i) {
                return Err(Error::InvalidMesh(format!("vertices {j} and {i} coincide")));
            }
        }
        // each directed edge may appear once; an undirected edge at most twice
        let mut directed = HashMap::with_capacity(3 * triangles.len());
        for (k, tri) in triangles.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                if directed.insert((a, b), k).is_some() {
                    return Err(Error::InvalidMesh(format!(
                        "edge ({a}, {b}) is used twice with the same orientation"
                    )));
                }
            }
        }
        let mut used = vec![false; vertices.len()];
        triangles.iter().flatten().for_each(|&v| used[v] = true);
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::InvalidMesh(format!("vertex {i} belongs to no triangle")));
        }
        let h = triangles
            .iter()
            .map(|t| diameter(&vertices, t))
            .fold(0.0, f64::max);
        let mesh = Self { vertices, triangles, h };
        mesh.check_hanging_nodes()?;
        Ok(mesh)
    }

    /// A vertex lying in the interior of another triangle's boundary edge
    /// breaks conformity even though every edge appears at most twice.
    fn check_hanging_nodes(&self) -> Result<()> {
        let boundary = self.boundary_edges();
        // the boundary of a conforming mesh of a simply connected domain has
        // as many edges as boundary vertices
        let mut on_boundary = vec![0usize; self.vertices.len()];
        for &(a, b) in &boundary {
            on_boundary[a] += 1;
            on_boundary[b] += 1;
        }
        if let Some(v) = on_boundary.iter().position(|&c| c != 0 && c != 2) {
            return Err(Error::InvalidMesh(format!(
                "vertex {v} is a hanging node or the boundary is not a closed curve"
            )));
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Mesh size: maximal element diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Spatial dimension; the data layout is fixed to planar meshes.
    pub fn dimension(&self) -> usize {
        2
    }

    pub fn triangle_area(&self, k: usize) -> f64 {
        signed_area(&self.vertices, &self.triangles[k])
    }

    pub fn triangle_points(&self, k: usize) -> [[f64; 2]; 3] {
        let t = self.triangles[k];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<_> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |e| ordered(t[e], t[(e + 1) % 3])))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Edges that belong to exactly one triangle.
    pub fn boundary_edges(&self) -> Vec<(usize, usize)> {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                *count.entry(ordered(t[e], t[(e + 1) % 3])).or_default() += 1;
            }
        }
        let mut b: Vec<_> = count.into_iter().filter(|&(_, c)| c == 1).map(|(e, _)| e).collect();
        b.sort_unstable();
        b
    }

    /// Number of triangles sharing each edge of [`Mesh::edges`].
    pub fn edge_multiplicities(&self) -> Vec<((usize, usize), usize)> {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                *count.entry(ordered(t[e], t[(e + 1) % 3])).or_default() += 1;
            }
        }
        let mut v: Vec<_> = count.into_iter().collect();
        v.sort_unstable();
        v
    }

    pub fn stats(&self) -> MeshStats {
        let mut gamma: f64 = 1.0;
        let mut area = 0.0;
        for k in 0..self.triangles.len() {
            let a = self.triangle_area(k);
            area += a;
            gamma = gamma.max(self.h / a.sqrt());
        }
        MeshStats {
            h: self.h,
            gamma,
            n_vertices: self.vertices.len(),
            n_triangles: self.triangles.len(),
            area,
        }
    }

    /// Plain-text dump: `nv nt`, then `x y` per vertex, then `i j k` per
    /// triangle (0-based).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.vertices.len(), self.triangles.len());
        for v in &self.vertices {
            let _ = writeln!(s, "{:.17e} {:.17e}", v[0], v[1]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidMesh(format!("mesh text: {msg}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| bad("empty input"))?;
        let counts: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad header")))
            .collect::<Result<_>>()?;
        let [nv, nt] = counts[..] else {
            return Err(bad("header must be `nv nt`"));
        };
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let l = lines.next().ok_or_else(|| bad("missing vertex line"))?;
            let c: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad coordinate")))
                .collect::<Result<_>>()?;
            let [x, y] = c[..] else { return Err(bad("vertex line must be `x y`")) };
            vertices.push([x, y]);
        }
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let l = lines.next().ok_or_else(|| bad("missing triangle line"))?;
            let c: Vec<usize> = l
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad index")))
                .collect::<Result<_>>()?;
            let [i, j, k] = c[..] else { return Err(bad("triangle line must be `i j k`")) };
            triangles.push([i, j, k]);
        }
        if lines.next().is_some() {
            return Err(bad("trailing data"));
        }
        Self::new(vertices, triangles)
    }
}

/// Uniform grid of `2^level x 2^level` squares, each split along the
/// lower-left to upper-right diagonal into two right isosceles triangles.
pub fn build_structured_mesh(domain: &SquareDomain, level: u32) -> Mesh {
    let n = 1usize << level;
    let [x0, y0] = domain.lower;
    let side = domain.side;
    let coord = |i: usize| i as f64 / n as f64 * side;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for iy in 0..=n {
        for ix in 0..=n {
            vertices.push([x0 + coord(ix), y0 + coord(iy)]);
        }
    }
    let id = |ix: usize, iy: usize| iy * (n + 1) + ix;
    let mut triangles = Vec::with_capacity(2 * n * n);
    for iy in 0..n {
        for ix in 0..n {
            let (a, b, c, d) = (id(ix, iy), id(ix + 1, iy), id(ix + 1, iy + 1), id(ix, iy + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let h = side / n as f64 * std::f64::consts::SQRT_2;
    Mesh { vertices, triangles, h }
}

/// Red refinement: every triangle is split into four similar children
/// through its edge midpoints.
pub fn refine_uniform(mesh: &Mesh) -> Mesh {
    refine_uniform_with_parents(mesh).mesh
}

pub fn refine_uniform_with_parents(mesh: &Mesh) -> Refinement {
    let mut builder = MidpointBuilder::new(mesh);
    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    for t in &mesh.triangles {
        let [a, b, c] = *t;
        let ab = builder.midpoint(a, b);
        let bc = builder.midpoint(b, c);
        let ca = builder.midpoint(c, a);
        triangles.push([a, ab, ca]);
        triangles.push([ab, b, bc]);
        triangles.push([ca, bc, c]);
        triangles.push([ab, bc, ca]);
    }
    builder.finish(triangles)
}

/// One sweep of longest-edge bisection: every triangle is split into two
/// through the midpoint of its longest edge.
///
/// Fails if the result is not conforming, i.e. if some neighbour pair does
/// not share its longest edge (this never happens on the structured meshes
/// produced here).
pub fn bisect_uniform(mesh: &Mesh) -> Result<Refinement> {
    let mut builder = MidpointBuilder::new(mesh);
    let mut triangles = Vec::with_capacity(2 * mesh.triangles.len());
    for t in &mesh.triangles {
        // opposite vertex of the longest edge; first one wins ties
        let mut apex = 0;
        let mut longest = -1.0;
        for k in 0..3 {
            let l = dist2(mesh.vertices[t[(k + 1) % 3]], mesh.vertices[t[(k + 2) % 3]]);
            if l > longest * (1.0 + 1e-12) {
                longest = l;
                apex = k;
            }
        }
        let (v0, v1, v2) = (t[apex], t[(apex + 1) % 3], t[(apex + 2) % 3]);
        let m = builder.midpoint(v1, v2);
        triangles.push([v0, v1, m]);
        triangles.push([v0, m, v2]);
    }
    let refined = builder.finish(triangles);
    Mesh::new(refined.mesh.vertices.clone(), refined.mesh.triangles.clone())?;
    Ok(refined)
}

/// Collects edge midpoints and renumbers the fine vertices by `(y, x)`.
struct MidpointBuilder<'a> {
    coarse: &'a Mesh,
    vertices: Vec<[f64; 2]>,
    parents: Vec<[usize; 2]>,
    midpoints: HashMap<(usize, usize), usize>,
}

impl<'a> MidpointBuilder<'a> {
    fn new(coarse: &'a Mesh) -> Self {
        Self {
            coarse,
            vertices: coarse.vertices.clone(),
            parents: (0..coarse.vertices.len()).map(|i| [i, i]).collect(),
            midpoints: HashMap::new(),
        }
    }

    fn midpoint(&mut self, a: usize, b: usize) -> usize {
        let key = ordered(a, b);
        if let Some(&m) = self.midpoints.get(&key) {
            return m;
        }
        let (pa, pb) = (self.coarse.vertices[key.0], self.coarse.vertices[key.1]);
        let m = self.vertices.len();
        self.vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
        self.parents.push([key.0, key.1]);
        self.midpoints.insert(key, m);
        m
    }

    fn finish(self, triangles: Vec<[usize; 3]>) -> Refinement {
        let mut order: Vec<usize> = (0..self.vertices.len()).collect();
        order.sort_by(|&i, &j| {
            let (p, q) = (self.vertices[i], self.vertices[j]);
            p[1].total_cmp(&q[1]).then(p[0].total_cmp(&q[0]))
        });
        let mut new_index = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let vertices: Vec<_> = order.iter().map(|&i| self.vertices[i]).collect();
        let parents: Vec<_> = order.iter().map(|&i| self.parents[i]).collect();
        let triangles: Vec<_> = triangles
            .into_iter()
            .map(|t| [new_index[t[0]], new_index[t[1]], new_index[t[2]]])
            .collect();
        let h = triangles.iter().map(|t| diameter(&vertices, t)).fold(0.0, f64::max);
        Refinement { mesh: Mesh { vertices, triangles, h }, parents }
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn dist2(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
}

fn signed_area(vertices: &[[f64; 2]], t: &[usize; 3]) -> f64 {
    let (a, b, c) = (vertices[t[0]], vertices[t[1]], vertices[t[2]]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn diameter(vertices: &[[f64; 2]], t: &[usize; 3]) -> f64 {
    let (a, b, c) = (vertices[t[0]], vertices[t[1]], vertices[t[2]]);
    dist2(a, b).max(dist2(b, c)).max(dist2(c, a)).sqrt()
}
