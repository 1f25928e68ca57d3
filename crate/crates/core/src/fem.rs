//! P1 finite elements on triangles: nodal fields, quadrature, assembly of
//! the mass, stiffness and cross-product forms, and the spatial norms used
//! by the integrators and diagnostics.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::sparse::SparseMatrix;

pub type Vec3 = Vector3<f64>;

/// One `R^3` vector per mesh vertex, read as a continuous piecewise affine
/// function.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalField {
    values: Vec<Vec3>,
}

impl NodalField {
    pub fn new(values: Vec<Vec3>) -> Result<Self> {
        if let Some(node) = values.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite { node });
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![Vec3::zeros(); n] }
    }

    pub fn constant(n: usize, v: Vec3) -> Self {
        Self { values: vec![v; n] }
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::InvalidArgument("flat field length is not a multiple of 3".into()));
        }
        Self::new(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Vec3] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec3] {
        &mut self.values
    }

    pub fn ensure_len(&self, n: usize) -> Result<()> {
        if self.values.len() != n {
            return Err(Error::MeshMismatch { expected: n, found: self.values.len() });
        }
        Ok(())
    }

    /// `sum_k c_k f_k` over fields of equal length.
    pub fn combination(terms: &[(f64, &NodalField)]) -> Self {
        let n = terms[0].1.len();
        let mut values = vec![Vec3::zeros(); n];
        for (c, f) in terms {
            assert_eq!(f.len(), n);
            for (acc, v) in values.iter_mut().zip(&f.values) {
                *acc += *c * v;
            }
        }
        Self { values }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|v| s * v).collect() }
    }

    /// Rescales every node to unit length. Fails on a zero node.
    pub fn normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        for (z, v) in out.values.iter_mut().enumerate() {
            let n = v.norm();
            if !(n > 0.0) {
                return Err(Error::InvalidArgument(format!("cannot normalize zero vector at node {z}")));
            }
            *v /= n;
        }
        Ok(out)
    }

    /// `max_z |u(z) - v(z)|`
    pub fn max_nodal_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_nodal_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// CSV with columns `node_index,x,y,mx,my,mz`.
    pub fn to_csv(&self, mesh: &Mesh) -> Result<String> {
        self.ensure_len(mesh.n_vertices())?;
        let mut s = String::from("node_index,x,y,mx,my,mz\n");
        for (i, (p, v)) in mesh.vertices().iter().zip(&self.values).enumerate() {
            let _ = writeln!(
                s,
                "{i},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                p[0], p[1], v.x, v.y, v.z
            );
        }
        Ok(s)
    }
}

/// Nodal interpolant of `f(., t)`.
pub fn interpolate_nodal<F>(mesh: &Mesh, t: f64, f: F) -> Result<NodalField>
where
    F: Fn([f64; 2], f64) -> Vec3,
{
    NodalField::new(mesh.vertices().iter().map(|&p| f(p, t)).collect())
}

/// P1 prolongation along a refinement: each fine node takes the mean of its
/// two parent values. Exact for P1 functions on nested meshes.
pub fn prolongate(coarse: &NodalField, parents: &[[usize; 2]]) -> NodalField {
    NodalField {
        values: parents
            .iter()
            .map(|&[a, b]| {
                if a == b {
                    coarse.values[a]
                } else {
                    0.5 * (coarse.values[a] + coarse.values[b])
                }
            })
            .collect(),
    }
}

/// Symmetric quadrature rule on the reference triangle with barycentric
/// points; weights are normalized to sum to one.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub degree: u32,
}

impl QuadratureRule {
    /// 4-point rule, exact for cubics (negative centroid weight).
    pub fn degree3() -> Self {
        let (a, b) = (0.6, 0.2);
        Self {
            points: vec![[1.0 / 3.0; 3], [a, b, b], [b, a, b], [b, b, a]],
            weights: vec![-27.0 / 48.0, 25.0 / 48.0, 25.0 / 48.0, 25.0 / 48.0],
            degree: 3,
        }
    }

    /// 6-point Dunavant rule, exact for quartics.
    pub fn degree4() -> Self {
        let (a1, w1) = (0.445_948_490_915_965, 0.223_381_589_678_011);
        let (a2, w2) = (0.091_576_213_509_771, 0.109_951_743_655_322);
        let (b1, b2) = (1.0 - 2.0 * a1, 1.0 - 2.0 * a2);
        Self {
            points: vec![[b1, a1, a1], [a1, b1, a1], [a1, a1, b1], [b2, a2, a2], [a2, b2, a2], [a2, a2, b2]],
            weights: vec![w1, w1, w1, w2, w2, w2],
            degree: 4,
        }
    }

    /// `int_K g` for `g` given in barycentric coordinates.
    pub fn integrate(&self, area: f64, g: impl Fn([f64; 3]) -> f64) -> f64 {
        area * self.points.iter().zip(&self.weights).map(|(p, w)| w * g(*p)).sum::<f64>()
    }
}

/// Sparsity pattern of the node adjacency graph (diagonal included), with
/// each element's local entries mapped to pattern slots.
#[derive(Debug)]
pub(crate) struct NodePattern {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub element_slots: Vec<[[usize; 3]; 3]>,
}

impl NodePattern {
    fn new(mesh: &Mesh) -> Self {
        let n = mesh.n_vertices();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for t in mesh.triangles() {
            for &a in t {
                adj[a].extend_from_slice(t);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            cols.extend_from_slice(row);
            row_ptr.push(cols.len());
        }
        let slot = |i: usize, j: usize| {
            let r = row_ptr[i]..row_ptr[i + 1];
            r.start + cols[r].binary_search(&j).expect("pattern entry")
        };
        let element_slots = mesh
            .triangles()
            .iter()
            .map(|t| {
                let mut s = [[0; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        s[a][b] = slot(t[a], t[b]);
                    }
                }
                s
            })
            .collect();
        Self { row_ptr, cols, element_slots }
    }

    pub fn n(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    fn scalar_to_sparse(&self, values: &[f64]) -> SparseMatrix {
        let lens: Vec<usize> = (0..self.n()).map(|i| self.row_range(i).len()).collect();
        SparseMatrix::from_sorted_rows(self.n(), self.cols.iter().copied().zip(values.iter().copied()), &lens)
    }
}

/// Operator on nodal `R^3` fields stored as one 3x3 block per pattern entry.
#[derive(Clone, Debug)]
pub struct BlockOperator {
    pattern: Arc<NodePattern>,
    blocks: Vec<Matrix3<f64>>,
}

impl BlockOperator {
    fn zeros(pattern: Arc<NodePattern>) -> Self {
        let blocks = vec![Matrix3::zeros(); pattern.nnz()];
        Self { pattern, blocks }
    }

    /// Adds `c * S_ij * I` for a pattern-aligned scalar matrix `S`.
    pub(crate) fn add_scalar(&mut self, c: f64, scalar: &[f64]) {
        for (b, s) in self.blocks.iter_mut().zip(scalar) {
            let d = c * s;
            b[(0, 0)] += d;
            b[(1, 1)] += d;
            b[(2, 2)] += d;
        }
    }

    pub fn add_scaled(&mut self, c: f64, other: &BlockOperator) {
        for (b, o) in self.blocks.iter_mut().zip(&other.blocks) {
            *b += c * o;
        }
    }

    pub(crate) fn pattern(&self) -> &NodePattern {
        &self.pattern
    }

    pub(crate) fn blocks(&self) -> &[Matrix3<f64>] {
        &self.blocks
    }

    pub fn apply(&self, v: &NodalField) -> NodalField {
        let p = &self.pattern;
        let values = (0..p.n())
            .map(|i| {
                p.row_range(i)
                    .map(|k| self.blocks[k] * v.values[p.cols[k]])
                    .fold(Vec3::zeros(), |a, b| a + b)
            })
            .collect();
        NodalField { values }
    }

    /// Full `3M x 3M` matrix with node-major ordering `3 z + component`.
    pub fn to_sparse(&self) -> SparseMatrix {
        let p = &self.pattern;
        let n = p.n();
        let mut lens = Vec::with_capacity(3 * n);
        let mut entries = Vec::with_capacity(9 * p.nnz());
        for i in 0..n {
            for a in 0..3 {
                lens.push(3 * p.row_range(i).len());
                for k in p.row_range(i) {
                    for b in 0..3 {
                        entries.push((3 * p.cols[k] + b, self.blocks[k][(a, b)]));
                    }
                }
            }
        }
        SparseMatrix::from_sorted_rows(3 * n, entries.into_iter(), &lens)
    }
}

/// Mesh-dependent data shared by every solve on one mesh: the node pattern,
/// the scalar mass and stiffness matrices, element areas and gradients.
#[derive(Clone, Debug)]
pub struct FemSpace {
    mesh: Arc<Mesh>,
    pattern: Arc<NodePattern>,
    mass: Vec<f64>,
    stiffness: Vec<f64>,
    areas: Vec<f64>,
    grads: Vec<[[f64; 2]; 3]>,
    /// `int_K l_a l_b l_c / |K|`, identical on every element
    triple: [[[f64; 3]; 3]; 3],
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>) -> Self {
        let pattern = Arc::new(NodePattern::new(&mesh));
        let nt = mesh.n_triangles();
        let mut areas = Vec::with_capacity(nt);
        let mut grads = Vec::with_capacity(nt);
        let mut mass = vec![0.0; pattern.nnz()];
        let mut stiffness = vec![0.0; pattern.nnz()];
        for k in 0..nt {
            let area = mesh.triangle_area(k);
            let g = barycentric_gradients(&mesh.triangle_points(k), area);
            let slots = &pattern.element_slots[k];
            for a in 0..3 {
                for b in 0..3 {
                    mass[slots[a][b]] += area / 12.0 * if a == b { 2.0 } else { 1.0 };
                    stiffness[slots[a][b]] += area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                }
            }
            areas.push(area);
            grads.push(g);
        }
        let rule = QuadratureRule::degree3();
        let mut triple = [[[0.0; 3]; 3]; 3];
        for a in 0..3 {
            for b in a..3 {
                for c in b..3 {
                    let v = rule.integrate(1.0, |l| l[a] * l[b] * l[c]);
                    for (i, j, k) in [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)] {
                        triple[i][j][k] = v;
                    }
                }
            }
        }
        Self { mesh, pattern, mass, stiffness, areas, grads, triple }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.n_vertices()
    }

    pub fn mass_matrix(&self) -> SparseMatrix {
        self.pattern.scalar_to_sparse(&self.mass)
    }

    pub fn stiffness_matrix(&self) -> SparseMatrix {
        self.pattern.scalar_to_sparse(&self.stiffness)
    }

    pub(crate) fn zero_operator(&self) -> BlockOperator {
        BlockOperator::zeros(self.pattern.clone())
    }

    /// `c_m M + c_k K`, applied per component.
    pub fn scalar_operator(&self, c_mass: f64, c_stiff: f64) -> BlockOperator {
        let mut op = self.zero_operator();
        op.add_scalar(c_mass, &self.mass);
        op.add_scalar(c_stiff, &self.stiffness);
        op
    }

    /// Blocks of `b(v, phi) = <w x v, phi>` integrated exactly (cubic
    /// integrand, degree-3 rule). The result is exactly skew.
    pub fn cross_operator(&self, w: &NodalField) -> Result<BlockOperator> {
        w.ensure_len(self.n_nodes())?;
        let mut op = self.zero_operator();
        for (k, t) in self.mesh.triangles().iter().enumerate() {
            let area = self.areas[k];
            let slots = &self.pattern.element_slots[k];
            let wk = [w.values[t[0]], w.values[t[1]], w.values[t[2]]];
            for a in 0..3 {
                for b in 0..3 {
                    let mut s = Vec3::zeros();
                    for (c, wc) in wk.iter().enumerate() {
                        s += self.triple[a][b][c] * wc;
                    }
                    op.blocks[slots[a][b]] += area * s.cross_matrix();
                }
            }
        }
        Ok(op)
    }

    /// Blocks of `g(v, phi) = <w x grad v, grad phi>` (exact: the integrand
    /// is affine on each element).
    pub fn gradient_cross_operator(&self, w: &NodalField) -> Result<BlockOperator> {
        w.ensure_len(self.n_nodes())?;
        let mut op = self.zero_operator();
        for (k, t) in self.mesh.triangles().iter().enumerate() {
            let area = self.areas[k];
            let g = &self.grads[k];
            let wbar = (w.values[t[0]] + w.values[t[1]] + w.values[t[2]]) * (area / 3.0);
            let cm = wbar.cross_matrix();
            let slots = &self.pattern.element_slots[k];
            for a in 0..3 {
                for b in 0..3 {
                    let gg = g[a][0] * g[b][0] + g[a][1] * g[b][1];
                    op.blocks[slots[a][b]] += gg * cm;
                }
            }
        }
        Ok(op)
    }

    fn scalar_form(&self, values: &[f64], u: &NodalField, v: &NodalField) -> f64 {
        let p = &self.pattern;
        (0..p.n())
            .map(|i| {
                let ui = u.values[i];
                p.row_range(i).map(|k| values[k] * ui.dot(&v.values[p.cols[k]])).sum::<f64>()
            })
            .sum()
    }

    fn scalar_apply(&self, values: &[f64], v: &NodalField) -> NodalField {
        let p = &self.pattern;
        NodalField {
            values: (0..p.n())
                .map(|i| p.row_range(i).fold(Vec3::zeros(), |acc, k| acc + values[k] * v.values[p.cols[k]]))
                .collect(),
        }
    }

    /// `<u, v>_{L^2}`
    pub fn mass_inner(&self, u: &NodalField, v: &NodalField) -> f64 {
        self.scalar_form(&self.mass, u, v)
    }

    /// `<grad u, grad v>_{L^2}`
    pub fn stiffness_inner(&self, u: &NodalField, v: &NodalField) -> f64 {
        self.scalar_form(&self.stiffness, u, v)
    }

    pub fn l2_sq(&self, u: &NodalField) -> f64 {
        self.mass_inner(u, u)
    }

    pub fn h1_semi_sq(&self, u: &NodalField) -> f64 {
        self.stiffness_inner(u, u)
    }

    /// Load vector `(<f, psi_z e_a>)_{z,a}`.
    pub fn apply_mass(&self, v: &NodalField) -> NodalField {
        self.scalar_apply(&self.mass, v)
    }

    pub fn apply_stiffness(&self, v: &NodalField) -> NodalField {
        self.scalar_apply(&self.stiffness, v)
    }

    /// Elementwise constant gradient of `m` on triangle `k` as a 3x2 matrix
    /// (rows: components, columns: d/dx, d/dy).
    pub fn element_gradient(&self, m: &NodalField, k: usize) -> [[f64; 2]; 3] {
        let t = self.mesh.triangles()[k];
        let g = &self.grads[k];
        let mut out = [[0.0; 2]; 3];
        for (a, &node) in t.iter().enumerate() {
            let v = m.values[node];
            for c in 0..3 {
                out[c][0] += v[c] * g[a][0];
                out[c][1] += v[c] * g[a][1];
            }
        }
        out
    }

    pub fn field_norms(&self, m: &NodalField) -> Result<FieldNorms> {
        m.ensure_len(self.n_nodes())?;
        let w1inf_semi = (0..self.mesh.n_triangles())
            .map(|k| {
                let g = self.element_gradient(m, k);
                g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max);
        Ok(FieldNorms {
            l2: self.l2_sq(m).max(0.0).sqrt(),
            h1_semi: self.h1_semi_sq(m).max(0.0).sqrt(),
            linf_nodal: m.max_nodal_norm(),
            w1inf_semi,
        })
    }

    /// `(h^d sum_z |m(z)|^r)^(1/r)` with `d = 2`.
    pub fn discrete_lr_norm(&self, m: &NodalField, r: f64) -> Result<f64> {
        m.ensure_len(self.n_nodes())?;
        if !(r >= 1.0) {
            return Err(Error::InvalidArgument(format!("exponent r = {r} must be >= 1")));
        }
        let h = self.mesh.h();
        let s: f64 = m.values.iter().map(|v| v.norm().powf(r)).sum();
        Ok((h * h * s).powf(1.0 / r))
    }

    pub fn constraint_deviation(&self, m: &NodalField) -> Result<ConstraintDeviation> {
        m.ensure_len(self.n_nodes())?;
        let h = self.mesh.h();
        let nodal_l1 = h * h * m.values.iter().map(|v| (v.norm_squared() - 1.0).abs()).sum::<f64>();
        let rule = QuadratureRule::degree4();
        let quadrature_l1 = self
            .mesh
            .triangles()
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let vals = [m.values[t[0]], m.values[t[1]], m.values[t[2]]];
                rule.integrate(self.areas[k], |l| {
                    let v = l[0] * vals[0] + l[1] * vals[1] + l[2] * vals[2];
                    (v.norm_squared() - 1.0).abs()
                })
            })
            .sum();
        Ok(ConstraintDeviation { nodal_l1, quadrature_l1 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldNorms {
    pub l2: f64,
    pub h1_semi: f64,
    pub linf_nodal: f64,
    pub w1inf_semi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintDeviation {
    /// `h^2 sum_z ||m(z)|^2 - 1|`
    pub nodal_l1: f64,
    /// `int ||m|^2 - 1|` with the absolute value taken at quadrature points
    pub quadrature_l1: f64,
}

pub fn assemble_mass(mesh: &Mesh) -> SparseMatrix {
    FemSpace::new(Arc::new(mesh.clone())).mass_matrix()
}

pub fn assemble_stiffness(mesh: &Mesh) -> SparseMatrix {
    FemSpace::new(Arc::new(mesh.clone())).stiffness_matrix()
}

/// The `3M x 3M` matrix `B` with `phi^T B v = int (w x v) . phi`.
pub fn assemble_cross_form(mesh: &Mesh, w: &NodalField) -> Result<SparseMatrix> {
    Ok(FemSpace::new(Arc::new(mesh.clone())).cross_operator(w)?.to_sparse())
}

fn barycentric_gradients(p: &[[f64; 2]; 3], area: f64) -> [[f64; 2]; 3] {
    let s = 0.5 / area;
    [
        [(p[1][1] - p[2][1]) * s, (p[2][0] - p[1][0]) * s],
        [(p[2][1] - p[0][1]) * s, (p[0][0] - p[2][0]) * s],
        [(p[0][1] - p[1][1]) * s, (p[1][0] - p[0][0]) * s],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_mesh, SquareDomain};
    use approx::assert_relative_eq;

    fn single_triangle() -> Mesh {
        Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap()
    }

    fn unit_space(level: u32) -> FemSpace {
        FemSpace::new(Arc::new(build_structured_mesh(&SquareDomain::unit(), level)))
    }

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    #[test]
    fn quadrature_rules_are_exact_on_monomials() {
        for rule in [QuadratureRule::degree3(), QuadratureRule::degree4()] {
            assert_relative_eq!(rule.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
            for a in 0..=rule.degree {
                for b in 0..=(rule.degree - a) {
                    // reference triangle: x = l1, y = l2
                    let approx = rule.integrate(0.5, |l| l[1].powi(a as i32) * l[2].powi(b as i32));
                    let exact = factorial(a) * factorial(b) / factorial(a + b + 2);
                    assert!((approx - exact).abs() < 1e-14, "x^{a} y^{b}: {approx} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn reference_element_matrices() {
        let mesh = single_triangle();
        let m = assemble_mass(&mesh);
        assert_relative_eq!(m.get(0, 0), 1.0 / 12.0, max_relative = 1e-15);
        assert_relative_eq!(m.get(0, 1), 1.0 / 24.0, max_relative = 1e-15);
        let k = assemble_stiffness(&mesh);
        let expected = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k.get(i, j) - expected[i][j]).abs() < 1e-15);
            }
        }
        // the zero entry is not stored
        assert_eq!(k.nnz(), 7);
    }

    #[test]
    fn mass_sums_to_area_and_stiffness_kills_constants() {
        for l in 0..4 {
            let space = unit_space(l);
            let m = space.mass_matrix();
            let total: f64 = m.triplets().map(|(_, _, v)| v).sum();
            assert_relative_eq!(total, 1.0, max_relative = 1e-13);
            let k = space.stiffness_matrix();
            let ones = vec![1.0; space.n_nodes()];
            assert!(k.mul_vec(&ones).iter().all(|r| r.abs() < 1e-13));
            assert!(m.is_structurally_symmetric());
        }
    }

    #[test]
    fn linear_field_has_unit_gradient() {
        let space = unit_space(3);
        let m = interpolate_nodal(space.mesh(), 0.0, |p, _| Vec3::new(p[0], 0.0, 0.0)).unwrap();
        let n = space.field_norms(&m).unwrap();
        assert_relative_eq!(n.h1_semi, 1.0, max_relative = 1e-13);
        assert_relative_eq!(n.w1inf_semi, 1.0, max_relative = 1e-13);
    }

    #[test]
    fn constant_field_norms() {
        let space = unit_space(2);
        let m = NodalField::constant(space.n_nodes(), Vec3::new(0.0, 1.0, 0.0));
        let n = space.field_norms(&m).unwrap();
        assert_relative_eq!(n.l2, 1.0, max_relative = 1e-13);
        assert!(n.h1_semi.abs() < 1e-7);
        assert_eq!(n.linf_nodal, 1.0);
        assert!(n.w1inf_semi.abs() < 1e-14);
    }

    #[test]
    fn discrete_lr_norm_examples() {
        let space = unit_space(2);
        let n = space.n_nodes();
        let e1 = NodalField::constant(n, Vec3::x());
        assert_relative_eq!(space.discrete_lr_norm(&e1, 2.0).unwrap(), (25.0f64 / 8.0).sqrt(), max_relative = 1e-14);
        assert_eq!(space.discrete_lr_norm(&NodalField::zeros(n), 3.0).unwrap(), 0.0);
        assert!(space.discrete_lr_norm(&e1, 0.5).is_err());
    }

    #[test]
    fn constraint_deviation_examples() {
        let space = unit_space(2);
        let n = space.n_nodes();
        let unit = NodalField::constant(n, Vec3::z());
        assert_eq!(space.constraint_deviation(&unit).unwrap().nodal_l1, 0.0);
        let two = NodalField::constant(n, Vec3::new(2.0, 0.0, 0.0));
        assert_relative_eq!(space.constraint_deviation(&two).unwrap().quadrature_l1, 3.0, max_relative = 1e-13);
    }

    #[test]
    fn interpolation_rejects_non_finite_values() {
        let mesh = single_triangle();
        let err = interpolate_nodal(&mesh, 0.0, |p, _| Vec3::new(1.0 / p[0], 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { node: 0 }));
    }

    #[test]
    fn cross_form_rejects_wrong_length() {
        let space = unit_space(1);
        assert!(matches!(
            space.cross_operator(&NodalField::zeros(3)),
            Err(Error::MeshMismatch { expected: 9, found: 3 })
        ));
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let mesh = single_triangle();
        let f = NodalField::constant(3, Vec3::z());
        let csv = f.to_csv(&mesh).unwrap();
        assert!(csv.starts_with("node_index,x,y,mx,my,mz\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
