//! Discrete tangent spaces: per-node orthonormal frames and the reduced
//! (two unknowns per node) Galerkin systems posed on them.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::fem::{BlockOperator, NodalField, Vec3};
use crate::solver::{solve_linear, LinearSolveConfig, LinearSolution};
use crate::sparse::SparseMatrix;

pub const DEFAULT_ANCHOR_EPSILON: f64 = 1e-12;

/// For each node an anchor `a` and an orthonormal pair spanning `a^⊥`.
#[derive(Clone, Debug)]
pub struct TangentFrame {
    anchor: Vec<Vec3>,
    t1: Vec<Vec3>,
    t2: Vec<Vec3>,
}

pub fn build_tangent_frame(anchor: &NodalField) -> Result<TangentFrame> {
    build_tangent_frame_with(anchor, DEFAULT_ANCHOR_EPSILON)
}

pub fn build_tangent_frame_with(anchor: &NodalField, epsilon: f64) -> Result<TangentFrame> {
    let n = anchor.len();
    let mut t1 = Vec::with_capacity(n);
    let mut t2 = Vec::with_capacity(n);
    for (node, a) in anchor.values().iter().enumerate() {
        let modulus = a.norm();
        if !(modulus >= epsilon) {
            return Err(Error::DegenerateAnchor { node, modulus });
        }
        // the axis least aligned with a; ties go to the lowest index
        let mut k = 0;
        for c in 1..3 {
            if a[c].abs() < a[k].abs() {
                k = c;
            }
        }
        let u = a.cross(&Vec3::ith(k, 1.0)).normalize();
        let w = a.cross(&u).normalize();
        t1.push(u);
        t2.push(w);
    }
    Ok(TangentFrame { anchor: anchor.values().to_vec(), t1, t2 })
}

impl TangentFrame {
    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }

    pub fn anchor(&self, z: usize) -> Vec3 {
        self.anchor[z]
    }

    pub fn basis(&self, z: usize) -> (Vec3, Vec3) {
        (self.t1[z], self.t2[z])
    }

    /// `E w`: tangent coordinates (two per node) to a nodal field.
    pub fn expand(&self, w: &[f64]) -> NodalField {
        assert_eq!(w.len(), 2 * self.len());
        let values = (0..self.len())
            .map(|z| w[2 * z] * self.t1[z] + w[2 * z + 1] * self.t2[z])
            .collect();
        NodalField::new(values).expect("finite tangent coordinates")
    }

    /// `E^T r` for a nodal load vector.
    pub fn restrict(&self, r: &NodalField) -> Vec<f64> {
        r.values()
            .iter()
            .enumerate()
            .flat_map(|(z, v)| [self.t1[z].dot(v), self.t2[z].dot(v)])
            .collect()
    }

    /// `E^T A E` for a full `3M x 3M` matrix in node-major ordering.
    pub fn reduce(&self, a: &SparseMatrix) -> Result<SparseMatrix> {
        let m = self.len();
        if a.dim() != 3 * m {
            return Err(Error::MeshMismatch { expected: 3 * m, found: a.dim() / 3 });
        }
        let frame = |z: usize, p: usize| if p == 0 { self.t1[z] } else { self.t2[z] };
        let triplets = a.triplets().flat_map(move |(i, j, v)| {
            let (z, c) = (i / 3, i % 3);
            let (y, d) = (j / 3, j % 3);
            (0..2).flat_map(move |p| (0..2).map(move |q| (2 * z + p, 2 * y + q, frame(z, p)[c] * v * frame(y, q)[d])))
        });
        Ok(SparseMatrix::from_triplets(2 * m, triplets))
    }

    /// `E^T A E` for a block operator, built row by row without sorting.
    pub fn reduce_blocks(&self, op: &BlockOperator) -> SparseMatrix {
        let p = op.pattern();
        let m = p.n();
        assert_eq!(m, self.len());
        let mut lens = Vec::with_capacity(2 * m);
        let mut entries = Vec::with_capacity(4 * p.nnz());
        for z in 0..m {
            let rows = [self.t1[z], self.t2[z]];
            for r in rows {
                lens.push(2 * p.row_range(z).len());
                for k in p.row_range(z) {
                    let y = p.cols[k];
                    let b: &Matrix3<f64> = &op.blocks()[k];
                    let rb = b.transpose() * r;
                    entries.push((2 * y, rb.dot(&self.t1[y])));
                    entries.push((2 * y + 1, rb.dot(&self.t2[y])));
                }
            }
        }
        SparseMatrix::from_sorted_rows(2 * m, entries.into_iter(), &lens)
    }

    /// `max_z |v(z)·a(z)| / max_z |v(z)||a(z)|` (zero for `v = 0`).
    pub fn orthogonality_defect(&self, v: &NodalField) -> f64 {
        let mut num: f64 = 0.0;
        let mut den: f64 = 0.0;
        for (a, x) in self.anchor.iter().zip(v.values()) {
            num = num.max(a.dot(x).abs());
            den = den.max(a.norm() * x.norm());
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

/// Result of a tangent-space solve.
#[derive(Clone, Debug)]
pub struct TangentSolution {
    pub v: NodalField,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn finish(frame: &TangentFrame, sol: LinearSolution) -> TangentSolution {
    TangentSolution { v: frame.expand(&sol.x), iterations: sol.iterations, relative_residual: sol.relative_residual }
}

/// Finds `v = E w` with `(E^T A E) w = E^T rhs`.
pub fn solve_in_tangent_space(
    frame: &TangentFrame,
    a_full: &SparseMatrix,
    rhs_full: &NodalField,
    cfg: &LinearSolveConfig,
) -> Result<NodalField> {
    rhs_full.ensure_len(frame.len())?;
    let reduced = frame.reduce(a_full)?;
    let sol = solve_linear(&reduced, &frame.restrict(rhs_full), cfg)?;
    Ok(finish(frame, sol).v)
}

/// Same as [`solve_in_tangent_space`] for an operator in block form.
pub fn solve_blocks_in_tangent_space(
    frame: &TangentFrame,
    op: &BlockOperator,
    rhs_full: &NodalField,
    cfg: &LinearSolveConfig,
) -> Result<TangentSolution> {
    rhs_full.ensure_len(frame.len())?;
    let reduced = frame.reduce_blocks(op);
    let sol = solve_linear(&reduced, &frame.restrict(rhs_full), cfg)?;
    Ok(finish(frame, sol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_anchor_frame() {
        let a = NodalField::new(vec![Vec3::z()]).unwrap();
        let f = build_tangent_frame(&a).unwrap();
        let (t1, t2) = f.basis(0);
        assert_eq!(t1, Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(t2, Vec3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn diagonal_anchor_frame_is_orthonormal() {
        let a = NodalField::new(vec![Vec3::new(1.0, 1.0, 1.0) / 3f64.sqrt()]).unwrap();
        let f = build_tangent_frame(&a).unwrap();
        let (t1, t2) = f.basis(0);
        let a = f.anchor(0);
        for d in [t1.dot(&a), t2.dot(&a), t1.dot(&t2), t1.norm() - 1.0, t2.norm() - 1.0] {
            assert!(d.abs() < 1e-14);
        }
    }

    #[test]
    fn zero_anchor_is_rejected() {
        let a = NodalField::new(vec![Vec3::x(), Vec3::zeros()]).unwrap();
        match build_tangent_frame(&a) {
            Err(Error::DegenerateAnchor { node, modulus }) => {
                assert_eq!(node, 1);
                assert_eq!(modulus, 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn expand_and_restrict_are_adjoint() {
        let a = NodalField::new(vec![Vec3::new(0.3, -2.0, 0.5), Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        let f = build_tangent_frame(&a).unwrap();
        let w = [0.5, -1.0, 2.0, 0.25];
        let r = NodalField::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.0)]).unwrap();
        let lhs: f64 = f.expand(&w).values().iter().zip(r.values()).map(|(x, y)| x.dot(y)).sum();
        let rhs: f64 = f.restrict(&r).iter().zip(w).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-14);
        assert!(f.orthogonality_defect(&f.expand(&w)) < 1e-15);
    }
}
