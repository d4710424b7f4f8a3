//! Convex polytopes in halfspace representation, `{x | H x <= h}`, with the
//! set operations the tube and tightening machinery needs: support functions,
//! exact vertex enumeration at desk dimensions, and Pontryagin differences.
//!
//! Normals are stored exactly as configured (no normalization) so that
//! unit-offset constraint scalings survive round trips bit for bit.

use crate::conic::{self, Block, ConicProgram, LinearBlock, SolveStatus};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

/// Facet-activity and vertex-deduplication tolerance.
pub const TOL: f64 = 1e-8;

/// Vertex enumeration is exact only at desk dimensions.
pub const MAX_VERTEX_DIM: usize = 6;

#[derive(Debug, Error)]
pub enum PolytopeError {
    #[error("polytope is empty")]
    EmptyPolytope,
    #[error("support is unbounded in the requested direction")]
    UnboundedDirection,
    #[error("polytope is unbounded")]
    UnboundedPolytope,
    #[error("dimension {0} exceeds the vertex-enumeration limit {MAX_VERTEX_DIM}")]
    DimensionTooLarge(usize),
    #[error("vertex cross-validation failed: {0}")]
    VertexValidation(String),
    #[error(transparent)]
    Solver(#[from] conic::ConicError),
}

/// `{x | H x <= h}` with an optional cached vertex list.
#[derive(Debug, Serialize, Deserialize)]
pub struct Polytope {
    #[serde(with = "crate::exp::serde_matrix")]
    h_mat: DMatrix<f64>,
    offsets: Vec<f64>,
    #[serde(skip)]
    vertices: OnceLock<Vec<DVector<f64>>>,
}

impl Clone for Polytope {
    fn clone(&self) -> Self {
        let v = OnceLock::new();
        if let Some(cached) = self.vertices.get() {
            let _ = v.set(cached.clone());
        }
        Polytope {
            h_mat: self.h_mat.clone(),
            offsets: self.offsets.clone(),
            vertices: v,
        }
    }
}

impl PartialEq for Polytope {
    fn eq(&self, other: &Self) -> bool {
        self.h_mat == other.h_mat && self.offsets == other.offsets
    }
}

impl Polytope {
    pub fn new(h_mat: DMatrix<f64>, offsets: DVector<f64>) -> Self {
        assert_eq!(h_mat.nrows(), offsets.len(), "facet count mismatch");
        Polytope {
            h_mat,
            offsets: offsets.iter().copied().collect(),
            vertices: OnceLock::new(),
        }
    }

    /// `[-1, 1]^dim`
    pub fn unit_box(dim: usize) -> Self {
        Self::box_bounds(&vec![1.0; dim])
    }

    /// `{|x_i| <= half_widths[i]}`
    pub fn box_bounds(half_widths: &[f64]) -> Self {
        let dim = half_widths.len();
        let mut h = DMatrix::zeros(2 * dim, dim);
        let mut b = DVector::zeros(2 * dim);
        for i in 0..dim {
            h[(i, i)] = 1.0;
            b[i] = half_widths[i];
            h[(dim + i, i)] = -1.0;
            b[dim + i] = half_widths[i];
        }
        Polytope::new(h, b)
    }

    /// Regular simplex with unit offsets: `{x | u_i . x <= 1}` over the
    /// `dim + 1` vertex directions of a regular simplex centered at the
    /// origin. The smallest-facet-count bounded polytope, which keeps
    /// vertex-enumeration-based machinery cheap.
    pub fn regular_simplex(dim: usize) -> Self {
        // standard construction: columns of the (dim+1) x (dim+1) centering
        // projection, orthonormalized down to R^dim
        let k = dim + 1;
        let mut pts = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                pts[(i, j)] = if i == j { 1.0 } else { 0.0 };
            }
        }
        let centroid = 1.0 / k as f64;
        for i in 0..k {
            for j in 0..k {
                pts[(i, j)] -= centroid;
            }
        }
        // rows of pts live in the sum-zero subspace; project onto an
        // orthonormal basis of it
        let basis = pts.view((0, 0), (k, k)).svd(true, false).u.unwrap();
        let mut h = DMatrix::zeros(k, dim);
        for i in 0..k {
            for j in 0..dim {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += pts[(i, l)] * basis[(l, j)];
                }
                h[(i, j)] = acc;
            }
        }
        // normalize each direction to unit length
        for i in 0..k {
            let norm = h.row(i).norm();
            for j in 0..dim {
                h[(i, j)] /= norm;
            }
        }
        Polytope::new(h, DVector::from_element(k, 1.0))
    }

    /// Interval `[lo, hi]` as a 1-D polytope.
    pub fn interval(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi);
        Polytope::new(
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![hi, -lo]),
        )
    }

    /// The singleton `{point}` written as a box of zero width.
    pub fn singleton(point: &DVector<f64>) -> Self {
        let dim = point.len();
        let mut h = DMatrix::zeros(2 * dim, dim);
        let mut b = DVector::zeros(2 * dim);
        for i in 0..dim {
            h[(i, i)] = 1.0;
            b[i] = point[i];
            h[(dim + i, i)] = -1.0;
            b[dim + i] = -point[i];
        }
        Polytope::new(h, b)
    }

    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }

    pub fn num_facets(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h_mat
    }

    pub fn offsets(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.offsets)
    }

    pub fn offset(&self, row: usize) -> f64 {
        self.offsets[row]
    }

    pub fn row(&self, r: usize) -> DVector<f64> {
        self.h_mat.row(r).transpose()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (0..self.num_facets())
            .all(|r| self.h_mat.row(r).transpose().dot(x) <= self.offsets[r] + tol)
    }

    fn feasibility_lp(&self) -> ConicProgram {
        let mut prog = ConicProgram::new(self.dim());
        prog.add_block(Block::Inequality(LinearBlock::from_dense(
            &self.h_mat,
            &self.offsets(),
        )));
        prog
    }

    pub fn is_empty(&self) -> Result<bool, PolytopeError> {
        if self.num_facets() == 0 {
            return Ok(false);
        }
        let sol = conic::solve_conic(&self.feasibility_lp())?;
        Ok(sol.status == SolveStatus::Infeasible)
    }

    /// Bounded iff the support is finite in every `+/- e_i` direction.
    pub fn is_bounded(&self) -> Result<bool, PolytopeError> {
        for i in 0..self.dim() {
            for sign in [1.0, -1.0] {
                let mut d = DVector::zeros(self.dim());
                d[i] = sign;
                match self.support(&d) {
                    Ok(_) => {}
                    Err(PolytopeError::UnboundedDirection) => return Ok(false),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(true)
    }

    /// Support function `max_{x in P} d . x`, attained at a vertex.
    pub fn support(&self, d: &DVector<f64>) -> Result<f64, PolytopeError> {
        assert_eq!(d.len(), self.dim());
        let mut prog = self.feasibility_lp();
        for i in 0..self.dim() {
            prog.linear[i] = -d[i];
        }
        let sol = conic::solve_conic(&prog)?;
        match sol.status {
            SolveStatus::Optimal => Ok(-sol.objective),
            SolveStatus::Infeasible => Err(PolytopeError::EmptyPolytope),
            SolveStatus::Unbounded => Err(PolytopeError::UnboundedDirection),
        }
    }

    /// The point of `P` maximizing `d . x`.
    pub fn support_point(&self, d: &DVector<f64>) -> Result<DVector<f64>, PolytopeError> {
        let mut prog = self.feasibility_lp();
        for i in 0..self.dim() {
            prog.linear[i] = -d[i];
        }
        let sol = conic::solve_conic(&prog)?;
        match sol.status {
            SolveStatus::Optimal => Ok(sol.x),
            SolveStatus::Infeasible => Err(PolytopeError::EmptyPolytope),
            SolveStatus::Unbounded => Err(PolytopeError::UnboundedDirection),
        }
    }

    /// Chebyshev center: the deepest point, by LP.
    pub fn chebyshev_center(&self) -> Result<DVector<f64>, PolytopeError> {
        let n = self.dim();
        let mut prog = ConicProgram::new(n + 1);
        prog.linear[n] = -1.0; // maximize the inscribed radius
        let mut blk = LinearBlock::new(self.num_facets());
        for r in 0..self.num_facets() {
            let norm = self.h_mat.row(r).norm();
            for c in 0..n {
                blk.push(r, c, self.h_mat[(r, c)]);
            }
            blk.push(r, n, norm);
            blk.rhs[r] = self.offsets[r];
        }
        prog.add_block(Block::Inequality(blk));
        let sol = conic::solve_conic(&prog)?;
        match sol.status {
            SolveStatus::Optimal => Ok(DVector::from_column_slice(&sol.x.as_slice()[..n])),
            SolveStatus::Infeasible => Err(PolytopeError::EmptyPolytope),
            SolveStatus::Unbounded => Err(PolytopeError::UnboundedPolytope),
        }
    }

    /// Exact extreme points, deduplicated within [`TOL`]. Enumerates all
    /// `dim`-subsets of facets; exact and cheap at desk dimensions, which is
    /// all the vertex-based reformulations here ever need.
    pub fn vertices(&self) -> Result<&[DVector<f64>], PolytopeError> {
        if let Some(v) = self.vertices.get() {
            return Ok(v);
        }
        let computed = self.enumerate_vertices()?;
        let _ = self.vertices.set(computed);
        Ok(self.vertices.get().unwrap())
    }

    fn enumerate_vertices(&self) -> Result<Vec<DVector<f64>>, PolytopeError> {
        let n = self.dim();
        let m = self.num_facets();
        if n > MAX_VERTEX_DIM {
            return Err(PolytopeError::DimensionTooLarge(n));
        }
        if self.is_empty()? {
            return Err(PolytopeError::EmptyPolytope);
        }
        if !self.is_bounded()? {
            return Err(PolytopeError::UnboundedPolytope);
        }
        if m < n {
            return Err(PolytopeError::VertexValidation(format!(
                "bounded polytope with {m} facets in dimension {n}"
            )));
        }

        let mut verts: Vec<DVector<f64>> = Vec::new();
        let mut combo: Vec<usize> = (0..n).collect();
        'outer: loop {
            let mut a = DMatrix::zeros(n, n);
            let mut b = DVector::zeros(n);
            for (k, &r) in combo.iter().enumerate() {
                a.set_row(k, &self.h_mat.row(r));
                b[k] = self.offsets[r];
            }
            if let Some(x) = a.clone().lu().solve(&b) {
                // guard against near-singular systems that "solved" poorly
                let consistent = combo.iter().all(|&r| {
                    (self.h_mat.row(r).transpose().dot(&x) - self.offsets[r]).abs()
                        <= 1e-6 * (1.0 + self.offsets[r].abs())
                });
                if consistent
                    && self.contains(&x, TOL)
                    && !verts.iter().any(|v| (v - &x).norm() <= TOL * 10.0)
                {
                    verts.push(x);
                }
            }
            // advance to the next facet combination
            let mut k = n;
            while k > 0 {
                k -= 1;
                if combo[k] != k + m - n {
                    combo[k] += 1;
                    for l in k + 1..n {
                        combo[l] = combo[l - 1] + 1;
                    }
                    continue 'outer;
                }
            }
            break;
        }

        if verts.is_empty() {
            return Err(PolytopeError::EmptyPolytope);
        }
        self.cross_validate(&verts)?;
        Ok(verts)
    }

    /// Every vertex must satisfy the halfspaces; every supporting facet must
    /// be attained by some vertex.
    fn cross_validate(&self, verts: &[DVector<f64>]) -> Result<(), PolytopeError> {
        for v in verts {
            if !self.contains(v, TOL * 10.0) {
                return Err(PolytopeError::VertexValidation(format!(
                    "vertex {v:?} violates a facet"
                )));
            }
        }
        for r in 0..self.num_facets() {
            let d = self.row(r);
            let sup = self.support(&d)?;
            if sup < self.offsets[r] - TOL {
                continue; // redundant facet, nothing to attain
            }
            let best = verts
                .iter()
                .map(|v| d.dot(v))
                .fold(f64::NEG_INFINITY, f64::max);
            if (best - sup).abs() > 1e-6 * (1.0 + sup.abs()) {
                return Err(PolytopeError::VertexValidation(format!(
                    "facet {r} supported at {sup} but best vertex reaches {best}"
                )));
            }
        }
        Ok(())
    }

    /// Pontryagin difference `P (-) S = {x | x + s in P  for all s in S}`,
    /// computed rowwise as `h_r - sup_{s in S} H_r . s`. The result may be
    /// empty; emptiness is a value here, not an error.
    pub fn pontryagin_diff(&self, s: &Polytope) -> Result<Polytope, PolytopeError> {
        assert_eq!(self.dim(), s.dim());
        let mut new_off = self.offsets();
        for r in 0..self.num_facets() {
            new_off[r] -= s.support(&self.row(r))?;
        }
        Ok(Polytope::new(self.h_mat.clone(), new_off))
    }

    /// Rescale every row to unit offset. Rows must have strictly positive
    /// offsets (the origin strictly inside).
    pub fn normalized_to_unit_offsets(&self) -> Option<Polytope> {
        let mut h = self.h_mat.clone();
        let mut off = self.offsets();
        for r in 0..self.num_facets() {
            if off[r] <= TOL {
                return None;
            }
            let scale = 1.0 / off[r];
            for c in 0..self.dim() {
                h[(r, c)] *= scale;
            }
            off[r] = 1.0;
        }
        Some(Polytope::new(h, off))
    }

    pub fn has_unit_offsets(&self) -> bool {
        self.offsets.iter().all(|&o| (o - 1.0).abs() <= TOL)
    }
}
