//! Parameterization of linear state-space models.
//!
//! A [`ParamTemplate`] describes which cells of `(A, B, C)` are learned and
//! which are held fixed. [`ParamTemplate::instantiate`] places a flat
//! parameter vector into those cells; [`ParamTemplate::extract`] reads them
//! back out.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::invalid(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Bounds { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// The same interval repeated `d` times.
    pub fn uniform(lo: f64, hi: f64, d: usize) -> Result<Vec<Bounds>> {
        let b = Bounds::new(lo, hi)?;
        Ok(vec![b; d])
    }
}

/// A parameter vector together with its box constraints. Values are clamped
/// into the box on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    values: Vec<f64>,
    bounds: Vec<Bounds>,
}

impl ThetaVector {
    pub fn new(values: Vec<f64>, bounds: Vec<Bounds>) -> Result<Self> {
        if values.len() != bounds.len() {
            return Err(Error::invalid(format!(
                "theta has {} values but {} bounds",
                values.len(),
                bounds.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("theta[{i}] is not finite")));
        }
        let values = values
            .into_iter()
            .zip(&bounds)
            .map(|(v, b)| b.clamp(v))
            .collect();
        Ok(ThetaVector { values, bounds })
    }

    /// A vector with no effective constraints.
    pub fn unbounded(values: Vec<f64>) -> Result<Self> {
        let bounds = vec![
            Bounds {
                lo: f64::MIN,
                hi: f64::MAX
            };
            values.len()
        ];
        ThetaVector::new(values, bounds)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> &[Bounds] {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatrixId {
    A,
    B,
    C,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellSource {
    /// Filled from `theta[k]`.
    Free(usize),
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub matrix: MatrixId,
    pub row: usize,
    pub col: usize,
    pub source: CellSource,
}

impl TemplateEntry {
    pub fn free(matrix: MatrixId, row: usize, col: usize, index: usize) -> Self {
        TemplateEntry {
            matrix,
            row,
            col,
            source: CellSource::Free(index),
        }
    }

    pub fn fixed(matrix: MatrixId, row: usize, col: usize, value: f64) -> Self {
        TemplateEntry {
            matrix,
            row,
            col,
            source: CellSource::Fixed(value),
        }
    }
}

/// A concrete `(A, B, C)` triple.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n_x = a.nrows();
        if a.ncols() != n_x {
            return Err(Error::invalid(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n_x {
            return Err(Error::invalid(format!(
                "B has {} rows, expected {n_x}",
                b.nrows()
            )));
        }
        if c.ncols() != n_x {
            return Err(Error::invalid(format!(
                "C has {} columns, expected {n_x}",
                c.ncols()
            )));
        }
        Ok(LinearModel { a, b, c })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// `A x + B u`. An empty `u` is accepted when `n_u = 0`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        if self.n_u() == 0 {
            &self.a * x
        } else {
            &self.a * x + &self.b * u
        }
    }

    pub fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    fn matrix(&self, id: MatrixId) -> &DMatrix<f64> {
        match id {
            MatrixId::A => &self.a,
            MatrixId::B => &self.b,
            MatrixId::C => &self.c,
        }
    }
}

/// Structural map from a flat parameter vector to `(A, B, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTemplate {
    n_x: usize,
    n_u: usize,
    n_y: usize,
    entries: Vec<TemplateEntry>,
    dim: usize,
}

impl ParamTemplate {
    pub fn new(n_x: usize, n_u: usize, n_y: usize, entries: Vec<TemplateEntry>) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(Error::invalid("n_x and n_y must be positive"));
        }
        let mut seen = HashSet::new();
        let mut free = Vec::new();
        for e in &entries {
            let (rows, cols) = match e.matrix {
                MatrixId::A => (n_x, n_x),
                MatrixId::B => (n_x, n_u),
                MatrixId::C => (n_y, n_x),
            };
            if e.row >= rows || e.col >= cols {
                return Err(Error::invalid(format!(
                    "cell {:?}[{},{}] is outside a {rows}x{cols} matrix",
                    e.matrix, e.row, e.col
                )));
            }
            if !seen.insert((e.matrix, e.row, e.col)) {
                return Err(Error::invalid(format!(
                    "cell {:?}[{},{}] listed twice",
                    e.matrix, e.row, e.col
                )));
            }
            match e.source {
                CellSource::Free(k) => free.push(k),
                CellSource::Fixed(c) if !c.is_finite() => {
                    return Err(Error::invalid(format!(
                        "fixed value of {:?}[{},{}] is not finite",
                        e.matrix, e.row, e.col
                    )));
                }
                CellSource::Fixed(_) => {}
            }
        }
        free.sort_unstable();
        free.dedup();
        if free.iter().enumerate().any(|(i, &k)| i != k) {
            return Err(Error::invalid(
                "free parameter indices must be contiguous from 0",
            ));
        }
        Ok(ParamTemplate {
            n_x,
            n_u,
            n_y,
            entries,
            dim: free.len(),
        })
    }

    /// Number of free parameters `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn entries(&self) -> &[TemplateEntry] {
        &self.entries
    }

    pub fn instantiate(&self, theta: &[f64]) -> Result<LinearModel> {
        if theta.len() != self.dim {
            return Err(Error::invalid(format!(
                "template has {} free parameters but theta has length {}",
                self.dim,
                theta.len()
            )));
        }
        let mut a = DMatrix::zeros(self.n_x, self.n_x);
        let mut b = DMatrix::zeros(self.n_x, self.n_u);
        let mut c = DMatrix::zeros(self.n_y, self.n_x);
        for e in &self.entries {
            let value = match e.source {
                CellSource::Free(k) => theta[k],
                CellSource::Fixed(v) => v,
            };
            let m = match e.matrix {
                MatrixId::A => &mut a,
                MatrixId::B => &mut b,
                MatrixId::C => &mut c,
            };
            m[(e.row, e.col)] = value;
        }
        LinearModel::new(a, b, c)
    }

    /// Reads the free cells of `model` into a parameter vector. When one
    /// index feeds several cells, the first listed cell wins.
    pub fn extract(&self, model: &LinearModel) -> Result<Vec<f64>> {
        if model.n_x() != self.n_x || model.n_u() != self.n_u || model.n_y() != self.n_y {
            return Err(Error::invalid("model dimensions do not match template"));
        }
        let mut theta = vec![None; self.dim];
        for e in &self.entries {
            if let CellSource::Free(k) = e.source {
                theta[k].get_or_insert(model.matrix(e.matrix)[(e.row, e.col)]);
            }
        }
        Ok(theta.into_iter().map(|v| v.unwrap_or(0.0)).collect())
    }

    /// Every cell of `A` free, `B` and `C` fixed at the given matrices.
    pub fn free_state_matrix(b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Self> {
        let n_x = c.ncols();
        let mut entries = Vec::new();
        for row in 0..n_x {
            for col in 0..n_x {
                entries.push(TemplateEntry::free(MatrixId::A, row, col, row * n_x + col));
            }
        }
        push_fixed(&mut entries, MatrixId::B, b);
        push_fixed(&mut entries, MatrixId::C, c);
        ParamTemplate::new(n_x, b.ncols(), c.nrows(), entries)
    }

    /// The nonzero pattern of `a` free (row-major order), everything else in
    /// `(A, B, C)` fixed.
    pub fn sparsity_of(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Self> {
        let n_x = a.nrows();
        let mut entries = Vec::new();
        let mut k = 0;
        for row in 0..n_x {
            for col in 0..n_x {
                if a[(row, col)] != 0.0 {
                    entries.push(TemplateEntry::free(MatrixId::A, row, col, k));
                    k += 1;
                }
            }
        }
        push_fixed(&mut entries, MatrixId::B, b);
        push_fixed(&mut entries, MatrixId::C, c);
        ParamTemplate::new(n_x, b.ncols(), c.nrows(), entries)
    }
}

fn push_fixed(entries: &mut Vec<TemplateEntry>, id: MatrixId, m: &DMatrix<f64>) {
    for row in 0..m.nrows() {
        for col in 0..m.ncols() {
            if m[(row, col)] != 0.0 {
                entries.push(TemplateEntry::fixed(id, row, col, m[(row, col)]));
            }
        }
    }
}
