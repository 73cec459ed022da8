//! Uniform 1D grids, grid functions and the discrete norms and pairings of
//! the Gelfand triples used by the model catalog.
//!
//! Dirichlet grids are vertex-centred with `n_interior` unknowns and
//! `h = L / (n + 1)`. Neumann grids are cell-centred with `h = L / n` and
//! ghost-node reflection, which keeps the discrete Laplacian symmetric in the
//! weighted inner product `h * sum(u * v)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bc {
    Dirichlet,
    Neumann,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n_interior: usize,
    length: f64,
    bc: Bc,
}

impl Grid {
    pub fn new(n_interior: usize, length: f64, bc: Bc) -> Result<Self> {
        if n_interior < 2 {
            return Err(Error::config(format!(
                "grid.n_interior must be >= 2, got {n_interior}"
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::config(format!(
                "grid.length must be positive, got {length}"
            )));
        }
        Ok(Self {
            n_interior,
            length,
            bc,
        })
    }

    pub fn dirichlet(n_interior: usize, length: f64) -> Result<Self> {
        Self::new(n_interior, length, Bc::Dirichlet)
    }

    pub fn neumann(n_interior: usize, length: f64) -> Result<Self> {
        Self::new(n_interior, length, Bc::Neumann)
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn bc(&self) -> Bc {
        self.bc
    }

    pub fn spacing(&self) -> f64 {
        match self.bc {
            Bc::Dirichlet => self.length / (self.n_interior + 1) as f64,
            Bc::Neumann => self.length / self.n_interior as f64,
        }
    }

    /// Position of the `i`-th unknown (0-based).
    pub fn node(&self, i: usize) -> f64 {
        let h = self.spacing();
        match self.bc {
            Bc::Dirichlet => (i + 1) as f64 * h,
            Bc::Neumann => (i as f64 + 0.5) * h,
        }
    }

    fn wavenumber(&self, mode: usize) -> usize {
        match self.bc {
            Bc::Dirichlet => mode + 1,
            Bc::Neumann => mode,
        }
    }

    /// Eigenvalue of `-laplacian` for the `mode`-th discrete eigenvector,
    /// ordered increasingly (mode 0 is the constant for Neumann grids).
    pub fn eigenvalue(&self, mode: usize) -> f64 {
        let h = self.spacing();
        let k = self.wavenumber(mode) as f64;
        let s = (k * PI * h / (2.0 * self.length)).sin();
        4.0 / (h * h) * s * s
    }

    /// Smallest eigenvalue of `-laplacian` on the complement of its kernel.
    pub fn lambda_min(&self) -> f64 {
        match self.bc {
            Bc::Dirichlet => self.eigenvalue(0),
            Bc::Neumann => self.eigenvalue(1),
        }
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalue(self.n_interior - 1)
    }

    /// `mode`-th discrete eigenvector of the Laplacian, normalised to unit L2 norm.
    pub fn eigenmode(&self, mode: usize) -> Field {
        let k = self.wavenumber(mode) as f64;
        let l = self.length;
        let values = (0..self.n_interior)
            .map(|i| {
                let x = self.node(i);
                match self.bc {
                    Bc::Dirichlet => (2.0 / l).sqrt() * (k * PI * x / l).sin(),
                    Bc::Neumann if mode == 0 => 1.0 / l.sqrt(),
                    Bc::Neumann => (2.0 / l).sqrt() * (k * PI * x / l).cos(),
                }
            })
            .collect();
        Field {
            grid: *self,
            values,
        }
    }

    /// Dense matrix of the discrete Laplacian with this grid's closure.
    pub fn laplacian_matrix(&self) -> DMatrix<f64> {
        let n = self.n_interior;
        let h2 = self.spacing().powi(2);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = -2.0 / h2;
            if i > 0 {
                m[(i, i - 1)] = 1.0 / h2;
            }
            if i + 1 < n {
                m[(i, i + 1)] = 1.0 / h2;
            }
        }
        if self.bc == Bc::Neumann {
            m[(0, 0)] = -1.0 / h2;
            m[(n - 1, n - 1)] = -1.0 / h2;
        }
        m
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Applies the discrete Laplacian to a raw vector.
pub(crate) fn laplacian_into(grid: &Grid, u: &[f64], out: &mut [f64]) {
    let n = u.len();
    let inv_h2 = 1.0 / grid.spacing().powi(2);
    let (left, right) = match grid.bc {
        Bc::Dirichlet => (0.0, 0.0),
        Bc::Neumann => (u[0], u[n - 1]),
    };
    for i in 0..n {
        let um = if i == 0 { left } else { u[i - 1] };
        let up = if i + 1 == n { right } else { u[i + 1] };
        out[i] = (um - 2.0 * u[i] + up) * inv_h2;
    }
}

/// Solves `(shift * I - laplacian) x = rhs` with the Thomas algorithm.
///
/// `shift = 0` is only admissible on Dirichlet grids.
pub(crate) fn solve_shifted(grid: &Grid, shift: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rhs.len();
    if shift == 0.0 && grid.bc == Bc::Neumann {
        return Err(Error::DualNormRequiresDirichlet);
    }
    let inv_h2 = 1.0 / grid.spacing().powi(2);
    let off = -inv_h2;
    let diag = |i: usize| {
        let boundary = grid.bc == Bc::Neumann && (i == 0 || i + 1 == n);
        shift + if boundary { inv_h2 } else { 2.0 * inv_h2 }
    };
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut b = diag(0);
    c[0] = off / b;
    d[0] = rhs[0] / b;
    for i in 1..n {
        b = diag(i) - off * c[i - 1];
        if b.abs() < f64::MIN_POSITIVE {
            return Err(Error::Singular("tridiagonal pivot vanished".into()));
        }
        c[i] = off / b;
        d[i] = (rhs[i] - off * d[i - 1]) / b;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}

/// Squared discrete gradient `h * sum(((u[i+1] - u[i]) / h)^2)` with one-sided
/// boundary differences on Dirichlet grids and zero flux on Neumann grids.
fn grad_sq(grid: &Grid, u: &[f64]) -> f64 {
    let h = grid.spacing();
    let n = u.len();
    let mut s: f64 = u.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    if grid.bc == Bc::Dirichlet {
        s += u[0] * u[0] + u[n - 1] * u[n - 1];
    }
    s / h
}

/// A real-valued function sampled at the unknowns of a [`Grid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_interior {
            return Err(Error::DimensionMismatch {
                expected: grid.n_interior,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("field values must be finite"));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.n_interior);
        Self { grid, values }
    }

    /// Exchanges the value buffer with `v` (same length).
    pub(crate) fn swap_values(&mut self, v: &mut Vec<f64>) {
        debug_assert_eq!(v.len(), self.values.len());
        std::mem::swap(&mut self.values, v);
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n_interior],
        }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.n_interior],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.n_interior).map(|i| f(grid.node(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Field {
        self.map(|v| a * v)
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        self.grid.check_same(&other.grid)?;
        Ok(Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.lincomb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.lincomb(1.0, other, -1.0)
    }

    /// Pointwise product.
    pub fn mul(&self, other: &Field) -> Result<Field> {
        self.grid.check_same(&other.grid)?;
        Ok(Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x * y)
                .collect(),
        })
    }

    /// Copies the values onto another grid with the same number of unknowns.
    pub fn transfer(&self, grid: Grid) -> Result<Field> {
        if grid.n_interior != self.grid.n_interior {
            return Err(Error::DimensionMismatch {
                expected: grid.n_interior,
                got: self.grid.n_interior,
            });
        }
        Ok(Field {
            grid,
            values: self.values.clone(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    L2,
    H1Sobolev,
    /// `sqrt(|u|^2 + |laplacian u|^2)`; the energy space of the fourth-order slow operator.
    H2Sobolev,
    Hm1Dual,
    Lp { p: f64 },
}

impl NormKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NormKind::Lp { p } if !(p >= 1.0) => {
                Err(Error::config(format!("Lp norm requires p >= 1, got {p}")))
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormKind::L2 => write!(f, "L2"),
            NormKind::H1Sobolev => write!(f, "H1"),
            NormKind::H2Sobolev => write!(f, "H2"),
            NormKind::Hm1Dual => write!(f, "H-1"),
            NormKind::Lp { p } => write!(f, "L{p}"),
        }
    }
}

pub fn laplacian(u: &Field) -> Field {
    let mut out = vec![0.0; u.len()];
    laplacian_into(&u.grid, &u.values, &mut out);
    Field::from_vec_unchecked(u.grid, out)
}

/// The discrete Laplacian applied twice with the grid's closure; on Neumann
/// grids this realises zero flux for both `u` and `laplacian(u)`.
pub fn bilaplacian(u: &Field) -> Field {
    laplacian(&laplacian(u))
}

pub fn norm(u: &Field, kind: NormKind) -> Result<f64> {
    kind.validate()?;
    norm_raw(&u.grid, &u.values, kind)
}

pub(crate) fn norm_raw(grid: &Grid, u: &[f64], kind: NormKind) -> Result<f64> {
    let h = grid.spacing();
    let l2_sq = h * u.iter().map(|v| v * v).sum::<f64>();
    Ok(match kind {
        NormKind::L2 => l2_sq.sqrt(),
        NormKind::Lp { p } => {
            if p == 2.0 {
                l2_sq.sqrt()
            } else {
                (h * u.iter().map(|v| v.abs().powf(p)).sum::<f64>()).powf(1.0 / p)
            }
        }
        NormKind::H1Sobolev => (l2_sq + grad_sq(grid, u)).sqrt(),
        NormKind::H2Sobolev => {
            let mut lap = vec![0.0; u.len()];
            laplacian_into(grid, u, &mut lap);
            (l2_sq + h * lap.iter().map(|v| v * v).sum::<f64>()).sqrt()
        }
        NormKind::Hm1Dual => {
            if grid.bc != Bc::Dirichlet {
                return Err(Error::DualNormRequiresDirichlet);
            }
            let w = solve_shifted(grid, 0.0, u)?;
            (h * dot(u, &w)).max(0.0).sqrt()
        }
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn inner(u: &Field, v: &Field, kind: NormKind) -> Result<f64> {
    u.grid.check_same(&v.grid)?;
    inner_raw(&u.grid, &u.values, &v.values, kind)
}

pub(crate) fn inner_raw(grid: &Grid, u: &[f64], v: &[f64], kind: NormKind) -> Result<f64> {
    let h = grid.spacing();
    match kind {
        NormKind::L2 => Ok(h * dot(u, v)),
        NormKind::Hm1Dual => {
            if grid.bc != Bc::Dirichlet {
                return Err(Error::DualNormRequiresDirichlet);
            }
            let w = solve_shifted(grid, 0.0, v)?;
            Ok(h * dot(u, &w))
        }
        other => Err(Error::NotAnInnerProduct(other.to_string())),
    }
}

/// A discrete Gelfand triple `V ⊂ H ⊂ V*`: the pivot space `H` fixes how a grid
/// vector acts as a functional, `V` fixes the norm that functional is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub h: NormKind,
    pub v: NormKind,
}

impl Triple {
    pub fn new(h: NormKind, v: NormKind) -> Self {
        Self { h, v }
    }

    /// `V*<z, v>_V`, extending the `H` inner product.
    pub fn pairing(&self, z: &Field, v: &Field) -> Result<f64> {
        inner(z, v, self.h)
    }

    /// L2 Riesz representative of the functional `z`: `pairing(z, v) = h * w . v`.
    fn riesz(&self, z: &Field) -> Result<Vec<f64>> {
        match self.h {
            NormKind::L2 => Ok(z.values.clone()),
            NormKind::Hm1Dual => {
                if z.grid.bc != Bc::Dirichlet {
                    return Err(Error::DualNormRequiresDirichlet);
                }
                solve_shifted(&z.grid, 0.0, &z.values)
            }
            other => Err(Error::NotAnInnerProduct(other.to_string())),
        }
    }

    /// Operator norm of `v -> pairing(z, v)` with respect to `|v|_V`.
    pub fn dual_norm(&self, z: &Field) -> Result<f64> {
        let grid = z.grid;
        let h = grid.spacing();
        let w = self.riesz(z)?;
        match self.v {
            NormKind::L2 => norm_raw(&grid, &w, NormKind::L2),
            NormKind::Lp { p } => {
                if p <= 1.0 {
                    return Ok(w.iter().fold(0.0, |m, x| m.max(x.abs())));
                }
                let q = p / (p - 1.0);
                norm_raw(&grid, &w, NormKind::Lp { p: q })
            }
            NormKind::H1Sobolev => {
                let s = solve_shifted(&grid, 1.0, &w)?;
                Ok((h * dot(&w, &s)).max(0.0).sqrt())
            }
            NormKind::H2Sobolev => {
                let lap = grid.laplacian_matrix();
                let m = DMatrix::identity(w.len(), w.len()) + &lap * &lap;
                let chol = m
                    .cholesky()
                    .ok_or_else(|| Error::Singular("I + bilaplacian".into()))?;
                let wv = DVector::from_column_slice(&w);
                let s = chol.solve(&wv);
                Ok((h * wv.dot(&s)).max(0.0).sqrt())
            }
            NormKind::Hm1Dual => {
                let mut lap = vec![0.0; w.len()];
                laplacian_into(&grid, &w, &mut lap);
                Ok((-h * dot(&w, &lap)).max(0.0).sqrt())
            }
        }
    }
}

/// Norm of the identity map between two norm kinds on a grid, used to turn
/// pointwise Lipschitz constants into constants between the model's spaces.
pub fn embedding_constant(grid: &Grid, from: NormKind, to: NormKind) -> f64 {
    use NormKind::*;
    match (from, to) {
        (a, b) if a == b => 1.0,
        (L2, Hm1Dual) => 1.0 / grid.lambda_min().sqrt(),
        (Hm1Dual, L2) => grid.lambda_max().sqrt(),
        (H1Sobolev, L2) | (H2Sobolev, L2) => 1.0,
        (L2, H1Sobolev) => (1.0 + grid.lambda_max()).sqrt(),
        _ => f64::INFINITY,
    }
}
