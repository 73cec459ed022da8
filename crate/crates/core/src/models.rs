//! Coefficient catalog for the slow-fast system: slow drift, coupling,
//! slow noise, fast reaction-diffusion drift and fast noise, together with the
//! Gelfand triple each slow variant lives in.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    self, dot, embedding_constant, inner_raw, laplacian_into, norm_raw, solve_shifted, Bc, Field,
    Grid, NormKind, Triple,
};

/// Porous-medium nonlinearity `|s|^(r-1) s`.
pub fn psi(r: f64, s: f64) -> f64 {
    if r == 1.0 {
        s
    } else {
        s.abs().powf(r - 1.0) * s
    }
}

pub fn psi_prime(r: f64, s: f64) -> f64 {
    if r == 1.0 {
        1.0
    } else {
        r * s.abs().powf(r - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlowOperatorSpec {
    /// `laplacian(psi(u))` in the triple `L^(r+1) ⊂ H^-1 ⊂ (L^(r+1))*`.
    PorousMedium { r: f64 },
    /// `-bilaplacian(u) + laplacian(a u^3 + b u)` in `H2 ⊂ L2 ⊂ (H2)*`, Neumann closure.
    CahnHilliard { a: f64, b: f64 },
    /// `a * laplacian(u)` in `H1 ⊂ L2 ⊂ H1*`.
    LinearDiagnostic { a: f64 },
}

impl SlowOperatorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SlowOperatorSpec::PorousMedium { r } if !(r >= 1.0) => Err(Error::config(format!(
                "model.slow.r must be >= 1, got {r}"
            ))),
            SlowOperatorSpec::CahnHilliard { a, .. } if !(a > 0.0) => Err(Error::config(
                format!("model.slow.a must be > 0 for the Cahn-Hilliard potential, got {a}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn required_bc(&self) -> Option<Bc> {
        match self {
            SlowOperatorSpec::PorousMedium { .. } => Some(Bc::Dirichlet),
            SlowOperatorSpec::CahnHilliard { .. } => Some(Bc::Neumann),
            SlowOperatorSpec::LinearDiagnostic { .. } => None,
        }
    }

    pub fn triple(&self) -> Triple {
        match *self {
            SlowOperatorSpec::PorousMedium { r } => {
                Triple::new(NormKind::Hm1Dual, NormKind::Lp { p: r + 1.0 })
            }
            SlowOperatorSpec::CahnHilliard { .. } => Triple::new(NormKind::L2, NormKind::H2Sobolev),
            SlowOperatorSpec::LinearDiagnostic { .. } => {
                Triple::new(NormKind::L2, NormKind::H1Sobolev)
            }
        }
    }

    /// Coercivity exponent of the variant (`m = r + 1` for porous medium, 2 otherwise).
    pub fn alpha(&self) -> f64 {
        match *self {
            SlowOperatorSpec::PorousMedium { r } => r + 1.0,
            _ => 2.0,
        }
    }

    /// Cahn-Hilliard chemical potential `a x^3 + b x`.
    pub fn potential(&self, x: f64) -> f64 {
        match *self {
            SlowOperatorSpec::CahnHilliard { a, b } => a * x * x * x + b * x,
            _ => 0.0,
        }
    }

    pub fn potential_prime(&self, x: f64) -> f64 {
        match *self {
            SlowOperatorSpec::CahnHilliard { a, b } => 3.0 * a * x * x + b,
            _ => 0.0,
        }
    }

    fn check_bc(&self, grid: &Grid) -> Result<()> {
        match self.required_bc() {
            Some(bc) if bc != grid.bc() => Err(Error::config(format!(
                "slow operator {self:?} requires a {bc:?} grid, got {:?}",
                grid.bc()
            ))),
            _ => Ok(()),
        }
    }
}

pub(crate) fn slow_drift_into(spec: &SlowOperatorSpec, grid: &Grid, u: &[f64], out: &mut [f64]) {
    match *spec {
        SlowOperatorSpec::PorousMedium { r } => {
            let p: Vec<f64> = u.iter().map(|&s| psi(r, s)).collect();
            laplacian_into(grid, &p, out);
        }
        SlowOperatorSpec::CahnHilliard { .. } => {
            let mut lap = vec![0.0; u.len()];
            laplacian_into(grid, u, &mut lap);
            let mut bilap = vec![0.0; u.len()];
            laplacian_into(grid, &lap, &mut bilap);
            let phi: Vec<f64> = u.iter().map(|&s| spec.potential(s)).collect();
            laplacian_into(grid, &phi, out);
            for (o, b) in out.iter_mut().zip(&bilap) {
                *o -= b;
            }
        }
        SlowOperatorSpec::LinearDiagnostic { a } => {
            laplacian_into(grid, u, out);
            out.iter_mut().for_each(|o| *o *= a);
        }
    }
}

pub fn slow_drift(spec: &SlowOperatorSpec, u: &Field) -> Result<Field> {
    spec.check_bc(u.grid())?;
    let mut out = vec![0.0; u.len()];
    slow_drift_into(spec, u.grid(), u.values(), &mut out);
    Ok(Field::from_vec_unchecked(*u.grid(), out))
}

/// Duality pairing `V*<A(u), v>_V` evaluated in the variant's triple.
pub fn slow_pair(spec: &SlowOperatorSpec, u: &Field, v: &Field) -> Result<f64> {
    spec.check_bc(u.grid())?;
    u.grid().check_same(v.grid())?;
    let grid = u.grid();
    match *spec {
        // <laplacian psi(u), v>_{H^-1} = -<psi(u), v>_{L2}
        SlowOperatorSpec::PorousMedium { r } => {
            let p: Vec<f64> = u.values().iter().map(|&s| psi(r, s)).collect();
            Ok(-grid.spacing() * dot(&p, v.values()))
        }
        _ => {
            let d = slow_drift(spec, u)?;
            inner_raw(grid, d.values(), v.values(), NormKind::L2)
        }
    }
}

/// Field-valued map of the slow state used inside couplings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum XMap {
    /// `gain * x + offset` pointwise.
    Affine {
        gain: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `gain * sin(x)` pointwise.
    Sine { gain: f64 },
}

impl XMap {
    pub fn zero() -> Self {
        XMap::Affine {
            gain: 0.0,
            offset: 0.0,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            XMap::Affine { gain, offset } => gain * x + offset,
            XMap::Sine { gain } => gain * x.sin(),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            XMap::Affine { gain, .. } => gain,
            XMap::Sine { gain } => gain * x.cos(),
        }
    }

    pub fn gain(&self) -> f64 {
        match *self {
            XMap::Affine { gain, .. } | XMap::Sine { gain } => gain,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, XMap::Affine { .. })
    }

    /// Lipschitz constant from `(grid, from)` into `(grid, to)`.
    pub fn lipschitz(&self, grid: &Grid, from: NormKind, to: NormKind) -> f64 {
        let g = self.gain().abs();
        if g == 0.0 {
            return 0.0;
        }
        match self {
            XMap::Affine { .. } if from == to => g,
            XMap::Affine { .. } => g * embedding_constant(grid, from, to),
            XMap::Sine { .. } => {
                g * embedding_constant(grid, from, NormKind::L2)
                    * embedding_constant(grid, NormKind::L2, to)
            }
        }
    }
}

/// Coupling between slow and fast states, used both for the slow forcing `f(x, y)`
/// and for the fast forcing `g(x, y)`. Both act pointwise on grids sharing `n_interior`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CouplingSpec {
    /// `f0(x) + gain_y * y`.
    Affine { f0: XMap, gain_y: f64 },
    /// `gain * sin(y)`, independent of `x`.
    BoundedLip { gain: f64 },
}

impl CouplingSpec {
    pub fn zero() -> Self {
        CouplingSpec::Affine {
            f0: XMap::zero(),
            gain_y: 0.0,
        }
    }

    pub fn depends_on_y(&self) -> bool {
        match *self {
            CouplingSpec::Affine { gain_y, .. } => gain_y != 0.0,
            CouplingSpec::BoundedLip { gain } => gain != 0.0,
        }
    }

    /// Pointwise Lipschitz constant in `y`.
    pub fn lipschitz_y(&self) -> f64 {
        match *self {
            CouplingSpec::Affine { gain_y, .. } => gain_y.abs(),
            CouplingSpec::BoundedLip { gain } => gain.abs(),
        }
    }

    pub fn x_map(&self) -> Option<&XMap> {
        match self {
            CouplingSpec::Affine { f0, .. } => Some(f0),
            CouplingSpec::BoundedLip { .. } => None,
        }
    }

    pub(crate) fn apply_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self {
            CouplingSpec::Affine { f0, gain_y } => {
                for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
                    *o = f0.eval(xi) + gain_y * yi;
                }
            }
            CouplingSpec::BoundedLip { gain } => {
                for (o, &yi) in out.iter_mut().zip(y) {
                    *o = gain * yi.sin();
                }
            }
        }
    }
}

fn check_same_size(x: &Field, y: &Field) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::GridMismatch(format!(
            "slow and fast grids must share n_interior ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Slow forcing `f(x, y)`, returned on the slow grid.
pub fn coupling_f(spec: &CouplingSpec, x: &Field, y: &Field) -> Result<Field> {
    check_same_size(x, y)?;
    let mut out = vec![0.0; x.len()];
    spec.apply_into(x.values(), y.values(), &mut out);
    Ok(Field::from_vec_unchecked(*x.grid(), out))
}

/// Fast forcing `g(x, y)`, returned on the fast grid.
pub fn coupling_g(spec: &CouplingSpec, x: &Field, y: &Field) -> Result<Field> {
    check_same_size(x, y)?;
    let mut out = vec![0.0; y.len()];
    spec.apply_into(x.values(), y.values(), &mut out);
    Ok(Field::from_vec_unchecked(*y.grid(), out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dependence {
    Additive,
    /// Scalar multiplier `min(1 + slope * |state|_H, cap)`.
    LinearClipped { slope: f64, cap: f64 },
}

/// Noise operator diagonal in the Laplacian eigenbasis: `z -> m(state) * sum_k b_k z_k e_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub amplitudes: Vec<f64>,
    pub dependence: Dependence,
    /// Norm of the state entering the multiplier; the pivot space of the component.
    #[serde(default = "default_state_norm")]
    pub state_norm: NormKind,
}

fn default_state_norm() -> NormKind {
    NormKind::L2
}

impl NoiseSpec {
    pub fn additive(amplitudes: Vec<f64>) -> Self {
        Self {
            amplitudes,
            dependence: Dependence::Additive,
            state_norm: NormKind::L2,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.amplitudes.len() > grid.n_interior() {
            return Err(Error::config(format!(
                "noise has {} modes but the grid only has {} unknowns",
                self.amplitudes.len(),
                grid.n_interior()
            )));
        }
        if self.amplitudes.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::config("noise amplitudes must be finite and >= 0"));
        }
        if let Dependence::LinearClipped { slope, cap } = self.dependence {
            if !(slope >= 0.0 && cap > 0.0) {
                return Err(Error::config(format!(
                    "linear_clipped noise needs slope >= 0 and cap > 0, got slope={slope}, cap={cap}"
                )));
            }
        }
        Ok(())
    }

    pub fn amplitude_sq_sum(&self) -> f64 {
        self.amplitudes.iter().map(|b| b * b).sum()
    }

    pub(crate) fn multiplier_raw(&self, grid: &Grid, state: &[f64]) -> Result<f64> {
        match self.dependence {
            Dependence::Additive => Ok(1.0),
            Dependence::LinearClipped { slope, cap } => {
                let n = norm_raw(grid, state, self.state_norm)?;
                Ok((1.0 + slope * n).min(cap))
            }
        }
    }

    pub fn multiplier(&self, state: &Field) -> Result<f64> {
        self.multiplier_raw(state.grid(), state.values())
    }

    /// Euclidean gradient of the multiplier with respect to the state vector.
    pub(crate) fn multiplier_gradient(&self, grid: &Grid, state: &[f64]) -> Result<Vec<f64>> {
        match self.dependence {
            Dependence::Additive => Ok(vec![0.0; state.len()]),
            Dependence::LinearClipped { slope, cap } => {
                if slope == 0.0 {
                    return Ok(vec![0.0; state.len()]);
                }
                let n = norm_raw(grid, state, self.state_norm)?;
                let raw = 1.0 + slope * n;
                if (raw - cap).abs() <= 1e-12 * cap || n == 0.0 {
                    return Err(Error::JacobianUnavailable(
                        "noise multiplier is not differentiable at this state".into(),
                    ));
                }
                if raw > cap {
                    return Ok(vec![0.0; state.len()]);
                }
                let h = grid.spacing();
                let riesz = match self.state_norm {
                    NormKind::L2 => state.to_vec(),
                    NormKind::Hm1Dual => solve_shifted(grid, 0.0, state)?,
                    other => {
                        return Err(Error::JacobianUnavailable(format!(
                            "multiplier gradient for state norm {other}"
                        )))
                    }
                };
                Ok(riesz.iter().map(|w| slope * h * w / n).collect())
            }
        }
    }

    /// Lipschitz constant of the state-to-Hilbert-Schmidt map.
    pub fn lipschitz(&self) -> f64 {
        match self.dependence {
            Dependence::Additive => 0.0,
            Dependence::LinearClipped { slope, .. } => slope * self.amplitude_sq_sum().sqrt(),
        }
    }

    /// Uniform bound on the Hilbert-Schmidt norm over all states.
    pub fn sup_hs(&self) -> f64 {
        let m = match self.dependence {
            Dependence::Additive => 1.0,
            Dependence::LinearClipped { cap, .. } => cap,
        };
        m * self.amplitude_sq_sum().sqrt()
    }

    /// Row-major `n x n_modes` matrix whose columns are `b_k e_k`.
    pub(crate) fn basis(&self, grid: &Grid) -> Vec<f64> {
        let n = grid.n_interior();
        let m = self.n_modes();
        let mut out = vec![0.0; n * m];
        for k in 0..m {
            let e = grid.eigenmode(k);
            for i in 0..n {
                out[i * m + k] = self.amplitudes[k] * e.values()[i];
            }
        }
        out
    }
}

pub fn noise_apply(spec: &NoiseSpec, state: &Field, z: &[f64]) -> Result<Field> {
    if z.len() != spec.n_modes() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_modes(),
            got: z.len(),
        });
    }
    spec.validate(state.grid())?;
    let grid = *state.grid();
    let m = spec.multiplier(state)?;
    let mut out = vec![0.0; grid.n_interior()];
    for (k, (&b, &zk)) in spec.amplitudes.iter().zip(z).enumerate() {
        if zk == 0.0 || b == 0.0 {
            continue;
        }
        let e = grid.eigenmode(k);
        for (o, ei) in out.iter_mut().zip(e.values()) {
            *o += m * b * zk * ei;
        }
    }
    Ok(Field::from_vec_unchecked(grid, out))
}

/// Squared Hilbert-Schmidt norm into L2 (eigenmodes are L2-orthonormal).
pub fn noise_hs_norm_sq(spec: &NoiseSpec, state: &Field) -> Result<f64> {
    let m = spec.multiplier(state)?;
    Ok(m * m * spec.amplitude_sq_sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastOperatorSpec {
    pub c1: f64,
    pub c2: f64,
    pub g: CouplingSpec,
}

impl FastOperatorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 >= 0.0 && self.c2 >= 0.0) {
            return Err(Error::config(format!(
                "model.fast needs c1, c2 >= 0, got c1={}, c2={}",
                self.c1, self.c2
            )));
        }
        Ok(())
    }

    /// Lipschitz constant of `g` in the fast variable.
    pub fn lg(&self) -> f64 {
        self.g.lipschitz_y()
    }

    pub(crate) fn explicit_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.g.apply_into(x, y, out);
        for (o, &yi) in out.iter_mut().zip(y) {
            *o += self.c1 * yi - self.c2 * yi * yi * yi;
        }
    }
}

/// `laplacian(y) + c1 y - c2 y^3 + g(x, y)` on the fast grid.
pub fn fast_drift(spec: &FastOperatorSpec, x: &Field, y: &Field) -> Result<Field> {
    check_same_size(x, y)?;
    let mut lap = vec![0.0; y.len()];
    laplacian_into(y.grid(), y.values(), &mut lap);
    let mut out = vec![0.0; y.len()];
    spec.explicit_into(x.values(), y.values(), &mut out);
    for (o, l) in out.iter_mut().zip(&lap) {
        *o += l;
    }
    Ok(Field::from_vec_unchecked(*y.grid(), out))
}

/// A complete slow-fast model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub slow_grid: Grid,
    pub fast_grid: Grid,
    pub slow: SlowOperatorSpec,
    /// Slow forcing `f(x, y)`.
    pub coupling: CouplingSpec,
    pub slow_noise: NoiseSpec,
    pub fast: FastOperatorSpec,
    pub fast_noise: NoiseSpec,
    /// Coefficient of the implicit Laplacian used to stabilise the porous-medium step.
    #[serde(default = "default_stabilization")]
    pub stabilization: f64,
}

fn default_stabilization() -> f64 {
    1.0
}

impl Model {
    /// Validates the model and pins each noise multiplier to its pivot-space norm.
    pub fn new(
        slow_grid: Grid,
        fast_grid: Grid,
        slow: SlowOperatorSpec,
        coupling: CouplingSpec,
        mut slow_noise: NoiseSpec,
        fast: FastOperatorSpec,
        mut fast_noise: NoiseSpec,
    ) -> Result<Self> {
        slow.validate()?;
        slow.check_bc(&slow_grid)?;
        fast.validate()?;
        if fast_grid.bc() != Bc::Dirichlet {
            return Err(Error::config("the fast grid must carry Dirichlet conditions"));
        }
        if slow_grid.n_interior() != fast_grid.n_interior() {
            return Err(Error::config(format!(
                "slow and fast grids must share n_interior ({} vs {})",
                slow_grid.n_interior(),
                fast_grid.n_interior()
            )));
        }
        slow_noise.state_norm = slow.triple().h;
        fast_noise.state_norm = NormKind::L2;
        slow_noise.validate(&slow_grid)?;
        fast_noise.validate(&fast_grid)?;
        Ok(Self {
            slow_grid,
            fast_grid,
            slow,
            coupling,
            slow_noise,
            fast,
            fast_noise,
            stabilization: default_stabilization(),
        })
    }

    pub fn with_stabilization(mut self, s: f64) -> Self {
        self.stabilization = s;
        self
    }

    pub fn n(&self) -> usize {
        self.slow_grid.n_interior()
    }

    pub fn slow_triple(&self) -> Triple {
        self.slow.triple()
    }

    pub fn fast_triple(&self) -> Triple {
        Triple::new(NormKind::L2, NormKind::H1Sobolev)
    }

    pub fn slow_h(&self) -> NormKind {
        self.slow.triple().h
    }

    /// `2 lambda_1 - 2 L_g - L_B2^2` with the discrete first eigenvalue of the fast grid.
    pub fn dissipativity_gap(&self) -> f64 {
        dissipativity_gap(
            self.fast_grid.lambda_min(),
            self.fast.lg(),
            self.fast_noise.lipschitz(),
        )
    }

    /// Guaranteed strict-monotonicity rate of the fast drift, including the linear
    /// reaction coefficient: `2 (lambda_1 - c1) - 2 L_g - L_B2^2`.
    pub fn kappa_bound(&self) -> f64 {
        self.dissipativity_gap() - 2.0 * self.fast.c1
    }

    /// Lipschitz constant of `f` in `y`, measured from the fast pivot space into the slow one.
    pub fn f_lipschitz_y(&self) -> f64 {
        let emb = embedding_constant(&self.slow_grid, NormKind::L2, self.slow_h());
        self.coupling.lipschitz_y() * transfer_factor(&self.fast_grid, &self.slow_grid) * emb
    }

    pub fn f_lipschitz_x(&self) -> f64 {
        let h = self.slow_h();
        self.coupling
            .x_map()
            .map_or(0.0, |m| m.lipschitz(&self.slow_grid, h, h))
    }

    /// Lipschitz constant of `g` in `x`, from the slow pivot space into L2.
    pub fn g_lipschitz_x(&self) -> f64 {
        let t = transfer_factor(&self.slow_grid, &self.fast_grid);
        self.fast
            .g
            .x_map()
            .map_or(0.0, |m| t * m.lipschitz(&self.slow_grid, self.slow_h(), NormKind::L2))
    }

    /// Matrix of the slow operator part treated implicitly.
    pub fn slow_implicit_matrix(&self) -> DMatrix<f64> {
        let lap = self.slow_grid.laplacian_matrix();
        match self.slow {
            SlowOperatorSpec::PorousMedium { .. } => lap * self.stabilization,
            SlowOperatorSpec::CahnHilliard { .. } => -(&lap * &lap),
            SlowOperatorSpec::LinearDiagnostic { a } => lap * a,
        }
    }

    /// Slow drift minus its implicit part.
    pub(crate) fn slow_explicit_into(&self, u: &[f64], out: &mut [f64]) {
        let g = &self.slow_grid;
        match self.slow {
            SlowOperatorSpec::PorousMedium { r } => {
                let s = self.stabilization;
                let p: Vec<f64> = u.iter().map(|&x| psi(r, x) - s * x).collect();
                laplacian_into(g, &p, out);
            }
            SlowOperatorSpec::CahnHilliard { .. } => {
                let p: Vec<f64> = u.iter().map(|&x| self.slow.potential(x)).collect();
                laplacian_into(g, &p, out);
            }
            SlowOperatorSpec::LinearDiagnostic { .. } => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }

    pub(crate) fn slow_explicit_has_jacobian(&self) -> bool {
        !matches!(self.slow, SlowOperatorSpec::LinearDiagnostic { .. })
    }

    /// `out = J(u)^T q` for the explicit slow part (the Laplacian is symmetric).
    pub(crate) fn slow_explicit_vjp(&self, u: &[f64], q: &[f64], out: &mut [f64]) {
        let g = &self.slow_grid;
        match self.slow {
            SlowOperatorSpec::PorousMedium { r } => {
                laplacian_into(g, q, out);
                let s = self.stabilization;
                for (o, &x) in out.iter_mut().zip(u) {
                    *o *= psi_prime(r, x) - s;
                }
            }
            SlowOperatorSpec::CahnHilliard { .. } => {
                laplacian_into(g, q, out);
                for (o, &x) in out.iter_mut().zip(u) {
                    *o *= self.slow.potential_prime(x);
                }
            }
            SlowOperatorSpec::LinearDiagnostic { .. } => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }

    /// Norms used by the energy diagnostics.
    pub fn slow_h_norm(&self, u: &Field) -> Result<f64> {
        field::norm(u, self.slow_h())
    }
}

/// L2 norm ratio picked up when nodal values are copied from one grid to another
/// with the same node count but a different spacing.
pub fn transfer_factor(from: &Grid, to: &Grid) -> f64 {
    (to.spacing() / from.spacing()).sqrt()
}

/// `2 lambda_1 - 2 L_g - L_B2^2`.
pub fn dissipativity_gap(lambda1: f64, lg: f64, lb2: f64) -> f64 {
    2.0 * lambda1 - 2.0 * lg - lb2 * lb2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{inner, laplacian, norm};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dgrid(n: usize) -> Grid {
        Grid::dirichlet(n, 1.0).unwrap()
    }

    fn random_field(rng: &mut ChaCha8Rng, grid: Grid, amp: f64) -> Field {
        let v = (0..grid.n_interior())
            .map(|_| amp * (rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        Field::new(grid, v).unwrap()
    }

    #[test]
    fn psi_values() {
        assert_eq!(psi(3.0, 2.0), 8.0);
        assert_eq!(psi(3.0, -2.0), -8.0);
        assert_eq!(psi(3.0, 0.0), 0.0);
        assert_eq!(psi_prime(3.0, 2.0), 12.0);
    }

    #[test]
    fn porous_medium_zero_and_bc() {
        let spec = SlowOperatorSpec::PorousMedium { r: 3.0 };
        let u = Field::zeros(dgrid(6));
        assert!(slow_drift(&spec, &u).unwrap().values().iter().all(|&v| v == 0.0));
        let n = Field::zeros(Grid::neumann(6, 1.0).unwrap());
        assert!(matches!(slow_drift(&spec, &n), Err(Error::Config(_))));
        assert_eq!(slow_pair(&spec, &u, &u).unwrap(), 0.0);
    }

    #[test]
    fn linear_diagnostic_on_eigenmode() {
        let g = dgrid(10);
        let spec = SlowOperatorSpec::LinearDiagnostic { a: 1.0 };
        for k in 0..10 {
            let e = g.eigenmode(k);
            let d = slow_drift(&spec, &e).unwrap();
            let lam = g.eigenvalue(k);
            for (di, ei) in d.values().iter().zip(e.values()) {
                assert!((di + lam * ei).abs() < 1e-9 * lam);
            }
        }
    }

    #[test]
    fn porous_medium_pairing_matches_summation() {
        let g = dgrid(12);
        let spec = SlowOperatorSpec::PorousMedium { r: 3.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u = random_field(&mut rng, g, 2.0);
            let pair = slow_pair(&spec, &u, &u).unwrap();
            // oracle: -h sum psi(u) u = -|u|_{L4}^4 (c1 = 1, c2 = 0, m = 4)
            let direct = -g.spacing() * u.values().iter().map(|s| s.powi(4)).sum::<f64>();
            assert_relative_eq!(pair, direct, max_relative = 1e-13);
            let l4 = norm(&u, NormKind::Lp { p: 4.0 }).unwrap();
            assert!(pair <= -l4.powi(4) + 1e-12 * l4.powi(4));
            // the generic triple route agrees: <lap psi(u), u>_{H^-1}
            let d = slow_drift(&spec, &u).unwrap();
            let via_triple = spec.triple().pairing(&d, &u).unwrap();
            assert_relative_eq!(pair, via_triple, max_relative = 1e-9);
        }
    }

    #[test]
    fn porous_medium_is_monotone() {
        let g = dgrid(8);
        let spec = SlowOperatorSpec::PorousMedium { r: 3.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let u = random_field(&mut rng, g, 3.0);
            let v = random_field(&mut rng, g, 3.0);
            let w = u.sub(&v).unwrap();
            let lhs = slow_pair(&spec, &u, &w).unwrap() - slow_pair(&spec, &v, &w).unwrap();
            // oracle: h * sum (psi(s) - psi(t)) (s - t) >= 0
            let oracle: f64 = u
                .values()
                .iter()
                .zip(v.values())
                .map(|(&s, &t)| (psi(3.0, s) - psi(3.0, t)) * (s - t))
                .sum::<f64>()
                * g.spacing();
            assert!(oracle >= 0.0);
            assert!(lhs <= 1e-10);
            assert_relative_eq!(lhs, -oracle, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn cahn_hilliard_one_sided_bound() {
        let spec = SlowOperatorSpec::CahnHilliard { a: 1.0, b: -1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let x: f64 = (rng.random::<f64>() - 0.5) * 200.0;
            assert!(spec.potential_prime(x) >= -1.0);
        }
        assert!(SlowOperatorSpec::CahnHilliard { a: 0.0, b: 1.0 }.validate().is_err());
        assert!(SlowOperatorSpec::PorousMedium { r: 0.5 }.validate().is_err());
    }

    #[test]
    fn fast_drift_cases() {
        let g = dgrid(6);
        let zero = Field::zeros(g);
        let spec = FastOperatorSpec {
            c1: 0.0,
            c2: 0.0,
            g: CouplingSpec::zero(),
        };
        assert!(fast_drift(&spec, &zero, &zero).unwrap().values().iter().all(|&v| v == 0.0));

        // c2 = 1, y = 2: cubic contributes -8 at every node on top of the Laplacian
        let spec = FastOperatorSpec {
            c1: 0.0,
            c2: 1.0,
            g: CouplingSpec::zero(),
        };
        let y = Field::constant(g, 2.0);
        let d = fast_drift(&spec, &zero, &y).unwrap();
        let lap = laplacian(&y);
        for (di, li) in d.values().iter().zip(lap.values()) {
            assert_relative_eq!(di - li, -8.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn fast_drift_matches_dense_assembly() {
        let g = dgrid(7);
        let c1 = 1.5;
        let spec = FastOperatorSpec {
            c1,
            c2: 0.0,
            g: CouplingSpec::Affine {
                f0: XMap::Affine {
                    gain: 1.0,
                    offset: 0.0,
                },
                gain_y: 0.0,
            },
        };
        let x = Field::from_fn(g, |s| s * (1.0 - s));
        let y = Field::from_fn(g, |s| (4.0 * s).cos());
        let d = fast_drift(&spec, &x, &y).unwrap();
        let a = g.laplacian_matrix() + DMatrix::identity(7, 7) * c1;
        let yv = nalgebra::DVector::from_column_slice(y.values());
        let xv = nalgebra::DVector::from_column_slice(x.values());
        let dense = a * yv + xv;
        for i in 0..7 {
            assert_relative_eq!(d.values()[i], dense[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn coupling_examples() {
        let g = dgrid(5);
        let x = Field::from_fn(g, |s| s);
        let y = Field::from_fn(g, |s| s * s);
        let id = CouplingSpec::Affine {
            f0: XMap::zero(),
            gain_y: 1.0,
        };
        assert_eq!(coupling_f(&id, &x, &y).unwrap(), y);
        let zero = Field::zeros(g);
        assert!(coupling_f(&id, &x, &zero).unwrap().values().iter().all(|&v| v == 0.0));
        let bl = CouplingSpec::BoundedLip { gain: 2.0 };
        let half_pi = Field::constant(g, std::f64::consts::FRAC_PI_2);
        assert!(coupling_f(&bl, &x, &half_pi)
            .unwrap()
            .values()
            .iter()
            .all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn coupling_lipschitz_certified() {
        let g = dgrid(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let specs = [
            CouplingSpec::Affine {
                f0: XMap::Affine {
                    gain: -0.7,
                    offset: 0.3,
                },
                gain_y: 1.3,
            },
            CouplingSpec::BoundedLip { gain: 2.0 },
            CouplingSpec::Affine {
                f0: XMap::Sine { gain: 0.5 },
                gain_y: -0.2,
            },
        ];
        for spec in &specs {
            let declared = spec
                .x_map()
                .map_or(0.0, |m| m.lipschitz(&g, NormKind::L2, NormKind::L2))
                .max(spec.lipschitz_y());
            for _ in 0..200 {
                let (x1, x2) = (random_field(&mut rng, g, 2.0), random_field(&mut rng, g, 2.0));
                let (y1, y2) = (random_field(&mut rng, g, 2.0), random_field(&mut rng, g, 2.0));
                let df = coupling_f(spec, &x1, &y1)
                    .unwrap()
                    .sub(&coupling_f(spec, &x2, &y2).unwrap())
                    .unwrap();
                let num = norm(&df, NormKind::L2).unwrap();
                let den = norm(&x1.sub(&x2).unwrap(), NormKind::L2).unwrap()
                    + norm(&y1.sub(&y2).unwrap(), NormKind::L2).unwrap();
                assert!(num / den <= declared * (1.0 + 1e-8));
            }
        }
    }

    #[test]
    fn noise_apply_examples() {
        let g = dgrid(6);
        let spec = NoiseSpec::additive(vec![0.5, 0.25, 0.1]);
        let s = Field::zeros(g);
        let z0 = noise_apply(&spec, &s, &[0.0, 0.0, 0.0]).unwrap();
        assert!(z0.values().iter().all(|&v| v == 0.0));
        let z1 = noise_apply(&spec, &s, &[1.0, 0.0, 0.0]).unwrap();
        let e1 = g.eigenmode(0).scale(0.5);
        for (a, b) in z1.values().iter().zip(e1.values()) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
        assert!(matches!(
            noise_apply(&spec, &s, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));

        let clipped = NoiseSpec {
            amplitudes: vec![1.0],
            dependence: Dependence::LinearClipped { slope: 1.0, cap: 2.0 },
            state_norm: NormKind::L2,
        };
        let e = g.eigenmode(0).scale(5.0);
        assert_eq!(clipped.multiplier(&e).unwrap(), 2.0);
    }

    #[test]
    fn noise_hs_norm_matches_mode_sum() {
        let g = dgrid(6);
        let spec = NoiseSpec::additive(vec![1.0, 1.0]);
        assert_eq!(noise_hs_norm_sq(&spec, &Field::zeros(g)).unwrap(), 2.0);
        let zero = NoiseSpec::additive(vec![0.0, 0.0, 0.0]);
        assert_eq!(noise_hs_norm_sq(&zero, &Field::zeros(g)).unwrap(), 0.0);

        let clipped = NoiseSpec {
            amplitudes: vec![0.8, 0.4, 0.3, 0.1],
            dependence: Dependence::LinearClipped { slope: 0.7, cap: 3.0 },
            state_norm: NormKind::L2,
        };
        let state = Field::from_fn(g, |x| 2.0 * x - 0.4);
        let brute: f64 = (0..4)
            .map(|k| {
                let mut z = vec![0.0; 4];
                z[k] = 1.0;
                norm(&noise_apply(&clipped, &state, &z).unwrap(), NormKind::L2)
                    .unwrap()
                    .powi(2)
            })
            .sum();
        assert_relative_eq!(
            noise_hs_norm_sq(&clipped, &state).unwrap(),
            brute,
            max_relative = 1e-10
        );
    }

    #[test]
    fn noise_apply_is_linear_in_z() {
        let g = dgrid(5);
        let spec = NoiseSpec {
            amplitudes: vec![0.3, 0.2],
            dependence: Dependence::LinearClipped { slope: 0.5, cap: 4.0 },
            state_norm: NormKind::L2,
        };
        let s = Field::from_fn(g, |x| x);
        let a = noise_apply(&spec, &s, &[1.0, -2.0]).unwrap();
        let b = noise_apply(&spec, &s, &[0.5, 3.0]).unwrap();
        let c = noise_apply(&spec, &s, &[2.0 + 0.5 * 3.0, -4.0 + 3.0 * 3.0]).unwrap();
        let comb = a.lincomb(2.0, &b, 3.0).unwrap();
        for (x, y) in comb.values().iter().zip(c.values()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn gap_from_continuum_reference() {
        let pi2 = std::f64::consts::PI.powi(2);
        assert_relative_eq!(dissipativity_gap(pi2, 1.0, 1.0), 2.0 * pi2 - 3.0);
        assert!(dissipativity_gap(pi2, 1.0, 1.0) > 0.0);
    }

    #[test]
    fn model_validation() {
        let g = dgrid(6);
        let fast = FastOperatorSpec {
            c1: 0.0,
            c2: 0.0,
            g: CouplingSpec::zero(),
        };
        let ok = Model::new(
            g,
            g,
            SlowOperatorSpec::PorousMedium { r: 3.0 },
            CouplingSpec::zero(),
            NoiseSpec::additive(vec![0.1]),
            fast.clone(),
            NoiseSpec::additive(vec![0.1]),
        )
        .unwrap();
        assert_eq!(ok.slow_noise.state_norm, NormKind::Hm1Dual);
        let bad = Model::new(
            Grid::dirichlet(7, 1.0).unwrap(),
            g,
            SlowOperatorSpec::LinearDiagnostic { a: 1.0 },
            CouplingSpec::zero(),
            NoiseSpec::additive(vec![0.1]),
            fast,
            NoiseSpec::additive(vec![0.1]),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn inner_of_pairing_with_zero() {
        let g = dgrid(4);
        let u = Field::from_fn(g, |x| x);
        assert_eq!(inner(&u, &Field::zeros(g), NormKind::L2).unwrap(), 0.0);
    }
}
