//! Conjugate gradients in the trapezoid-weighted inner product, and a dense
//! LU baseline.
//!
//! `A = I + c L_h^2` is self-adjoint positive definite in `<u, v>_w` but not
//! symmetric as a plain matrix (the boundary weights sit on one side), so the
//! default CG uses weighted dot products throughout. [`InnerKind::Euclidean`]
//! restores plain dot products.

use nalgebra::{DMatrix, DVector};

use crate::conv::ConvolutionPlan;
use crate::error::{Error, Result};
use crate::grid::{Field, QuadWeights};

/// Largest system the dense path will assemble.
pub const DENSE_GUARD: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnerKind {
    #[default]
    Weighted,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    pub tol_rel: f64,
    pub max_iter: usize,
    pub record_history: bool,
    pub inner: InnerKind,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tol_rel: 1e-10,
            max_iter: 1000,
            record_history: false,
            inner: InnerKind::Weighted,
        }
    }
}

impl CgConfig {
    pub fn with_tol(tol_rel: f64) -> Self {
        Self {
            tol_rel,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel > 0.0 && self.tol_rel < 1.0) {
            return Err(Error::config(format!("cg.tol must be in (0, 1), got {}", self.tol_rel)));
        }
        if self.max_iter < 1 {
            return Err(Error::config("cg.max_iter must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CgReport {
    pub iterations: usize,
    pub final_rel_residual: f64,
    pub converged: bool,
    /// Relative residual after each iteration, starting with the initial guess.
    pub history: Option<Vec<f64>>,
}

/// A linear map on raw grid vectors.
pub trait LinearOperator {
    fn apply(&mut self, x: &[f64], y: &mut [f64]);
}

impl<F: FnMut(&[f64], &mut [f64])> LinearOperator for F {
    fn apply(&mut self, x: &[f64], y: &mut [f64]) {
        self(x, y)
    }
}

/// `v ↦ v + c L_h^2 v` through the fast convolution plan.
pub struct StiffnessOperator<'a> {
    plan: &'a ConvolutionPlan,
    coeff: f64,
    ws: crate::conv::ConvWorkspace,
}

impl<'a> StiffnessOperator<'a> {
    pub fn new(plan: &'a ConvolutionPlan, coeff: f64) -> Self {
        Self {
            plan,
            coeff,
            ws: plan.workspace(),
        }
    }
}

impl LinearOperator for StiffnessOperator<'_> {
    fn apply(&mut self, x: &[f64], y: &mut [f64]) {
        self.plan.apply_a_into(x, self.coeff, y, &mut self.ws);
    }
}

struct Dot<'a> {
    kind: InnerKind,
    w: &'a QuadWeights,
}

impl Dot<'_> {
    #[inline]
    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.kind {
            InnerKind::Weighted => self.w.dot(a, b),
            InnerKind::Euclidean => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }
}

/// Solves `A x = b` from the initial guess `x0`.
///
/// Stops when `||b - A x|| / ||b|| <= tol_rel`. Returns `CgNotConverged` if
/// the budget runs out and `CgBreakdown` if a search direction has
/// non-positive curvature.
pub fn cg_solve(op: &mut impl LinearOperator, b: &Field, x0: &Field, cfg: &CgConfig) -> Result<(Field, CgReport)> {
    let (x, report) = cg_solve_unchecked(op, b, x0, cfg)?;
    if !report.converged {
        return Err(Error::CgNotConverged {
            iterations: report.iterations,
            residual: report.final_rel_residual,
        });
    }
    Ok((x, report))
}

/// As [`cg_solve`] but reports non-convergence through `CgReport::converged`
/// instead of an error.
pub fn cg_solve_unchecked(
    op: &mut impl LinearOperator,
    b: &Field,
    x0: &Field,
    cfg: &CgConfig,
) -> Result<(Field, CgReport)> {
    cfg.validate()?;
    b.grid().ensure_same(x0.grid())?;
    let weights = QuadWeights::new(b.grid());
    let ip = Dot {
        kind: cfg.inner,
        w: &weights,
    };
    let n = b.values().len();
    let bv = b.values();
    let b_norm = ip.dot(bv, bv).sqrt();
    let mut history = cfg.record_history.then(Vec::new);

    if b_norm == 0.0 {
        if let Some(h) = history.as_mut() {
            h.push(0.0);
        }
        return Ok((
            Field::zeros(*b.grid()),
            CgReport {
                iterations: 0,
                final_rel_residual: 0.0,
                converged: true,
                history,
            },
        ));
    }

    let mut x = x0.values().to_vec();
    let mut ad = vec![0.0; n];
    op.apply(&x, &mut ad);
    let mut r: Vec<f64> = bv.iter().zip(&ad).map(|(b, a)| b - a).collect();
    let mut rr = ip.dot(&r, &r);
    let mut rel = rr.sqrt() / b_norm;
    if let Some(h) = history.as_mut() {
        h.push(rel);
    }
    let mut d = r.clone();
    let mut iterations = 0;

    while rel > cfg.tol_rel && iterations < cfg.max_iter {
        op.apply(&d, &mut ad);
        let curvature = ip.dot(&d, &ad);
        if !(curvature > 0.0) {
            return Err(Error::CgBreakdown {
                iteration: iterations + 1,
                curvature,
            });
        }
        let omega = rr / curvature;
        for k in 0..n {
            x[k] += omega * d[k];
            r[k] -= omega * ad[k];
        }
        let rr_new = ip.dot(&r, &r);
        let gamma = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            d[k] = r[k] + gamma * d[k];
        }
        iterations += 1;
        rel = rr.sqrt() / b_norm;
        if let Some(h) = history.as_mut() {
            h.push(rel);
        }
    }

    Ok((
        Field::from_values(*b.grid(), x)?,
        CgReport {
            iterations,
            final_rel_residual: rel,
            converged: rel <= cfg.tol_rel,
            history,
        },
    ))
}

/// LU factors of the dense matrix of `v ↦ v + c L_h^2 v`.
pub struct DenseStiffness {
    grid: crate::grid::GridSpec,
    coeff: f64,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseStiffness {
    /// Assembles the matrix column by column from unit vectors and factors it.
    pub fn factor(plan: &ConvolutionPlan, coeff: f64) -> Result<Self> {
        let a = assemble_stiffness(plan, coeff)?;
        let lu = a.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular);
        }
        Ok(Self {
            grid: *plan.grid(),
            coeff,
            lu,
        })
    }

    pub fn coeff(&self) -> f64 {
        self.coeff
    }

    pub fn solve(&self, b: &Field) -> Result<Field> {
        self.grid.ensure_same(b.grid())?;
        let rhs = DVector::from_column_slice(b.values());
        let x = self.lu.solve(&rhs).ok_or(Error::Singular)?;
        Field::from_values(self.grid, x.as_slice().to_vec())
    }
}

/// Dense matrix of `v ↦ v + c L_h^2 v`, guarded by [`DENSE_GUARD`].
pub fn assemble_stiffness(plan: &ConvolutionPlan, coeff: f64) -> Result<DMatrix<f64>> {
    let n = plan.grid().len();
    if n > DENSE_GUARD {
        return Err(Error::SizeGuard { n, guard: DENSE_GUARD });
    }
    if !(coeff >= 0.0) {
        return Err(Error::config(format!(
            "stiffness coefficient must be >= 0, got {coeff}"
        )));
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut ws = plan.workspace();
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for k in 0..n {
        e[k] = 1.0;
        plan.apply_a_into(&e, coeff, &mut col, &mut ws);
        a.column_mut(k).copy_from_slice(&col);
        e[k] = 0.0;
    }
    Ok(a)
}

/// Direct solve of `(I + c L_h^2) x = b` by dense LU with partial pivoting.
pub fn dense_solve(plan: &ConvolutionPlan, c: f64, b: &Field) -> Result<Field> {
    plan.grid().ensure_same(b.grid())?;
    DenseStiffness::factor(plan, c)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Padding;
    use crate::grid::{make_grid, GridSpec};
    use crate::kernel::{sample_kernel, KernelSpec};

    fn setup(m: usize) -> (GridSpec, ConvolutionPlan) {
        let g = make_grid(1.0, m).unwrap();
        let t = sample_kernel(&g, &KernelSpec::gaussian(0.5).unwrap()).unwrap();
        (g, ConvolutionPlan::new(&g, &t, Padding::Even).unwrap())
    }

    fn ramp(g: GridSpec) -> Field {
        Field::from_fn(g, |x, y| (3.0 * x).sin() + x * y - 0.2 * y)
    }

    #[test]
    fn identity_converges_in_one_iteration() {
        let (g, _) = setup(6);
        let b = ramp(g);
        let mut id = |x: &[f64], y: &mut [f64]| y.copy_from_slice(x);
        let (x, rep) = cg_solve(&mut id, &b, &Field::zeros(g), &CgConfig::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        for (a, b) in x.values().iter().zip(b.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_rhs_is_zero_solution() {
        let (g, plan) = setup(6);
        let mut op = StiffnessOperator::new(&plan, 0.1);
        let (x, rep) = cg_solve(&mut op, &Field::zeros(g), &ramp(g), &CgConfig::default()).unwrap();
        assert_eq!(rep.iterations, 0);
        assert!(x.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_dense_lu() {
        let (g, plan) = setup(6);
        let b = ramp(g);
        let mut op = StiffnessOperator::new(&plan, 0.1);
        let (x, rep) = cg_solve(&mut op, &b, &Field::zeros(g), &CgConfig::with_tol(1e-13)).unwrap();
        assert!(rep.converged && rep.final_rel_residual <= 1e-13);
        let xd = dense_solve(&plan, 0.1, &b).unwrap();
        for (a, b) in x.values().iter().zip(xd.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dense_with_zero_coefficient_is_identity() {
        let (g, plan) = setup(4);
        let b = ramp(g);
        let x = dense_solve(&plan, 0.0, &b).unwrap();
        for (a, b) in x.values().iter().zip(b.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn residual_history_is_monotone() {
        let (g, plan) = setup(8);
        let b = ramp(g);
        let mut op = StiffnessOperator::new(&plan, 1e-3);
        let cfg = CgConfig {
            record_history: true,
            tol_rel: 1e-12,
            ..CgConfig::default()
        };
        let (_, rep) = cg_solve(&mut op, &b, &Field::zeros(g), &cfg).unwrap();
        let h = rep.history.unwrap();
        assert_eq!(h.len(), rep.iterations + 1);
        for w in h.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let (g, plan) = setup(8);
        let mut op = StiffnessOperator::new(&plan, 10.0);
        let cfg = CgConfig {
            max_iter: 1,
            tol_rel: 1e-12,
            ..CgConfig::default()
        };
        let err = cg_solve(&mut op, &ramp(g), &Field::zeros(g), &cfg).unwrap_err();
        assert!(matches!(err, Error::CgNotConverged { iterations: 1, .. }));
    }

    #[test]
    fn indefinite_operator_breaks_down() {
        let (g, _) = setup(4);
        let mut neg = |x: &[f64], y: &mut [f64]| {
            for (a, b) in y.iter_mut().zip(x) {
                *a = -b;
            }
        };
        let err = cg_solve(&mut neg, &ramp(g), &Field::zeros(g), &CgConfig::default()).unwrap_err();
        assert!(matches!(err, Error::CgBreakdown { .. }));
    }

    #[test]
    fn config_validation() {
        assert!(CgConfig::with_tol(0.0).validate().is_err());
        assert!(CgConfig::with_tol(1.0).validate().is_err());
        assert!(CgConfig {
            max_iter: 0,
            ..CgConfig::default()
        }
        .validate()
        .is_err());
    }
}
