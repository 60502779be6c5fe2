//! Scalar-auxiliary-variable time stepping.
//!
//! With `r = sqrt(E1(phi) + C0)` carried as an unknown, each step of the
//! first-order scheme
//!
//! ```text
//! (phi1 - phi0) / dt = -M L mu,  mu = eps^2 L phi1 + r1 eta,  r1 - r0 = <eta, phi1 - phi0> / 2
//! ```
//!
//! and of its BDF2 counterpart is linear in `(phi1, r1)`. Eliminating `r1`
//! leaves `A phi1 + beta <eta, phi1> L eta = g` with `A = I + a L^2`, which
//! is solved with two applications of `A^{-1}` and one scalar equation:
//!
//! ```text
//! p = A^{-1} g,  q = A^{-1} L eta,  X = <eta, p> / (1 + beta <eta, q>),  phi1 = p - beta X q
//! ```
//!
//! | scheme | a              | beta      |
//! |--------|----------------|-----------|
//! | SAV1   | `M dt eps^2`   | `M dt / 2`|
//! | SAV2   | `2/3 M dt eps^2` | `M dt / 3`|
//!
//! Every solve preserves mass exactly in exact arithmetic (`A 1 = 1` and `A`
//! is self-adjoint in the weighted inner product), so after each solve the
//! constant mode of the iterate is reset to its exact value `<b, 1>_w / |Omega|`.

use crate::conv::ConvolutionPlan;
use crate::error::{Error, Result};
use crate::grid::{Field, Potential, QuadWeights};
use crate::krylov::{cg_solve, CgConfig, DenseStiffness, StiffnessOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    Sav1,
    #[default]
    Sav2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Predictor {
    /// `2 phi^n - phi^{n-1}`
    #[default]
    Extrapolate,
    /// One implicit linear step with the nonlinearity lagged.
    Solve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    #[default]
    FastCg,
    Direct,
}

#[derive(Debug, Clone, Copy)]
pub struct SavParams {
    pub epsilon: f64,
    pub mobility: f64,
    pub dt: f64,
    pub c0: f64,
    pub final_time: f64,
    pub potential: Potential,
    pub predictor: Predictor,
    /// Reset `r` to `sqrt(E1 + C0)` after every step. Off by default.
    pub reproject_r: bool,
}

impl SavParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("model.epsilon", self.epsilon)?;
        positive("model.mobility", self.mobility)?;
        positive("time.dt", self.dt)?;
        positive("model.C0", self.c0)?;
        if !(self.final_time >= self.dt) {
            return Err(Error::config(format!(
                "time.T = {} must be >= time.dt = {}",
                self.final_time, self.dt
            )));
        }
        Ok(())
    }

    pub fn eps2(&self) -> f64 {
        self.epsilon * self.epsilon
    }

    /// Number of steps to reach `T`, rounded to the nearest integer.
    pub fn num_steps(&self) -> usize {
        (self.final_time / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavState {
    pub phi_n: Field,
    pub phi_nm1: Field,
    pub r_n: f64,
    pub r_nm1: f64,
    pub step: usize,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergySample {
    pub step: usize,
    pub t: f64,
    pub mass: f64,
    pub r: f64,
    /// `sqrt(E1(phi) + C0)`, what `r` tracks.
    pub sqrt_e1_c0: f64,
    pub modified_energy: f64,
    pub original_energy: f64,
    pub cg_iterations: usize,
    /// `<eta, A^{-1} L eta>_w` of the step that produced this state.
    pub theta: Option<f64>,
}

/// `E1(phi) = ∫ F(phi)` by trapezoid quadrature.
pub fn bulk_energy(phi: &Field, potential: &Potential) -> f64 {
    QuadWeights::new(phi.grid()).integrate(phi.map(potential.f).values())
}

pub fn init_state(phi0: &Field, params: &SavParams) -> Result<SavState> {
    params.validate()?;
    let radicand = bulk_energy(phi0, &params.potential) + params.c0;
    if !(radicand > 0.0) {
        return Err(Error::config(format!("E1(phi0) + C0 = {radicand} is not positive")));
    }
    let r0 = radicand.sqrt();
    Ok(SavState {
        phi_n: phi0.clone(),
        phi_nm1: phi0.clone(),
        r_n: r0,
        r_nm1: r0,
        step: 0,
        t: 0.0,
    })
}

/// `eta = F'(phi~) / sqrt(E1(phi~) + C0)`; returns `(eta, denominator)`.
pub fn compute_eta(phi_tilde: &Field, params: &SavParams) -> Result<(Field, f64)> {
    let radicand = bulk_energy(phi_tilde, &params.potential) + params.c0;
    if !(radicand > 0.0) {
        return Err(Error::config(format!(
            "E1 + C0 = {radicand} is not positive at the predictor"
        )));
    }
    let denom = radicand.sqrt();
    let df = params.potential.df;
    Ok((phi_tilde.map(|v| df(v) / denom), denom))
}

pub fn predictor_extrapolate(state: &SavState) -> Field {
    state
        .phi_n
        .lin_comb(2.0, &state.phi_nm1, -1.0)
        .expect("state levels share one grid")
}

/// Energies of a state. The modified energy is the first-order functional
/// `(eps^2/2)<L phi, phi> + r^2` for [`Scheme::Sav1`] and the four-term BDF2
/// functional for [`Scheme::Sav2`].
pub fn compute_energies(
    state: &SavState,
    params: &SavParams,
    plan: &ConvolutionPlan,
    scheme: Scheme,
) -> Result<EnergySample> {
    let w = plan.weights();
    let eps2 = params.eps2();
    let phi = &state.phi_n;
    let lphi = plan.apply_lh(phi)?;
    let nonlocal = 0.5 * eps2 * w.inner(&lphi, phi)?;
    let e1 = bulk_energy(phi, &params.potential);
    let modified = match scheme {
        Scheme::Sav1 => nonlocal + state.r_n * state.r_n,
        Scheme::Sav2 => {
            let lphi_old = plan.apply_lh(&state.phi_nm1)?;
            let ext = phi.lin_comb(2.0, &state.phi_nm1, -1.0)?;
            let lext = lphi.lin_comb(2.0, &lphi_old, -1.0)?;
            let r_ext = 2.0 * state.r_n - state.r_nm1;
            nonlocal + 0.5 * eps2 * w.inner(&lext, &ext)? + state.r_n * state.r_n + r_ext * r_ext
        }
    };
    Ok(EnergySample {
        step: state.step,
        t: state.t,
        mass: w.integrate(phi.values()),
        r: state.r_n,
        sqrt_e1_c0: (e1 + params.c0).max(0.0).sqrt(),
        modified_energy: modified,
        original_energy: e1 + nonlocal,
        cg_iterations: 0,
        theta: None,
    })
}

/// Relative slack allowed on modified-energy increases (covers solver tolerance).
pub const ENERGY_SLACK: f64 = 1e-9;
/// Lower bound accepted for `theta = <eta, A^{-1} L eta>_w`.
pub const THETA_FLOOR: f64 = -1e-10;

/// Residuals of the discrete equations at a computed step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeResidual {
    /// Weighted norm of `A phi1 + c_r r1 L eta - g0`, relative to the sum of
    /// the norms of its three terms.
    pub phi_rel: f64,
    /// `|r-equation residual| / max(|r1|, 1)`.
    pub r_rel: f64,
}

/// Substitutes `(next.phi_n, next.r_n)` back into the fully discrete scheme
/// that produced it from `prev` with auxiliary field `eta`.
pub fn scheme_residual(
    scheme: Scheme,
    prev: &SavState,
    next: &SavState,
    eta: &Field,
    params: &SavParams,
    plan: &ConvolutionPlan,
) -> Result<SchemeResidual> {
    let w = plan.weights();
    let (mob, dt, eps2) = (params.mobility, params.dt, params.eps2());
    let phi1 = &next.phi_n;
    let leta = plan.apply_lh(eta)?;
    // dimensionless form: phi1 + a L^2 phi1 + c_r r1 L eta = g0
    let (a, c_r, g0, r_res) = match scheme {
        Scheme::Sav1 => {
            let d = phi1.lin_comb(1.0, &prev.phi_n, -1.0)?;
            let r_res = next.r_n - prev.r_n - 0.5 * w.inner(eta, &d)?;
            (mob * dt * eps2, mob * dt, prev.phi_n.clone(), r_res)
        }
        Scheme::Sav2 => {
            let g0 = prev.phi_n.lin_comb(4.0 / 3.0, &prev.phi_nm1, -1.0 / 3.0)?;
            let bdf = phi1
                .lin_comb(3.0, &prev.phi_n, -4.0)?
                .lin_comb(1.0, &prev.phi_nm1, 1.0)?;
            let r_res = 3.0 * next.r_n - 4.0 * prev.r_n + prev.r_nm1 - 0.5 * w.inner(eta, &bdf)?;
            (2.0 / 3.0 * mob * dt * eps2, 2.0 / 3.0 * mob * dt, g0, r_res)
        }
    };
    let a_phi = plan.apply_a(phi1, a)?;
    let coupling = leta.map(|v| c_r * next.r_n * v);
    let mut resid = a_phi.lin_comb(1.0, &coupling, 1.0)?;
    resid = resid.lin_comb(1.0, &g0, -1.0)?;
    let scale = w.norm(&a_phi)? + w.norm(&coupling)? + w.norm(&g0)?;
    Ok(SchemeResidual {
        phi_rel: if scale > 0.0 { w.norm(&resid)? / scale } else { 0.0 },
        r_rel: r_res.abs() / next.r_n.abs().max(1.0),
    })
}

/// Owns the plan and the linear-solver state for one simulation.
pub struct Stepper {
    params: SavParams,
    plan: ConvolutionPlan,
    solver: SolverKind,
    cg: CgConfig,
    dense: Vec<DenseStiffness>,
    warm_p: Option<Field>,
    warm_q: Option<Field>,
    last_eta: Option<Field>,
    check_energy: bool,
}

impl Stepper {
    pub fn new(params: SavParams, plan: ConvolutionPlan, solver: SolverKind, cg: CgConfig) -> Result<Self> {
        params.validate()?;
        cg.validate()?;
        Ok(Self {
            params,
            plan,
            solver,
            cg,
            dense: Vec::new(),
            warm_p: None,
            warm_q: None,
            last_eta: None,
            check_energy: true,
        })
    }

    /// Disables the per-step modified-energy assertion.
    pub fn without_energy_check(mut self) -> Self {
        self.check_energy = false;
        self
    }

    pub fn params(&self) -> &SavParams {
        &self.params
    }

    pub fn plan(&self) -> &ConvolutionPlan {
        &self.plan
    }

    pub fn cg_config(&self) -> &CgConfig {
        &self.cg
    }

    /// `eta` used by the most recent step.
    pub fn last_eta(&self) -> Option<&Field> {
        self.last_eta.as_ref()
    }

    pub fn init_state(&self, phi0: &Field) -> Result<SavState> {
        self.plan.grid().ensure_same(phi0.grid())?;
        init_state(phi0, &self.params)
    }

    pub fn compute_energies(&self, state: &SavState, scheme: Scheme) -> Result<EnergySample> {
        compute_energies(state, &self.params, &self.plan, scheme)
    }

    /// Solves `(I + coeff L_h^2) x = b` with the configured solver and
    /// restores the exact constant mode of `x`.
    fn solve(&mut self, coeff: f64, b: &Field, x0: Option<&Field>) -> Result<(Field, usize)> {
        let (mut x, iters) = match self.solver {
            SolverKind::FastCg => {
                let zeros;
                let guess = match x0 {
                    Some(g) => g,
                    None => {
                        zeros = Field::zeros(*b.grid());
                        &zeros
                    }
                };
                let mut op = StiffnessOperator::new(&self.plan, coeff);
                let (x, rep) = cg_solve(&mut op, b, guess, &self.cg)?;
                (x, rep.iterations)
            }
            SolverKind::Direct => {
                let idx = match self.dense.iter().position(|d| d.coeff() == coeff) {
                    Some(i) => i,
                    None => {
                        self.dense.push(DenseStiffness::factor(&self.plan, coeff)?);
                        self.dense.len() - 1
                    }
                };
                (self.dense[idx].solve(b)?, 0)
            }
        };
        let w = self.plan.weights();
        let area = b.grid().area();
        let shift = (w.integrate(b.values()) - w.integrate(x.values())) / area;
        x.values_mut().iter_mut().for_each(|v| *v += shift);
        Ok((x, iters))
    }

    /// `phi~` from `(phi~ - phi^n)/dt = -M L(eps^2 L phi~ + F'(phi^n))`.
    pub fn predictor_solve(&mut self, state: &SavState) -> Result<(Field, usize)> {
        let (mob, dt) = (self.params.mobility, self.params.dt);
        let ldf = self.plan.apply_lh(&state.phi_n.map(self.params.potential.df))?;
        let rhs = state.phi_n.lin_comb(1.0, &ldf, -mob * dt)?;
        let coeff = mob * dt * self.params.eps2();
        let x0 = state.phi_n.clone();
        self.solve(coeff, &rhs, Some(&x0))
    }

    /// Solved at the first step, where there is no history to extrapolate.
    fn predictor(&mut self, state: &SavState) -> Result<(Field, usize)> {
        if state.step == 0 || self.params.predictor == Predictor::Solve {
            self.predictor_solve(state)
        } else {
            Ok((predictor_extrapolate(state), 0))
        }
    }

    pub fn sav1_step(&mut self, state: &SavState) -> Result<(SavState, EnergySample)> {
        self.step_with(Scheme::Sav1, state, Scheme::Sav1)
            .map_err(|e| e.at_step(state.step + 1))
    }

    pub fn sav2_step(&mut self, state: &SavState) -> Result<(SavState, EnergySample)> {
        if state.step == 0 {
            return Err(Error::config("SAV2 needs two time levels; bootstrap the first step"));
        }
        self.step_with(Scheme::Sav2, state, Scheme::Sav2)
            .map_err(|e| e.at_step(state.step + 1))
    }

    /// First step of a BDF2 run: one SAV1 step with the solved predictor.
    /// The step is checked against the first-order energy; the returned
    /// sample reports the BDF2 functional so a run's series is comparable.
    pub fn bootstrap(&mut self, state0: &SavState) -> Result<(SavState, EnergySample)> {
        if state0.step != 0 {
            return Err(Error::config("bootstrap expects a fresh state"));
        }
        self.step_with(Scheme::Sav1, state0, Scheme::Sav2)
            .map_err(|e| e.at_step(1))
    }

    /// One step of `scheme`; SAV2 bootstraps automatically from a fresh state.
    pub fn step(&mut self, scheme: Scheme, state: &SavState) -> Result<(SavState, EnergySample)> {
        match (scheme, state.step) {
            (Scheme::Sav2, 0) => self.bootstrap(state),
            (Scheme::Sav2, _) => self.sav2_step(state),
            (Scheme::Sav1, _) => self.sav1_step(state),
        }
    }

    fn step_with(&mut self, scheme: Scheme, state: &SavState, report: Scheme) -> Result<(SavState, EnergySample)> {
        self.plan.grid().ensure_same(state.phi_n.grid())?;
        let (mob, dt, eps2) = (self.params.mobility, self.params.dt, self.params.eps2());
        let (phi_tilde, pred_iters) = self.predictor(state)?;
        let (eta, _) = compute_eta(&phi_tilde, &self.params)?;
        let leta = self.plan.apply_lh(&eta)?;
        let w = self.plan.weights().clone();
        let eta_phi_n = w.inner(&eta, &state.phi_n)?;

        let (coeff, beta, g) = match scheme {
            Scheme::Sav1 => {
                let s = mob * dt * (state.r_n - 0.5 * eta_phi_n);
                (mob * dt * eps2, 0.5 * mob * dt, state.phi_n.lin_comb(1.0, &leta, -s)?)
            }
            Scheme::Sav2 => {
                let eta_phi_nm1 = w.inner(&eta, &state.phi_nm1)?;
                let bracket = (4.0 * state.r_n - state.r_nm1) / 3.0 - 2.0 / 3.0 * eta_phi_n + eta_phi_nm1 / 6.0;
                let base = state.phi_n.lin_comb(4.0 / 3.0, &state.phi_nm1, -1.0 / 3.0)?;
                (
                    2.0 / 3.0 * mob * dt * eps2,
                    mob * dt / 3.0,
                    base.lin_comb(1.0, &leta, -2.0 / 3.0 * mob * dt * bracket)?,
                )
            }
        };

        let warm_p = self.warm_p.take().unwrap_or_else(|| state.phi_n.clone());
        let (p, it_p) = self.solve(coeff, &g, Some(&warm_p))?;
        let warm_q = self.warm_q.take();
        let (q, it_q) = self.solve(coeff, &leta, warm_q.as_ref())?;

        let theta = w.inner(&eta, &q)?;
        let next_step = state.step + 1;
        if theta < THETA_FLOOR {
            return Err(Error::Invariant {
                step: next_step,
                msg: format!("theta = <eta, A^-1 L eta> = {theta:.3e} is negative"),
            });
        }
        let denom = 1.0 + beta * theta;
        if !(denom > 0.0) {
            return Err(Error::Invariant {
                step: next_step,
                msg: format!("scalar reduction denominator {denom:.3e} is not positive"),
            });
        }
        let x = w.inner(&eta, &p)? / denom;
        let phi1 = p.lin_comb(1.0, &q, -beta * x)?;

        let mut r1 = match scheme {
            Scheme::Sav1 => {
                let d = phi1.lin_comb(1.0, &state.phi_n, -1.0)?;
                state.r_n + 0.5 * w.inner(&eta, &d)?
            }
            Scheme::Sav2 => {
                let bdf = phi1
                    .lin_comb(3.0, &state.phi_n, -4.0)?
                    .lin_comb(1.0, &state.phi_nm1, 1.0)?;
                (4.0 * state.r_n - state.r_nm1) / 3.0 + w.inner(&eta, &bdf)? / 6.0
            }
        };
        if self.params.reproject_r {
            r1 = (bulk_energy(&phi1, &self.params.potential) + self.params.c0).sqrt();
        }
        if !phi1.is_finite() || !r1.is_finite() {
            return Err(Error::Invariant {
                step: next_step,
                msg: "non-finite solution".into(),
            });
        }

        self.warm_p = Some(p);
        self.warm_q = Some(q);
        self.last_eta = Some(eta);

        let next = SavState {
            phi_nm1: state.phi_n.clone(),
            phi_n: phi1,
            r_nm1: state.r_n,
            r_n: r1,
            step: next_step,
            t: next_step as f64 * dt,
        };

        let mut sample = self.compute_energies(&next, report)?;
        sample.cg_iterations = pred_iters + it_p + it_q;
        sample.theta = Some(theta);
        if self.check_energy {
            let before = self.compute_energies(state, scheme)?.modified_energy;
            let after = if report == scheme {
                sample.modified_energy
            } else {
                self.compute_energies(&next, scheme)?.modified_energy
            };
            if after > before + ENERGY_SLACK * before.abs() {
                return Err(Error::Invariant {
                    step: next_step,
                    msg: format!("modified energy increased from {before:.15e} to {after:.15e}"),
                });
            }
        }
        Ok((next, sample))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Padding;
    use crate::grid::{init_example1, make_grid, GridSpec};
    use crate::kernel::{sample_kernel, KernelSpec};

    fn params(dt: f64) -> SavParams {
        SavParams {
            epsilon: 0.1f64.sqrt(),
            mobility: 1.0,
            dt,
            c0: 1.0,
            final_time: 1.0,
            potential: Potential::double_well(),
            predictor: Predictor::Extrapolate,
            reproject_r: false,
        }
    }

    fn stepper(m: usize, dt: f64) -> (GridSpec, Stepper) {
        let g = make_grid(1.0, m).unwrap();
        let t = sample_kernel(&g, &KernelSpec::gaussian(0.1f64.sqrt()).unwrap()).unwrap();
        let plan = ConvolutionPlan::new(&g, &t, Padding::FftFriendly).unwrap();
        let s = Stepper::new(params(dt), plan, SolverKind::FastCg, CgConfig::with_tol(1e-12)).unwrap();
        (g, s)
    }

    #[test]
    fn init_state_pure_states() {
        let g = make_grid(1.0, 8).unwrap();
        let p = params(1e-3);
        let s0 = init_state(&Field::zeros(g), &p).unwrap();
        assert!((s0.r_n - 2f64.sqrt()).abs() < 1e-14);
        let s1 = init_state(&Field::constant(g, 1.0), &p).unwrap();
        assert!((s1.r_n - 1.0).abs() < 1e-15);
        assert_eq!(s1.phi_n, s1.phi_nm1);
        assert_eq!(s1.step, 0);
    }

    #[test]
    fn eta_of_pure_states() {
        let g = make_grid(1.0, 8).unwrap();
        let p = params(1e-3);
        let (eta, d) = compute_eta(&Field::zeros(g), &p).unwrap();
        assert!(eta.values().iter().all(|&v| v == 0.0));
        assert!((d - 2f64.sqrt()).abs() < 1e-14);
        let (eta, d) = compute_eta(&Field::constant(g, 1.0), &p).unwrap();
        assert!(eta.values().iter().all(|&v| v == 0.0));
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eta_pointwise() {
        let g = make_grid(1.0, 8).unwrap();
        let p = params(1e-3);
        let phi = init_example1(&g);
        let (eta, d) = compute_eta(&phi, &p).unwrap();
        for (e, v) in eta.values().iter().zip(phi.values()) {
            assert!((e - (v * v * v - v) / d).abs() < 1e-15);
        }
    }

    #[test]
    fn extrapolation() {
        let g = make_grid(1.0, 4).unwrap();
        let mut s = init_state(&Field::constant(g, 0.3), &params(1e-3)).unwrap();
        assert_eq!(predictor_extrapolate(&s), s.phi_n);
        s.phi_nm1 = Field::constant(g, 0.1);
        for &v in predictor_extrapolate(&s).values() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn pure_phase_is_stationary() {
        for c in [1.0, 0.0, -1.0] {
            let (g, mut st) = stepper(8, 0.1);
            let s0 = st.init_state(&Field::constant(g, c)).unwrap();
            let (s1, _) = st.bootstrap(&s0).unwrap();
            let (s2, _) = st.sav2_step(&s1).unwrap();
            let (s3, _) = st.sav1_step(&s2).unwrap();
            for s in [&s1, &s2, &s3] {
                assert!(s.phi_n.values().iter().all(|v| (v - c).abs() < 1e-13));
                assert!((s.r_n - s0.r_n).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn predictor_solve_fixed_points() {
        let (g, mut st) = stepper(8, 0.01);
        for c in [0.0, 1.0] {
            let s = init_state(&Field::constant(g, c), st.params()).unwrap();
            let (pt, _) = st.predictor_solve(&s).unwrap();
            assert!(pt.values().iter().all(|v| (v - c).abs() < 1e-13));
        }
    }

    #[test]
    fn sav2_needs_history() {
        let (g, mut st) = stepper(4, 0.01);
        let s0 = st.init_state(&init_example1(&g)).unwrap();
        assert!(st.sav2_step(&s0).is_err());
        let (s1, _) = st.bootstrap(&s0).unwrap();
        assert!(st.bootstrap(&s1).is_err());
    }

    #[test]
    fn residuals_close_for_both_schemes() {
        let (g, mut st) = stepper(6, 1e-3);
        let s0 = st.init_state(&init_example1(&g)).unwrap();
        let (s1, _) = st.sav1_step(&s0).unwrap();
        let eta = st.last_eta().unwrap().clone();
        let res = scheme_residual(Scheme::Sav1, &s0, &s1, &eta, st.params(), st.plan()).unwrap();
        assert!(res.phi_rel <= 1e-11 && res.r_rel <= 1e-14, "{res:?}");
        let (s2, _) = st.sav2_step(&s1).unwrap();
        let eta = st.last_eta().unwrap().clone();
        let res = scheme_residual(Scheme::Sav2, &s1, &s2, &eta, st.params(), st.plan()).unwrap();
        assert!(res.phi_rel <= 1e-11 && res.r_rel <= 1e-14, "{res:?}");
    }

    #[test]
    fn energies_of_pure_states() {
        let (g, st) = stepper(8, 0.01);
        let s = init_state(&Field::constant(g, 1.0), st.params()).unwrap();
        let e = st.compute_energies(&s, Scheme::Sav1).unwrap();
        assert!((e.modified_energy - 1.0).abs() < 1e-12);
        assert!(e.original_energy.abs() < 1e-12);
        assert!((e.mass - 4.0).abs() < 1e-13);
        let s = init_state(&Field::zeros(g), st.params()).unwrap();
        let e = st.compute_energies(&s, Scheme::Sav1).unwrap();
        assert!((e.modified_energy - 2.0).abs() < 1e-12);
        assert!((e.original_energy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        let mut p = params(0.1);
        p.final_time = 0.05;
        assert!(p.validate().is_err());
        let mut p = params(0.1);
        p.c0 = 0.0;
        assert!(p.validate().is_err());
        assert_eq!(params(0.25).num_steps(), 4);
    }
}
