//! Presets for the three reference problems, self-convergence studies with
//! rate tables, solver timing, and coarsening diagnostics.
//!
//! Studies compare against a reference run of the same code: at a finer
//! step on the same grid (temporal) or on a nested finer grid (spatial),
//! with coarse-grid errors measured at coincident nodes.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};

use crate::conv::{ConvolutionPlan, Padding};
use crate::error::{Error, Result};
use crate::grid::{
    init_example1, init_example2, init_example3, l2_distance, weighted_norm, Field, GridSpec, Potential,
};
use crate::kernel::{sample_kernel, KernelSpec};
use crate::krylov::{cg_solve, CgConfig, DenseStiffness, StiffnessOperator, DENSE_GUARD};
use crate::sav::{EnergySample, Predictor, SavParams, SavState, Scheme, SolverKind, Stepper};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Example1,
    Example2,
    Example3,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Example1 => "example1",
            Preset::Example2 => "example2",
            Preset::Example3 => "example3",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example1" => Ok(Preset::Example1),
            "example2" => Ok(Preset::Example2),
            "example3" => Ok(Preset::Example3),
            _ => Err(Error::config(format!(
                "unknown preset {s:?}; expected one of example1, example2, example3"
            ))),
        }
    }
}

/// Initial condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `0.5 sin(pi x) sin(pi y) + 0.1`
    Example1,
    /// Two tanh bubbles.
    Example2 {
        r0: f64,
        centers: [(f64, f64); 2],
    },
    /// Zero-mean uniform noise in `[-amplitude, amplitude]`.
    Example3 {
        amplitude: f64,
    },
    Constant(f64),
}

impl Init {
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Example1 => Init::Example1,
            Preset::Example2 => Init::Example2 {
                r0: 0.36,
                centers: [(0.4, 0.0), (-0.4, 0.0)],
            },
            Preset::Example3 => Init::Example3 { amplitude: 0.1 },
        }
    }

    pub fn sample(&self, grid: &GridSpec, epsilon: f64, seed: u64) -> Result<Field> {
        match *self {
            Init::Example1 => Ok(init_example1(grid)),
            Init::Example2 { r0, centers } => init_example2(grid, r0, centers, epsilon),
            Init::Example3 { amplitude } => init_example3(grid, amplitude, seed),
            Init::Constant(c) => Ok(Field::constant(*grid, c)),
        }
    }
}

/// Everything needed to run one simulation or a refinement study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySpec {
    pub preset: Preset,
    pub init: Init,
    pub half_width: f64,
    /// Mesh size; `2L / h` must be an integer.
    pub h: f64,
    pub dt: f64,
    pub final_time: f64,
    pub epsilon: f64,
    pub mobility: f64,
    /// Gaussian kernel width.
    pub delta: f64,
    pub c0: f64,
    pub scheme: Scheme,
    pub solver: SolverKind,
    pub predictor: Predictor,
    pub cg: CgConfig,
    pub padding: Padding,
    /// Step sizes (temporal study) or mesh sizes (spatial study), descending.
    pub ladder: Vec<f64>,
    /// `(dt_ref, h_ref)`.
    pub reference: (f64, f64),
    pub seed: u64,
}

impl StudySpec {
    /// Preset parameters. Example 1 is set up for the temporal study; use
    /// [`StudySpec::example1_spatial`] for the mesh study.
    pub fn preset(preset: Preset, paper_scale: bool) -> Self {
        match preset {
            Preset::Example1 => Self::example1_temporal(paper_scale),
            Preset::Example2 => {
                let h = if paper_scale { 0.01 } else { 1.0 / 64.0 };
                Self {
                    preset,
                    init: Init::for_preset(preset),
                    h,
                    dt: 1e-3,
                    final_time: 10.0,
                    epsilon: 0.02,
                    delta: 0.02,
                    ladder: Vec::new(),
                    reference: (1e-3, h),
                    ..Self::base(preset)
                }
            }
            Preset::Example3 => {
                let h = if paper_scale { 0.01 } else { 1.0 / 64.0 };
                Self {
                    preset,
                    init: Init::for_preset(preset),
                    h,
                    dt: 1e-3,
                    final_time: 10.0,
                    epsilon: 0.02,
                    delta: 0.05,
                    ladder: Vec::new(),
                    reference: (1e-3, h),
                    ..Self::base(preset)
                }
            }
        }
    }

    fn base(preset: Preset) -> Self {
        let epsilon = 0.1f64.sqrt();
        Self {
            preset,
            init: Init::for_preset(preset),
            half_width: 1.0,
            h: 1.0 / 16.0,
            dt: 1e-3,
            final_time: 0.05,
            epsilon,
            mobility: 1.0,
            delta: epsilon,
            c0: 1.0,
            scheme: Scheme::Sav2,
            solver: SolverKind::FastCg,
            predictor: Predictor::Extrapolate,
            cg: CgConfig::default(),
            padding: Padding::FftFriendly,
            ladder: Vec::new(),
            reference: (1e-3, 1.0 / 16.0),
            seed: 0,
        }
    }

    /// `eps^2 = 0.1`, `delta = eps`, `T = 0.05`; step ladder `T 2^-4 .. T 2^-8`
    /// against `T 2^-12` at `h = 1/16` (`--paper-scale`: `T 2^-4 .. T 2^-9` against
    /// `T 2^-14` at `h = 0.01`).
    pub fn example1_temporal(paper_scale: bool) -> Self {
        let t = 0.05;
        let (h, last, reference) = if paper_scale {
            (0.01, 9, 14)
        } else {
            (1.0 / 16.0, 8, 12)
        };
        let dt_ref = t * 0.5f64.powi(reference);
        Self {
            h,
            dt: t / 16.0,
            final_time: t,
            cg: CgConfig::with_tol(1e-12),
            ladder: (4..=last).map(|k| t * 0.5f64.powi(k)).collect(),
            reference: (dt_ref, h),
            ..Self::base(Preset::Example1)
        }
    }

    /// Mesh ladder `2^-3 .. 2^-5` against `2^-7` with `dt = 5e-5` for 20 steps
    /// (`--paper-scale`: `2^-3 .. 2^-8` against `2^-10` up to `T = 0.05`).
    pub fn example1_spatial(paper_scale: bool) -> Self {
        let dt = 5e-5;
        let (last, reference, t) = if paper_scale { (8, 10, 0.05) } else { (5, 7, 20.0 * dt) };
        let h_ref = 0.5f64.powi(reference);
        Self {
            h: h_ref,
            dt,
            final_time: t,
            cg: CgConfig::with_tol(1e-12),
            ladder: (3..=last).map(|k| 0.5f64.powi(k)).collect(),
            reference: (dt, h_ref),
            ..Self::base(Preset::Example1)
        }
    }

    /// Snapshot times used for the figures of each preset.
    pub fn snapshot_times(&self) -> Vec<f64> {
        match self.preset {
            Preset::Example1 => vec![0.0, self.final_time],
            Preset::Example2 => vec![0.0, 0.05, 0.1, 1.0, 5.0, 10.0],
            Preset::Example3 => vec![0.0, 0.1, 0.5, 1.0, 2.0, 10.0],
        }
    }

    pub fn with_mesh(&self, h: f64) -> Self {
        Self { h, ..self.clone() }
    }

    pub fn with_step(&self, dt: f64) -> Self {
        Self { dt, ..self.clone() }
    }

    pub fn cells(&self) -> Result<usize> {
        cells_for(self.half_width, self.h)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.half_width, self.cells()?)
    }

    pub fn num_steps(&self) -> Result<usize> {
        whole_ratio(self.final_time, self.dt).ok_or_else(|| {
            Error::config(format!(
                "time.T = {} is not a multiple of time.dt = {}",
                self.final_time, self.dt
            ))
        })
    }

    pub fn sav_params(&self) -> SavParams {
        SavParams {
            epsilon: self.epsilon,
            mobility: self.mobility,
            dt: self.dt,
            c0: self.c0,
            final_time: self.final_time,
            potential: Potential::double_well(),
            predictor: self.predictor,
            reproject_r: false,
        }
    }

    pub fn plan(&self) -> Result<ConvolutionPlan> {
        let grid = self.grid()?;
        let table = sample_kernel(&grid, &KernelSpec::gaussian(self.delta)?)?;
        ConvolutionPlan::new(&grid, &table, self.padding)
    }

    pub fn initial_field(&self) -> Result<Field> {
        self.init.sample(&self.grid()?, self.epsilon, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.sav_params().validate()?;
        self.cg.validate()?;
        let steps = self.num_steps()?;
        if self.scheme == Scheme::Sav2 && steps < 2 {
            return Err(Error::config(format!(
                "SAV2 needs T >= 2 dt (T = {}, dt = {})",
                self.final_time, self.dt
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::config(format!(
                "model.delta must be positive, got {}",
                self.delta
            )));
        }
        self.grid().map(|_| ())
    }
}

fn whole_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let k = r.round();
    (k >= 1.0 && (r - k).abs() <= 1e-9 * k).then_some(k as usize)
}

fn cells_for(half_width: f64, h: f64) -> Result<usize> {
    whole_ratio(2.0 * half_width, h)
        .ok_or_else(|| Error::config(format!("mesh size h = {h} does not divide 2L = {}", 2.0 * half_width)))
}

/// Returned by a step observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub state: SavState,
    /// One sample per time level, starting with the initial state.
    pub samples: Vec<EnergySample>,
    pub stopped_early: bool,
    pub seconds: f64,
}

/// Runs `spec` from `t = 0` to `T`, calling `observe` on the initial state
/// and after every step.
pub fn run_simulation(
    spec: &StudySpec,
    observe: &mut dyn FnMut(&SavState, &EnergySample) -> Result<Flow>,
) -> Result<SimulationOutput> {
    spec.validate()?;
    let plan = spec.plan()?;
    let phi0 = spec.initial_field()?;
    run_from(spec, plan, &phi0, observe)
}

fn run_from(
    spec: &StudySpec,
    plan: ConvolutionPlan,
    phi0: &Field,
    observe: &mut dyn FnMut(&SavState, &EnergySample) -> Result<Flow>,
) -> Result<SimulationOutput> {
    let steps = spec.num_steps()?;
    let start = Instant::now();
    let mut stepper = Stepper::new(spec.sav_params(), plan, spec.solver, spec.cg)?;
    let mut state = stepper.init_state(phi0)?;
    let first = stepper.compute_energies(&state, spec.scheme)?;
    let mut samples = vec![first];
    let mut stopped_early = observe(&state, &first)? == Flow::Stop;
    while !stopped_early && state.step < steps {
        let (next, sample) = stepper.step(spec.scheme, &state)?;
        state = next;
        samples.push(sample);
        stopped_early = observe(&state, &sample).map_err(|e| e.at_step(state.step))? == Flow::Stop;
    }
    Ok(SimulationOutput {
        state,
        samples,
        stopped_early,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs without observation and returns the final field and wall time.
pub fn final_field(spec: &StudySpec) -> Result<(Field, f64)> {
    let out = run_simulation(spec, &mut |_, _| Ok(Flow::Continue))?;
    Ok((out.state.phi_n, out.seconds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Time,
    Space,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateRow {
    /// `dt` or `h`.
    pub size: f64,
    pub error: f64,
    /// `log2(e_prev / e)` against the previous row when its size is twice this one.
    pub rate: Option<f64>,
    pub seconds: f64,
    /// Error at round-off level; no rate is computed from it.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub axis: Axis,
    pub rows: Vec<RateRow>,
    pub reference_seconds: f64,
}

/// Errors at or below this multiple of the reference norm count as zero.
pub const DEGENERATE_ERROR: f64 = 1e-13;

impl RateTable {
    fn from_errors(axis: Axis, entries: Vec<(f64, f64, f64)>, scale: f64, reference_seconds: f64) -> Self {
        let floor = DEGENERATE_ERROR * scale.max(f64::MIN_POSITIVE);
        let mut rows: Vec<RateRow> = entries
            .into_iter()
            .map(|(size, error, seconds)| RateRow {
                size,
                error,
                rate: None,
                seconds,
                degenerate: !(error > floor),
            })
            .collect();
        for k in 1..rows.len() {
            let (a, b) = (rows[k - 1], rows[k]);
            let halved = (a.size / b.size - 2.0).abs() <= 1e-9;
            if halved && !a.degenerate && !b.degenerate {
                rows[k].rate = Some((a.error / b.error).log2());
            }
        }
        if rows.iter().any(|r| r.degenerate) {
            warn!("rate table has errors at round-off level; rates against them are left undefined");
        }
        Self {
            axis,
            rows,
            reference_seconds,
        }
    }

    pub fn rates(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.rate).collect()
    }

    /// Mean of the last `k` defined rates, if there are at least `k`.
    pub fn mean_last_rates(&self, k: usize) -> Option<f64> {
        let rates = self.rates();
        (k > 0 && rates.len() >= k).then(|| rates[rates.len() - k..].iter().sum::<f64>() / k as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("size,error,rate,seconds\n");
        for r in &self.rows {
            let rate = r.rate.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(s, "{:e},{:e},{},{:e}", r.size, r.error, rate, r.seconds);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let head = match self.axis {
            Axis::Time => "dt",
            Axis::Space => "h",
        };
        let mut s = format!("{head:>12}  {:>12}  {:>8}  {:>10}\n", "L2 error", "rate", "seconds");
        for r in &self.rows {
            let rate = match (r.rate, r.degenerate) {
                (Some(v), _) => format!("{v:.4}"),
                (None, true) => "zero".into(),
                (None, false) => "-".into(),
            };
            let _ = writeln!(
                s,
                "{:>12.4e}  {:>12.4e}  {:>8}  {:>10.3}",
                r.size, r.error, rate, r.seconds
            );
        }
        s
    }
}

fn check_ladder(ladder: &[f64], reference: f64) -> Result<()> {
    if ladder.is_empty() {
        return Err(Error::config("study ladder is empty"));
    }
    if ladder.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::config("study ladder must be strictly descending"));
    }
    if ladder.iter().any(|&v| reference > v) {
        return Err(Error::config(format!(
            "reference {reference} must not be coarser than any ladder entry"
        )));
    }
    Ok(())
}

/// Step-size refinement at fixed `h`; errors at `t = T` against a run with `dt_ref`.
pub fn temporal_study(spec: &StudySpec) -> Result<RateTable> {
    let dt_ref = spec.reference.0;
    check_ladder(&spec.ladder, dt_ref)?;
    for &dt in &spec.ladder {
        spec.with_step(dt).validate()?;
    }
    let (reference, ref_secs) = final_field(&spec.with_step(dt_ref))?;
    info!("temporal reference dt = {dt_ref:e} done in {ref_secs:.2} s");
    let mut entries = Vec::new();
    for &dt in &spec.ladder {
        let (phi, secs) = final_field(&spec.with_step(dt))?;
        let err = l2_distance(&phi, &reference)?;
        info!("dt = {dt:e}: error {err:e} ({secs:.2} s)");
        entries.push((dt, err, secs));
    }
    Ok(RateTable::from_errors(
        Axis::Time,
        entries,
        weighted_norm(&reference),
        ref_secs,
    ))
}

/// Samples `fine` at the nodes of the nested coarse grid.
pub fn restrict(fine: &Field, coarse: &GridSpec) -> Result<Field> {
    let fg = fine.grid();
    let (mf, mc) = (fg.cells(), coarse.cells());
    if fg.half_width() != coarse.half_width() || mf % mc != 0 {
        return Err(Error::config(format!(
            "grid M={mc} is not nested in M={mf} on the same domain"
        )));
    }
    let s = mf / mc;
    let n = coarse.points_per_dim();
    let mut values = Vec::with_capacity(coarse.len());
    for j in 0..n {
        for i in 0..n {
            values.push(fine.get(s * i, s * j));
        }
    }
    Field::from_values(*coarse, values)
}

/// Mesh refinement at fixed `dt`; coarse solutions are compared with the
/// reference restricted to their nodes.
pub fn spatial_study(spec: &StudySpec) -> Result<RateTable> {
    let h_ref = spec.reference.1;
    check_ladder(&spec.ladder, h_ref)?;
    let m_ref = cells_for(spec.half_width, h_ref)?;
    for &h in &spec.ladder {
        let m = cells_for(spec.half_width, h)?;
        if m_ref % m != 0 {
            return Err(Error::config(format!(
                "mesh h = {h} (M={m}) is not nested in the reference h = {h_ref} (M={m_ref})"
            )));
        }
        spec.with_mesh(h).validate()?;
    }
    let (reference, ref_secs) = final_field(&spec.with_mesh(h_ref))?;
    info!("spatial reference h = {h_ref:e} done in {ref_secs:.2} s");
    let mut entries = Vec::new();
    let mut ref_norm = 0.0f64;
    for &h in &spec.ladder {
        let (phi, secs) = final_field(&spec.with_mesh(h))?;
        let sampled = restrict(&reference, phi.grid())?;
        let err = l2_distance(&phi, &sampled)?;
        ref_norm = ref_norm.max(weighted_norm(&sampled));
        info!("h = {h:e}: error {err:e} ({secs:.2} s)");
        entries.push((h, err, secs));
    }
    Ok(RateTable::from_errors(Axis::Space, entries, ref_norm, ref_secs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub size: f64,
    /// `||phi_fast - phi_direct||_w / ||phi_direct||_w` at `t = T`.
    pub rel_diff: f64,
    pub fast_seconds: f64,
    pub direct_seconds: f64,
}

/// Runs every ladder entry small enough for the dense path with both
/// solvers. Larger entries are skipped.
pub fn solver_agreement(spec: &StudySpec, axis: Axis) -> Result<Vec<Agreement>> {
    let mut out = Vec::new();
    for &size in &spec.ladder {
        let entry = match axis {
            Axis::Time => spec.with_step(size),
            Axis::Space => spec.with_mesh(size),
        };
        let n = entry.grid()?.len();
        if n > DENSE_GUARD {
            info!("size {size:e}: N = {n} above the dense guard, direct run skipped");
            continue;
        }
        let fast = StudySpec {
            solver: SolverKind::FastCg,
            ..entry.clone()
        };
        let direct = StudySpec {
            solver: SolverKind::Direct,
            ..entry
        };
        let (a, fast_seconds) = final_field(&fast)?;
        let (b, direct_seconds) = final_field(&direct)?;
        out.push(Agreement {
            size,
            rel_diff: l2_distance(&a, &b)? / weighted_norm(&b),
            fast_seconds,
            direct_seconds,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub cells: usize,
    /// Unknowns `(M+1)^2`.
    pub n: usize,
    pub embed_size: usize,
    /// Floats held by the fast plan.
    pub plan_storage: usize,
    /// One application of `v + c L_h^2 v`.
    pub matvec_seconds: f64,
    pub cg_seconds: f64,
    pub cg_iterations: usize,
    /// Assembly, factorisation and one solve; `None` above the size guard.
    pub direct_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub coeff: f64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("cells,n,embed_size,plan_storage,matvec_seconds,cg_seconds,cg_iterations,direct_seconds\n");
        for r in &self.rows {
            let direct = r
                .direct_seconds
                .map(|v| format!("{v:e}"))
                .unwrap_or_else(|| "skipped".into());
            let _ = writeln!(
                s,
                "{},{},{},{},{:e},{:e},{},{}",
                r.cells, r.n, r.embed_size, r.plan_storage, r.matvec_seconds, r.cg_seconds, r.cg_iterations, direct
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>6} {:>8} {:>6} {:>12} {:>12} {:>6} {:>12}\n",
            "M", "N", "P", "matvec (s)", "CG (s)", "iters", "direct (s)"
        );
        for r in &self.rows {
            let direct = r
                .direct_seconds
                .map(|v| format!("{v:.4e}"))
                .unwrap_or_else(|| "skipped".into());
            let _ = writeln!(
                s,
                "{:>6} {:>8} {:>6} {:>12.4e} {:>12.4e} {:>6} {:>12}",
                r.cells, r.n, r.embed_size, r.matvec_seconds, r.cg_seconds, r.cg_iterations, direct
            );
        }
        s
    }

    pub fn row(&self, cells: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.cells == cells)
    }
}

/// Best-of-`repeats` wall time per call of `f`, each repeat timing `batch` calls.
pub fn time_best(repeats: usize, batch: usize, mut f: impl FnMut()) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        for _ in 0..batch.max(1) {
            f();
        }
        best = best.min(start.elapsed().as_secs_f64() / batch.max(1) as f64);
    }
    best
}

/// Times the stiffness operator `I + c L_h^2` (with `c` from the SAV2 step of
/// `spec`) for every mesh size in `spec.ladder`: matrix-vector product, one
/// CG solve, and the dense direct path for grids of at most `direct_max_cells`
/// cells per side that fit under the guard.
pub fn benchmark(spec: &StudySpec, repeats: usize, direct_max_cells: usize) -> Result<BenchReport> {
    let coeff = 2.0 / 3.0 * spec.mobility * spec.dt * spec.epsilon * spec.epsilon;
    let mut rows = Vec::new();
    for &h in &spec.ladder {
        let entry = spec.with_mesh(h);
        let plan = entry.plan()?;
        let grid = *plan.grid();
        let b = entry.initial_field()?;
        let mut ws = plan.workspace();
        let mut out = vec![0.0; grid.len()];
        let batch = (2_000_000 / grid.len()).clamp(1, 200);
        let matvec_seconds = time_best(repeats, batch, || {
            plan.apply_a_into(b.values(), coeff, &mut out, &mut ws)
        });

        let zero = Field::zeros(grid);
        let mut iterations = 0;
        let mut failure = None;
        let cg_seconds = time_best(repeats, 1, || {
            let mut op = StiffnessOperator::new(&plan, coeff);
            match cg_solve(&mut op, &b, &zero, &spec.cg) {
                Ok((_, rep)) => iterations = rep.iterations,
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }

        let direct_seconds = if grid.len() > DENSE_GUARD {
            info!(
                "M = {}: direct path skipped (N = {} > {DENSE_GUARD})",
                grid.cells(),
                grid.len()
            );
            None
        } else if grid.cells() > direct_max_cells {
            info!("M = {}: direct path skipped (M > {direct_max_cells})", grid.cells());
            None
        } else {
            let start = Instant::now();
            DenseStiffness::factor(&plan, coeff)?.solve(&b)?;
            Some(start.elapsed().as_secs_f64())
        };
        info!(
            "M = {}: matvec {matvec_seconds:.3e} s, CG {cg_seconds:.3e} s ({iterations} it), direct {direct_seconds:?}",
            grid.cells()
        );
        rows.push(BenchRow {
            cells: grid.cells(),
            n: grid.len(),
            embed_size: plan.size(),
            plan_storage: plan.storage_len(),
            matvec_seconds,
            cg_seconds,
            cg_iterations: iterations,
            direct_seconds,
        });
    }
    Ok(BenchReport { coeff, rows })
}

/// Number of 4-connected components of `{phi > threshold}`.
pub fn count_components(phi: &Field, threshold: f64) -> usize {
    let n = phi.grid().points_per_dim();
    let v = phi.values();
    let mut seen = vec![false; v.len()];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..v.len() {
        if seen[start] || !(v[start] > threshold) {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (i, j) = (k % n, k / n);
            let neighbours = [
                (i > 0).then(|| k - 1),
                (i + 1 < n).then(|| k + 1),
                (j > 0).then(|| k - n),
                (j + 1 < n).then(|| k + n),
            ];
            for q in neighbours.into_iter().flatten() {
                if !seen[q] && v[q] > threshold {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    count
}

#[derive(Debug, Clone)]
pub struct CoarseningReport {
    /// `(t, components)` at every check.
    pub counts: Vec<(f64, usize)>,
    /// First checked time at which a single component remains.
    pub merge_time: Option<f64>,
    pub final_state: SavState,
    pub seconds: f64,
}

/// Tracks the component count of `{phi > 0}` every `check_every` steps and
/// stops at the first single-component state when `stop_on_merge` is set.
pub fn coarsening_run(spec: &StudySpec, check_every: usize, stop_on_merge: bool) -> Result<CoarseningReport> {
    let check_every = check_every.max(1);
    let mut counts = Vec::new();
    let mut merge_time = None;
    let out = run_simulation(spec, &mut |state, _| {
        if state.step % check_every == 0 {
            let c = count_components(&state.phi_n, 0.0);
            counts.push((state.t, c));
            if c == 1 && merge_time.is_none() && state.step > 0 {
                merge_time = Some(state.t);
                info!("single component at t = {}", state.t);
                if stop_on_merge {
                    return Ok(Flow::Stop);
                }
            }
        }
        Ok(Flow::Continue)
    })?;
    Ok(CoarseningReport {
        counts,
        merge_time,
        final_state: out.state,
        seconds: out.seconds,
    })
}

/// Least-squares slope of `ln y` against `ln x` over points with positive coordinates.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone)]
pub struct EnergyDecay {
    pub samples: Vec<EnergySample>,
    pub window: (f64, f64),
    /// Log-log slope of the original energy over the window.
    pub slope: Option<f64>,
    /// Modified energy never increased beyond the stepper's slack.
    pub monotone: bool,
}

/// Fit points: the sample nearest to each of `count` log-spaced times in `[t1, t2]`.
fn log_spaced(samples: &[EnergySample], (t1, t2): (f64, f64), count: usize) -> Vec<(f64, f64)> {
    let inside: Vec<&EnergySample> = samples.iter().filter(|s| s.t >= t1 && s.t <= t2).collect();
    if inside.is_empty() {
        return Vec::new();
    }
    let mut picked: Vec<usize> = (0..count)
        .map(|k| {
            let target = t1 * (t2 / t1).powf(k as f64 / (count - 1).max(1) as f64);
            inside
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1.t - target).abs().total_cmp(&(b.1.t - target).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    picked.dedup();
    picked
        .into_iter()
        .map(|i| (inside[i].t, inside[i].original_energy))
        .collect()
}

/// Runs `spec` (normally Example 3) and fits the energy decay exponent over `window`.
pub fn energy_decay_study(spec: &StudySpec, window: (f64, f64)) -> Result<EnergyDecay> {
    if !(window.0 > 0.0 && window.1 > window.0) {
        return Err(Error::config(format!("invalid fit window {window:?}")));
    }
    let out = run_simulation(spec, &mut |_, _| Ok(Flow::Continue))?;
    let monotone = out
        .samples
        .windows(2)
        .skip(usize::from(spec.scheme == Scheme::Sav2))
        .all(|w| w[1].modified_energy <= w[0].modified_energy * (1.0 + crate::sav::ENERGY_SLACK));
    let slope = loglog_slope(&log_spaced(&out.samples, window, 40));
    info!("energy decay slope over {window:?}: {slope:?}");
    Ok(EnergyDecay {
        samples: out.samples,
        window,
        slope,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scheme: Scheme) -> StudySpec {
        StudySpec {
            h: 0.25,
            dt: 1e-3,
            final_time: 4e-3,
            scheme,
            cg: CgConfig::with_tol(1e-12),
            ..StudySpec::preset(Preset::Example1, false)
        }
    }

    #[test]
    fn preset_parameters() {
        let s = StudySpec::preset(Preset::Example1, false);
        assert!((s.epsilon * s.epsilon - 0.1).abs() < 1e-15);
        assert_eq!(s.delta, s.epsilon);
        assert_eq!(s.final_time, 0.05);
        assert_eq!(s.mobility, 1.0);
        assert_eq!(s.cells().unwrap(), 32);
        assert_eq!(s.ladder.len(), 5);
        assert!((s.reference.0 - 0.05 / 4096.0).abs() < 1e-18);
        let p = StudySpec::preset(Preset::Example2, true);
        assert_eq!(p.cells().unwrap(), 200);
        assert_eq!(p.snapshot_times(), vec![0.0, 0.05, 0.1, 1.0, 5.0, 10.0]);
        assert_eq!(StudySpec::example1_spatial(false).num_steps().unwrap(), 20);
        assert_eq!("example3".parse::<Preset>().unwrap(), Preset::Example3);
        assert!("example4".parse::<Preset>().is_err());
    }

    #[test]
    fn step_counts() {
        let mut s = tiny(Scheme::Sav1);
        s.final_time = s.dt;
        let out = run_simulation(&s, &mut |_, _| Ok(Flow::Continue)).unwrap();
        assert_eq!(out.state.step, 1);
        assert_eq!(out.samples.len(), 2);
        s.scheme = Scheme::Sav2;
        assert!(s.validate().is_err());
        s.final_time = 2.0 * s.dt;
        assert_eq!(
            run_simulation(&s, &mut |_, _| Ok(Flow::Continue)).unwrap().state.step,
            2
        );
        s.final_time = 2.5 * s.dt;
        assert!(s.validate().is_err());
    }

    #[test]
    fn observer_can_stop_and_fail() {
        let s = tiny(Scheme::Sav2);
        let out = run_simulation(&s, &mut |st, _| {
            Ok(if st.step == 2 { Flow::Stop } else { Flow::Continue })
        })
        .unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.state.step, 2);
        let err = run_simulation(&s, &mut |st, _| {
            if st.step == 3 {
                Err(Error::config("boom"))
            } else {
                Ok(Flow::Continue)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 3, .. }));
    }

    #[test]
    fn pure_phase_snapshots_identical() {
        let s = StudySpec {
            init: Init::Constant(1.0),
            ..tiny(Scheme::Sav2)
        };
        let mut fields = Vec::new();
        run_simulation(&s, &mut |st, _| {
            fields.push(st.phi_n.clone());
            Ok(Flow::Continue)
        })
        .unwrap();
        assert_eq!(fields.len(), 5);
        for f in &fields {
            assert!(f.values().iter().all(|v| (v - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn rate_table_rates_and_csv() {
        let t = RateTable::from_errors(
            Axis::Time,
            vec![
                (0.4, 1.6e-2, 1.0),
                (0.2, 4e-3, 2.0),
                (0.1, 1e-3, 3.0),
                (0.03, 1e-4, 4.0),
            ],
            1.0,
            0.0,
        );
        assert_eq!(t.rows[0].rate, None);
        assert!((t.rows[1].rate.unwrap() - 2.0).abs() < 1e-12);
        assert!((t.rows[2].rate.unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(t.rows[3].rate, None);
        assert!((t.mean_last_rates(2).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(t.mean_last_rates(3), None);
        let csv = t.to_csv();
        assert!(csv.starts_with("size,error,rate,seconds\n4e-1,1.6e-2,,1e0\n2e-1,4e-3,2e0,2e0\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn degenerate_errors_are_flagged() {
        let t = RateTable::from_errors(Axis::Space, vec![(0.2, 0.0, 0.0), (0.1, 1e-17, 0.0)], 1.0, 0.0);
        assert!(t.rows.iter().all(|r| r.degenerate && r.rate.is_none()));
        assert!(t.to_text().contains("zero"));
    }

    #[test]
    fn identical_grids_give_zero_errors() {
        let s = StudySpec {
            ladder: vec![0.25],
            reference: (1e-3, 0.25),
            ..tiny(Scheme::Sav1)
        };
        let t = spatial_study(&s).unwrap();
        assert_eq!(t.rows[0].error, 0.0);
        assert!(t.rows[0].degenerate);
    }

    #[test]
    fn linear_in_time_data_is_exact() {
        // constant states are exact for every dt: the ladder is degenerate
        let s = StudySpec {
            init: Init::Constant(-1.0),
            h: 0.25,
            final_time: 0.04,
            ladder: vec![0.02, 0.01],
            reference: (0.0025, 0.25),
            ..tiny(Scheme::Sav2)
        };
        let t = temporal_study(&s).unwrap();
        assert!(t.rows.iter().all(|r| r.degenerate && r.rate.is_none()));
    }

    #[test]
    fn ladder_validation() {
        let mut s = tiny(Scheme::Sav1);
        s.ladder = vec![0.125, 0.25];
        s.reference = (1e-3, 0.0625);
        assert!(spatial_study(&s).is_err());
        s.ladder = vec![0.25, 0.125];
        s.reference = (1e-3, 0.5);
        assert!(spatial_study(&s).is_err());
        // M=6 is not nested in M=16
        s.ladder = vec![1.0 / 3.0];
        s.reference = (1e-3, 0.125);
        assert!(spatial_study(&s).is_err());
        s.ladder = vec![0.002];
        s.reference = (0.001, 0.25);
        s.final_time = 0.003;
        assert!(temporal_study(&s).is_err());
    }

    #[test]
    fn restriction_samples_nodes() {
        let fine = GridSpec::new(1.0, 8).unwrap();
        let coarse = GridSpec::new(1.0, 4).unwrap();
        let f = Field::from_fn(fine, |x, y| x + 10.0 * y);
        let r = restrict(&f, &coarse).unwrap();
        for j in 0..=4 {
            for i in 0..=4 {
                let want = coarse.coord(i) + 10.0 * coarse.coord(j);
                assert!((r.get(i, j) - want).abs() < 1e-14);
            }
        }
        assert!(restrict(&f, &GridSpec::new(1.0, 3).unwrap()).is_err());
    }

    #[test]
    fn components_four_connected() {
        let g = GridSpec::new(1.0, 4).unwrap();
        let mut f = Field::constant(g, -1.0);
        let idx = |i, j| g.index(i, j);
        f.values_mut()[idx(0, 0)] = 1.0;
        f.values_mut()[idx(1, 1)] = 1.0; // diagonal only: separate
        f.values_mut()[idx(3, 3)] = 1.0;
        f.values_mut()[idx(3, 4)] = 1.0;
        assert_eq!(count_components(&f, 0.0), 3);
        f.values_mut()[idx(1, 0)] = 1.0;
        assert_eq!(count_components(&f, 0.0), 2);
        assert_eq!(count_components(&Field::constant(g, 1.0), 0.0), 1);
        assert_eq!(count_components(&Field::constant(g, -1.0), 0.0), 0);
    }

    #[test]
    fn example2_starts_with_two_components() {
        let s = StudySpec::preset(Preset::Example2, false);
        assert_eq!(count_components(&s.initial_field().unwrap(), 0.0), 2);
    }

    #[test]
    fn loglog_fit() {
        let pts: Vec<(f64, f64)> = (1..20).map(|k| (k as f64, 3.0 * (k as f64).powf(-1.0 / 3.0))).collect();
        assert!((loglog_slope(&pts).unwrap() + 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&[(1.0, 1.0)]), None);
    }

    #[test]
    fn fast_and_direct_agree_on_small_grid() {
        let s = StudySpec {
            ladder: vec![0.25],
            ..tiny(Scheme::Sav2)
        };
        let a = solver_agreement(&s, Axis::Space).unwrap();
        assert_eq!(a.len(), 1);
        assert!(a[0].rel_diff <= 1e-10, "{:?}", a[0]);
    }

    #[test]
    fn benchmark_small() {
        let s = StudySpec {
            ladder: vec![0.25, 0.125],
            ..tiny(Scheme::Sav2)
        };
        let r = benchmark(&s, 1, usize::MAX).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[1].n, 17 * 17);
        assert!(r
            .rows
            .iter()
            .all(|row| row.direct_seconds.is_some() && row.matvec_seconds > 0.0));
        assert!(r.to_csv().lines().count() == 3);
    }
}
