//! Run configuration files, snapshot and telemetry writers, and the `nlch`
//! command line.
//!
//! Config files are flat `section.key = value` lines; `#` starts a comment.
//! Unknown or repeated keys are errors. Missing keys take the defaults of
//! the preset named by `init`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::experiments::{
    benchmark, energy_decay_study, run_simulation, solver_agreement, spatial_study, temporal_study, Axis, Flow, Preset,
    StudySpec,
};
use crate::grid::{Field, GridSpec};
use crate::sav::{EnergySample, Predictor, Scheme, SolverKind};

pub const CONFIG_VERSION: u32 = 1;

pub const EXAMPLE1_CONF: &str = include_str!("../presets/example1.conf");
pub const EXAMPLE2_CONF: &str = include_str!("../presets/example2.conf");
pub const EXAMPLE3_CONF: &str = include_str!("../presets/example3.conf");

pub fn preset_text(preset: Preset) -> &'static str {
    match preset {
        Preset::Example1 => EXAMPLE1_CONF,
        Preset::Example2 => EXAMPLE2_CONF,
        Preset::Example3 => EXAMPLE3_CONF,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: StudySpec,
    pub output_dir: PathBuf,
    /// Periodic snapshot interval in steps; 0 writes only the first and last state.
    pub snapshot_every: usize,
    pub version: u32,
}

impl RunConfig {
    pub fn from_spec(spec: StudySpec) -> Self {
        Self {
            spec,
            output_dir: PathBuf::from("out"),
            snapshot_every: 0,
            version: CONFIG_VERSION,
        }
    }
}

const KEYS: &[&str] = &[
    "version",
    "domain.L",
    "grid.M",
    "time.dt",
    "time.T",
    "model.epsilon",
    "model.mobility",
    "model.delta",
    "model.C0",
    "scheme",
    "predictor",
    "solver",
    "cg.tol",
    "cg.max_iter",
    "fft.padding",
    "init",
    "init.seed",
    "output.dir",
    "output.snapshot_every",
];

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

fn type_error(e: &Entry, want: &str) -> Error {
    Error::Parse {
        line: e.line,
        msg: format!("key `{}`: expected {want}, found {:?}", e.key, e.value),
    }
}

fn choice<T: Copy>(e: &Entry, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == e.value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let allowed: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Parse {
                line: e.line,
                msg: format!(
                    "key `{}`: unknown value {:?}; allowed: {}",
                    e.key,
                    e.value,
                    allowed.join(", ")
                ),
            }
        })
}

fn real(e: &Entry) -> Result<f64> {
    e.value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| type_error(e, "a finite real number"))
}

fn count(e: &Entry) -> Result<usize> {
    e.value
        .parse::<usize>()
        .map_err(|_| type_error(e, "a non-negative integer"))
}

const SCHEMES: &[(&str, Scheme)] = &[("sav1", Scheme::Sav1), ("sav2", Scheme::Sav2)];
const PREDICTORS: &[(&str, Predictor)] = &[("extrapolate", Predictor::Extrapolate), ("solve", Predictor::Solve)];
const SOLVERS: &[(&str, SolverKind)] = &[
    ("fast_cg", SolverKind::FastCg),
    ("fast", SolverKind::FastCg),
    ("direct", SolverKind::Direct),
];
const PRESETS: &[(&str, Preset)] = &[
    ("example1", Preset::Example1),
    ("example2", Preset::Example2),
    ("example3", Preset::Example3),
];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> &'static str {
    options.iter().find(|(_, o)| o == v).map(|(n, _)| *n).unwrap_or("?")
}

fn padding_value(e: &Entry) -> Result<Padding> {
    match e.value {
        "even" => Ok(Padding::Even),
        "minimal" => Ok(Padding::Minimal),
        "fft_friendly" => Ok(Padding::FftFriendly),
        v => v
            .parse::<usize>()
            .map(Padding::Fixed)
            .map_err(|_| type_error(e, "even, minimal, fft_friendly or an integer size")),
    }
}

fn padding_name(p: Padding) -> String {
    match p {
        Padding::Even => "even".into(),
        Padding::Minimal => "minimal".into(),
        Padding::FftFriendly => "fft_friendly".into(),
        Padding::Fixed(n) => n.to_string(),
    }
}

/// Parses a config file. Physical and numerical checks run afterwards in
/// [`StudySpec::validate`].
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries: BTreeMap<&str, Entry> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `key = value`, found {content:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let key = KEYS.iter().find(|k| **k == key).copied().ok_or_else(|| Error::Parse {
            line,
            msg: format!("unknown key `{key}`"),
        })?;
        if value.is_empty() {
            return Err(Error::Parse {
                line,
                msg: format!("key `{key}` has no value"),
            });
        }
        if let Some(prev) = entries.insert(key, Entry { line, key, value }) {
            return Err(Error::Parse {
                line,
                msg: format!("key `{key}` repeated (first set on line {})", prev.line),
            });
        }
    }

    let preset = match entries.get("init") {
        Some(e) => choice(e, PRESETS)?,
        None => Preset::Example1,
    };
    let mut cfg = RunConfig::from_spec(StudySpec::preset(preset, false));
    for key in KEYS {
        if !entries.contains_key(key) && *key != "version" {
            info!("config key `{key}` not set; using the {} default", preset.name());
        }
    }

    let mut cells = None;
    for e in entries.values() {
        let s = &mut cfg.spec;
        match e.key {
            "version" => {
                cfg.version = count(e)? as u32;
                if cfg.version != CONFIG_VERSION {
                    return Err(type_error(e, &format!("version {CONFIG_VERSION}")));
                }
            }
            "domain.L" => s.half_width = real(e)?,
            "grid.M" => cells = Some((count(e)?, e.line)),
            "time.dt" => s.dt = real(e)?,
            "time.T" => s.final_time = real(e)?,
            "model.epsilon" => s.epsilon = real(e)?,
            "model.mobility" => s.mobility = real(e)?,
            "model.delta" => s.delta = real(e)?,
            "model.C0" => s.c0 = real(e)?,
            "scheme" => s.scheme = choice(e, SCHEMES)?,
            "predictor" => s.predictor = choice(e, PREDICTORS)?,
            "solver" => s.solver = choice(e, SOLVERS)?,
            "cg.tol" => s.cg.tol_rel = real(e)?,
            "cg.max_iter" => s.cg.max_iter = count(e)?,
            "fft.padding" => s.padding = padding_value(e)?,
            "init" => {}
            "init.seed" => s.seed = e.value.parse().map_err(|_| type_error(e, "a non-negative integer"))?,
            "output.dir" => cfg.output_dir = PathBuf::from(e.value),
            "output.snapshot_every" => cfg.snapshot_every = count(e)?,
            other => unreachable!("key {other} is in KEYS"),
        }
    }
    if let Some((m, line)) = cells {
        if m < 2 {
            return Err(Error::Parse {
                line,
                msg: format!("key `grid.M`: must be >= 2, found {m}"),
            });
        }
        cfg.spec.h = 2.0 * cfg.spec.half_width / m as f64;
    } else {
        // keep the preset's cell count if only L changed
        let m = cells_of_preset(preset);
        cfg.spec.h = 2.0 * cfg.spec.half_width / m as f64;
    }
    Ok(cfg)
}

fn cells_of_preset(preset: Preset) -> usize {
    StudySpec::preset(preset, false)
        .cells()
        .expect("presets have whole cell counts")
}

/// Writes every key; `parse_config(&render_config(c)) == c` for valid configs.
pub fn render_config(cfg: &RunConfig) -> Result<String> {
    let s = &cfg.spec;
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    put("version", cfg.version.to_string());
    put("init", s.preset.name().to_string());
    put("init.seed", s.seed.to_string());
    put("domain.L", format!("{:?}", s.half_width));
    put("grid.M", s.cells()?.to_string());
    put("time.dt", format!("{:?}", s.dt));
    put("time.T", format!("{:?}", s.final_time));
    put("model.epsilon", format!("{:?}", s.epsilon));
    put("model.mobility", format!("{:?}", s.mobility));
    put("model.delta", format!("{:?}", s.delta));
    put("model.C0", format!("{:?}", s.c0));
    put("scheme", name_of(SCHEMES, &s.scheme).into());
    put("predictor", name_of(PREDICTORS, &s.predictor).into());
    put("solver", name_of(SOLVERS, &s.solver).into());
    put("cg.tol", format!("{:?}", s.cg.tol_rel));
    put("cg.max_iter", s.cg.max_iter.to_string());
    put("fft.padding", padding_name(s.padding));
    put("output.dir", cfg.output_dir.display().to_string());
    put("output.snapshot_every", cfg.snapshot_every.to_string());
    Ok(out)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Plain-text snapshot: a header line, then row `j` of the field per line
/// at 17 significant digits.
pub fn write_snapshot(path: impl AsRef<Path>, t: f64, field: &Field) -> Result<()> {
    let g = field.grid();
    let n = g.points_per_dim();
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# nlch-snapshot v1 t={t} M={} L={}", g.cells(), g.half_width())?;
    let mut line = String::new();
    for j in 0..n {
        line.clear();
        for i in 0..n {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{:.16e}", field.get(i, j));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_snapshot(text: &str) -> Result<(f64, Field)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty snapshot".into(),
    })?;
    let bad_header = || Error::Parse {
        line: 1,
        msg: format!("malformed snapshot header {header:?}"),
    };
    let rest = header.strip_prefix("# nlch-snapshot v1 ").ok_or_else(bad_header)?;
    let mut fields = BTreeMap::new();
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(bad_header)?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(bad_header);
    let t: f64 = get("t")?.parse().map_err(|_| bad_header())?;
    let m: usize = get("M")?.parse().map_err(|_| bad_header())?;
    let l: f64 = get("L")?.parse().map_err(|_| bad_header())?;
    let grid = GridSpec::new(l, m)?;
    let n = grid.points_per_dim();
    let mut values = Vec::with_capacity(grid.len());
    let mut rows = 0;
    for (idx, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: idx + 2,
                msg: format!("{e}"),
            })?;
        if row.len() != n {
            return Err(Error::Parse {
                line: idx + 2,
                msg: format!("expected {n} values, found {}", row.len()),
            });
        }
        values.extend(row);
        rows += 1;
    }
    if rows != n {
        return Err(Error::Parse {
            line: rows + 2,
            msg: format!("expected {n} rows, found {rows}"),
        });
    }
    Ok((t, Field::from_values(grid, values)?))
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<(f64, Field)> {
    parse_snapshot(&fs::read_to_string(path)?)
}

pub const TELEMETRY_HEADER: &str = "step,t,mass,r,sqrtE1C0,modified_energy,original_energy,cg_iters";

pub fn telemetry_row(s: &EnergySample) -> String {
    format!(
        "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
        s.step, s.t, s.mass, s.r, s.sqrt_e1_c0, s.modified_energy, s.original_energy, s.cg_iterations
    )
}

pub fn write_telemetry(path: impl AsRef<Path>, samples: &[EnergySample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{TELEMETRY_HEADER}")?;
    for s in samples {
        writeln!(w, "{}", telemetry_row(s))?;
    }
    w.flush()?;
    Ok(())
}

/// Process exit code for a failure: 1 configuration or I/O, 2 solver,
/// 3 violated energy or positivity invariant.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_invariant_violation() {
        3
    } else if err.is_config() || matches!(err.root(), Error::Io(_)) {
        1
    } else {
        2
    }
}

#[derive(Debug, Parser)]
#[command(name = "nlch", version, about = "Nonlocal Cahn-Hilliard SAV solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Fast,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Sav1,
    Sav2,
}

#[derive(Debug, clap::Args)]
pub struct Options {
    /// Config file (flat `section.key = value` lines).
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["example1", "example2", "example3"])]
    pub preset: Option<String>,
    /// Full-size grids, ladders and snapshot times of the original study.
    #[arg(long, global = true)]
    pub paper_scale: bool,
    #[arg(long, global = true, value_enum)]
    pub solver: Option<SolverArg>,
    #[arg(long, global = true, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation, writing snapshots and telemetry.
    Run,
    /// Time-step refinement study.
    ConvTime,
    /// Mesh refinement study.
    ConvSpace,
    /// Matrix-vector, CG and dense direct timings.
    Bench {
        /// Largest cells per side timed with the dense direct solver.
        #[arg(long, value_name = "M", default_value_t = 64)]
        direct_max_cells: usize,
    },
    /// Energy decay and log-log slope for the coarsening problem.
    EnergyDecay,
}

fn load_config(opts: &Options, default_preset: Preset) -> Result<RunConfig> {
    let mut cfg = match (&opts.config, &opts.preset) {
        (Some(path), _) => {
            if opts.paper_scale {
                return Err(Error::config("--paper-scale applies to presets, not to --config"));
            }
            read_config(path)?
        }
        (None, name) => {
            let preset = match name {
                Some(n) => n.parse()?,
                None => default_preset,
            };
            if opts.paper_scale {
                RunConfig::from_spec(StudySpec::preset(preset, true))
            } else {
                parse_config(preset_text(preset))?
            }
        }
    };
    if let Some(s) = opts.solver {
        cfg.spec.solver = match s {
            SolverArg::Fast => SolverKind::FastCg,
            SolverArg::Direct => SolverKind::Direct,
        };
    }
    if let Some(s) = opts.scheme {
        cfg.spec.scheme = match s {
            SchemeArg::Sav1 => Scheme::Sav1,
            SchemeArg::Sav2 => Scheme::Sav2,
        };
    }
    if let Some(seed) = opts.seed {
        cfg.spec.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn scheme_name(s: Scheme) -> &'static str {
    name_of(SCHEMES, &s)
}

fn cmd_run(cfg: &RunConfig, paper_scale: bool) -> Result<()> {
    let spec = &cfg.spec;
    spec.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let steps = spec.num_steps()?;
    let mut targets: Vec<usize> = if paper_scale {
        spec.snapshot_times()
            .into_iter()
            .map(|t| (t / spec.dt).round() as usize)
            .filter(|&k| k <= steps)
            .collect()
    } else {
        let every = cfg.snapshot_every;
        let mut v: Vec<usize> = if every > 0 {
            (0..=steps).step_by(every).collect()
        } else {
            vec![0]
        };
        v.push(steps);
        v
    };
    targets.sort_unstable();
    targets.dedup();

    let telemetry_path = cfg.output_dir.join("telemetry.csv");
    let mut telemetry = BufWriter::new(fs::File::create(&telemetry_path)?);
    writeln!(telemetry, "{TELEMETRY_HEADER}")?;
    let dir = cfg.output_dir.clone();
    let out = run_simulation(spec, &mut |state, sample| {
        writeln!(telemetry, "{}", telemetry_row(sample))?;
        if targets.binary_search(&state.step).is_ok() {
            write_snapshot(
                dir.join(format!("snapshot_{:07}.txt", state.step)),
                state.t,
                &state.phi_n,
            )?;
        }
        Ok(Flow::Continue)
    })?;
    telemetry.flush()?;
    let last = out.samples.last().copied().unwrap_or_default();
    println!(
        "{} steps of {} to t = {} in {:.2} s; modified energy {:.10e}, mass {:.10e}",
        out.state.step,
        scheme_name(spec.scheme),
        out.state.t,
        out.seconds,
        last.modified_energy,
        last.mass
    );
    println!("wrote {} snapshots and {}", targets.len(), telemetry_path.display());
    Ok(())
}

fn report_agreement(spec: &StudySpec, axis: Axis) -> Result<()> {
    for a in solver_agreement(spec, axis)? {
        println!(
            "fast vs direct at {:e}: relative difference {:.3e} (fast {:.2} s, direct {:.2} s)",
            a.size, a.rel_diff, a.fast_seconds, a.direct_seconds
        );
    }
    Ok(())
}

fn cmd_conv_time(cfg: &RunConfig) -> Result<()> {
    let spec = &cfg.spec;
    if spec.ladder.is_empty() {
        return Err(Error::config(format!(
            "preset {} has no step ladder",
            spec.preset.name()
        )));
    }
    prepare_dir(&cfg.output_dir)?;
    let table = temporal_study(spec)?;
    print!("{}", table.to_text());
    let path = cfg
        .output_dir
        .join(format!("conv_time_{}.csv", scheme_name(spec.scheme)));
    fs::write(&path, table.to_csv())?;
    println!("wrote {}", path.display());
    if spec.solver == SolverKind::FastCg && spec.grid()?.len() <= crate::krylov::DENSE_GUARD {
        report_agreement(spec, Axis::Time)?;
    }
    Ok(())
}

fn cmd_conv_space(cfg: &RunConfig, paper_scale: bool) -> Result<()> {
    if cfg.spec.preset != Preset::Example1 {
        return Err(Error::config("conv-space is defined for example1"));
    }
    let layout = StudySpec::example1_spatial(paper_scale);
    let spec = StudySpec {
        h: layout.h,
        dt: layout.dt,
        final_time: layout.final_time,
        ladder: layout.ladder,
        reference: layout.reference,
        ..cfg.spec.clone()
    };
    prepare_dir(&cfg.output_dir)?;
    let table = spatial_study(&spec)?;
    print!("{}", table.to_text());
    let path = cfg
        .output_dir
        .join(format!("conv_space_{}.csv", scheme_name(spec.scheme)));
    fs::write(&path, table.to_csv())?;
    println!("wrote {}", path.display());
    if spec.solver == SolverKind::FastCg {
        report_agreement(&spec, Axis::Space)?;
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, paper_scale: bool, direct_max_cells: usize) -> Result<()> {
    let cells: &[usize] = if paper_scale {
        &[16, 32, 64, 128, 256, 512]
    } else {
        &[16, 32, 64, 128, 256]
    };
    let spec = StudySpec {
        ladder: cells.iter().map(|&m| 2.0 * cfg.spec.half_width / m as f64).collect(),
        ..cfg.spec.clone()
    };
    prepare_dir(&cfg.output_dir)?;
    let report = benchmark(&spec, 5, direct_max_cells)?;
    print!("{}", report.to_text());
    let path = cfg.output_dir.join("bench.csv");
    fs::write(&path, report.to_csv())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_energy_decay(cfg: &RunConfig) -> Result<()> {
    let spec = &cfg.spec;
    prepare_dir(&cfg.output_dir)?;
    let window = (0.5f64.min(spec.final_time / 20.0), spec.final_time.min(10.0));
    let study = energy_decay_study(spec, window)?;
    let path = cfg.output_dir.join("telemetry.csv");
    write_telemetry(&path, &study.samples)?;
    match study.slope {
        Some(s) => println!("energy decay slope over t in [{}, {}]: {s:.4}", window.0, window.1),
        None => println!("not enough samples in [{}, {}] to fit a slope", window.0, window.1),
    }
    println!("modified energy monotone: {}", study.monotone);
    println!("wrote {}", path.display());
    Ok(())
}

/// Entry point of the `nlch` binary; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let default_preset = match cli.command {
        Command::EnergyDecay => Preset::Example3,
        _ => Preset::Example1,
    };
    let result = load_config(&cli.opts, default_preset).and_then(|cfg| match cli.command {
        Command::Run => cmd_run(&cfg, cli.opts.paper_scale),
        Command::ConvTime => cmd_conv_time(&cfg),
        Command::ConvSpace => cmd_conv_space(&cfg, cli.opts.paper_scale),
        Command::Bench { direct_max_cells } => cmd_bench(&cfg, cli.opts.paper_scale, direct_max_cells),
        Command::EnergyDecay => cmd_energy_decay(&cfg),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::krylov::CgConfig;
    use proptest::prelude::*;

    #[test]
    fn parses_basic_keys() {
        let c = parse_config("grid.M = 100\ntime.dt = 1e-3\n").unwrap();
        assert_eq!(c.spec.cells().unwrap(), 100);
        assert_eq!(c.spec.dt, 1e-3);
        assert_eq!(c.spec.preset, Preset::Example1);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = parse_config("# header\n\n  scheme = sav1   # first order\n").unwrap();
        assert_eq!(c.spec.scheme, Scheme::Sav1);
    }

    #[test]
    fn bad_choice_names_key_and_options() {
        let e = parse_config("grid.M = 8\nscheme = sav3\n").unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains("scheme") && msg.contains("sav1, sav2"), "{msg}");
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        assert!(matches!(
            parse_config("grid.N = 3").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
        assert!(matches!(
            parse_config("time.dt = 1\ntime.dt = 2").unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
        assert!(matches!(
            parse_config("\n\njust words").unwrap_err(),
            Error::Parse { line: 3, .. }
        ));
        let e = parse_config("time.dt = fast").unwrap_err().to_string();
        assert!(e.contains("time.dt"), "{e}");
        assert!(parse_config("grid.M = -3").is_err());
        assert!(parse_config("grid.M = 1").is_err());
        assert!(parse_config("version = 2").is_err());
        assert!(parse_config("time.T =").is_err());
    }

    #[test]
    fn example1_preset_file() {
        let c = parse_config(EXAMPLE1_CONF).unwrap();
        let s = &c.spec;
        assert!((s.epsilon * s.epsilon - 0.1).abs() < 1e-15);
        assert_eq!(s.mobility, 1.0);
        assert_eq!(s.delta, s.epsilon);
        assert_eq!(s.final_time, 0.05);
        assert_eq!(*s, StudySpec::preset(Preset::Example1, false));
    }

    #[test]
    fn preset_files_match_presets() {
        for p in [Preset::Example2, Preset::Example3] {
            let c = parse_config(preset_text(p)).unwrap();
            assert_eq!(c.spec, StudySpec::preset(p, false), "{}", p.name());
        }
    }

    #[test]
    fn render_round_trip_of_presets() {
        for p in [Preset::Example1, Preset::Example2, Preset::Example3] {
            for paper in [false, true] {
                let c = RunConfig::from_spec(StudySpec::preset(p, paper));
                let text = render_config(&c).unwrap();
                let back = parse_config(&text).unwrap();
                assert_eq!(back.spec.cells().unwrap(), c.spec.cells().unwrap());
                assert_eq!(render_config(&back).unwrap(), text);
            }
        }
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            prop::sample::select(vec![Preset::Example1, Preset::Example2, Preset::Example3]),
            2usize..300,
            1e-6f64..1.0,
            1usize..1000,
            1e-3f64..1.0,
            1e-3f64..1.0,
            (1e-3f64..10.0, 1e-3f64..10.0, 1e-14f64..1e-3, 1usize..5000),
            (any::<bool>(), any::<bool>(), any::<bool>(), any::<u64>(), 0usize..100),
            prop::sample::select(vec![
                Padding::Even,
                Padding::Minimal,
                Padding::FftFriendly,
                Padding::Fixed(1024),
            ]),
        )
            .prop_map(
                |(preset, m, dt, steps, eps, delta, (mob, c0, tol, max_iter), flags, padding)| {
                    let (sav1, direct, solve, seed, every) = flags;
                    let base = StudySpec::preset(preset, false);
                    let spec = StudySpec {
                        h: 2.0 / m as f64,
                        dt,
                        final_time: dt * steps as f64,
                        epsilon: eps,
                        delta,
                        mobility: mob,
                        c0,
                        scheme: if sav1 { Scheme::Sav1 } else { Scheme::Sav2 },
                        solver: if direct { SolverKind::Direct } else { SolverKind::FastCg },
                        predictor: if solve {
                            Predictor::Solve
                        } else {
                            Predictor::Extrapolate
                        },
                        cg: CgConfig {
                            tol_rel: tol,
                            max_iter,
                            ..CgConfig::default()
                        },
                        padding,
                        seed,
                        ..base
                    };
                    RunConfig {
                        spec,
                        output_dir: PathBuf::from(format!("runs/{seed}")),
                        snapshot_every: every,
                        version: CONFIG_VERSION,
                    }
                },
            )
    }

    proptest! {
        #[test]
        fn parse_render_round_trip(c in arb_config()) {
            let back = parse_config(&render_config(&c).unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn snapshot_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(1.0, 7).unwrap();
        let f = Field::from_fn(g, |x, y| (x * 3.7).sin() * (y + 0.1).exp() / 3.0 + 1e-300);
        let path = dir.path().join("s.txt");
        write_snapshot(&path, 0.1 + 0.2, &f).unwrap();
        let (t, back) = read_snapshot(&path).unwrap();
        assert_eq!(t.to_bits(), (0.1f64 + 0.2).to_bits());
        for (a, b) in f.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# nlch-snapshot v1 t=0.30000000000000004 M=7 L=1\n"));
    }

    #[test]
    fn constant_snapshot_lines_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(1.0, 4).unwrap();
        let path = dir.path().join("c.txt");
        write_snapshot(&path, 0.0, &Field::constant(g, 1.0)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| *r == rows[0]));
        assert_eq!(rows[0].split(' ').count(), 5);
    }

    #[test]
    fn malformed_snapshots() {
        assert!(parse_snapshot("").is_err());
        assert!(parse_snapshot("# other header\n").is_err());
        assert!(parse_snapshot("# nlch-snapshot v1 t=0 M=2 L=1\n1 2 3\n1 2 3\n").is_err());
        assert!(parse_snapshot("# nlch-snapshot v1 t=0 M=2 L=1\n1 2 3\n1 2\n1 2 3\n").is_err());
    }

    #[test]
    fn empty_telemetry_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_telemetry(&path, &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{TELEMETRY_HEADER}\n"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), 1);
        assert_eq!(
            exit_code(&Error::Parse {
                line: 1,
                msg: "x".into()
            }),
            1
        );
        assert_eq!(
            exit_code(
                &Error::CgNotConverged {
                    iterations: 1,
                    residual: 1.0
                }
                .at_step(3)
            ),
            2
        );
        assert_eq!(exit_code(&Error::Singular), 2);
        assert_eq!(
            exit_code(&Error::Invariant {
                step: 2,
                msg: "x".into()
            }),
            3
        );
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 1);
    }
}
