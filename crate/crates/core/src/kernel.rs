//! Interaction kernels and their samples at grid offsets.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::GridSpec;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// `J(x) = 4 / (pi delta^4) exp(-|x|^2 / delta^2)` in two dimensions.
    Gaussian { delta: f64 },
    /// Samples at offset magnitudes `(i h, j h)`, `i, j = 0..=M`, `i` fastest.
    Tabulated { cells: usize, samples: Vec<f64> },
}

impl KernelSpec {
    pub fn gaussian(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::config(format!("kernel width delta must be > 0, got {delta}")));
        }
        Ok(KernelSpec::Gaussian { delta })
    }

    /// Reads a kernel table: first line `M`, then `M+1` rows of `M+1`
    /// non-negative reals. Row `j` holds `x_{0,j} .. x_{M,j}`.
    pub fn read_table(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_table(&text)
    }

    pub fn parse_table(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty kernel table".into(),
        })?;
        let cells: usize = first.trim().parse().map_err(|_| Error::Parse {
            line: 1,
            msg: format!("expected M, found {first:?}"),
        })?;
        let n = cells + 1;
        let mut samples = Vec::with_capacity(n * n);
        let mut rows = 0;
        for (ln, line) in lines {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: ln + 1,
                    msg: e.to_string(),
                })?;
            if row.len() != n {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("expected {n} values, found {}", row.len()),
                });
            }
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("kernel samples must be finite and >= 0, found {v}"),
                });
            }
            samples.extend(row);
            rows += 1;
        }
        if rows != n {
            return Err(Error::Parse {
                line: rows + 2,
                msg: format!("expected {n} rows, found {rows}"),
            });
        }
        Ok(KernelSpec::Tabulated { cells, samples })
    }
}

pub fn eval_kernel(spec: &KernelSpec, dx: f64, dy: f64) -> Result<f64> {
    match spec {
        KernelSpec::Gaussian { delta } => {
            let delta = *delta;
            if !(delta > 0.0) {
                return Err(Error::config(format!("kernel width delta must be > 0, got {delta}")));
            }
            let d2 = delta * delta;
            Ok(4.0 / (std::f64::consts::PI * d2 * d2) * (-(dx * dx + dy * dy) / d2).exp())
        }
        KernelSpec::Tabulated { .. } => Err(Error::config(
            "tabulated kernels are only defined at grid offsets; use sample_kernel",
        )),
    }
}

/// `x_{i,j} = J(i h, j h)` for `i, j = 0..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    cells: usize,
    samples: Vec<f64>,
}

impl KernelTable {
    pub fn from_samples(cells: usize, samples: Vec<f64>) -> Result<Self> {
        let n = cells + 1;
        if samples.len() != n * n {
            return Err(Error::config(format!(
                "kernel table for M={cells} needs {} samples, got {}",
                n * n,
                samples.len()
            )));
        }
        if samples.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("kernel samples must be finite and >= 0"));
        }
        Ok(Self { cells, samples })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.samples[i + j * (self.cells + 1)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.samples
    }

    pub fn max(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, &v| m.max(v))
    }
}

pub fn sample_kernel(grid: &GridSpec, spec: &KernelSpec) -> Result<KernelTable> {
    let m = grid.cells();
    match spec {
        KernelSpec::Gaussian { .. } => {
            let h = grid.spacing();
            let n = m + 1;
            let mut samples = Vec::with_capacity(n * n);
            for j in 0..n {
                for i in 0..n {
                    samples.push(eval_kernel(spec, i as f64 * h, j as f64 * h)?);
                }
            }
            KernelTable::from_samples(m, samples)
        }
        KernelSpec::Tabulated { cells, samples } => {
            if *cells != m {
                return Err(Error::GridMismatch {
                    expected: m,
                    found: *cells,
                });
            }
            KernelTable::from_samples(m, samples.clone())
        }
    }
}
