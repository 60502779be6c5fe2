//! Fast trapezoid-rule convolution with a sampled kernel and the discrete
//! nonlocal operator built on it.
//!
//! The discrete convolution
//!
//! ```text
//! (J*v)_{i,j} = h^2 sum_{m1,m2} w_{m1,m2} J(x_{m1} - x_i, y_{m2} - y_j) v_{m1,m2}
//! ```
//!
//! is a BTTB matrix applied to the weighted field `w ⊙ v`. Embedding the
//! kernel samples into a `P x P` wrapped image (`P >= 2M+1`) turns the BTTB
//! product into a BCCB one, which is diagonalised by the 2D DFT: one forward
//! transform of the zero-padded input, a pointwise product with the
//! precomputed symbol, and one inverse transform. Both transforms are
//! real-to-complex along rows followed by complex column transforms over the
//! `P/2 + 1` retained frequencies.
//!
//! Rows of the padded input beyond `M` are zero and only rows `0..=M` of the
//! output are needed, so the row passes touch `M+1` rows, not `P`.

use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, QuadWeights};
use crate::kernel::KernelTable;

type C64 = Complex<f64>;

/// Columns transformed together in the fused forward/multiply/inverse pass.
const COLUMN_BLOCK: usize = 8;

/// How the circulant embedding size `P` is chosen from `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// `P = 2M + 2`.
    #[default]
    Even,
    /// `P = 2M + 1`, the smallest non-aliasing size.
    Minimal,
    /// Smallest even `2^a 3^b 5^c 7^d >= 2M + 1`.
    FftFriendly,
    Fixed(usize),
}

impl Padding {
    pub fn size_for(self, cells: usize) -> usize {
        match self {
            Padding::Even => 2 * cells + 2,
            Padding::Minimal => 2 * cells + 1,
            Padding::FftFriendly => next_fast_len(2 * cells + 1),
            Padding::Fixed(p) => p,
        }
    }
}

/// Smallest even integer `>= n` whose prime factors are all in {2, 3, 5, 7}.
pub fn next_fast_len(n: usize) -> usize {
    let smooth = |mut k: usize| {
        for p in [2, 3, 5, 7] {
            while k.is_multiple_of(p) {
                k /= p;
            }
        }
        k == 1
    };
    let mut k = n.max(2);
    loop {
        if k.is_multiple_of(2) && smooth(k) {
            return k;
        }
        k += 1;
    }
}

/// Per-caller buffers for [`ConvolutionPlan`]; the plan itself is immutable
/// and can be shared across threads.
pub struct ConvWorkspace {
    size: usize,
    row_real: Vec<f64>,
    rows: Vec<C64>,
    block: Vec<C64>,
    scratch: Vec<C64>,
    tmp: Vec<f64>,
}

pub struct ConvolutionPlan {
    grid: GridSpec,
    weights: QuadWeights,
    size: usize,
    half: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    /// Half spectrum, column-major over x-frequency: entry `kx * P + ky`, `kx < P/2 + 1`.
    symbol: Vec<C64>,
    jstar1: Field,
    /// `h^2 / P^2`: quadrature cell area times the inverse-DFT normalisation.
    scale: f64,
    max_imag_ratio: f64,
}

impl std::fmt::Debug for ConvolutionPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvolutionPlan")
            .field("cells", &self.grid.cells())
            .field("size", &self.size)
            .finish()
    }
}

pub fn build_plan(grid: &GridSpec, table: &KernelTable, size: usize) -> Result<ConvolutionPlan> {
    ConvolutionPlan::with_size(grid, table, size)
}

impl ConvolutionPlan {
    pub fn new(grid: &GridSpec, table: &KernelTable, padding: Padding) -> Result<Self> {
        Self::with_size(grid, table, padding.size_for(grid.cells()))
    }

    pub fn with_size(grid: &GridSpec, table: &KernelTable, size: usize) -> Result<Self> {
        let m = grid.cells();
        if table.cells() != m {
            return Err(Error::GridMismatch {
                expected: m,
                found: table.cells(),
            });
        }
        if size < 2 * m + 1 {
            return Err(Error::config(format!(
                "embedding size P={size} is below the non-aliasing minimum 2M+1={}",
                2 * m + 1
            )));
        }
        let mut real_planner = RealFftPlanner::<f64>::new();
        let mut planner = FftPlanner::<f64>::new();
        let r2c = real_planner.plan_fft_forward(size);
        let c2r = real_planner.plan_fft_inverse(size);
        let col_fwd = planner.plan_fft_forward(size);
        let col_inv = planner.plan_fft_inverse(size);
        let half = size / 2 + 1;
        let h = grid.spacing();

        let mut plan = ConvolutionPlan {
            grid: *grid,
            weights: QuadWeights::new(grid),
            size,
            half,
            r2c,
            c2r,
            col_fwd,
            col_inv,
            symbol: Vec::new(),
            jstar1: Field::zeros(*grid),
            scale: h * h / (size as f64 * size as f64),
            max_imag_ratio: 0.0,
        };

        // Wrapped kernel image: c[q][p] = x_{iota(p), iota(q)}, zero in the gap M < p < P-M.
        let iota = |p: usize| -> Option<usize> {
            if p <= m {
                Some(p)
            } else if p >= size - m {
                Some(size - p)
            } else {
                None
            }
        };
        let mut ws = plan.workspace();
        let spectrum = plan.forward_full(&mut ws, |q, row| {
            row.fill(0.0);
            if let Some(jq) = iota(q) {
                for (p, slot) in row.iter_mut().enumerate() {
                    if let Some(ip) = iota(p) {
                        *slot = table.get(ip, jq);
                    }
                }
            }
        });
        let max_abs = spectrum.iter().fold(0.0f64, |a, z| a.max(z.norm()));
        let max_im = spectrum.iter().fold(0.0f64, |a, z| a.max(z.im.abs()));
        plan.max_imag_ratio = if max_abs > 0.0 { max_im / max_abs } else { 0.0 };
        if plan.max_imag_ratio > 1e-12 {
            return Err(Error::config(format!(
                "kernel symbol is not real (relative imaginary part {:.3e}); table is not symmetric",
                plan.max_imag_ratio
            )));
        }
        plan.symbol = spectrum;

        let ones = Field::constant(*grid, 1.0);
        let mut jstar1 = vec![0.0; grid.len()];
        plan.conv_into(ones.values(), &mut jstar1, &mut ws);
        plan.jstar1 = Field::from_values(*grid, jstar1)?;
        Ok(plan)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn weights(&self) -> &QuadWeights {
        &self.weights
    }

    /// Embedding size `P`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// `(J*1)_{i,j}`.
    pub fn jstar1(&self) -> &Field {
        &self.jstar1
    }

    /// Largest `|Im|` of the symbol relative to its largest modulus.
    pub fn symbol_imag_ratio(&self) -> f64 {
        self.max_imag_ratio
    }

    /// Eigenvalue of the BCCB embedding at frequency `(kx, ky)`, `0 <= kx, ky < P`.
    pub fn symbol(&self, kx: usize, ky: usize) -> C64 {
        let p = self.size;
        if kx < self.half {
            self.symbol[kx * p + ky]
        } else {
            self.symbol[(p - kx) * p + (p - ky) % p].conj()
        }
    }

    /// Number of `f64` values held by the plan (symbol and `J*1`).
    pub fn storage_len(&self) -> usize {
        2 * self.symbol.len() + self.jstar1.values().len() + self.weights.as_slice().len()
    }

    pub fn workspace(&self) -> ConvWorkspace {
        let p = self.size;
        let scratch_len = [
            self.r2c.get_scratch_len(),
            self.c2r.get_scratch_len(),
            self.col_fwd.get_inplace_scratch_len(),
            self.col_inv.get_inplace_scratch_len(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        ConvWorkspace {
            size: p,
            row_real: vec![0.0; p],
            rows: vec![C64::default(); self.grid.points_per_dim() * self.half],
            block: vec![C64::default(); COLUMN_BLOCK * p],
            scratch: vec![C64::default(); scratch_len],
            tmp: vec![0.0; self.grid.len()],
        }
    }

    /// Forward 2D transform of a full `P x P` real image; `fill(q, row)`
    /// writes row `q`. Returns the half spectrum in symbol layout.
    fn forward_full(&self, ws: &mut ConvWorkspace, mut fill: impl FnMut(usize, &mut [f64])) -> Vec<C64> {
        let (p, half) = (self.size, self.half);
        let mut rows = vec![C64::default(); p * half];
        for q in 0..p {
            fill(q, &mut ws.row_real);
            self.r2c
                .process_with_scratch(&mut ws.row_real, &mut rows[q * half..(q + 1) * half], &mut ws.scratch)
                .expect("r2c buffer lengths are fixed by the plan");
        }
        let mut cols = vec![C64::default(); p * half];
        for q in 0..p {
            for kx in 0..half {
                cols[kx * p + q] = rows[q * half + kx];
            }
        }
        self.col_fwd.process_with_scratch(&mut cols, &mut ws.scratch);
        cols
    }

    /// `out = (J*v)` on raw slices of length `(M+1)^2`.
    pub fn conv_into(&self, v: &[f64], out: &mut [f64], ws: &mut ConvWorkspace) {
        let n = self.grid.points_per_dim();
        assert_eq!(v.len(), n * n, "input length does not match plan grid");
        assert_eq!(out.len(), n * n, "output length does not match plan grid");
        assert_eq!(ws.size, self.size, "workspace built for another plan");
        let (p, half) = (self.size, self.half);
        let w = self.weights.as_slice();

        // rows 0..=M: weighted input, zero padded, real-to-complex along x
        for q in 0..n {
            let base = q * n;
            for i in 0..n {
                ws.row_real[i] = w[base + i] * v[base + i];
            }
            ws.row_real[n..].fill(0.0);
            self.r2c
                .process_with_scratch(
                    &mut ws.row_real,
                    &mut ws.rows[q * half..(q + 1) * half],
                    &mut ws.scratch,
                )
                .expect("r2c buffer lengths are fixed by the plan");
        }

        // each retained x-frequency column: forward, symbol, inverse, in cache-sized blocks
        let mut kx0 = 0;
        while kx0 < half {
            let bw = COLUMN_BLOCK.min(half - kx0);
            let block = &mut ws.block[..bw * p];
            for q in 0..n {
                let src = &ws.rows[q * half + kx0..q * half + kx0 + bw];
                for (c, z) in src.iter().enumerate() {
                    block[c * p + q] = *z;
                }
            }
            for c in 0..bw {
                block[c * p + n..(c + 1) * p].fill(C64::default());
            }
            self.col_fwd.process_with_scratch(block, &mut ws.scratch);
            let sym = &self.symbol[kx0 * p..(kx0 + bw) * p];
            for (z, s) in block.iter_mut().zip(sym) {
                *z *= *s;
            }
            self.col_inv.process_with_scratch(block, &mut ws.scratch);
            for q in 0..n {
                let dst = &mut ws.rows[q * half + kx0..q * half + kx0 + bw];
                for (c, z) in dst.iter_mut().enumerate() {
                    *z = block[c * p + q];
                }
            }
            kx0 += bw;
        }

        for q in 0..n {
            let spec = &mut ws.rows[q * half..(q + 1) * half];
            // exact result is real: DC (and Nyquist) bins carry no imaginary part
            spec[0].im = 0.0;
            if p % 2 == 0 {
                spec[half - 1].im = 0.0;
            }
            self.c2r
                .process_with_scratch(spec, &mut ws.row_real, &mut ws.scratch)
                .expect("c2r buffer lengths are fixed by the plan");
            let dst = &mut out[q * n..(q + 1) * n];
            for (d, r) in dst.iter_mut().zip(&ws.row_real[..n]) {
                *d = r * self.scale;
            }
        }
    }

    /// `out = L_h v = (J*1) ⊙ v - J*v`.
    pub fn apply_lh_into(&self, v: &[f64], out: &mut [f64], ws: &mut ConvWorkspace) {
        self.conv_into(v, out, ws);
        let j1 = self.jstar1.values();
        for k in 0..out.len() {
            out[k] = j1[k] * v[k] - out[k];
        }
    }

    /// `out = v + c L_h (L_h v)`.
    pub fn apply_a_into(&self, v: &[f64], c: f64, out: &mut [f64], ws: &mut ConvWorkspace) {
        let mut tmp = std::mem::take(&mut ws.tmp);
        self.apply_lh_into(v, &mut tmp, ws);
        self.apply_lh_into(&tmp, out, ws);
        ws.tmp = tmp;
        for k in 0..out.len() {
            out[k] = v[k] + c * out[k];
        }
    }

    pub fn conv_apply(&self, v: &Field) -> Result<Field> {
        self.grid.ensure_same(v.grid())?;
        let mut out = vec![0.0; self.grid.len()];
        self.conv_into(v.values(), &mut out, &mut self.workspace());
        Field::from_values(self.grid, out)
    }

    pub fn apply_lh(&self, v: &Field) -> Result<Field> {
        self.grid.ensure_same(v.grid())?;
        let mut out = vec![0.0; self.grid.len()];
        self.apply_lh_into(v.values(), &mut out, &mut self.workspace());
        Field::from_values(self.grid, out)
    }

    pub fn apply_a(&self, v: &Field, c: f64) -> Result<Field> {
        self.grid.ensure_same(v.grid())?;
        if !(c >= 0.0) {
            return Err(Error::config(format!("stiffness coefficient must be >= 0, got {c}")));
        }
        let mut out = vec![0.0; self.grid.len()];
        self.apply_a_into(v.values(), c, &mut out, &mut self.workspace());
        Field::from_values(self.grid, out)
    }
}

pub fn conv_apply(plan: &ConvolutionPlan, v: &Field) -> Result<Field> {
    plan.conv_apply(v)
}

pub fn apply_lh(plan: &ConvolutionPlan, v: &Field) -> Result<Field> {
    plan.apply_lh(v)
}

pub fn apply_a(plan: &ConvolutionPlan, v: &Field, c: f64) -> Result<Field> {
    plan.apply_a(v, c)
}

/// Literal `O(N^2)` trapezoid double sum; reference for the fast path.
pub fn dense_conv(grid: &GridSpec, table: &KernelTable, v: &Field) -> Result<Field> {
    grid.ensure_same(v.grid())?;
    let m = grid.cells();
    if table.cells() != m {
        return Err(Error::GridMismatch {
            expected: m,
            found: table.cells(),
        });
    }
    let h = grid.spacing();
    let edge = |k: usize| if k == 0 || k == m { 0.5 } else { 1.0 };
    let mut out = Field::zeros(*grid);
    for j in 0..=m {
        for i in 0..=m {
            let mut s = 0.0;
            for m2 in 0..=m {
                for m1 in 0..=m {
                    s += edge(m1) * edge(m2) * table.get(m1.abs_diff(i), m2.abs_diff(j)) * v.get(m1, m2);
                }
            }
            let k = grid.index(i, j);
            out.values_mut()[k] = h * h * s;
        }
    }
    Ok(out)
}
