//! Uniform square grids on `[-L, L]^2`, grid functions, and the trapezoid
//! quadrature that every discrete integral and inner product in the crate uses.
//!
//! Nodes are `x_i = -L + i h`, `y_j = -L + j h` for `i, j = 0..=M` with
//! `h = 2L / M`. A [`Field`] stores one value per node, `i` fastest.
//! All reductions run in storage order so results are bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    half_width: f64,
    cells: usize,
}

impl GridSpec {
    pub fn new(half_width: f64, cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::config(format!("grid.M must be >= 2, got {cells}")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::config(format!(
                "domain.L must be positive and finite, got {half_width}"
            )));
        }
        Ok(Self { half_width, cells })
    }

    /// `L`, the domain is `[-L, L]^2`.
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// `M`, the number of cells per axis.
    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn points_per_dim(&self) -> usize {
        self.cells + 1
    }

    /// Total number of nodes `(M+1)^2`.
    pub fn len(&self) -> usize {
        self.points_per_dim() * self.points_per_dim()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_width * self.half_width
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + j * self.points_per_dim()
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                expected: self.cells,
                found: other.cells,
            })
        }
    }
}

pub fn make_grid(half_width: f64, cells: usize) -> Result<GridSpec> {
    GridSpec::new(half_width, cells)
}

/// A real grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let n = grid.points_per_dim();
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..n {
            let y = grid.coord(j);
            for i in 0..n {
                values.push(f(grid.coord(i), y));
            }
        }
        Self { grid, values }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::config(format!(
                "field has {} values, grid M={} needs {}",
                values.len(),
                grid.cells(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("non-finite value at flat index {k}")));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `a * self + b * other`, elementwise.
    pub fn lin_comb(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        self.grid.ensure_same(&other.grid)?;
        Ok(Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&u, &v)| a * u + b * v)
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Unweighted arithmetic mean of the nodal values.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Trapezoid weights: 1 inside, 1/2 on edges, 1/4 at the corners.
#[derive(Debug, Clone)]
pub struct QuadWeights {
    grid: GridSpec,
    h2: f64,
    w: Vec<f64>,
}

impl QuadWeights {
    pub fn new(grid: &GridSpec) -> Self {
        let n = grid.points_per_dim();
        let edge = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let mut w = Vec::with_capacity(grid.len());
        for j in 0..n {
            for i in 0..n {
                w.push(edge(i) * edge(j));
            }
        }
        let h = grid.spacing();
        Self {
            grid: *grid,
            h2: h * h,
            w,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn cell_area(&self) -> f64 {
        self.h2
    }

    pub fn sum(&self) -> f64 {
        self.w.iter().sum()
    }

    /// `h^2 sum w_k a_k b_k` over raw slices; the product `a_k * b_k` is
    /// formed first so the result is exactly symmetric in `a` and `b`.
    #[inline]
    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.w.len());
        debug_assert_eq!(b.len(), self.w.len());
        let mut s = 0.0;
        for k in 0..self.w.len() {
            s += self.w[k] * (a[k] * b[k]);
        }
        self.h2 * s
    }

    /// `h^2 sum w_k f_k`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.w.len());
        let mut s = 0.0;
        for (w, x) in self.w.iter().zip(f) {
            s += w * x;
        }
        self.h2 * s
    }

    pub fn inner(&self, u: &Field, v: &Field) -> Result<f64> {
        self.grid.ensure_same(u.grid())?;
        self.grid.ensure_same(v.grid())?;
        Ok(self.dot(u.values(), v.values()))
    }

    pub fn norm(&self, u: &Field) -> Result<f64> {
        Ok(self.inner(u, u)?.sqrt())
    }
}

pub fn weighted_inner(u: &Field, v: &Field) -> Result<f64> {
    u.grid().ensure_same(v.grid())?;
    QuadWeights::new(u.grid()).inner(u, v)
}

pub fn weighted_norm(u: &Field) -> f64 {
    QuadWeights::new(u.grid()).dot(u.values(), u.values()).sqrt()
}

pub fn quadrature(f: &Field) -> f64 {
    QuadWeights::new(f.grid()).integrate(f.values())
}

/// Discrete L2 distance `sqrt(h^2 sum w (u - v)^2)`.
pub fn l2_distance(u: &Field, v: &Field) -> Result<f64> {
    weighted_norm_of_diff(&QuadWeights::new(u.grid()), u, v)
}

pub(crate) fn weighted_norm_of_diff(w: &QuadWeights, u: &Field, v: &Field) -> Result<f64> {
    u.grid().ensure_same(v.grid())?;
    w.grid().ensure_same(u.grid())?;
    let ws = w.as_slice();
    let mut s = 0.0;
    for ((w, a), b) in ws.iter().zip(u.values()).zip(v.values()) {
        let d = a - b;
        s += w * (d * d);
    }
    Ok((w.cell_area() * s).sqrt())
}

/// Bulk energy density `F` and its derivative `F'`.
#[derive(Clone, Copy)]
pub struct Potential {
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

impl Potential {
    /// `F(y) = (y^2 - 1)^2 / 4`.
    pub fn double_well() -> Self {
        fn f(y: f64) -> f64 {
            let s = y * y - 1.0;
            0.25 * s * s
        }
        fn df(y: f64) -> f64 {
            y * y * y - y
        }
        Self { f, df }
    }
}

impl Default for Potential {
    fn default() -> Self {
        Self::double_well()
    }
}

impl std::fmt::Debug for Potential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Potential")
    }
}

/// `0.5 sin(pi x) sin(pi y) + 0.1`
pub fn init_example1(grid: &GridSpec) -> Field {
    use std::f64::consts::PI;
    Field::from_fn(*grid, |x, y| 0.5 * (PI * x).sin() * (PI * y).sin() + 0.1)
}

/// Two tanh bubbles of radius `r0`; `+1` inside either bubble, `-1` away from both.
pub fn init_example2(grid: &GridSpec, r0: f64, centers: [(f64, f64); 2], epsilon: f64) -> Result<Field> {
    let l = grid.half_width();
    for &(cx, cy) in &centers {
        if cx.abs() > l || cy.abs() > l {
            return Err(Error::config(format!(
                "bubble center ({cx}, {cy}) lies outside the domain"
            )));
        }
    }
    let width = std::f64::consts::SQRT_2 * epsilon;
    Ok(Field::from_fn(*grid, |x, y| {
        centers
            .iter()
            .map(|&(cx, cy)| {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                -((d - r0) / width).tanh()
            })
            .sum::<f64>()
            + 1.0
    }))
}

/// Seeded uniform noise in `[-amplitude, amplitude]`, shifted to zero nodal mean.
pub fn init_example3(grid: &GridSpec, amplitude: f64, seed: u64) -> Result<Field> {
    if !(amplitude > 0.0) {
        return Err(Error::config("noise amplitude must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = (0..grid.len())
        .map(|_| rng.random_range(-amplitude..=amplitude))
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    Field::from_values(*grid, values)
}
