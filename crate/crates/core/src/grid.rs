//! Periodic grid functions on the unit interval.
//!
//! Cell `j` sits at `x_j = j * dx` with `dx = 1 / N`. Everything is periodic,
//! so index arithmetic is always taken modulo `N`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MIN_CELLS: usize = 4;

/// Cell values of the state at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    values: Vec<f64>,
    dx: f64,
}

impl GridFunction {
    /// Grid function on the unit domain, `dx = 1/N`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let dx = 1.0 / values.len().max(1) as f64;
        Self::with_dx(values, dx)
    }

    pub fn with_dx(values: Vec<f64>, dx: f64) -> Result<Self> {
        if values.len() < MIN_CELLS {
            return Err(invalid(format!(
                "grid needs at least {MIN_CELLS} cells, got {}",
                values.len()
            )));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(invalid(format!("dx must be positive, got {dx}")));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid value at cell {j}")));
        }
        Ok(Self { values, dx })
    }

    /// Samples `f` at the cell positions `x_j = j/N`.
    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let dx = 1.0 / n as f64;
        Self::new((0..n).map(|j| f(j as f64 * dx)).collect())
    }

    pub fn constant(n: usize, c: f64) -> Result<Self> {
        Self::new(vec![c; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Same grid, new values. Fails on non-finite input.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                self.len(),
                values.len()
            )));
        }
        Self::with_dx(values, self.dx)
    }
}

/// Stencil offsets: the flux at interface `j+1/2` reads `u_{j-p} .. u_{j+q}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stencil {
    pub p: usize,
    pub q: usize,
}

impl Stencil {
    pub fn new(p: usize, q: usize) -> Self {
        Self { p, q }
    }

    pub fn channels(&self) -> usize {
        self.p + self.q + 1
    }
}

impl Default for Stencil {
    fn default() -> Self {
        Self { p: 0, q: 1 }
    }
}

/// Shifted copies of a grid function stacked as channels, stored `[N, channels]`
/// row-major. Channel `c` at position `j` holds `u_{j - p + c - shift}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilField {
    stencil: Stencil,
    n: usize,
    values: Vec<f64>,
}

impl StencilField {
    pub fn stencil(&self) -> Stencil {
        self.stencil
    }

    pub fn channels(&self) -> usize {
        self.stencil.channels()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, j: usize, c: usize) -> f64 {
        self.values[j * self.channels() + c]
    }

    /// Row-major `[N, channels]` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.n).map(|j| self.get(j, c)).collect()
    }

    fn from_source(u: &[f64], stencil: Stencil, shift: isize) -> Self {
        let n = u.len();
        let ch = stencil.channels();
        let mut values = Vec::with_capacity(n * ch);
        for j in 0..n {
            for c in 0..ch {
                let idx = j as isize + c as isize - stencil.p as isize - shift;
                values.push(u[idx.rem_euclid(n as isize) as usize]);
            }
        }
        Self { stencil, n, values }
    }

    /// Every channel equal to `u`.
    pub fn replicate(u: &GridFunction, stencil: Stencil) -> Self {
        let ch = stencil.channels();
        let values = u
            .values()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, ch))
            .collect();
        Self {
            stencil,
            n: u.len(),
            values,
        }
    }
}

/// Cyclic shift; positive `s` moves content to the right: `out_i = u_{i-s}`.
pub fn roll(u: &GridFunction, s: isize) -> GridFunction {
    GridFunction {
        values: roll_slice(u.values(), s),
        dx: u.dx,
    }
}

pub fn roll_slice(u: &[f64], s: isize) -> Vec<f64> {
    let n = u.len();
    if n == 0 {
        return Vec::new();
    }
    let s = s.rem_euclid(n as isize) as usize;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&u[n - s..]);
    out.extend_from_slice(&u[..n - s]);
    out
}

/// `(U^l, U^r)`: the stencil at interface `j+1/2` and the one at `j-1/2`.
pub fn build_stencil_pair(
    u: &GridFunction,
    stencil: Stencil,
) -> Result<(StencilField, StencilField)> {
    check_stencil(stencil, u.len())?;
    Ok((
        StencilField::from_source(u.values(), stencil, 0),
        StencilField::from_source(u.values(), stencil, 1),
    ))
}

pub(crate) fn check_stencil(stencil: Stencil, n: usize) -> Result<()> {
    if stencil.channels() > n {
        return Err(Error::StencilTooWide {
            width: stencil.channels(),
            n,
        });
    }
    Ok(())
}

/// Adjoint of the stencil construction: scatters `[N, channels]` cotangents
/// back onto the source grid.
pub(crate) fn stencil_adjoint(grad: &[f64], stencil: Stencil, shift: isize, out: &mut [f64]) {
    let n = out.len();
    let ch = stencil.channels();
    for j in 0..n {
        for c in 0..ch {
            let idx = (j as isize + c as isize - stencil.p as isize - shift).rem_euclid(n as isize)
                as usize;
            out[idx] += grad[j * ch + c];
        }
    }
}

pub(crate) fn stencil_values(u: &[f64], stencil: Stencil, shift: isize) -> Vec<f64> {
    StencilField::from_source(u, stencil, shift).values
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "grid sizes differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `||pred - ref||_2 / ||ref||_2`.
pub fn rel_l2(pred: &GridFunction, reference: &GridFunction) -> Result<f64> {
    rel_l2_slices(pred.values(), reference.values())
}

pub fn rel_l2_slices(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_same_len(pred, reference)?;
    let den = l2_norm(reference);
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num = pred
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// Absolute max error.
pub fn linf(pred: &GridFunction, reference: &GridFunction) -> Result<f64> {
    linf_slices(pred.values(), reference.values())
}

pub fn linf_slices(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_same_len(pred, reference)?;
    Ok(pred
        .iter()
        .zip(reference)
        .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Periodic total variation `sum_j |u_{j+1} - u_j|`.
pub fn total_variation(u: &GridFunction) -> f64 {
    let v = u.values();
    let n = v.len();
    (0..n).map(|j| (v[(j + 1) % n] - v[j]).abs()).sum()
}

/// `dx * sum_j u_j`.
pub fn mass(u: &GridFunction) -> f64 {
    u.dx * u.values.iter().sum::<f64>()
}

/// States at successive time levels together with the step sizes between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<GridFunction>,
    dts: Vec<f64>,
}

impl Trajectory {
    pub fn new(states: Vec<GridFunction>, dts: Vec<f64>) -> Result<Self> {
        let Some(first) = states.first() else {
            return Err(invalid("trajectory needs at least one state"));
        };
        if dts.len() + 1 != states.len() {
            return Err(Error::Shape(format!(
                "{} states need {} step sizes, got {}",
                states.len(),
                states.len() - 1,
                dts.len()
            )));
        }
        if let Some(s) = states
            .iter()
            .position(|s| s.len() != first.len() || s.dx() != first.dx())
        {
            return Err(Error::Shape(format!("state {s} is on a different grid")));
        }
        if let Some(k) = dts.iter().position(|dt| !(*dt > 0.0 && dt.is_finite())) {
            return Err(invalid(format!(
                "step size {k} is not positive: {}",
                dts[k]
            )));
        }
        Ok(Self { states, dts })
    }

    pub fn initial(u0: GridFunction) -> Self {
        Self {
            states: vec![u0],
            dts: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, state: GridFunction, dt: f64) {
        self.states.push(state);
        self.dts.push(dt);
    }

    pub fn states(&self) -> &[GridFunction] {
        &self.states
    }

    pub fn dts(&self) -> &[f64] {
        &self.dts
    }

    pub fn n_steps(&self) -> usize {
        self.dts.len()
    }

    pub fn nx(&self) -> usize {
        self.states[0].len()
    }

    pub fn dx(&self) -> f64 {
        self.states[0].dx()
    }

    pub fn last(&self) -> &GridFunction {
        self.states.last().expect("trajectory is never empty")
    }

    /// Time of every stored state, accumulated by summation of the steps.
    pub fn times(&self) -> Vec<f64> {
        let mut t = vec![0.0];
        let mut acc = 0.0;
        for dt in &self.dts {
            acc += dt;
            t.push(acc);
        }
        t
    }
}
