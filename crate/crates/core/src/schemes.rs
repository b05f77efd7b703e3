//! Classical numerical fluxes, MUSCL reconstruction, exact solutions, and the
//! second-order reference solver.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{roll, GridFunction, Stencil};

/// Speeds below this are treated as zero when choosing a CFL step.
pub const SPEED_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Equation {
    Advection,
    Burgers,
}

impl Equation {
    pub fn flux(self, advection_speed: f64) -> PhysicalFlux {
        match self {
            Equation::Advection => PhysicalFlux::Advection { a: advection_speed },
            Equation::Burgers => PhysicalFlux::Burgers,
        }
    }
}

impl std::fmt::Display for Equation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Equation::Advection => "advection",
            Equation::Burgers => "burgers",
        })
    }
}

impl std::str::FromStr for Equation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "advection" => Ok(Equation::Advection),
            "burgers" => Ok(Equation::Burgers),
            other => Err(invalid(format!("unknown equation `{other}`"))),
        }
    }
}

/// Physical flux `F` in `u_t + F(u)_x = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PhysicalFlux {
    Advection { a: f64 },
    Burgers,
}

impl PhysicalFlux {
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            PhysicalFlux::Advection { a } => a * u,
            PhysicalFlux::Burgers => 0.5 * u * u,
        }
    }

    /// Largest characteristic speed over the field.
    pub fn max_speed(&self, u: &[f64]) -> f64 {
        match *self {
            PhysicalFlux::Advection { a } => a.abs(),
            PhysicalFlux::Burgers => u.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    /// Exact Riemann-solver flux: upwind for advection, convex Godunov for Burgers.
    pub fn godunov(&self, ul: f64, ur: f64) -> f64 {
        match *self {
            PhysicalFlux::Advection { a } => flux_upwind(ul, ur, a),
            PhysicalFlux::Burgers => flux_godunov_burgers(ul, ur),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Euler,
    SspRk2,
}

impl std::str::FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Integrator::Euler),
            "ssp_rk2" | "rk2" => Ok(Integrator::SspRk2),
            other => Err(invalid(format!("unknown integrator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtMode {
    Fixed(f64),
    Cfl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub stencil: Stencil,
    pub courant: f64,
    pub integrator: Integrator,
    pub dt_mode: DtMode,
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.courant > 0.0 && self.courant <= 1.0) {
            return Err(invalid(format!(
                "courant number must lie in (0, 1], got {}",
                self.courant
            )));
        }
        if let DtMode::Fixed(dt) = self.dt_mode {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(invalid(format!("fixed dt must be positive, got {dt}")));
            }
        }
        Ok(())
    }
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            stencil: Stencil::default(),
            courant: 0.5,
            integrator: Integrator::Euler,
            dt_mode: DtMode::Cfl,
        }
    }
}

pub fn flux_upwind(ul: f64, ur: f64, a: f64) -> f64 {
    if a >= 0.0 {
        a * ul
    } else {
        a * ur
    }
}

pub fn flux_lax_friedrichs(ul: f64, ur: f64, flux: PhysicalFlux, dx: f64, dt: f64) -> f64 {
    0.5 * (flux.eval(ul) + flux.eval(ur)) - dx / (2.0 * dt) * (ur - ul)
}

pub fn flux_godunov_burgers(ul: f64, ur: f64) -> f64 {
    let f = |u: f64| 0.5 * u * u;
    if ul <= ur {
        if ul > 0.0 {
            f(ul)
        } else if ur < 0.0 {
            f(ur)
        } else {
            0.0
        }
    } else if ul + ur > 0.0 {
        f(ul)
    } else {
        f(ur)
    }
}

pub fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else {
        a.signum() * a.abs().min(b.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    FirstOrder,
    #[default]
    Muscl,
}

/// Left and right states at every interface `j+1/2` from minmod-limited slopes.
pub fn muscl_interface_states(u: &GridFunction) -> (Vec<f64>, Vec<f64>) {
    interface_states(u.values(), Reconstruction::Muscl)
}

fn interface_states(u: &[f64], recon: Reconstruction) -> (Vec<f64>, Vec<f64>) {
    let n = u.len();
    match recon {
        Reconstruction::FirstOrder => {
            let ur = (0..n).map(|j| u[(j + 1) % n]).collect();
            (u.to_vec(), ur)
        }
        Reconstruction::Muscl => {
            let slope: Vec<f64> = (0..n)
                .map(|j| minmod(u[(j + 1) % n] - u[j], u[j] - u[(j + n - 1) % n]))
                .collect();
            let ul = (0..n).map(|j| u[j] + 0.5 * slope[j]).collect();
            let ur = (0..n)
                .map(|j| u[(j + 1) % n] - 0.5 * slope[(j + 1) % n])
                .collect();
            (ul, ur)
        }
    }
}

/// Semi-discrete operator `D(u)_j = (F_{j+1/2} - F_{j-1/2}) / dx` with
/// Godunov interface fluxes.
pub fn reference_divergence(
    u: &[f64],
    dx: f64,
    flux: PhysicalFlux,
    recon: Reconstruction,
) -> Vec<f64> {
    let n = u.len();
    let (ul, ur) = interface_states(u, recon);
    let fhat: Vec<f64> = ul
        .iter()
        .zip(&ur)
        .map(|(&l, &r)| flux.godunov(l, r))
        .collect();
    (0..n)
        .map(|j| (fhat[j] - fhat[(j + n - 1) % n]) / dx)
        .collect()
}

/// Options for [`reference_step_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceOptions {
    pub reconstruction: Reconstruction,
    pub integrator: Integrator,
    /// When false a CFL violation is tolerated rather than reported.
    pub enforce_cfl: bool,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            reconstruction: Reconstruction::Muscl,
            integrator: Integrator::SspRk2,
            enforce_cfl: true,
        }
    }
}

/// Courant number `dt * max_speed / dx` of a step.
pub fn courant_number(u: &[f64], dx: f64, flux: PhysicalFlux, dt: f64) -> f64 {
    dt * flux.max_speed(u) / dx
}

/// One SSP-RK2 step of the MUSCL-minmod-Godunov scheme.
pub fn reference_step(u: &GridFunction, flux: PhysicalFlux, dt: f64) -> Result<GridFunction> {
    reference_step_with(u, flux, dt, ReferenceOptions::default())
}

pub fn reference_step_with(
    u: &GridFunction,
    flux: PhysicalFlux,
    dt: f64,
    opts: ReferenceOptions,
) -> Result<GridFunction> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("dt must be positive, got {dt}")));
    }
    let dx = u.dx();
    let v = u.values();
    let courant = courant_number(v, dx, flux, dt);
    if opts.enforce_cfl && courant > 1.0 + 1e-12 {
        return Err(Error::Cfl {
            step: 0,
            courant,
            limit: 1.0,
        });
    }
    let euler = |w: &[f64]| -> Vec<f64> {
        let d = reference_divergence(w, dx, flux, opts.reconstruction);
        w.iter().zip(&d).map(|(a, b)| a - dt * b).collect()
    };
    let u1 = euler(v);
    let out = match opts.integrator {
        Integrator::Euler => u1,
        Integrator::SspRk2 => {
            let u2 = euler(&u1);
            v.iter().zip(&u2).map(|(a, b)| 0.5 * a + 0.5 * b).collect()
        }
    };
    u.with_values(out)
}

/// `courant * dx / max_speed`, with the speed floored at [`SPEED_FLOOR`].
pub fn cfl_dt(u: &GridFunction, flux: PhysicalFlux, courant: f64) -> Result<f64> {
    if !(courant > 0.0 && courant <= 1.0) {
        return Err(invalid(format!(
            "courant number must lie in (0, 1], got {courant}"
        )));
    }
    let speed = flux.max_speed(u.values());
    if speed < SPEED_FLOOR {
        return Ok(courant * u.dx());
    }
    Ok(courant * u.dx() / speed)
}

/// `u0(x - a t)` on the periodic unit interval.
///
/// Grid-aligned shifts are exact rolls; other shifts use trigonometric
/// interpolation.
pub fn exact_advection(u0: &GridFunction, a: f64, t: f64) -> GridFunction {
    let shift = a * t / u0.dx();
    let nearest = shift.round();
    if (shift - nearest).abs() <= 1e-9 * shift.abs().max(1.0) {
        return roll(u0, nearest as isize);
    }
    let n = u0.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = u0
        .values()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let disp = a * t;
    for (m, c) in buf.iter_mut().enumerate() {
        let k = if m <= n / 2 {
            m as f64
        } else {
            m as f64 - n as f64
        };
        let phase = -2.0 * std::f64::consts::PI * k * disp;
        if n.is_multiple_of(2) && m == n / 2 {
            // Nyquist mode: keep the real, symmetric interpolant
            *c *= phase.cos();
        } else {
            *c *= Complex64::from_polar(1.0, phase);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let values = buf.iter().map(|c| c.re / n as f64).collect();
    u0.with_values(values)
        .expect("shift of a finite field is finite")
}

/// Self-similar solution of the Burgers Riemann problem centred at `x0`.
pub fn exact_burgers_riemann(ul: f64, ur: f64, x0: f64, x: f64, t: f64) -> f64 {
    let xi = (x - x0) / t;
    if ul > ur {
        let s = 0.5 * (ul + ur);
        if xi < s {
            ul
        } else {
            ur
        }
    } else if xi <= ul {
        ul
    } else if xi >= ur {
        ur
    } else {
        xi
    }
}

/// Range of `x/t` occupied by the wave of a Burgers Riemann problem.
fn riemann_extent(ul: f64, ur: f64) -> (f64, f64) {
    if ul > ur {
        let s = 0.5 * (ul + ur);
        (s, s)
    } else {
        (ul, ur)
    }
}

/// Exact Burgers solution for periodic step data `ul` on `[0, x0)` and `ur`
/// on `[x0, 1)`. Valid until the wave from `x0` meets the one from `0`.
pub fn exact_burgers_periodic_step(
    ul: f64,
    ur: f64,
    x0: f64,
    t: f64,
    n: usize,
) -> Result<GridFunction> {
    if !(x0 > 0.0 && x0 < 1.0) {
        return Err(invalid(format!(
            "step location must lie in (0, 1), got {x0}"
        )));
    }
    if t <= 0.0 {
        return crate::data::step_function(n, ul, ur, x0);
    }
    // wave A sits at x0 (ul -> ur), wave B at 0 == 1 (ur -> ul)
    let (a_lo, a_hi) = riemann_extent(ul, ur);
    let (b_lo, b_hi) = riemann_extent(ur, ul);
    let gap_left = x0 + a_lo * t - b_hi * t;
    let gap_right = 1.0 + b_lo * t - (x0 + a_hi * t);
    if gap_left <= 0.0 || gap_right <= 0.0 {
        return Err(invalid(format!(
            "waves of the periodic step interact before t = {t}"
        )));
    }
    let cut1 = 0.5 * (b_hi * t + x0 + a_lo * t);
    let cut2 = 0.5 * (x0 + a_hi * t + 1.0 + b_lo * t);
    GridFunction::from_fn(n, |x| {
        let x = x.rem_euclid(1.0);
        // represent x on (cut2 - 1, cut2] so each point belongs to one wave
        let xr = if x > cut2 { x - 1.0 } else { x };
        if xr < cut1 {
            exact_burgers_riemann(ur, ul, 0.0, xr, t)
        } else {
            exact_burgers_riemann(ul, ur, x0, xr, t)
        }
    })
}
