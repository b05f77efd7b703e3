//! Time marching with a learned or analytic numerical flux.

use ndarray::Array3;
use rayon::prelude::*;

use crate::diffkernel::BatchedField;
use crate::error::{invalid, Error, Result};
use crate::fno::FnoParams;
use crate::grid::{check_stencil, stencil_values, GridFunction, Stencil, Trajectory};
use crate::schemes::{
    cfl_dt, flux_lax_friedrichs, flux_upwind, DtMode, Integrator, PhysicalFlux, SchemeConfig,
};

/// `max |u|` beyond which a rollout is declared blown up.
pub const BLOW_UP_LIMIT: f64 = 1e6;

/// Classical two-point fluxes reading stencil channels `p` and `p + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticFlux {
    Upwind { a: f64 },
    LaxFriedrichs { flux: PhysicalFlux, dt: f64 },
    Godunov { flux: PhysicalFlux },
}

impl AnalyticFlux {
    fn eval(&self, ul: f64, ur: f64, dx: f64) -> f64 {
        match *self {
            AnalyticFlux::Upwind { a } => flux_upwind(ul, ur, a),
            AnalyticFlux::LaxFriedrichs { flux, dt } => flux_lax_friedrichs(ul, ur, flux, dx, dt),
            AnalyticFlux::Godunov { flux } => flux.godunov(ul, ur),
        }
    }
}

/// The numerical flux `G` in the conservative update.
#[derive(Debug, Clone, PartialEq)]
pub enum FluxOperator {
    Learned(FnoParams),
    Analytic(AnalyticFlux),
}

impl FluxOperator {
    fn check(&self, stencil: Stencil, n: usize) -> Result<()> {
        check_stencil(stencil, n)?;
        match self {
            FluxOperator::Learned(p) if p.config().in_channels != stencil.channels() => {
                Err(Error::Shape(format!(
                    "model takes {} channels, stencil has {}",
                    p.config().in_channels,
                    stencil.channels()
                )))
            }
            FluxOperator::Analytic(_) if stencil.q == 0 => {
                Err(invalid("analytic fluxes need the right neighbour (q >= 1)"))
            }
            _ => Ok(()),
        }
    }

    /// Evaluates `G` on `[B, N, channels]` stencil data, returning `[B, N]`
    /// flattened row-major.
    pub fn apply(&self, x: &BatchedField, stencil: Stencil) -> Result<Vec<f64>> {
        let (_, n, ch) = x.dim();
        if ch != stencil.channels() {
            return Err(Error::Shape(format!(
                "stencil has {} channels, input has {ch}",
                stencil.channels()
            )));
        }
        self.check(stencil, n)?;
        match self {
            FluxOperator::Learned(params) => Ok(params.forward(x)?.into_raw_vec_and_offset().0),
            FluxOperator::Analytic(f) => {
                let dx = 1.0 / n as f64;
                let p = stencil.p;
                Ok(x.outer_iter()
                    .flat_map(|row| {
                        (0..n)
                            .map(|j| f.eval(row[[j, p]], row[[j, p + 1]], dx))
                            .collect::<Vec<_>>()
                    })
                    .collect())
            }
        }
    }
}

/// `D(u) = (G(U^l) - G(U^r)) / dx`.
pub fn divergence(g: &FluxOperator, u: &GridFunction, stencil: Stencil) -> Result<GridFunction> {
    let n = u.len();
    g.check(stencil, n)?;
    let ch = stencil.channels();
    let mut stacked = stencil_values(u.values(), stencil, 0);
    stacked.extend(stencil_values(u.values(), stencil, 1));
    let x = Array3::from_shape_vec((2, n, ch), stacked).expect("two stencil fields");
    let out = g.apply(&x, stencil)?;
    let inv_dx = 1.0 / u.dx();
    let d = (0..n).map(|j| (out[j] - out[n + j]) * inv_dx).collect();
    u.with_values(d)
        .map_err(|_| Error::NonFinite("flux divergence".into()))
}

fn axpy(u: &GridFunction, dt: f64, d: &GridFunction) -> Result<GridFunction> {
    let v = u
        .values()
        .iter()
        .zip(d.values())
        .map(|(a, b)| a - dt * b)
        .collect();
    u.with_values(v)
        .map_err(|_| Error::NonFinite("updated state".into()))
}

/// `u - dt * D(u)`.
pub fn step_euler(
    g: &FluxOperator,
    u: &GridFunction,
    dt: f64,
    stencil: Stencil,
) -> Result<GridFunction> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(invalid(format!("dt must be non-negative, got {dt}")));
    }
    axpy(u, dt, &divergence(g, u, stencil)?)
}

/// Heun combination `u/2 + (u1 - dt D(u1))/2` with `u1 = u - dt D(u)`.
pub fn step_rk2(
    g: &FluxOperator,
    u: &GridFunction,
    dt: f64,
    stencil: Stencil,
) -> Result<GridFunction> {
    let u1 = step_euler(g, u, dt, stencil)?;
    let u2 = step_euler(g, &u1, dt, stencil)?;
    let v = u
        .values()
        .iter()
        .zip(u2.values())
        .map(|(a, b)| 0.5 * a + 0.5 * b)
        .collect();
    u.with_values(v)
        .map_err(|_| Error::NonFinite("updated state".into()))
}

pub fn step(
    g: &FluxOperator,
    u: &GridFunction,
    dt: f64,
    stencil: Stencil,
    integrator: Integrator,
) -> Result<GridFunction> {
    match integrator {
        Integrator::Euler => step_euler(g, u, dt, stencil),
        Integrator::SspRk2 => step_rk2(g, u, dt, stencil),
    }
}

/// Marches from `t = 0` to exactly `t_end`, clamping the final step.
///
/// With a fixed step the time after `k` steps is `k * dt`, so no rounding
/// accumulates; a remainder below `1e-9 * dt` is dropped.
pub fn integrate_to(
    g: &FluxOperator,
    u0: &GridFunction,
    t_end: f64,
    scheme: &SchemeConfig,
    flux: PhysicalFlux,
) -> Result<Trajectory> {
    scheme.validate()?;
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(invalid(format!(
            "end time must be non-negative, got {t_end}"
        )));
    }
    let mut traj = Trajectory::initial(u0.clone());
    let mut u = u0.clone();
    let mut t = 0.0;
    let mut k = 0usize;
    loop {
        let nominal = match scheme.dt_mode {
            DtMode::Fixed(dt) => {
                t = k as f64 * dt;
                dt
            }
            DtMode::Cfl => cfl_dt(&u, flux, scheme.courant)?,
        };
        let remaining = t_end - t;
        if remaining <= 1e-9 * nominal {
            break;
        }
        let dt = nominal.min(remaining);
        let blow_up = |traj: Trajectory, max_abs: f64| Error::BlowUp {
            step: k + 1,
            max_abs,
            partial: Box::new(traj),
        };
        let next = match step(g, &u, dt, scheme.stencil, scheme.integrator) {
            Ok(next) => next,
            Err(Error::NonFinite(_)) => return Err(blow_up(traj, f64::INFINITY)),
            Err(e) => return Err(e),
        };
        let max_abs = next.max_abs();
        if max_abs > BLOW_UP_LIMIT {
            traj.push(next, dt);
            return Err(blow_up(traj, max_abs));
        }
        traj.push(next.clone(), dt);
        u = next;
        k += 1;
        if let DtMode::Cfl = scheme.dt_mode {
            t += dt;
        }
    }
    Ok(traj)
}

/// Integrates many initial conditions concurrently; results keep input order.
pub fn integrate_many(
    g: &FluxOperator,
    u0s: &[GridFunction],
    t_end: f64,
    scheme: &SchemeConfig,
    flux: PhysicalFlux,
) -> Vec<Result<Trajectory>> {
    u0s.par_iter()
        .map(|u0| integrate_to(g, u0, t_end, scheme, flux))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::FnoConfig;
    use crate::grid::{mass, roll};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ADV: PhysicalFlux = PhysicalFlux::Advection { a: 1.0 };

    fn upwind() -> FluxOperator {
        FluxOperator::Analytic(AnalyticFlux::Upwind { a: 1.0 })
    }

    fn random_field(n: usize, seed: u64) -> GridFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridFunction::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn learned(seed: u64) -> FluxOperator {
        FluxOperator::Learned(FnoParams::init(FnoConfig::new(2, 4, 1, 3), seed).unwrap())
    }

    fn fixed(dt: f64, integrator: Integrator) -> SchemeConfig {
        SchemeConfig {
            dt_mode: DtMode::Fixed(dt),
            integrator,
            ..Default::default()
        }
    }

    #[test]
    fn divergence_examples() {
        let s = Stencil::default();
        let c = GridFunction::constant(16, 0.4).unwrap();
        assert!(divergence(&learned(1), &c, s)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));

        let mut spike = vec![0.0; 16];
        spike[5] = 1.0;
        let u = GridFunction::new(spike.clone()).unwrap();
        let d = divergence(&upwind(), &u, s).unwrap();
        for j in 0..16 {
            let expected = (spike[j] - spike[(j + 15) % 16]) * 16.0;
            assert_eq!(d.values()[j], expected);
        }
    }

    #[test]
    fn euler_upwind_at_unit_courant_is_roll() {
        let u = random_field(64, 2);
        let out = step_euler(&upwind(), &u, 1.0 / 64.0, Stencil::default()).unwrap();
        assert_eq!(out, roll(&u, 1));
        assert_eq!(
            step_euler(&learned(3), &u, 0.0, Stencil::default()).unwrap(),
            u
        );
    }

    #[test]
    fn rk2_is_heun_of_two_euler_steps() {
        let g = learned(4);
        let s = Stencil::default();
        let u = random_field(32, 5);
        let dt = 1e-3;
        let u1 = step_euler(&g, &u, dt, s).unwrap();
        let u2 = step_euler(&g, &u1, dt, s).unwrap();
        let heun: Vec<f64> = u
            .values()
            .iter()
            .zip(u2.values())
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        assert_eq!(step_rk2(&g, &u, dt, s).unwrap().values(), heun.as_slice());
        let c = GridFunction::constant(32, -0.2).unwrap();
        assert_eq!(step_rk2(&g, &c, dt, s).unwrap(), c);
    }

    #[test]
    fn random_models_conserve_mass() {
        let u = random_field(32, 6);
        let m0 = mass(&u);
        for integrator in [Integrator::Euler, Integrator::SspRk2] {
            let g = learned(7);
            let mut v = u.clone();
            for _ in 0..50 {
                v = step(&g, &v, 1e-3, Stencil::default(), integrator).unwrap();
            }
            assert!((mass(&v) - m0).abs() <= 1e-12 * m0.abs().max(1.0));
        }
    }

    #[test]
    fn stencil_mismatch_is_rejected() {
        let u = random_field(32, 1);
        assert!(divergence(&learned(1), &u, Stencil::new(1, 1)).is_err());
        assert!(divergence(&upwind(), &u, Stencil::new(0, 0)).is_err());
    }

    #[test]
    fn integrate_step_counts() {
        let u = random_field(256, 8);
        let t0 = integrate_to(&upwind(), &u, 0.0, &fixed(0.1, Integrator::Euler), ADV).unwrap();
        assert_eq!(t0.n_steps(), 0);

        let dt = 1.0 / 256.0;
        let tr = integrate_to(&upwind(), &u, 1.0, &fixed(dt, Integrator::Euler), ADV).unwrap();
        assert_eq!(tr.n_steps(), 256);
        assert_eq!(*tr.times().last().unwrap(), 1.0);
        let err = tr
            .last()
            .values()
            .iter()
            .zip(u.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-12);

        let small = random_field(16, 9);
        let g = FluxOperator::Analytic(AnalyticFlux::Upwind { a: 0.0 });
        let tr = integrate_to(&g, &small, 1.0, &fixed(0.3, Integrator::Euler), ADV).unwrap();
        assert_eq!(tr.n_steps(), 4);
        assert_eq!(&tr.dts()[..3], &[0.3, 0.3, 0.3]);
        assert!((tr.dts()[3] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn integrate_cfl_mode_reaches_end() {
        let u = random_field(64, 10);
        let scheme = SchemeConfig::default();
        let tr = integrate_to(&upwind(), &u, 0.25, &scheme, ADV).unwrap();
        let t = tr.times();
        assert!((t.last().unwrap() - 0.25).abs() < 1e-12);
        assert!(tr.dts().iter().all(|&dt| dt <= 0.5 / 64.0 + 1e-15));
    }

    #[test]
    fn blow_up_returns_partial_trajectory() {
        // anti-diffusive flux explodes quickly
        let g = FluxOperator::Analytic(AnalyticFlux::Upwind { a: -1.0 });
        let u = random_field(32, 11);
        let scheme = fixed(0.5, Integrator::Euler);
        let flux = PhysicalFlux::Advection { a: -1.0 };
        match integrate_to(
            &FluxOperator::Analytic(AnalyticFlux::LaxFriedrichs { flux, dt: -1.0 }),
            &u,
            100.0,
            &scheme,
            flux,
        ) {
            Err(Error::BlowUp {
                partial,
                step,
                max_abs,
            }) => {
                assert_eq!(partial.n_steps(), step);
                assert!(max_abs > BLOW_UP_LIMIT);
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
        assert!(integrate_to(&g, &u, 1.0, &fixed(1.0 / 32.0, Integrator::Euler), flux).is_ok());
    }

    #[test]
    fn learned_rollout_is_translation_equivariant() {
        let g = learned(12);
        let u = random_field(32, 13);
        let s = 5;
        let scheme = fixed(1e-3, Integrator::SspRk2);
        let a = integrate_to(&g, &roll(&u, s), 0.02, &scheme, ADV).unwrap();
        let b = integrate_to(&g, &u, 0.02, &scheme, ADV).unwrap();
        for (x, y) in a.states().iter().zip(b.states()) {
            let y = roll(y, s);
            for (p, q) in x.values().iter().zip(y.values()) {
                assert!((p - q).abs() <= 1e-8);
            }
        }
    }
}
