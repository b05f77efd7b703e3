//! Error reports for test sets, out-of-distribution data, and resolution
//! transfer, plus the generalization bound evaluator.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{step_function, triangular_pulse, Dataset, GrfSampler};
use crate::error::{invalid, Result};
use crate::fno::{FnoConfig, FnoParams};
use crate::grid::{linf_slices, rel_l2_slices, GridFunction, Stencil};
use crate::rollout::{step, FluxOperator, BLOW_UP_LIMIT};
use crate::schemes::{
    exact_advection, exact_burgers_periodic_step, reference_step, Equation, Integrator,
    PhysicalFlux,
};
use crate::train::{train, TrainConfig, TrainOutcome};

/// Mean metrics over a set of functions at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub time: f64,
    /// `None` when every function blew up before this time.
    pub rel_l2: Option<f64>,
    pub linf: Option<f64>,
    /// Functions excluded from the mean because their rollout blew up.
    pub diverged: usize,
    /// Evaluated time minus requested time (nearest step on the dt grid).
    pub offset: f64,
}

/// Metrics over the concatenation of all evaluated time slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub rel_l2: Option<f64>,
    pub linf: Option<f64>,
    pub diverged: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<MetricRow>,
    pub aggregate: Vec<AggregateRow>,
    pub metadata: BTreeMap<String, String>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Plain-text table with one `(rel L2, Linf)` pair per row.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "diverged".to_string(), |v| format!("{v:.4e}"));
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(self.aggregate.iter().map(|r| r.label.len()))
            .chain(std::iter::once(5))
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<label_w$}  {:>8}  {:>11}  {:>11}  {:>8}",
            "label", "time", "rel_l2", "linf", "diverged"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<label_w$}  {:>8.4}  {:>11}  {:>11}  {:>8}",
                r.label,
                r.time,
                fmt(r.rel_l2),
                fmt(r.linf),
                r.diverged
            );
        }
        for r in &self.aggregate {
            let _ = writeln!(
                out,
                "{:<label_w$}  {:>8}  {:>11}  {:>11}  {:>8}",
                r.label,
                "whole",
                fmt(r.rel_l2),
                fmt(r.linf),
                r.diverged
            );
        }
        out
    }

    /// The row with this label nearest to `time`.
    pub fn row(&self, label: &str, time: f64) -> Option<&MetricRow> {
        self.rows
            .iter()
            .filter(|r| r.label == label)
            .min_by(|a, b| (a.time - time).abs().total_cmp(&(b.time - time).abs()))
    }

    pub fn aggregate_row(&self, label: &str) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.label == label)
    }

    fn extend(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
        self.aggregate.extend(other.aggregate);
        self.metadata.extend(other.metadata);
    }
}

/// Hex SHA-256 digest, used to tie reports to model and dataset files.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// How a flux operator is marched in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub stencil: Stencil,
    pub integrator: Integrator,
    pub dt: f64,
}

/// States after each of `steps` (sorted) steps; `None` from the first step
/// at which the rollout blew up.
fn predict_at(
    g: &FluxOperator,
    u0: &GridFunction,
    spec: &RolloutSpec,
    steps: &[usize],
) -> Result<Vec<Option<GridFunction>>> {
    let mut out = Vec::with_capacity(steps.len());
    let mut u = u0.clone();
    let mut k = 0;
    for &target in steps {
        while k < target {
            match step(g, &u, spec.dt, spec.stencil, spec.integrator) {
                Ok(next) if next.max_abs() <= BLOW_UP_LIMIT => u = next,
                Ok(_) | Err(crate::error::Error::NonFinite(_)) => {
                    out.resize(steps.len(), None);
                    return Ok(out);
                }
                Err(e) => return Err(e),
            }
            k += 1;
        }
        out.push(Some(u.clone()));
    }
    Ok(out)
}

/// Nearest step index for each requested time, with the offset it implies.
fn step_grid(times: &[f64], dt: f64, max_steps: Option<usize>) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(invalid(format!(
                "evaluation time must be non-negative, got {t}"
            )));
        }
        let k = (t / dt).round() as usize;
        if let Some(max) = max_steps {
            if k > max {
                return Err(invalid(format!(
                    "time {t} is beyond the dataset horizon {}",
                    max as f64 * dt
                )));
            }
        }
        out.push((k, k as f64 * dt - t));
    }
    Ok(out)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds rows and the whole-interval aggregate for one label from
/// per-function predictions and references, both indexed `[func][time]`.
fn summarize(
    label: &str,
    times: &[(f64, usize, f64)],
    preds: &[Vec<Option<GridFunction>>],
    refs: &[Vec<GridFunction>],
) -> Result<(Vec<MetricRow>, AggregateRow)> {
    let mut rows = Vec::with_capacity(times.len());
    for (ti, &(time, _, offset)) in times.iter().enumerate() {
        let (mut rl, mut li, mut diverged) = (Vec::new(), Vec::new(), 0);
        for (p, r) in preds.iter().zip(refs) {
            match &p[ti] {
                Some(u) => {
                    rl.push(rel_l2_slices(u.values(), r[ti].values())?);
                    li.push(linf_slices(u.values(), r[ti].values())?);
                }
                None => diverged += 1,
            }
        }
        rows.push(MetricRow {
            label: label.to_string(),
            time,
            rel_l2: mean(&rl),
            linf: mean(&li),
            diverged,
            offset,
        });
    }
    let (mut rl, mut li, mut diverged) = (Vec::new(), Vec::new(), 0);
    for (p, r) in preds.iter().zip(refs) {
        if p.iter().any(Option::is_none) {
            diverged += 1;
            continue;
        }
        let pv: Vec<f64> = p
            .iter()
            .flatten()
            .flat_map(|u| u.values().to_vec())
            .collect();
        let rv: Vec<f64> = r.iter().flat_map(|u| u.values().to_vec()).collect();
        rl.push(rel_l2_slices(&pv, &rv)?);
        li.push(linf_slices(&pv, &rv)?);
    }
    Ok((
        rows,
        AggregateRow {
            label: label.to_string(),
            rel_l2: mean(&rl),
            linf: mean(&li),
            diverged,
        },
    ))
}

fn sorted_times(times: &[f64]) -> Vec<f64> {
    let mut t = times.to_vec();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Rolls out every test function from its initial state at the dataset's dt
/// and compares with the stored states at the requested times.
pub fn evaluate(
    g: &FluxOperator,
    ds: &Dataset,
    times: &[f64],
    stencil: Stencil,
    integrator: Integrator,
) -> Result<ExperimentReport> {
    if ds.header().dts.is_some() {
        return Err(invalid("evaluation needs a dataset with a constant step"));
    }
    let times = sorted_times(times);
    let grid = step_grid(&times, ds.dt(), Some(ds.n_steps()))?;
    let steps: Vec<usize> = grid.iter().map(|&(k, _)| k).collect();
    let spec = RolloutSpec {
        stencil,
        integrator,
        dt: ds.dt(),
    };
    let preds = (0..ds.n_funcs())
        .into_par_iter()
        .map(|i| predict_at(g, &ds.grid_state(i, 0), &spec, &steps))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<GridFunction>> = (0..ds.n_funcs())
        .map(|i| steps.iter().map(|&k| ds.grid_state(i, k)).collect())
        .collect();
    let rows_in: Vec<(f64, usize, f64)> = times
        .iter()
        .zip(&grid)
        .map(|(&t, &(k, off))| (t, k, off))
        .collect();
    let (rows, agg) = summarize("mean", &rows_in, &preds, &refs)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("equation".into(), ds.header().equation.to_string());
    metadata.insert("n_funcs".into(), ds.n_funcs().to_string());
    metadata.insert("nx".into(), ds.nx().to_string());
    metadata.insert("dt".into(), ds.dt().to_string());
    metadata.insert("integrator".into(), format!("{integrator:?}"));
    metadata.insert(
        "aggregate".into(),
        "metrics over the concatenation of all evaluated time slices, mean over functions".into(),
    );
    metadata.insert(
        "linf".into(),
        "absolute max error, mean over functions".into(),
    );
    Ok(ExperimentReport {
        rows,
        aggregate: vec![agg],
        metadata,
    })
}

/// Runs one initial condition against a reference sequence.
fn single_case(
    label: &str,
    g: &FluxOperator,
    u0: &GridFunction,
    spec: &RolloutSpec,
    times: &[f64],
    reference: impl Fn(f64) -> Result<GridFunction>,
) -> Result<ExperimentReport> {
    let times = sorted_times(times);
    let grid = step_grid(&times, spec.dt, None)?;
    let steps: Vec<usize> = grid.iter().map(|&(k, _)| k).collect();
    let pred = predict_at(g, u0, spec, &steps)?;
    let refs = grid
        .iter()
        .map(|&(k, _)| reference(k as f64 * spec.dt))
        .collect::<Result<Vec<_>>>()?;
    let rows_in: Vec<(f64, usize, f64)> = times
        .iter()
        .zip(&grid)
        .map(|(&t, &(k, off))| (t, k, off))
        .collect();
    let (rows, agg) = summarize(label, &rows_in, &[pred], &[refs])?;
    Ok(ExperimentReport {
        rows,
        aggregate: vec![agg],
        metadata: BTreeMap::new(),
    })
}

/// Burgers reference on a `factor`-times finer grid with `dt / factor`,
/// restricted to the coarse grid by injection.
fn fine_burgers_reference(
    u0_fine: &GridFunction,
    factor: usize,
    coarse_dt: f64,
    t: f64,
) -> Result<GridFunction> {
    let dt = coarse_dt / factor as f64;
    let steps = (t / dt).round() as usize;
    let mut u = u0_fine.clone();
    for _ in 0..steps {
        u = reference_step(&u, PhysicalFlux::Burgers, dt)?;
    }
    GridFunction::new(u.values().iter().step_by(factor).copied().collect())
}

/// Settings for the out-of-distribution suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodSettings {
    pub nx: usize,
    pub grf_scale: f64,
    pub seed: u64,
    pub advection_speed: f64,
}

impl Default for OodSettings {
    fn default() -> Self {
        Self {
            nx: 256,
            grf_scale: 0.03,
            seed: 0,
            advection_speed: 1.0,
        }
    }
}

pub const FINE_FACTOR: usize = 4;

/// Triangular pulse and rough GRF for advection (exact translation), step
/// and rough GRF for Burgers (exact Riemann solution, fine reference run).
pub fn ood_suite(
    g: &FluxOperator,
    equation: Equation,
    spec: &RolloutSpec,
    times: &[f64],
    settings: &OodSettings,
) -> Result<ExperimentReport> {
    let n = settings.nx;
    let sampler = GrfSampler::new(n * FINE_FACTOR, settings.grf_scale)?;
    let fine0 = sampler.sample(settings.seed, 0);
    let grf0 = GridFunction::new(
        fine0
            .values()
            .iter()
            .step_by(FINE_FACTOR)
            .copied()
            .collect(),
    )?;
    let mut report = ExperimentReport::default();
    match equation {
        Equation::Advection => {
            let a = settings.advection_speed;
            let pulse = triangular_pulse(n)?;
            report.extend(single_case("pulse", g, &pulse, spec, times, |t| {
                Ok(exact_advection(&pulse, a, t))
            })?);
            report.extend(single_case("grf", g, &grf0, spec, times, |t| {
                Ok(exact_advection(&grf0, a, t))
            })?);
        }
        Equation::Burgers => {
            let step0 = step_function(n, 1.0, 0.0, 0.5)?;
            report.extend(single_case("step", g, &step0, spec, times, |t| {
                exact_burgers_periodic_step(1.0, 0.0, 0.5, t, n)
            })?);
            report.extend(single_case("grf", g, &grf0, spec, times, |t| {
                fine_burgers_reference(&fine0, FINE_FACTOR, spec.dt, t)
            })?);
        }
    }
    report.metadata.insert("suite".into(), "ood".into());
    report
        .metadata
        .insert("equation".into(), equation.to_string());
    report.metadata.insert("nx".into(), n.to_string());
    report
        .metadata
        .insert("grf_scale".into(), settings.grf_scale.to_string());
    Ok(report)
}

/// Settings for [`resolution_suite`]. The Courant number `dt/dx` is held at
/// its base value when the grid changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionSettings {
    pub resolutions: Vec<usize>,
    pub base_nx: usize,
    pub base_dt: f64,
    pub t_end: f64,
    pub grf_scale: f64,
    pub seed: u64,
    /// Initial conditions per resolution; metrics are averaged over them.
    pub samples: usize,
    pub advection_speed: f64,
}

impl Default for ResolutionSettings {
    fn default() -> Self {
        Self {
            resolutions: vec![128, 256, 512],
            base_nx: 256,
            base_dt: 1.0 / 256.0,
            t_end: 1.0,
            grf_scale: 0.1,
            seed: 0,
            samples: 1,
            advection_speed: 1.0,
        }
    }
}

/// Runs the same operator on several grids; rows are labelled `n=<N>`.
pub fn resolution_suite(
    g: &FluxOperator,
    equation: Equation,
    stencil: Stencil,
    integrator: Integrator,
    settings: &ResolutionSettings,
) -> Result<ExperimentReport> {
    if let FluxOperator::Learned(p) = g {
        if p.config().conv_kernel != 1 {
            return Err(invalid("resolution transfer needs a pointwise convolution"));
        }
    }
    if settings.samples == 0 {
        return Err(invalid("resolution suite needs at least one sample"));
    }
    let mut report = ExperimentReport::default();
    for &n in &settings.resolutions {
        let dt = settings.base_dt * settings.base_nx as f64 / n as f64;
        let spec = RolloutSpec {
            stencil,
            integrator,
            dt,
        };
        let fine_n = match equation {
            Equation::Advection => n,
            Equation::Burgers => n * FINE_FACTOR,
        };
        let sampler = GrfSampler::new(fine_n, settings.grf_scale)?;
        let times = [settings.t_end];
        let grid = step_grid(&times, dt, None)?;
        let steps = [grid[0].0];
        let cases = (0..settings.samples as u64)
            .into_par_iter()
            .map(|s| {
                let fine0 = sampler.sample(settings.seed, s);
                let factor = fine_n / n;
                let u0 =
                    GridFunction::new(fine0.values().iter().step_by(factor).copied().collect())?;
                let pred = predict_at(g, &u0, &spec, &steps)?;
                let t = steps[0] as f64 * dt;
                let reference = match equation {
                    Equation::Advection => exact_advection(&u0, settings.advection_speed, t),
                    Equation::Burgers => fine_burgers_reference(&fine0, factor, dt, t)?,
                };
                Ok((pred, vec![reference]))
            })
            .collect::<Result<Vec<_>>>()?;
        let (preds, refs): (Vec<_>, Vec<_>) = cases.into_iter().unzip();
        let (rows, agg) = summarize(
            &format!("n={n}"),
            &[(settings.t_end, steps[0], grid[0].1)],
            &preds,
            &refs,
        )?;
        report.rows.extend(rows);
        report.aggregate.push(agg);
    }
    report.metadata.insert("suite".into(), "resolution".into());
    report.metadata.insert(
        "dt_policy".into(),
        "dt scaled with dx to keep dt/dx at its base value".into(),
    );
    Ok(report)
}

/// Both halves of the consistency-loss ablation.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub with_consistency: ExperimentReport,
    pub without_consistency: ExperimentReport,
    pub outcome_with: TrainOutcome,
    pub outcome_without: TrainOutcome,
}

/// Trains with the configured `lambda` and with `lambda = 0` from the same
/// seed, then evaluates both on the step-function case.
pub fn ablation_compare(
    ds: &Dataset,
    fno: FnoConfig,
    config: &TrainConfig,
    stencil: Stencil,
    times: &[f64],
) -> Result<AblationResult> {
    let zero = TrainConfig {
        lambda: 0.0,
        ..config.clone()
    };
    let outcome_with = train(ds, fno, config, stencil)?;
    let outcome_without = train(ds, fno, &zero, stencil)?;
    let spec = RolloutSpec {
        stencil,
        integrator: config.integrator,
        dt: ds.dt(),
    };
    let step0 = step_function(ds.nx(), 1.0, 0.0, 0.5)?;
    let run = |params: &FnoParams, label: &str| {
        single_case(
            label,
            &FluxOperator::Learned(params.clone()),
            &step0,
            &spec,
            times,
            |t| exact_burgers_periodic_step(1.0, 0.0, 0.5, t, ds.nx()),
        )
    };
    Ok(AblationResult {
        with_consistency: run(&outcome_with.params, "step lambda>0")?,
        without_consistency: run(&outcome_without.params, "step lambda=0")?,
        outcome_with,
        outcome_without,
    })
}

/// Inputs to the inference error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub eps_tm: f64,
    pub eps_consi: f64,
    pub m: usize,
    pub delta: f64,
    pub gamma: f64,
    pub h: f64,
    #[serde(default = "one")]
    pub c1: f64,
    #[serde(default = "one")]
    pub c2: f64,
    #[serde(default = "one")]
    pub c3: f64,
    #[serde(default)]
    pub eps_h: f64,
}

fn one() -> f64 {
    1.0
}

/// `min(C3 g e_tm / sqrt m + e_tm^2 (1 + s),
///      h (C1 g e_c / sqrt m + e_c^2 (1 + s) + C2 eps(h)))`
/// with `s = sqrt(2 ln(4/delta) / m)`.
pub fn theorem1_bound(b: &BoundInputs) -> Result<f64> {
    let reals = [
        b.eps_tm,
        b.eps_consi,
        b.delta,
        b.gamma,
        b.h,
        b.c1,
        b.c2,
        b.c3,
        b.eps_h,
    ];
    if reals.iter().any(|v| !v.is_finite()) {
        return Err(invalid("bound inputs must be finite"));
    }
    if b.eps_tm < 0.0 || b.eps_consi < 0.0 {
        return Err(invalid("training losses must be non-negative"));
    }
    if !(b.delta > 0.0 && b.delta < 1.0) {
        return Err(invalid(format!(
            "delta must lie in (0, 1), got {}",
            b.delta
        )));
    }
    if b.m == 0 {
        return Err(invalid("sample count must be positive"));
    }
    let m = b.m as f64;
    let slack = 1.0 + (2.0 * (4.0 / b.delta).ln() / m).sqrt();
    let first = b.c3 * b.gamma * b.eps_tm / m.sqrt() + b.eps_tm * b.eps_tm * slack;
    let second = b.h
        * (b.c1 * b.gamma * b.eps_consi / m.sqrt()
            + b.eps_consi * b.eps_consi * slack
            + b.c2 * b.eps_h);
    Ok(first.min(second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, DatasetSpec};
    use crate::rollout::AnalyticFlux;

    fn adv_set() -> Dataset {
        make_dataset(&DatasetSpec {
            equation: Equation::Advection,
            n_funcs: 3,
            nx: 64,
            dt: 1.0 / 64.0,
            n_steps: 64,
            scale: 0.1,
            seed: 2,
            advection_speed: 1.0,
        })
        .unwrap()
    }

    fn upwind() -> FluxOperator {
        FluxOperator::Analytic(AnalyticFlux::Upwind { a: 1.0 })
    }

    fn bound() -> BoundInputs {
        BoundInputs {
            eps_tm: 0.1,
            eps_consi: 0.1,
            m: 100,
            delta: 0.05,
            gamma: 10.0,
            h: 0.01,
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            eps_h: 0.0,
        }
    }

    #[test]
    fn upwind_oracle_has_zero_error() {
        let r = evaluate(
            &upwind(),
            &adv_set(),
            &[0.4, 1.0],
            Stencil::default(),
            Integrator::Euler,
        )
        .unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert!(row.rel_l2.unwrap() <= 1e-12 && row.linf.unwrap() <= 1e-12);
        }
        assert!(r.aggregate[0].rel_l2.unwrap() <= 1e-12);
        assert!((r.rows[0].offset - (26.0 / 64.0 - 0.4)).abs() < 1e-15);
    }

    #[test]
    fn evaluate_rejects_times_past_horizon() {
        assert!(evaluate(
            &upwind(),
            &adv_set(),
            &[2.0],
            Stencil::default(),
            Integrator::Euler
        )
        .is_err());
    }

    #[test]
    fn report_round_trip_and_table() {
        let r = evaluate(
            &upwind(),
            &adv_set(),
            &[0.5],
            Stencil::default(),
            Integrator::Euler,
        )
        .unwrap();
        let back = ExperimentReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let table = r.to_table();
        assert!(table.contains("rel_l2") && table.contains("whole"));
    }

    #[test]
    fn advection_ood_pulse_reference_is_roll() {
        let spec = RolloutSpec {
            stencil: Stencil::default(),
            integrator: Integrator::Euler,
            dt: 1.0 / 64.0,
        };
        let settings = OodSettings {
            nx: 64,
            ..Default::default()
        };
        let r = ood_suite(&upwind(), Equation::Advection, &spec, &[1.0], &settings).unwrap();
        assert!(r.row("pulse", 1.0).unwrap().rel_l2.unwrap() <= 1e-12);
        assert!(r.row("grf", 1.0).unwrap().rel_l2.unwrap() <= 1e-12);
    }

    #[test]
    fn burgers_ood_with_godunov_is_close() {
        let spec = RolloutSpec {
            stencil: Stencil::default(),
            integrator: Integrator::SspRk2,
            dt: 1e-3,
        };
        let settings = OodSettings {
            nx: 128,
            ..Default::default()
        };
        let g = FluxOperator::Analytic(AnalyticFlux::Godunov {
            flux: PhysicalFlux::Burgers,
        });
        let r = ood_suite(&g, Equation::Burgers, &spec, &[0.1, 0.3], &settings).unwrap();
        let step = r.row("step", 0.3).unwrap().rel_l2.unwrap();
        assert!(step < 0.1, "{step}");
        assert!(r.row("grf", 0.3).unwrap().rel_l2.unwrap() < 0.2);
    }

    #[test]
    fn resolution_suite_oracle() {
        let settings = ResolutionSettings {
            t_end: 0.5,
            ..Default::default()
        };
        let r = resolution_suite(
            &upwind(),
            Equation::Advection,
            Stencil::default(),
            Integrator::Euler,
            &settings,
        )
        .unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows.iter().all(|row| row.rel_l2.unwrap() <= 1e-12));
    }

    #[test]
    fn untrained_model_metrics_stay_finite() {
        let p = FnoParams::init(FnoConfig::new(2, 4, 1, 3), 0).unwrap();
        let settings = ResolutionSettings {
            t_end: 0.1,
            ..Default::default()
        };
        let r = resolution_suite(
            &FluxOperator::Learned(p),
            Equation::Advection,
            Stencil::default(),
            Integrator::Euler,
            &settings,
        )
        .unwrap();
        for row in &r.rows {
            assert!(row.rel_l2.is_none_or(f64::is_finite));
            assert!(row.rel_l2.is_some() || row.diverged == 1);
        }
    }

    #[test]
    fn bound_examples() {
        let zero = BoundInputs {
            eps_tm: 0.0,
            eps_consi: 0.0,
            ..bound()
        };
        assert_eq!(theorem1_bound(&zero).unwrap(), 0.0);

        let b = bound();
        let s = 1.0 + (2.0 * 80f64.ln() / 100.0).sqrt();
        let first = 10.0 * 0.1 / 10.0 + 0.01 * s;
        let second = 0.01 * (10.0 * 0.1 / 10.0 + 0.01 * s);
        assert!((theorem1_bound(&b).unwrap() - first.min(second)).abs() < 1e-15);
        // by hand: s = 1.296040..., second branch = 0.01 * 0.1129604 = 1.129604e-3
        assert!((theorem1_bound(&b).unwrap() - 1.129604e-3).abs() < 1e-9);

        assert!(theorem1_bound(&BoundInputs { delta: 1.0, ..b }).is_err());
        assert!(theorem1_bound(&BoundInputs { m: 0, ..b }).is_err());
    }

    #[test]
    fn bound_decreases_in_m() {
        let mut prev = f64::INFINITY;
        for m in [1, 10, 100, 1000, 10000] {
            let v = theorem1_bound(&BoundInputs { m, ..bound() }).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
