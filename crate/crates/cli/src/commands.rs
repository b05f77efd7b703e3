use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fluxfno::data::{
    dataset_to_bytes, make_dataset, read_dataset, step_function, triangular_pulse, Dataset,
    GrfSampler,
};
use fluxfno::eval::{
    evaluate, ood_suite, resolution_suite, sha256_hex, ExperimentReport, OodSettings,
    ResolutionSettings, RolloutSpec,
};
use fluxfno::fno::{self, capacity_gamma, ModelMeta};
use fluxfno::rollout::integrate_to;
use fluxfno::schemes::{DtMode, SchemeConfig};
use fluxfno::train::{train_with, EpochLoss};
use fluxfno::{
    AnalyticFlux, Equation, Error, FluxOperator, FnoParams, GridFunction, Integrator, Stencil,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, Suite};
use crate::{
    AnalyticArg, CapacityArgs, EvalArgs, FluxSource, GenDataArgs, InferArgs, InitArg, TrainArgs,
    Usage,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    data: &'a crate::config::DataSection,
    header: &'a fluxfno::data::DatasetHeader,
    sha256: String,
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load_or_default(a.config.as_deref())?;
    let d = &mut cfg.data;
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = a.$field { d.$field = v; })*};
    }
    set!(equation, n_funcs, nx, dt, scale, seed, advection_speed);
    if a.t_end.is_some() {
        d.t_end = a.t_end;
    }
    if a.n_steps.is_some() {
        d.n_steps = a.n_steps;
    }
    let spec = d.spec()?;
    d.n_steps = Some(spec.n_steps);
    let ds = make_dataset(&spec).context("generating trajectories")?;
    let bytes = dataset_to_bytes(&ds)?;
    let sidecar = Sidecar {
        data: d,
        header: ds.header(),
        sha256: sha256_hex(&bytes),
    };
    write_file(&a.out, &bytes)?;
    let side_path = with_suffix(&a.out, ".json");
    write_file(&side_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    eprintln!(
        "wrote {} ({} function{}, {} steps, nx {}) and {}",
        a.out.display(),
        ds.n_funcs(),
        if ds.n_funcs() == 1 { "" } else { "s" },
        ds.n_steps(),
        ds.nx(),
        side_path.display()
    );
    Ok(())
}

fn loss_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,lr,loss_tm,loss_consi,total\n");
    for e in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch, e.lr, e.loss_tm, e.loss_consi, e.total
        );
    }
    out
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load_or_default(a.config.as_deref())?;
    let t = &mut cfg.train;
    macro_rules! set {
        ($target:expr; $($field:ident),*) => {$(if let Some(v) = a.$field { $target.$field = v; })*};
    }
    set!(t; epochs, lambda, lr, batch_size, seed);
    if let Some(s) = a.scheme {
        t.integrator = s.into();
    }
    set!(cfg.model; width, depth, kmax);
    let ds = load_dataset(&a.data)?;
    let stencil = cfg.model.stencil();
    let fno_config = cfg.model.fno_config();
    let csv_path = a
        .loss_csv
        .clone()
        .unwrap_or_else(|| a.out.with_extension("loss.csv"));
    let quiet = a.quiet;
    let mut observer = |e: &EpochLoss| {
        if !quiet {
            eprintln!(
                "epoch {:>5}  lr {:.3e}  loss_tm {:.6e}  loss_consi {:.6e}  total {:.6e}",
                e.epoch, e.lr, e.loss_tm, e.loss_consi, e.total
            );
        }
    };
    let header = ds.header();
    let meta = ModelMeta {
        equation: header.equation,
        advection_speed: header.advection_speed(),
        stencil,
        dt: ds.dt(),
        nx: ds.nx(),
        lambda: cfg.train.lambda,
        integrator: cfg.train.integrator,
        epochs: cfg.train.epochs,
        seed: cfg.train.seed,
    };
    match train_with(&ds, fno_config, &cfg.train, stencil, &mut observer) {
        Ok(outcome) => {
            fno::save(&outcome.params, Some(&meta), &a.out)
                .with_context(|| format!("writing model {}", a.out.display()))?;
            write_file(&csv_path, loss_csv(&outcome.history))?;
            eprintln!("wrote {} and {}", a.out.display(), csv_path.display());
            Ok(())
        }
        Err(Error::Diverged {
            epoch,
            history,
            last_good,
        }) => {
            fno::save(&last_good, Some(&meta), &a.out)
                .with_context(|| format!("writing model {}", a.out.display()))?;
            write_file(&csv_path, loss_csv(&history))?;
            bail!(
                "training diverged in epoch {epoch}; the last finite parameters were written to {}",
                a.out.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

/// A flux read from a model file, or one of the classical adapters.
enum Source {
    Learned {
        params: FnoParams,
        meta: Option<ModelMeta>,
        sha256: String,
    },
    Analytic(AnalyticArg),
}

impl Source {
    fn load(f: &FluxSource) -> Result<Self> {
        if let Some(path) = &f.model {
            let bytes =
                std::fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
            let (params, meta) = fno::from_bytes(&bytes)
                .with_context(|| format!("loading model {}", path.display()))?;
            return Ok(Source::Learned {
                params,
                meta,
                sha256: sha256_hex(&bytes),
            });
        }
        match f.analytic {
            Some(kind) => Ok(Source::Analytic(kind)),
            None => Err(usage("either --model or --analytic is required")),
        }
    }

    fn meta(&self) -> Option<&ModelMeta> {
        match self {
            Source::Learned { meta, .. } => meta.as_ref(),
            Source::Analytic(_) => None,
        }
    }

    fn stencil(&self) -> Stencil {
        self.meta().map_or_else(Stencil::default, |m| m.stencil)
    }

    fn describe(&self) -> String {
        match self {
            Source::Learned { sha256, .. } => format!("model sha256 {sha256}"),
            Source::Analytic(kind) => format!("analytic {kind:?}").to_lowercase(),
        }
    }

    /// The operator for `equation`; `dt` is only read by Lax-Friedrichs.
    fn operator(&self, equation: Equation, speed: f64, dt: f64) -> Result<FluxOperator> {
        let flux = equation.flux(speed);
        Ok(match self {
            Source::Learned { params, .. } => FluxOperator::Learned(params.clone()),
            Source::Analytic(AnalyticArg::Upwind) => match equation {
                Equation::Advection => FluxOperator::Analytic(AnalyticFlux::Upwind { a: speed }),
                Equation::Burgers => {
                    return Err(usage("the upwind adapter only applies to advection"))
                }
            },
            Source::Analytic(AnalyticArg::Lax) => {
                FluxOperator::Analytic(AnalyticFlux::LaxFriedrichs { flux, dt })
            }
            Source::Analytic(AnalyticArg::Godunov) => {
                FluxOperator::Analytic(AnalyticFlux::Godunov { flux })
            }
        })
    }

    /// The model's training step carried over to an `nx`-point grid at the same Courant number.
    fn scaled_dt(&self, nx: usize) -> Option<f64> {
        self.meta().map(|m| m.dt * m.nx as f64 / nx as f64)
    }
}

fn resolve_speed(equation: Equation, explicit: Option<f64>, fallbacks: &[Option<f64>]) -> f64 {
    match equation {
        Equation::Burgers => 0.0,
        Equation::Advection => explicit
            .or_else(|| fallbacks.iter().flatten().next().copied())
            .unwrap_or(1.0),
    }
}

pub fn infer(a: InferArgs) -> Result<()> {
    let source = Source::load(&a.flux)?;
    let meta = source.meta().cloned();
    if a.init_file.is_some() && a.init != InitArg::File {
        return Err(usage("--init-file needs --init file"));
    }
    let init_ds = match a.init {
        InitArg::File => {
            let path = a
                .init_file
                .as_deref()
                .ok_or_else(|| usage("--init file needs --init-file"))?;
            Some(load_dataset(path)?)
        }
        _ => None,
    };
    let equation = a
        .equation
        .or(meta.as_ref().map(|m| m.equation))
        .or(init_ds.as_ref().map(|d| d.header().equation))
        .ok_or_else(|| usage("--equation is required with an analytic flux"))?;
    let speed = resolve_speed(
        equation,
        a.advection_speed,
        &[
            meta.as_ref().map(|m| m.advection_speed),
            init_ds.as_ref().and_then(|d| d.header().advection_speed),
        ],
    );
    let u0 = match (&init_ds, a.init) {
        (Some(ds), _) => {
            if a.index >= ds.n_funcs() {
                return Err(usage(format!(
                    "--index {} out of range for {} trajectories",
                    a.index,
                    ds.n_funcs()
                )));
            }
            if a.nx.is_some_and(|n| n != ds.nx()) {
                return Err(usage("--nx conflicts with the grid of --init-file"));
            }
            ds.grid_state(a.index, 0)
        }
        (None, init) => {
            let nx = a.nx.or(meta.as_ref().map(|m| m.nx)).unwrap_or(256);
            match init {
                InitArg::Grf => GrfSampler::new(nx, a.scale)?.sample(a.seed, 0),
                InitArg::Step => step_function(nx, 1.0, 0.0, 0.5)?,
                InitArg::Pulse => triangular_pulse(nx)?,
                InitArg::File => unreachable!("file initial data is loaded above"),
            }
        }
    };
    let nx = u0.len();
    let integrator: Integrator = a
        .scheme
        .map(Into::into)
        .or(meta.as_ref().map(|m| m.integrator))
        .unwrap_or_default();
    let flux = equation.flux(speed);
    let (dt_mode, courant) = match a.courant {
        Some(c) => {
            if matches!(source, Source::Analytic(AnalyticArg::Lax)) {
                return Err(usage("the Lax-Friedrichs adapter needs a fixed --dt"));
            }
            (DtMode::Cfl, c)
        }
        None => {
            let dt = match (a.dt, &source) {
                (Some(dt), _) => dt,
                (None, Source::Analytic(_)) => 0.5 / nx as f64,
                (None, s) => s
                    .scaled_dt(nx)
                    .ok_or_else(|| usage("the model file records no step size; pass --dt"))?,
            };
            (DtMode::Fixed(dt), 1.0)
        }
    };
    let scheme = SchemeConfig {
        stencil: source.stencil(),
        courant,
        integrator,
        dt_mode,
    };
    scheme.validate()?;
    let nominal = match dt_mode {
        DtMode::Fixed(dt) => dt,
        DtMode::Cfl => fluxfno::schemes::cfl_dt(&u0, flux, courant)?,
    };
    let op = source.operator(equation, speed, nominal)?;
    let adv = (equation == Equation::Advection).then_some(speed);
    let write = |traj: &fluxfno::Trajectory, truncated: bool| -> Result<()> {
        let ds = Dataset::from_trajectory(traj, equation, adv, nominal, truncated)?;
        write_file(&a.out, dataset_to_bytes(&ds)?)
    };
    match integrate_to(&op, &u0, a.t_end, &scheme, flux) {
        Ok(traj) => {
            write(&traj, false)?;
            eprintln!(
                "wrote {} ({} steps to t = {})",
                a.out.display(),
                traj.n_steps(),
                a.t_end
            );
            Ok(())
        }
        Err(Error::BlowUp {
            step,
            max_abs,
            partial,
        }) => {
            write(&partial, true)?;
            bail!(
                "rollout blew up at step {step} (max |u| = {max_abs:e}); {} steps written to {}",
                partial.n_steps(),
                a.out.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load_or_default(a.config.as_deref())?;
    let mut e = cfg.eval;
    if let Some(t) = a.times {
        e.times = t;
    }
    if let Some(s) = a.suite {
        e.suites = s;
    }
    if let Some(v) = a.grf_scale {
        e.grf_scale = v;
    }
    if let Some(v) = a.resolutions {
        e.resolutions = v;
    }
    if let Some(v) = a.samples {
        e.samples = v;
    }
    if let Some(v) = a.seed {
        e.seed = v;
    }
    if e.times.is_empty() {
        return Err(usage("no evaluation times given"));
    }
    e.suites.sort();
    e.suites.dedup();

    let source = Source::load(&a.flux)?;
    let meta = source.meta().cloned();
    let data = a.data.as_deref().map(load_dataset).transpose()?;
    let data_sha = match &a.data {
        Some(p) => Some(sha256_hex(&std::fs::read(p)?)),
        None => None,
    };
    let equation = a
        .equation
        .or(data.as_ref().map(|d| d.header().equation))
        .or(meta.as_ref().map(|m| m.equation))
        .ok_or_else(|| usage("--equation is required without a dataset or model metadata"))?;
    let speed = resolve_speed(
        equation,
        a.advection_speed,
        &[
            data.as_ref().and_then(|d| d.header().advection_speed),
            meta.as_ref().map(|m| m.advection_speed),
        ],
    );
    let stencil = source.stencil();
    let integrator: Integrator = a
        .scheme
        .map(Into::into)
        .or(meta.as_ref().map(|m| m.integrator))
        .unwrap_or_default();
    let base_nx = meta
        .as_ref()
        .map(|m| m.nx)
        .or(data.as_ref().map(|d| d.nx()))
        .unwrap_or(256);
    let base_dt = |nx: usize| {
        source
            .scaled_dt(nx)
            .or(data.as_ref().map(|d| d.dt() * d.nx() as f64 / nx as f64))
            .unwrap_or(0.5 / nx as f64)
    };

    let mut reports = BTreeMap::new();
    for suite in &e.suites {
        let mut report = match suite {
            Suite::Test => {
                let ds = data
                    .as_ref()
                    .ok_or_else(|| usage("the test suite needs --data"))?;
                if ds.header().equation != equation {
                    return Err(usage(format!(
                        "dataset holds {} trajectories, not {equation}",
                        ds.header().equation
                    )));
                }
                let op = source.operator(equation, speed, ds.dt())?;
                evaluate(&op, ds, &e.times, stencil, integrator)?
            }
            Suite::Ood => {
                let nx = a.nx.unwrap_or(base_nx);
                let dt = a.dt.unwrap_or_else(|| base_dt(nx));
                let op = source.operator(equation, speed, dt)?;
                let spec = RolloutSpec {
                    stencil,
                    integrator,
                    dt,
                };
                let settings = OodSettings {
                    nx,
                    grf_scale: e.grf_scale,
                    seed: e.seed,
                    advection_speed: speed,
                };
                ood_suite(&op, equation, &spec, &e.times, &settings)?
            }
            Suite::Resolution => {
                if matches!(source, Source::Analytic(AnalyticArg::Lax)) {
                    return Err(usage(
                        "the Lax-Friedrichs adapter is tied to one step size and cannot change grids",
                    ));
                }
                let settings = ResolutionSettings {
                    resolutions: e.resolutions.clone(),
                    base_nx,
                    base_dt: base_dt(base_nx),
                    t_end: e.times.iter().copied().fold(0.0, f64::max),
                    grf_scale: data
                        .as_ref()
                        .map(|d| d.header().scale)
                        .filter(|&s| s > 0.0)
                        .unwrap_or(cfg.data.scale),
                    seed: e.seed,
                    samples: e.samples,
                    advection_speed: speed,
                };
                let op = source.operator(equation, speed, settings.base_dt)?;
                resolution_suite(&op, equation, stencil, integrator, &settings)?
            }
        };
        report.metadata.insert("flux".into(), source.describe());
        if let Some(sha) = &data_sha {
            report.metadata.insert("data_sha256".into(), sha.clone());
        }
        reports.insert(suite.name().to_string(), report);
    }

    let text = render(&reports);
    print!("{text}");
    if let Some(out) = &a.out {
        write_file(out, serde_json::to_string_pretty(&reports)? + "\n")?;
        write_file(&out.with_extension("txt"), &text)?;
    }
    Ok(())
}

fn render(reports: &BTreeMap<String, ExperimentReport>) -> String {
    let mut out = String::new();
    for (name, report) in reports {
        let _ = writeln!(out, "== {name} ==");
        out.push_str(&report.to_table());
        out.push('\n');
    }
    out
}

/// `x` to `digits` significant digits, trailing zeros dropped.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        return format!("{m}e{exp}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn capacity(a: CapacityArgs) -> Result<()> {
    let params =
        fno::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let gamma = capacity_gamma(&params, a.p, a.q)?;
    println!("{}", format_significant(gamma, 12));
    Ok(())
}

pub fn reference_at(
    equation: Equation,
    speed: f64,
    u0: &GridFunction,
    t: f64,
) -> Result<GridFunction> {
    use fluxfno::schemes::{cfl_dt, exact_advection, reference_step};
    match equation {
        Equation::Advection => Ok(exact_advection(u0, speed, t)),
        Equation::Burgers => {
            let flux = equation.flux(speed);
            let mut u = u0.clone();
            let mut now = 0.0;
            while t - now > 1e-12 * t.max(1.0) {
                let dt = cfl_dt(&u, flux, 0.5)?.min(t - now);
                u = reference_step(&u, flux, dt)?;
                now += dt;
            }
            Ok(u)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(0.0, 12), "0");
        assert_eq!(format_significant(13.348, 12), "13.348");
        assert_eq!(format_significant(1.0 / 3.0, 12), "0.333333333333");
        assert_eq!(format_significant(2.0 / 3.0 * 1e-7, 12), "6.66666666667e-8");
        assert_eq!(
            format_significant(123456789012345.0, 12),
            "1.23456789012e14"
        );
        assert_eq!(format_significant(-2.5, 12), "-2.5");
    }

    #[test]
    fn loss_csv_layout() {
        let h = vec![EpochLoss {
            epoch: 0,
            lr: 1e-3,
            loss_tm: 0.5,
            loss_consi: 2.0,
            total: 0.52,
        }];
        assert_eq!(
            loss_csv(&h),
            "epoch,lr,loss_tm,loss_consi,total\n0,0.001,0.5,2,0.52\n"
        );
    }
}
