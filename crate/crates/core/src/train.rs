//! Losses, Adam with a step schedule, and the training loops.
//!
//! A batch is a contiguous window of one trajectory. The time-marching loss
//! compares each stored state with the one-step prediction from its
//! predecessor; the consistency loss feeds every input state replicated
//! across all stencil channels and compares with the physical flux.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::fno::{FnoConfig, FnoParams};
use crate::grid::{stencil_adjoint, stencil_values, GridFunction, Stencil};
use crate::rollout::{step, FluxOperator};
use crate::schemes::{Integrator, PhysicalFlux};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub sched_step: usize,
    pub sched_gamma: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub integrator: Integrator,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            sched_step: 50,
            sched_gamma: 0.5,
            epochs: 1000,
            lambda: 0.01,
            batch_size: 64,
            integrator: Integrator::Euler,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_steps: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(invalid(
                "adam_eps must be positive and weight_decay non-negative",
            ));
        }
        if self.sched_step == 0 || !(self.sched_gamma.is_finite() && self.sched_gamma > 0.0) {
            return Err(invalid("sched_step and sched_gamma must be positive"));
        }
        if self.batch_size == 0 || !n_steps.is_multiple_of(self.batch_size) {
            return Err(invalid(format!(
                "batch_size {} must divide the {n_steps} steps per trajectory",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// `lr * gamma^floor(epoch / step)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr * config.sched_gamma.powi((epoch / config.sched_step) as i32)
}

/// Mean per-batch losses of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub loss_tm: f64,
    pub loss_consi: f64,
    pub total: f64,
}

/// Adam moments with coupled L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of `theta` in place.
    pub fn update(&mut self, theta: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig) {
        assert_eq!(theta.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grads[i] + cfg.weight_decay * theta[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            theta[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Parameters, optimizer moments, and progress of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: FnoParams,
    pub adam: Adam,
    pub epoch: usize,
    pub history: Vec<EpochLoss>,
}

impl TrainState {
    pub fn new(params: FnoParams) -> Self {
        Self {
            adam: Adam::new(params.len()),
            params,
            epoch: 0,
            history: Vec::new(),
        }
    }
}

/// Applies one Adam update at the learning rate of the current epoch.
pub fn adam_step(state: &mut TrainState, grads: &[f64], config: &TrainConfig) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.params.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = state.params.tensor_name(i).unwrap_or_default();
        return Err(Error::NonFinite(format!("gradient of tensor `{name}`")));
    }
    let lr = lr_at(state.epoch, config);
    state
        .adam
        .update(state.params.as_mut_slice(), grads, lr, config);
    Ok(())
}

/// Consecutive states of one trajectory; `states[i]` is at step `steps[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    steps: Vec<usize>,
    states: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(steps: Vec<usize>, states: Vec<Vec<f64>>) -> Result<Self> {
        if steps.len() != states.len() || states.len() < 2 {
            return Err(invalid(
                "a batch needs at least two states, one per step index",
            ));
        }
        if let Some(w) = steps.windows(2).find(|w| w[1] != w[0] + 1) {
            return Err(Error::NotContiguous(format!(
                "step {} is followed by step {}",
                w[0], w[1]
            )));
        }
        let n = states[0].len();
        if states.iter().any(|s| s.len() != n) {
            return Err(Error::Shape("batch states differ in length".into()));
        }
        Ok(Self { steps, states })
    }

    /// States `start ..= start + len` of function `func`.
    pub fn from_dataset(ds: &Dataset, func: usize, start: usize, len: usize) -> Result<Self> {
        if func >= ds.n_funcs() || start + len > ds.n_steps() {
            return Err(invalid(format!(
                "window {start}..={} of function {func} is outside the dataset",
                start + len
            )));
        }
        let steps: Vec<usize> = (start..=start + len).collect();
        let states = steps.iter().map(|&k| ds.state(func, k).to_vec()).collect();
        Self::new(steps, states)
    }

    /// Number of one-step transitions.
    pub fn len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nx(&self) -> usize {
        self.states[0].len()
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    fn inputs(&self) -> &[Vec<f64>] {
        &self.states[..self.len()]
    }
}

/// Everything the losses need besides the flux and the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossContext {
    pub stencil: Stencil,
    pub flux: PhysicalFlux,
    pub dt: f64,
    pub integrator: Integrator,
}

/// `sum_n ||U^{n+1} - step(U^n)||^2` over the batch.
pub fn loss_tm(g: &FluxOperator, batch: &Batch, ctx: &LossContext) -> Result<f64> {
    let mut loss = 0.0;
    for pair in batch.states.windows(2) {
        let u = GridFunction::new(pair[0].clone())?;
        let pred = step(g, &u, ctx.dt, ctx.stencil, ctx.integrator)?;
        loss += pred
            .values()
            .iter()
            .zip(&pair[1])
            .map(|(p, t)| (t - p).powi(2))
            .sum::<f64>();
    }
    Ok(loss)
}

fn replicated(states: &[Vec<f64>], ch: usize) -> Vec<f64> {
    states
        .iter()
        .flat_map(|s| s.iter().flat_map(move |&v| std::iter::repeat_n(v, ch)))
        .collect()
}

/// `sum ||G(U, ..., U) - F(U)||^2` over the given states.
pub fn loss_consi(
    g: &FluxOperator,
    states: &[Vec<f64>],
    flux: PhysicalFlux,
    stencil: Stencil,
) -> Result<f64> {
    let Some(first) = states.first() else {
        return Ok(0.0);
    };
    let (n, ch) = (first.len(), stencil.channels());
    let x = Array3::from_shape_vec((states.len(), n, ch), replicated(states, ch))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let out = g.apply(&x, stencil)?;
    Ok(out
        .iter()
        .zip(states.iter().flatten())
        .map(|(gv, &u)| (gv - flux.eval(u)).powi(2))
        .sum())
}

/// `L_tm + lambda * L_consi` on one batch.
pub fn total_loss(g: &FluxOperator, batch: &Batch, ctx: &LossContext, lambda: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(invalid(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(loss_tm(g, batch, ctx)? + lambda * loss_consi(g, batch.inputs(), ctx.flux, ctx.stencil)?)
}

/// Losses of one batch with the gradient of `loss_tm + lambda * loss_consi`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss_tm: f64,
    pub loss_consi: f64,
    pub total: f64,
    pub grads: Vec<f64>,
}

/// Stacks `U^l`, `U^r` (unless `right` is false) and optionally the
/// replicated states of `states`.
fn stage_input(
    states: &[Vec<f64>],
    stencil: Stencil,
    right: bool,
    with_consi: bool,
) -> Array3<f64> {
    let (b, n, ch) = (states.len(), states[0].len(), stencil.channels());
    let shifts: &[isize] = if right { &[0, 1] } else { &[0] };
    let rows = (shifts.len() + with_consi as usize) * b;
    let mut data = Vec::with_capacity(rows * n * ch);
    for &shift in shifts {
        for s in states {
            data.extend(stencil_values(s, stencil, shift));
        }
    }
    if with_consi {
        data.extend(replicated(states, ch));
    }
    Array3::from_shape_vec((rows, n, ch), data).expect("stacked stencil rows")
}

/// `U^r` is `U^l` rolled by one cell, so a shift-equivariant model gives
/// `G(U^r)_j = G(U^l)_{j-1}`.
fn rolled_once(gl: &[f64], b: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * n);
    for row in gl.chunks_exact(n).take(b) {
        out.push(row[n - 1]);
        out.extend_from_slice(&row[..n - 1]);
    }
    out
}

/// Adjoint of [`rolled_once`], accumulated into `gl`.
fn add_rolled_back(gl: &mut [f64], gr: &[f64], n: usize) {
    for (dst, src) in gl.chunks_exact_mut(n).zip(gr.chunks_exact(n)) {
        for j in 0..n {
            dst[(j + n - 1) % n] += src[j];
        }
    }
}

/// Reverse-mode gradient of the batch loss with respect to the parameters.
pub fn loss_and_grad(
    params: &FnoParams,
    batch: &Batch,
    ctx: &LossContext,
    lambda: f64,
) -> Result<LossGrad> {
    let (b, n) = (batch.len(), batch.nx());
    let ch = ctx.stencil.channels();
    crate::grid::check_stencil(ctx.stencil, n)?;
    if params.config().in_channels != ch || params.config().out_channels != 1 {
        return Err(Error::Shape(format!(
            "model maps {} -> {} channels, flux stencil needs {ch} -> 1",
            params.config().in_channels,
            params.config().out_channels
        )));
    }
    // Pointwise convolutions keep the model shift-equivariant, so the right
    // stencil never has to be evaluated.
    let equivariant = params.config().conv_kernel == 1;
    let bn = b * n;
    let k = ctx.dt * n as f64;
    let inputs = batch.inputs();
    let targets = &batch.states[1..];
    let mut grads = vec![0.0; params.len()];

    let x1 = stage_input(inputs, ctx.stencil, !equivariant, true);
    let (g1, cache1) = params.forward_cached(&x1)?;
    let g1 = g1.as_slice().expect("standard layout");
    let rows1 = x1.dim().0;
    let g1l = &g1[..bn];
    let g1r_owned;
    let g1r = if equivariant {
        g1r_owned = rolled_once(g1l, b, n);
        &g1r_owned[..]
    } else {
        &g1[bn..2 * bn]
    };
    let g1c = &g1[(rows1 - b) * n..];
    let mut gout1 = vec![0.0; rows1 * n];
    // cotangents of G(U^l) and G(U^r)
    let mut cot_l = vec![0.0; bn];
    let mut cot_r = vec![0.0; bn];

    let mut loss_consi = 0.0;
    let consi_at = (rows1 - b) * n;
    for (i, &u) in inputs.iter().flatten().enumerate() {
        let e = g1c[i] - ctx.flux.eval(u);
        loss_consi += e * e;
        gout1[consi_at + i] = 2.0 * lambda * e;
    }

    let mut loss_tm = 0.0;
    match ctx.integrator {
        Integrator::Euler => {
            for (i, (&u, &t)) in inputs
                .iter()
                .flatten()
                .zip(targets.iter().flatten())
                .enumerate()
            {
                let r = t - u + k * (g1l[i] - g1r[i]);
                loss_tm += r * r;
                cot_l[i] = 2.0 * k * r;
                cot_r[i] = -2.0 * k * r;
            }
        }
        Integrator::SspRk2 => {
            let u1: Vec<Vec<f64>> = inputs
                .iter()
                .enumerate()
                .map(|(s, u)| {
                    (0..n)
                        .map(|j| u[j] - k * (g1l[s * n + j] - g1r[s * n + j]))
                        .collect()
                })
                .collect();
            let x2 = stage_input(&u1, ctx.stencil, !equivariant, false);
            let (g2, cache2) = params.forward_cached(&x2)?;
            let g2 = g2.as_slice().expect("standard layout");
            let g2l = &g2[..bn];
            let g2r_owned;
            let g2r = if equivariant {
                g2r_owned = rolled_once(g2l, b, n);
                &g2r_owned[..]
            } else {
                &g2[bn..]
            };
            let mut gout2 = vec![0.0; g2.len()];
            let mut cot2_r = vec![0.0; bn];
            let mut gu1 = vec![0.0; bn];
            for s in 0..b {
                for j in 0..n {
                    let i = s * n + j;
                    let pred = 0.5 * inputs[s][j] + 0.5 * (u1[s][j] - k * (g2l[i] - g2r[i]));
                    let r = targets[s][j] - pred;
                    loss_tm += r * r;
                    let gpred = -2.0 * r;
                    gu1[i] = 0.5 * gpred;
                    gout2[i] = -0.5 * k * gpred;
                    cot2_r[i] = 0.5 * k * gpred;
                }
            }
            if equivariant {
                add_rolled_back(&mut gout2[..bn], &cot2_r, n);
            } else {
                gout2[bn..].copy_from_slice(&cot2_r);
            }
            let rows2 = x2.dim().0;
            let gout2 = Array3::from_shape_vec((rows2, n, 1), gout2).expect("flux cotangent");
            let gx2 = params
                .backward(&cache2, &gout2, &mut grads, true)
                .expect("input gradient requested");
            let gx2 = gx2.as_slice().expect("standard layout");
            let field = n * ch;
            for s in 0..b {
                let dst = &mut gu1[s * n..(s + 1) * n];
                stencil_adjoint(&gx2[s * field..(s + 1) * field], ctx.stencil, 0, dst);
                if !equivariant {
                    let r_at = (b + s) * field;
                    stencil_adjoint(&gx2[r_at..r_at + field], ctx.stencil, 1, dst);
                }
            }
            for i in 0..bn {
                cot_l[i] = -k * gu1[i];
                cot_r[i] = k * gu1[i];
            }
        }
    }
    gout1[..bn].copy_from_slice(&cot_l);
    if equivariant {
        add_rolled_back(&mut gout1[..bn], &cot_r, n);
    } else {
        gout1[bn..2 * bn].copy_from_slice(&cot_r);
    }
    let gout1 = Array3::from_shape_vec((rows1, n, 1), gout1).expect("flux cotangent");
    params.backward(&cache1, &gout1, &mut grads, false);
    Ok(LossGrad {
        loss_tm,
        loss_consi,
        total: loss_tm + lambda * loss_consi,
        grads,
    })
}

/// Result of a completed training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FnoParams,
    pub history: Vec<EpochLoss>,
}

/// Trains with the integrator named in `config`, calling `observer` after
/// every epoch. Functions are visited in a seeded shuffled order each epoch;
/// windows within a function stay in time order.
pub fn train_with(
    ds: &Dataset,
    fno: FnoConfig,
    config: &TrainConfig,
    stencil: Stencil,
    observer: &mut dyn FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    config.validate(ds.n_steps())?;
    if fno.in_channels != stencil.channels() {
        return Err(Error::Shape(format!(
            "model takes {} channels, stencil has {}",
            fno.in_channels,
            stencil.channels()
        )));
    }
    if ds.nx() < fno.min_grid() {
        return Err(invalid(format!(
            "grid of {} points is too small for kmax {}",
            ds.nx(),
            fno.kmax
        )));
    }
    let ctx = LossContext {
        stencil,
        flux: ds.header().equation.flux(ds.header().advection_speed()),
        dt: ds.dt(),
        integrator: config.integrator,
    };
    let mut state = TrainState::new(FnoParams::init(fno, config.seed)?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..ds.n_funcs()).collect();
    let windows = ds.n_steps() / config.batch_size;

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        order.shuffle(&mut rng);
        let (mut tm, mut cs, mut tot) = (0.0, 0.0, 0.0);
        for &f in &order {
            for w in 0..windows {
                let batch = Batch::from_dataset(ds, f, w * config.batch_size, config.batch_size)?;
                let lg = loss_and_grad(&state.params, &batch, &ctx, config.lambda)?;
                if !lg.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        history: state.history,
                        last_good: Box::new(state.params),
                    });
                }
                adam_step(&mut state, &lg.grads, config)?;
                tm += lg.loss_tm;
                cs += lg.loss_consi;
                tot += lg.total;
            }
        }
        let batches = (order.len() * windows) as f64;
        let entry = EpochLoss {
            epoch,
            lr: lr_at(epoch, config),
            loss_tm: tm / batches,
            loss_consi: cs / batches,
            total: tot / batches,
        };
        observer(&entry);
        state.history.push(entry);
        state.epoch += 1;
    }
    Ok(TrainOutcome {
        params: state.params,
        history: state.history,
    })
}

pub fn train(
    ds: &Dataset,
    fno: FnoConfig,
    config: &TrainConfig,
    stencil: Stencil,
) -> Result<TrainOutcome> {
    train_with(ds, fno, config, stencil, &mut |_| {})
}

/// Forward Euler time-marching loss.
pub fn train_basic(
    ds: &Dataset,
    fno: FnoConfig,
    config: &TrainConfig,
    stencil: Stencil,
) -> Result<TrainOutcome> {
    let config = TrainConfig {
        integrator: Integrator::Euler,
        ..config.clone()
    };
    train(ds, fno, &config, stencil)
}

/// Time-marching loss through the two-stage SSP-RK2 composite.
pub fn train_rk(
    ds: &Dataset,
    fno: FnoConfig,
    config: &TrainConfig,
    stencil: Stencil,
) -> Result<TrainOutcome> {
    let config = TrainConfig {
        integrator: Integrator::SspRk2,
        ..config.clone()
    };
    train(ds, fno, &config, stencil)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, DatasetSpec};
    use crate::diffkernel::grad_check;
    use crate::grid::{roll_slice, GridFunction};
    use crate::rollout::{step_euler, AnalyticFlux};
    use crate::schemes::{reference_step_with, Equation, Reconstruction, ReferenceOptions};
    use rand::Rng;

    const ADV: PhysicalFlux = PhysicalFlux::Advection { a: 1.0 };

    fn ctx(dt: f64, integrator: Integrator, flux: PhysicalFlux) -> LossContext {
        LossContext {
            stencil: Stencil::default(),
            flux,
            dt,
            integrator,
        }
    }

    fn toy() -> FnoParams {
        FnoParams::init(FnoConfig::new(2, 4, 1, 3), 3).unwrap()
    }

    fn random_states(count: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn batch_of(states: Vec<Vec<f64>>) -> Batch {
        Batch::new((0..states.len()).collect(), states).unwrap()
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert_eq!(lr_at(49, &c), 1e-3);
        assert_eq!(lr_at(50, &c), 5e-4);
        assert_eq!(lr_at(100, &c), 2.5e-4);
    }

    #[test]
    fn adam_first_step() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut adam = Adam::new(1);
        let mut theta = [0.0];
        adam.update(&mut theta, &[1.0], 1e-3, &cfg);
        assert!((theta[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);

        let mut adam = Adam::new(3);
        let mut theta = [1.0, 2.0, 3.0];
        adam.update(&mut theta, &[0.5, -4.0, 1e-3], 1e-3, &cfg);
        assert!(theta[0] < 1.0 && theta[1] > 2.0 && theta[2] < 3.0);

        let mut adam = Adam::new(2);
        let mut theta = [1.5, -0.5];
        adam.update(&mut theta, &[0.0, 0.0], 1e-3, &cfg);
        assert_eq!(theta, [1.5, -0.5]);
    }

    #[test]
    fn adam_step_names_bad_tensor() {
        let mut state = TrainState::new(toy());
        let mut g = vec![0.0; state.params.len()];
        let idx = state.params.len() - 1;
        g[idx] = f64::NAN;
        let err = adam_step(&mut state, &g, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("proj2.bias"), "{err}");
    }

    #[test]
    fn batch_requires_contiguous_steps() {
        let s = random_states(3, 16, 1);
        assert!(matches!(
            Batch::new(vec![0, 1, 3], s.clone()),
            Err(Error::NotContiguous(_))
        ));
        assert!(Batch::new(vec![4, 5, 6], s).is_ok());
    }

    #[test]
    fn loss_tm_vanishes_on_own_rollout() {
        let g = FluxOperator::Learned(toy());
        let c = ctx(1e-3, Integrator::Euler, ADV);
        let mut states = vec![random_states(1, 16, 2).remove(0)];
        for _ in 0..4 {
            let u = GridFunction::new(states.last().unwrap().clone()).unwrap();
            states.push(step_euler(&g, &u, c.dt, c.stencil).unwrap().into_values());
        }
        assert!(loss_tm(&g, &batch_of(states), &c).unwrap() <= 1e-20);
    }

    #[test]
    fn loss_tm_zero_for_constant_and_upwind() {
        let g = FluxOperator::Learned(toy());
        let c = ctx(1e-3, Integrator::Euler, ADV);
        let constant = batch_of(vec![vec![0.3; 16]; 4]);
        assert_eq!(loss_tm(&g, &constant, &c).unwrap(), 0.0);

        let u0 = random_states(1, 32, 3).remove(0);
        let states: Vec<_> = (0..6).map(|k| roll_slice(&u0, k)).collect();
        let up = FluxOperator::Analytic(AnalyticFlux::Upwind { a: 1.0 });
        let c = ctx(1.0 / 32.0, Integrator::Euler, ADV);
        assert!(loss_tm(&up, &batch_of(states), &c).unwrap() <= 1e-20);
    }

    #[test]
    fn rk_loss_matches_first_order_reference() {
        let flux = PhysicalFlux::Burgers;
        let opts = ReferenceOptions {
            reconstruction: Reconstruction::FirstOrder,
            ..Default::default()
        };
        let dt = 2e-3;
        let mut u = GridFunction::from_fn(64, |x| if x < 0.5 { 1.0 } else { -0.2 }).unwrap();
        let mut states = vec![u.values().to_vec()];
        for _ in 0..5 {
            u = reference_step_with(&u, flux, dt, opts).unwrap();
            states.push(u.values().to_vec());
        }
        let g = FluxOperator::Analytic(AnalyticFlux::Godunov { flux });
        let c = ctx(dt, Integrator::SspRk2, flux);
        assert!(loss_tm(&g, &batch_of(states), &c).unwrap() <= 1e-20);
    }

    #[test]
    fn rk_loss_with_zero_flux_is_state_difference() {
        let zero = FluxOperator::Learned(FnoParams::zeros(FnoConfig::new(2, 4, 1, 3)).unwrap());
        let states = random_states(4, 16, 4);
        let expected: f64 = states
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .map(|(a, b)| (b - a).powi(2))
                    .sum::<f64>()
            })
            .sum();
        let c = ctx(1e-2, Integrator::SspRk2, ADV);
        let got = loss_tm(&zero, &batch_of(states), &c).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn consistency_examples() {
        let zero = FluxOperator::Learned(FnoParams::zeros(FnoConfig::new(2, 4, 1, 3)).unwrap());
        let s = Stencil::default();
        let n = 16;
        let c = loss_consi(&zero, &[vec![2.0; n]], PhysicalFlux::Burgers, s).unwrap();
        assert_eq!(c, 4.0 * n as f64);
        let u = random_states(1, n, 5);
        let norm: f64 = u[0].iter().map(|v| v * v).sum();
        assert!((loss_consi(&zero, &u, ADV, s).unwrap() - norm).abs() < 1e-12);

        let exact = FluxOperator::Analytic(AnalyticFlux::Godunov {
            flux: PhysicalFlux::Burgers,
        });
        assert_eq!(
            loss_consi(&exact, &u, PhysicalFlux::Burgers, s).unwrap(),
            0.0
        );
    }

    #[test]
    fn total_loss_is_linear_in_lambda() {
        let g = FluxOperator::Learned(toy());
        let b = batch_of(random_states(4, 16, 6));
        let c = ctx(1e-3, Integrator::Euler, ADV);
        let base = total_loss(&g, &b, &c, 0.0).unwrap();
        assert_eq!(base, loss_tm(&g, &b, &c).unwrap());
        let consi = loss_consi(&g, &b.states()[..3], ADV, c.stencil).unwrap();
        let with = total_loss(&g, &b, &c, 0.37).unwrap();
        assert!((with - base - 0.37 * consi).abs() <= 1e-12 * with.abs());
    }

    #[test]
    fn loss_tm_is_roll_invariant() {
        let g = FluxOperator::Learned(toy());
        let states = random_states(4, 16, 7);
        let rolled: Vec<_> = states.iter().map(|s| roll_slice(s, 3)).collect();
        for integrator in [Integrator::Euler, Integrator::SspRk2] {
            let c = ctx(1e-3, integrator, ADV);
            let a = loss_tm(&g, &batch_of(states.clone()), &c).unwrap();
            let b = loss_tm(&g, &batch_of(rolled.clone()), &c).unwrap();
            assert!((a - b).abs() <= 1e-10 * a.max(1e-30));
        }
    }

    #[test]
    fn analytic_losses_agree_with_gradient_path() {
        let p = toy();
        let g = FluxOperator::Learned(p.clone());
        let b = batch_of(random_states(4, 16, 8));
        for integrator in [Integrator::Euler, Integrator::SspRk2] {
            let c = ctx(1e-2, integrator, PhysicalFlux::Burgers);
            let lg = loss_and_grad(&p, &b, &c, 0.01).unwrap();
            let tm = loss_tm(&g, &b, &c).unwrap();
            assert!((lg.loss_tm - tm).abs() <= 1e-12 * tm);
            let total = total_loss(&g, &b, &c, 0.01).unwrap();
            assert!((lg.total - total).abs() <= 1e-12 * total);
        }
    }

    fn check_training_gradient(integrator: Integrator) {
        let mut p = toy();
        p.as_mut_slice().iter_mut().for_each(|v| *v *= 3.0);
        let config = *p.config();
        let b = batch_of(random_states(3, 16, 9));
        let c = ctx(5e-3, integrator, PhysicalFlux::Burgers);
        let f = |x: &[f64]| {
            let p = FnoParams::from_vec(config, x.to_vec()).unwrap();
            vec![loss_and_grad(&p, &b, &c, 0.3).unwrap().total]
        };
        let vjp = |x: &[f64], w: &[f64]| {
            let p = FnoParams::from_vec(config, x.to_vec()).unwrap();
            let lg = loss_and_grad(&p, &b, &c, 0.3).unwrap();
            lg.grads.iter().map(|g| g * w[0]).collect()
        };
        let rep = grad_check(f, vjp, p.as_slice(), 1e-5, 1e-5, 21);
        assert!(rep.passed, "{integrator:?}: {rep:?}");
    }

    #[test]
    fn euler_training_gradient() {
        check_training_gradient(Integrator::Euler);
    }

    #[test]
    fn rk2_training_gradient() {
        check_training_gradient(Integrator::SspRk2);
    }

    fn tiny_dataset() -> Dataset {
        make_dataset(&DatasetSpec {
            equation: Equation::Advection,
            n_funcs: 5,
            nx: 64,
            dt: 1.0 / 64.0,
            n_steps: 16,
            scale: 0.1,
            seed: 1,
            advection_speed: 1.0,
        })
        .unwrap()
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let ds = tiny_dataset();
        let fno = FnoConfig::new(2, 8, 1, 5);
        let cfg = tiny_config(50);
        let a = train(&ds, fno, &cfg, Stencil::default()).unwrap();
        assert_eq!(a.history.len(), 50);
        assert!(a.history.last().unwrap().total < a.history[0].total);
        let b = train(&ds, fno, &cfg, Stencil::default()).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn lambda_changes_the_result() {
        let ds = tiny_dataset();
        let fno = FnoConfig::new(2, 4, 1, 3);
        let with = train(&ds, fno, &tiny_config(2), Stencil::default()).unwrap();
        let cfg0 = TrainConfig {
            lambda: 0.0,
            ..tiny_config(2)
        };
        let without = train(&ds, fno, &cfg0, Stencil::default()).unwrap();
        assert_ne!(with.params, without.params);
        let rk = train_rk(&ds, fno, &tiny_config(1), Stencil::default()).unwrap();
        assert_eq!(rk.history.len(), 1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate(256).is_ok());
        assert!(cfg.validate(100).is_err());
        cfg.lambda = -1.0;
        assert!(cfg.validate(256).is_err());
        let parsed: std::result::Result<TrainConfig, _> =
            serde_json::from_str(r#"{"lr": 0.01, "bogus": 1}"#);
        assert!(parsed.is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"lambda": 0.0}"#).unwrap();
        assert_eq!(parsed.lambda, 0.0);
        assert_eq!(parsed.lr, 1e-3);
    }

    #[test]
    fn divergence_reports_history() {
        let ds = tiny_dataset();
        let huge: Vec<f64> = ds.as_slice().iter().map(|v| v * 1e200).collect();
        let ds = Dataset::new(ds.header().clone(), huge).unwrap();
        let fno = FnoConfig::new(2, 4, 1, 3);
        let cfg = tiny_config(3);
        match train(&ds, fno, &cfg, Stencil::default()) {
            Err(Error::Diverged {
                epoch,
                history,
                last_good,
            }) => {
                assert_eq!(epoch, 0);
                assert!(history.is_empty());
                assert_eq!(*last_good, FnoParams::init(fno, cfg.seed).unwrap());
            }
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|o| o.history.len())
            ),
        }
    }
}
