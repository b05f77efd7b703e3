//! Initial conditions, trajectory datasets, and the `FFNO` dataset file.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, Trajectory};
use crate::schemes::{exact_advection, reference_step, Equation};

pub const DATASET_MAGIC: &[u8; 4] = b"FFNO";
pub const DATASET_VERSION: u32 = 1;

/// Gaussian random field with covariance `exp(-((x - y) / scale)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfSpec {
    pub n: usize,
    pub scale: f64,
    pub seed: u64,
}

/// Circulant-embedding sampler for periodic stationary fields on `n` points.
#[derive(Clone)]
pub struct GrfSampler {
    n: usize,
    sqrt_lambda: Vec<f64>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for GrfSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrfSampler")
            .field("n", &self.n)
            .finish_non_exhaustive()
    }
}

impl GrfSampler {
    pub fn new(n: usize, scale: f64) -> Result<Self> {
        if n < 8 {
            return Err(invalid(format!("GRF needs at least 8 points, got {n}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid(format!("GRF scale must be positive, got {scale}")));
        }
        let dx = 1.0 / n as f64;
        let mut row: Vec<Complex64> = (0..n)
            .map(|j| {
                let r = j.min(n - j) as f64 * dx / scale;
                Complex64::new((-r * r).exp(), 0.0)
            })
            .collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut row);
        let sqrt_lambda = row.iter().map(|c| c.re.max(0.0).sqrt()).collect();
        Ok(Self {
            n,
            sqrt_lambda,
            ifft: planner.plan_fft_inverse(n),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Draw number `stream` of the sequence keyed by `seed`.
    pub fn sample(&self, seed: u64, stream: u64) -> GridFunction {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let n = self.n;
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let mut xi = vec![Complex64::new(0.0, 0.0); n];
        xi[0] = Complex64::new(normal(), 0.0);
        let half = n / 2;
        for k in 1..n.div_ceil(2) {
            let z = Complex64::new(normal(), normal()) / std::f64::consts::SQRT_2;
            xi[k] = z;
            xi[n - k] = z.conj();
        }
        if n.is_multiple_of(2) {
            xi[half] = Complex64::new(normal(), 0.0);
        }
        for (c, s) in xi.iter_mut().zip(&self.sqrt_lambda) {
            *c *= s;
        }
        self.ifft.process(&mut xi);
        let norm = 1.0 / (n as f64).sqrt();
        GridFunction::new(xi.iter().map(|c| c.re * norm).collect())
            .expect("sampled field is finite")
    }
}

pub fn grf_sample(spec: GrfSpec) -> Result<GridFunction> {
    Ok(GrfSampler::new(spec.n, spec.scale)?.sample(spec.seed, 0))
}

/// Hat of height 1 supported on `[0.25, 0.75]`.
pub fn triangular_pulse(n: usize) -> Result<GridFunction> {
    if n < 8 {
        return Err(invalid(format!("pulse needs at least 8 points, got {n}")));
    }
    GridFunction::from_fn(n, |x| (1.0 - 4.0 * (x - 0.5).abs()).max(0.0))
}

/// `ul` on `[0, x0)` and `ur` on `[x0, 1)`.
pub fn step_function(n: usize, ul: f64, ur: f64, x0: f64) -> Result<GridFunction> {
    if !(x0 > 0.0 && x0 < 1.0) {
        return Err(invalid(format!(
            "step location must lie in (0, 1), got {x0}"
        )));
    }
    GridFunction::from_fn(n, |x| if x < x0 { ul } else { ur })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Exact,
    Reference,
    /// Rollout of a flux operator.
    Rollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub equation: Equation,
    pub n_funcs: usize,
    pub n_steps: usize,
    pub nx: usize,
    pub dt: f64,
    pub generator: Generator,
    pub seed: u64,
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advection_speed: Option<f64>,
    /// Individual step sizes when they are not all equal to `dt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dts: Option<Vec<f64>>,
    /// Set when a rollout stopped early at the blow-up guard.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl DatasetHeader {
    pub fn values(&self) -> usize {
        self.n_funcs * (self.n_steps + 1) * self.nx
    }

    pub fn advection_speed(&self) -> f64 {
        self.advection_speed.unwrap_or(1.0)
    }
}

/// What to generate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub equation: Equation,
    pub n_funcs: usize,
    pub nx: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub scale: f64,
    pub seed: u64,
    /// Transport speed for advection; ignored for Burgers.
    pub advection_speed: f64,
}

/// Trajectories stored row-major as `[n_funcs, n_steps + 1, nx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    data: Vec<f64>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, data: Vec<f64>) -> Result<Self> {
        if data.len() != header.values() {
            return Err(Error::Shape(format!(
                "header describes {} values, payload has {}",
                header.values(),
                data.len()
            )));
        }
        if header.nx < crate::grid::MIN_CELLS || header.n_funcs == 0 {
            return Err(invalid("dataset needs at least one function on 4 cells"));
        }
        if !(header.dt > 0.0 && header.dt.is_finite()) {
            return Err(invalid(format!(
                "dataset dt must be positive, got {}",
                header.dt
            )));
        }
        if let Some(dts) = &header.dts {
            if dts.len() != header.n_steps || dts.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
                return Err(invalid("step sizes must be positive, one per step"));
            }
        }
        Ok(Self { header, data })
    }

    /// Single-trajectory dataset holding a rollout; `dt` is the nominal step.
    pub fn from_trajectory(
        traj: &Trajectory,
        equation: Equation,
        advection_speed: Option<f64>,
        dt: f64,
        truncated: bool,
    ) -> Result<Self> {
        let uniform = traj.dts().iter().all(|&d| d == dt);
        let header = DatasetHeader {
            version: DATASET_VERSION,
            equation,
            n_funcs: 1,
            n_steps: traj.n_steps(),
            nx: traj.nx(),
            dt,
            generator: Generator::Rollout,
            seed: 0,
            scale: 0.0,
            advection_speed,
            dts: (!uniform).then(|| traj.dts().to_vec()),
            truncated,
        };
        let data = traj
            .states()
            .iter()
            .flat_map(|s| s.values().iter().copied())
            .collect();
        Self::new(header, data)
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn n_funcs(&self) -> usize {
        self.header.n_funcs
    }

    pub fn n_steps(&self) -> usize {
        self.header.n_steps
    }

    pub fn nx(&self) -> usize {
        self.header.nx
    }

    pub fn dt(&self) -> f64 {
        self.header.dt
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.header.nx as f64
    }

    /// State `k` of trajectory `i`.
    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let nx = self.header.nx;
        let at = (i * (self.header.n_steps + 1) + k) * nx;
        &self.data[at..at + nx]
    }

    pub fn grid_state(&self, i: usize, k: usize) -> GridFunction {
        GridFunction::new(self.state(i, k).to_vec()).expect("dataset values are validated")
    }

    /// Step sizes of every trajectory.
    pub fn dts(&self) -> Vec<f64> {
        self.header
            .dts
            .clone()
            .unwrap_or_else(|| vec![self.header.dt; self.header.n_steps])
    }

    /// Time of state `k`.
    pub fn time(&self, k: usize) -> f64 {
        match &self.header.dts {
            Some(dts) => dts[..k].iter().sum(),
            None => k as f64 * self.header.dt,
        }
    }

    pub fn trajectory(&self, i: usize) -> Trajectory {
        let states = (0..=self.header.n_steps)
            .map(|k| self.grid_state(i, k))
            .collect();
        Trajectory::new(states, self.dts()).expect("dataset step sizes are validated")
    }

    /// Keeps only the listed functions, in order.
    pub fn select(&self, funcs: &[usize]) -> Result<Dataset> {
        let per = (self.header.n_steps + 1) * self.header.nx;
        let mut data = Vec::with_capacity(funcs.len() * per);
        for &i in funcs {
            if i >= self.header.n_funcs {
                return Err(invalid(format!("function {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let header = DatasetHeader {
            n_funcs: funcs.len(),
            ..self.header.clone()
        };
        Dataset::new(header, data)
    }
}

/// Generates GRF-initialised trajectories: exact translation for advection,
/// the reference solver for Burgers. Trajectory `i` uses RNG stream `i`, so
/// the output does not depend on thread count.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.n_funcs == 0 {
        return Err(invalid("n_funcs must be positive"));
    }
    if !(spec.dt > 0.0 && spec.dt.is_finite()) {
        return Err(invalid(format!("dt must be positive, got {}", spec.dt)));
    }
    let sampler = GrfSampler::new(spec.nx, spec.scale)?;
    let flux = spec.equation.flux(spec.advection_speed);
    let trajectories: Vec<Vec<f64>> = (0..spec.n_funcs)
        .into_par_iter()
        .map(|i| {
            let u0 = sampler.sample(spec.seed, i as u64);
            let mut out = Vec::with_capacity((spec.n_steps + 1) * spec.nx);
            out.extend_from_slice(u0.values());
            match spec.equation {
                Equation::Advection => {
                    for k in 1..=spec.n_steps {
                        let u = exact_advection(&u0, spec.advection_speed, k as f64 * spec.dt);
                        out.extend_from_slice(u.values());
                    }
                }
                Equation::Burgers => {
                    let mut u = u0;
                    for k in 1..=spec.n_steps {
                        u = reference_step(&u, flux, spec.dt).map_err(|e| match e {
                            Error::Cfl { courant, limit, .. } => Error::Cfl {
                                step: k,
                                courant,
                                limit,
                            },
                            other => other,
                        })?;
                        out.extend_from_slice(u.values());
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let header = DatasetHeader {
        version: DATASET_VERSION,
        equation: spec.equation,
        n_funcs: spec.n_funcs,
        n_steps: spec.n_steps,
        nx: spec.nx,
        dt: spec.dt,
        generator: match spec.equation {
            Equation::Advection => Generator::Exact,
            Equation::Burgers => Generator::Reference,
        },
        seed: spec.seed,
        scale: spec.scale,
        advection_speed: (spec.equation == Equation::Advection).then_some(spec.advection_speed),
        dts: None,
        truncated: false,
    };
    Dataset::new(header, trajectories.concat())
}

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&ds.header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * ds.data.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &ds.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Splits `magic | u32 LE len | JSON header | payload`.
pub(crate) fn split_container<'a, H: DeserializeOwned>(
    bytes: &'a [u8],
    magic: &[u8; 4],
) -> Result<(H, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "file is {} bytes, too short for a header",
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let Some(header_bytes) = bytes.get(8..8 + len) else {
        return Err(Error::Format("header runs past the end of the file".into()));
    };
    let header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Format(format!("corrupt header: {e}")))?;
    Ok((header, &bytes[8 + len..]))
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let (header, payload): (DatasetHeader, &[u8]) = split_container(bytes, DATASET_MAGIC)?;
    if header.version != DATASET_VERSION {
        return Err(Error::Version(header.version));
    }
    let expected = 8 * header.values();
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Dataset::new(header, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = dataset_to_bytes(ds)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    dataset_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{mass, total_variation};

    fn small_spec(equation: Equation) -> DatasetSpec {
        DatasetSpec {
            equation,
            n_funcs: 3,
            nx: 32,
            dt: 1.0 / 32.0,
            n_steps: 4,
            scale: 0.1,
            seed: 11,
            advection_speed: 1.0,
        }
    }

    #[test]
    fn grf_is_deterministic() {
        let spec = GrfSpec {
            n: 64,
            scale: 0.1,
            seed: 5,
        };
        assert_eq!(grf_sample(spec).unwrap(), grf_sample(spec).unwrap());
        let other = GrfSpec { seed: 6, ..spec };
        assert_ne!(grf_sample(spec).unwrap(), grf_sample(other).unwrap());
        assert!(GrfSampler::new(4, 0.1).is_err());
        assert!(GrfSampler::new(16, 0.0).is_err());
    }

    #[test]
    fn grf_streams_differ() {
        let s = GrfSampler::new(64, 0.1).unwrap();
        assert_ne!(s.sample(1, 0), s.sample(1, 1));
        assert_eq!(s.sample(1, 3), s.sample(1, 3));
    }

    #[test]
    fn grf_energy_is_band_dominated() {
        let n = 256;
        let s = GrfSampler::new(n, 0.1).unwrap();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let (mut low, mut total) = (0.0, 0.0);
        for i in 0..1000 {
            let mut buf: Vec<Complex64> = s
                .sample(2, i)
                .values()
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect();
            fft.process(&mut buf);
            for (m, c) in buf.iter().enumerate() {
                let k = m.min(n - m);
                total += c.norm_sqr();
                if k <= 20 {
                    low += c.norm_sqr();
                }
            }
        }
        assert!(low / total >= 0.99, "{}", low / total);
    }

    #[test]
    fn pulse_examples() {
        let p = triangular_pulse(64).unwrap();
        assert_eq!(p.values()[32], 1.0);
        assert_eq!(p.values()[0], 0.0);
        assert!((total_variation(&p) - 2.0).abs() < 1e-12);
        assert!(triangular_pulse(4).is_err());
    }

    #[test]
    fn step_examples() {
        let s = step_function(8, 1.0, 0.0, 0.5).unwrap();
        assert_eq!(s.values(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let s = step_function(64, 2.0, -1.0, 0.25).unwrap();
        assert!((mass(&s) - (2.0 * 0.25 - 0.75)).abs() < 1e-12);
        let c = step_function(16, 0.3, 0.3, 0.7).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.3));
        assert!(step_function(16, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn advection_dataset_is_rolled() {
        let ds = make_dataset(&small_spec(Equation::Advection)).unwrap();
        assert_eq!(ds.as_slice().len(), 3 * 5 * 32);
        assert_eq!(ds.header().generator, Generator::Exact);
        for i in 0..3 {
            for k in 1..=4 {
                let expected = crate::grid::roll_slice(ds.state(i, 0), k as isize);
                assert_eq!(ds.state(i, k), expected.as_slice());
            }
        }
    }

    #[test]
    fn burgers_dataset_conserves_mass() {
        let spec = DatasetSpec {
            dt: 1e-3,
            ..small_spec(Equation::Burgers)
        };
        let ds = make_dataset(&spec).unwrap();
        for i in 0..3 {
            let m0 = mass(&ds.grid_state(i, 0));
            let m4 = mass(&ds.grid_state(i, 4));
            assert!((m0 - m4).abs() < 1e-12);
        }
    }

    #[test]
    fn burgers_cfl_abort_names_step() {
        let spec = DatasetSpec {
            dt: 0.2,
            ..small_spec(Equation::Burgers)
        };
        match make_dataset(&spec) {
            Err(Error::Cfl { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let ds = make_dataset(&small_spec(Equation::Advection)).unwrap();
        let bytes = dataset_to_bytes(&ds).unwrap();
        assert_eq!(dataset_from_bytes(&bytes).unwrap(), ds);
        assert_eq!(
            dataset_to_bytes(&make_dataset(&small_spec(Equation::Advection)).unwrap()).unwrap(),
            bytes
        );
        match dataset_from_bytes(&bytes[..bytes.len() - 16]) {
            Err(Error::LengthMismatch { expected, actual }) => {
                assert_eq!(expected, 8 * 3 * 5 * 32);
                assert_eq!(actual, expected - 16);
            }
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[1] = b'Z';
        assert!(matches!(dataset_from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_rejects_unknown_version() {
        let ds = make_dataset(&small_spec(Equation::Advection)).unwrap();
        let mut header = ds.header().clone();
        header.version = 9;
        let json = serde_json::to_vec(&header).unwrap();
        let mut bytes = DATASET_MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        assert!(matches!(dataset_from_bytes(&bytes), Err(Error::Version(9))));
    }

    #[test]
    fn select_keeps_order() {
        let ds = make_dataset(&small_spec(Equation::Advection)).unwrap();
        let sub = ds.select(&[2, 0]).unwrap();
        assert_eq!(sub.n_funcs(), 2);
        assert_eq!(sub.state(0, 3), ds.state(2, 3));
        assert_eq!(sub.state(1, 1), ds.state(0, 1));
        assert!(ds.select(&[3]).is_err());
    }

    #[test]
    fn rollout_file_keeps_uneven_steps_and_flag() {
        let ds = make_dataset(&small_spec(Equation::Advection)).unwrap();
        let mut traj = Trajectory::initial(ds.grid_state(0, 0));
        traj.push(ds.grid_state(0, 1), 0.5);
        traj.push(ds.grid_state(0, 2), 0.25);
        let out =
            Dataset::from_trajectory(&traj, Equation::Advection, Some(1.0), 0.5, true).unwrap();
        let back = dataset_from_bytes(&dataset_to_bytes(&out).unwrap()).unwrap();
        assert!(back.header().truncated);
        assert_eq!(back.header().generator, Generator::Rollout);
        assert_eq!(back.trajectory(0), traj);
        assert_eq!(back.time(2), 0.75);

        let even =
            Dataset::from_trajectory(&ds.trajectory(0), Equation::Advection, None, ds.dt(), false)
                .unwrap();
        let json = String::from_utf8_lossy(&dataset_to_bytes(&even).unwrap()[8..]).into_owned();
        assert!(!json.contains("dts") && !json.contains("truncated"));
    }
}
