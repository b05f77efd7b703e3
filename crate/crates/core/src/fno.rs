//! Fourier neural operator with pointwise-convolution Fourier layers.
//!
//! Architecture: affine lift, `depth` Fourier layers
//! `v <- gelu(conv(v) + irdft(R . rdft(v)))`, then affine -> gelu -> affine.
//! All trainable tensors live in one flat buffer whose order is the tensor
//! manifest; gradients and optimizer moments share that layout.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, ArrayView1, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{
    affine_pointwise, affine_pointwise_backward, conv1, conv1_backward, gelu, gelu_with_derivative,
    spectral_apply, spectral_apply_backward, BatchedField, DftTable, SpectralCoeffs,
    SpectralWeights,
};
use crate::error::{invalid, Error, Result};
use crate::grid::Stencil;
use crate::schemes::{Equation, Integrator};

pub const MODEL_MAGIC: &[u8; 4] = b"FFNM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub kmax: usize,
    pub conv_kernel: usize,
    pub lift_layers: usize,
    pub proj_layers: usize,
    pub proj_hidden: usize,
}

impl FnoConfig {
    /// Width 64, one Fourier layer, five modes, pointwise convolution.
    pub fn standard(in_channels: usize) -> Self {
        Self::new(in_channels, 64, 1, 5)
    }

    pub fn new(in_channels: usize, width: usize, depth: usize, kmax: usize) -> Self {
        Self {
            in_channels,
            out_channels: 1,
            width,
            depth,
            kmax,
            conv_kernel: 1,
            lift_layers: 1,
            proj_layers: 2,
            proj_hidden: width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("width", self.width),
            ("depth", self.depth),
            ("conv_kernel", self.conv_kernel),
            ("proj_hidden", self.proj_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(invalid(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.lift_layers != 1 || self.proj_layers != 2 {
            return Err(invalid(
                "only a one-layer lift and a two-layer projection are supported",
            ));
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.kmax + 1
    }

    /// Smallest grid the spectral layers accept.
    pub fn min_grid(&self) -> usize {
        2 * self.kmax + 2
    }

    pub fn manifest(&self) -> Vec<TensorSpec> {
        let (w, h) = (self.width, self.proj_hidden);
        let mut m = vec![
            TensorSpec::real("lift.weight", &[self.in_channels, w]),
            TensorSpec::real("lift.bias", &[w]),
        ];
        for l in 0..self.depth {
            m.push(TensorSpec::complex(
                &format!("layers.{l}.spectral"),
                &[self.modes(), w, w],
            ));
            m.push(TensorSpec::real(
                &format!("layers.{l}.conv"),
                &[self.conv_kernel, w, w],
            ));
        }
        m.push(TensorSpec::real("proj1.weight", &[w, h]));
        m.push(TensorSpec::real("proj1.bias", &[h]));
        m.push(TensorSpec::real("proj2.weight", &[h, self.out_channels]));
        m.push(TensorSpec::real("proj2.bias", &[self.out_channels]));
        m
    }

    pub fn num_reals(&self) -> usize {
        self.manifest().iter().map(TensorSpec::reals).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    C128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl TensorSpec {
    fn real(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: DType::F64,
        }
    }

    fn complex(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: DType::C128,
        }
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of `f64` slots, complex entries taking two.
    pub fn reals(&self) -> usize {
        match self.dtype {
            DType::F64 => self.elements(),
            DType::C128 => 2 * self.elements(),
        }
    }
}

/// Offsets of each tensor inside the flat parameter buffer.
#[derive(Debug, Clone)]
struct Slots {
    lift_w: usize,
    lift_b: usize,
    layers: Vec<(usize, usize)>,
    proj1_w: usize,
    proj1_b: usize,
    proj2_w: usize,
    proj2_b: usize,
}

impl Slots {
    fn new(config: &FnoConfig) -> Self {
        let mut offsets = Vec::new();
        let mut at = 0;
        for t in config.manifest() {
            offsets.push(at);
            at += t.reals();
        }
        let tail = 2 + 2 * config.depth;
        Self {
            lift_w: offsets[0],
            lift_b: offsets[1],
            layers: (0..config.depth)
                .map(|l| (offsets[2 + 2 * l], offsets[3 + 2 * l]))
                .collect(),
            proj1_w: offsets[tail],
            proj1_b: offsets[tail + 1],
            proj2_w: offsets[tail + 2],
            proj2_b: offsets[tail + 3],
        }
    }
}

/// Trainable tensors of an FNO, flattened in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct FnoParams {
    config: FnoConfig,
    data: Vec<f64>,
}

impl FnoParams {
    pub fn zeros(config: FnoConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            data: vec![0.0; config.num_reals()],
            config,
        })
    }

    pub fn from_vec(config: FnoConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if data.len() != config.num_reals() {
            return Err(Error::Shape(format!(
                "config needs {} parameters, got {}",
                config.num_reals(),
                data.len()
            )));
        }
        Ok(Self { config, data })
    }

    /// Fan-in uniform init for real tensors; spectral weights
    /// `U[0,1) / width^2` in both real and imaginary parts; zero biases.
    pub fn init(config: FnoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(config.num_reals());
        for t in config.manifest() {
            let n = t.reals();
            if t.name.ends_with(".bias") {
                data.extend(std::iter::repeat_n(0.0, n));
            } else if t.dtype == DType::C128 {
                let scale = 1.0 / (config.width * config.width) as f64;
                data.extend((0..n).map(|_| scale * rng.random::<f64>()));
            } else {
                let fan_in: usize = t.shape[..t.shape.len() - 1].iter().product();
                let a = (1.0 / fan_in as f64).sqrt();
                data.extend((0..n).map(|_| rng.random_range(-a..a)));
            }
        }
        Ok(Self { config, data })
    }

    pub fn config(&self) -> &FnoConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Name of the tensor that owns flat index `idx`.
    pub fn tensor_name(&self, idx: usize) -> Option<String> {
        let mut at = 0;
        for t in self.config.manifest() {
            if idx < at + t.reals() {
                return Some(t.name);
            }
            at += t.reals();
        }
        None
    }

    /// Flat slice of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let mut at = 0;
        for t in self.config.manifest() {
            if t.name == name {
                return Some(&self.data[at..at + t.reals()]);
            }
            at += t.reals();
        }
        None
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let mut at = 0;
        for t in self.config.manifest() {
            if t.name == name {
                return Some(&mut self.data[at..at + t.reals()]);
            }
            at += t.reals();
        }
        None
    }

    fn view2(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.data[off..off + rows * cols])
            .expect("slot sized by manifest")
    }

    fn view1(&self, off: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[off..off + len])
    }

    fn conv_view(&self, off: usize) -> ArrayView3<'_, f64> {
        let c = &self.config;
        let len = c.conv_kernel * c.width * c.width;
        ArrayView3::from_shape(
            (c.conv_kernel, c.width, c.width),
            &self.data[off..off + len],
        )
        .expect("slot sized by manifest")
    }

    fn spectral_view(&self, off: usize) -> SpectralWeights<'_> {
        let c = &self.config;
        let len = 2 * c.modes() * c.width * c.width;
        SpectralWeights::new(&self.data[off..off + len], c.modes(), c.width, c.width)
            .expect("slot sized by manifest")
    }

    fn check_input(&self, a: &BatchedField) -> Result<()> {
        let (_, n, ch) = a.dim();
        if ch != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model takes {} channels, input has {ch}",
                self.config.in_channels
            )));
        }
        if n < self.config.min_grid() {
            return Err(Error::Shape(format!(
                "grid of {n} points is too small for kmax {} (need {})",
                self.config.kmax,
                self.config.min_grid()
            )));
        }
        if self.config.conv_kernel > n {
            return Err(Error::Shape(format!(
                "conv kernel {} exceeds grid of {n}",
                self.config.conv_kernel
            )));
        }
        Ok(())
    }

    /// Applies the network to `a: [B, N, in_channels]`.
    pub fn forward(&self, a: &BatchedField) -> Result<BatchedField> {
        self.check_input(a)?;
        let c = &self.config;
        let s = Slots::new(c);
        let table = DftTable::new(a.dim().1, c.kmax)?;
        let mut v = affine_pointwise(
            self.view2(s.lift_w, c.in_channels, c.width),
            self.view1(s.lift_b, c.width),
            a,
        )?;
        for &(spec, conv) in &s.layers {
            let coeffs = table.forward(&v)?;
            let mixed = spectral_apply(self.spectral_view(spec), &coeffs)?;
            let z = conv1(self.conv_view(conv), &v)? + table.inverse(&mixed)?;
            v = gelu(&z);
        }
        let h = gelu(&affine_pointwise(
            self.view2(s.proj1_w, c.width, c.proj_hidden),
            self.view1(s.proj1_b, c.proj_hidden),
            &v,
        )?);
        affine_pointwise(
            self.view2(s.proj2_w, c.proj_hidden, c.out_channels),
            self.view1(s.proj2_b, c.out_channels),
            &h,
        )
    }

    /// Forward pass that keeps what [`FnoParams::backward`] needs.
    pub fn forward_cached(&self, a: &BatchedField) -> Result<(BatchedField, ForwardCache)> {
        self.check_input(a)?;
        let c = &self.config;
        let s = Slots::new(c);
        let table = DftTable::new(a.dim().1, c.kmax)?;
        let mut v = affine_pointwise(
            self.view2(s.lift_w, c.in_channels, c.width),
            self.view1(s.lift_b, c.width),
            a,
        )?;
        let mut layers = Vec::with_capacity(c.depth);
        for &(spec, conv) in &s.layers {
            let coeffs = table.forward(&v)?;
            let mixed = spectral_apply(self.spectral_view(spec), &coeffs)?;
            let z = conv1(self.conv_view(conv), &v)? + table.inverse(&mixed)?;
            let (next, dgelu) = gelu_with_derivative(&z);
            layers.push(LayerCache {
                input: v,
                coeffs,
                dgelu,
            });
            v = next;
        }
        let (h, dh) = gelu_with_derivative(&affine_pointwise(
            self.view2(s.proj1_w, c.width, c.proj_hidden),
            self.view1(s.proj1_b, c.proj_hidden),
            &v,
        )?);
        let out = affine_pointwise(
            self.view2(s.proj2_w, c.proj_hidden, c.out_channels),
            self.view1(s.proj2_b, c.out_channels),
            &h,
        )?;
        Ok((
            out,
            ForwardCache {
                input: a.clone(),
                table,
                layers,
                last: v,
                hidden: h,
                dhidden: dh,
            },
        ))
    }

    /// Reverse pass: accumulates parameter cotangents into `grads` (same
    /// layout as the parameters) and returns the input cotangent when asked.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &BatchedField,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<BatchedField> {
        let c = &self.config;
        let s = Slots::new(c);
        assert_eq!(grads.len(), self.data.len(), "gradient buffer layout");

        let q2 = self.view2(s.proj2_w, c.proj_hidden, c.out_channels);
        let (gw, gb, gh) = affine_pointwise_backward(q2, &cache.hidden, grad_out);
        add_into(&mut grads[s.proj2_w..], gw.iter());
        add_into(&mut grads[s.proj2_b..], gb.iter());

        let ghp = gh * &cache.dhidden;
        let q1 = self.view2(s.proj1_w, c.width, c.proj_hidden);
        let (gw, gb, mut gv) = affine_pointwise_backward(q1, &cache.last, &ghp);
        add_into(&mut grads[s.proj1_w..], gw.iter());
        add_into(&mut grads[s.proj1_b..], gb.iter());

        for (layer, &(spec, conv)) in cache.layers.iter().zip(&s.layers).rev() {
            let gz = gv * &layer.dgelu;
            let (gk, gv_conv) = conv1_backward(self.conv_view(conv), &layer.input, &gz);
            add_into(&mut grads[conv..], gk.iter());
            let gmixed = cache.table.inverse_backward(&gz);
            let (gr, gcoeffs) =
                spectral_apply_backward(self.spectral_view(spec), &layer.coeffs, &gmixed);
            add_into(&mut grads[spec..], gr.iter());
            gv = gv_conv + cache.table.forward_backward(&gcoeffs);
        }

        let p = self.view2(s.lift_w, c.in_channels, c.width);
        let (gw, gb, ga) = affine_pointwise_backward(p, &cache.input, &gv);
        add_into(&mut grads[s.lift_w..], gw.iter());
        add_into(&mut grads[s.lift_b..], gb.iter());
        want_input.then_some(ga)
    }
}

fn add_into<'a>(dst: &mut [f64], src: impl Iterator<Item = &'a f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Activations saved by [`FnoParams::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: BatchedField,
    table: DftTable,
    layers: Vec<LayerCache>,
    last: BatchedField,
    hidden: BatchedField,
    dhidden: BatchedField,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: BatchedField,
    coeffs: SpectralCoeffs,
    dgelu: BatchedField,
}

/// Mixed norm: `p`-norm over every index but the last, then `q`-norm over the
/// last (output) index. `abs` is row-major with the output index fastest.
fn mixed_norm(abs: &[f64], n_out: usize, p: f64, q: f64) -> f64 {
    let mut inner = vec![0.0f64; n_out];
    for (idx, &v) in abs.iter().enumerate() {
        let o = idx % n_out;
        if p.is_infinite() {
            inner[o] = inner[o].max(v);
        } else {
            inner[o] += v.powf(p);
        }
    }
    if !p.is_infinite() {
        inner.iter_mut().for_each(|s| *s = s.powf(1.0 / p));
    }
    if q.is_infinite() {
        inner.iter().fold(0.0, |m, &v| m.max(v))
    } else {
        inner.iter().map(|v| v.powf(q)).sum::<f64>().powf(1.0 / q)
    }
}

/// Capacity `gamma_{p,q} = |P| |Q| prod_l (|K_l| c^{1/p*} + m^{1/p*} |R_l|)`,
/// where `m = kmax + 1` retained modes, `c` the conv kernel size,
/// `1/p* = 1 - 1/p`, and `|Q| = |Q1| |Q2|`. Biases are not part of the norm.
pub fn capacity_gamma(params: &FnoParams, p: f64, q: f64) -> Result<f64> {
    if !(1.0..=2.0).contains(&p) {
        return Err(invalid(format!("p must lie in [1, 2], got {p}")));
    }
    if q.is_nan() || q < 1.0 {
        return Err(invalid(format!("q must be at least 1, got {q}")));
    }
    let c = params.config();
    let s = Slots::new(c);
    let d = params.as_slice();
    let abs = |off: usize, len: usize| {
        d[off..off + len]
            .iter()
            .map(|v| v.abs())
            .collect::<Vec<_>>()
    };
    let inv_pstar = 1.0 - 1.0 / p;

    let norm_p = mixed_norm(&abs(s.lift_w, c.in_channels * c.width), c.width, p, q);
    let norm_q1 = mixed_norm(
        &abs(s.proj1_w, c.width * c.proj_hidden),
        c.proj_hidden,
        p,
        q,
    );
    let norm_q2 = mixed_norm(
        &abs(s.proj2_w, c.proj_hidden * c.out_channels),
        c.out_channels,
        p,
        q,
    );
    let mut gamma = norm_p * norm_q1 * norm_q2;
    for &(spec, conv) in &s.layers {
        let k = mixed_norm(&abs(conv, c.conv_kernel * c.width * c.width), c.width, p, q);
        let moduli: Vec<f64> = d[spec..spec + 2 * c.modes() * c.width * c.width]
            .chunks_exact(2)
            .map(|z| z[0].hypot(z[1]))
            .collect();
        let r = mixed_norm(&moduli, c.width, p, q);
        gamma *=
            k * (c.conv_kernel as f64).powf(inv_pstar) + (c.modes() as f64).powf(inv_pstar) * r;
    }
    Ok(gamma)
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub equation: Equation,
    pub advection_speed: f64,
    pub stencil: Stencil,
    pub dt: f64,
    pub nx: usize,
    pub lambda: f64,
    pub integrator: Integrator,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    version: u32,
    in_channels: usize,
    out_channels: usize,
    width: usize,
    depth: usize,
    kmax: usize,
    conv_kernel: usize,
    lift_layers: usize,
    proj_layers: usize,
    proj_hidden: usize,
    tensors: Vec<TensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<ModelMeta>,
}

impl ModelHeader {
    fn config(&self) -> FnoConfig {
        FnoConfig {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            width: self.width,
            depth: self.depth,
            kmax: self.kmax,
            conv_kernel: self.conv_kernel,
            lift_layers: self.lift_layers,
            proj_layers: self.proj_layers,
            proj_hidden: self.proj_hidden,
        }
    }
}

/// Serializes to the `FFNM` container: magic, u32 LE header length, JSON
/// header, then little-endian `f64` payload in manifest order.
pub fn to_bytes(params: &FnoParams, meta: Option<&ModelMeta>) -> Result<Vec<u8>> {
    let c = params.config;
    let header = ModelHeader {
        version: MODEL_VERSION,
        in_channels: c.in_channels,
        out_channels: c.out_channels,
        width: c.width,
        depth: c.depth,
        kmax: c.kmax,
        conv_kernel: c.conv_kernel,
        lift_layers: c.lift_layers,
        proj_layers: c.proj_layers,
        proj_hidden: c.proj_hidden,
        tensors: c.manifest(),
        meta: meta.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * params.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(FnoParams, Option<ModelMeta>)> {
    let (header, payload): (ModelHeader, &[u8]) = crate::data::split_container(bytes, MODEL_MAGIC)?;
    if header.version != MODEL_VERSION {
        return Err(Error::Version(header.version));
    }
    let config = header.config();
    config
        .validate()
        .map_err(|e| Error::Format(format!("bad model config: {e}")))?;
    if header.tensors != config.manifest() {
        return Err(Error::Format(
            "tensor manifest does not match the declared architecture".into(),
        ));
    }
    let expected = 8 * config.num_reals();
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
    Ok((FnoParams::from_vec(config, data)?, header.meta))
}

pub fn save(params: &FnoParams, meta: Option<&ModelMeta>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(params, meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<FnoParams> {
    Ok(load_with_meta(path)?.0)
}

pub fn load_with_meta(path: impl AsRef<Path>) -> Result<(FnoParams, Option<ModelMeta>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Wraps a single `[N, C]` row-major buffer as a batch of one.
pub fn batch_of_one(values: &[f64], n: usize, channels: usize) -> BatchedField {
    Array3::from_shape_vec((1, n, channels), values.to_vec()).expect("caller passes N*C values")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::grad_check;

    fn toy_config() -> FnoConfig {
        FnoConfig::new(2, 4, 1, 3)
    }

    fn random_input(b: usize, n: usize, c: usize, seed: u64) -> BatchedField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((b, n, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn manifest_layout() {
        let c = FnoConfig::new(2, 4, 2, 3);
        let names: Vec<_> = c.manifest().into_iter().map(|t| t.name).collect();
        assert_eq!(
            names,
            [
                "lift.weight",
                "lift.bias",
                "layers.0.spectral",
                "layers.0.conv",
                "layers.1.spectral",
                "layers.1.conv",
                "proj1.weight",
                "proj1.bias",
                "proj2.weight",
                "proj2.bias"
            ]
        );
        assert_eq!(
            c.num_reals(),
            8 + 4 + 2 * (2 * 4 * 16 + 16) + 16 + 4 + 4 + 1
        );
    }

    #[test]
    fn init_is_deterministic() {
        let a = FnoParams::init(toy_config(), 7).unwrap();
        let b = FnoParams::init(toy_config(), 7).unwrap();
        assert_eq!(a, b);
        let c = FnoParams::init(toy_config(), 8).unwrap();
        assert_ne!(a, c);
        assert!(a.tensor("lift.bias").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_model_has_sane_scale() {
        let params = FnoParams::init(FnoConfig::standard(2), 0).unwrap();
        let a = Array3::from_elem((1, 256, 2), 1.0);
        let out = params.forward(&a).unwrap();
        assert!(out.iter().all(|v| v.abs() <= 10.0));
    }

    #[test]
    fn zero_model_outputs_zero() {
        let params = FnoParams::zeros(toy_config()).unwrap();
        let out = params.forward(&random_input(2, 16, 2, 1)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standard_sized_shapes_and_resolutions() {
        let params = FnoParams::init(FnoConfig::standard(2), 1).unwrap();
        assert_eq!(
            params.forward(&random_input(2, 256, 2, 2)).unwrap().dim(),
            (2, 256, 1)
        );
        assert_eq!(
            params.forward(&random_input(1, 128, 2, 3)).unwrap().dim(),
            (1, 128, 1)
        );
        assert_eq!(
            params.forward(&random_input(1, 512, 2, 4)).unwrap().dim(),
            (1, 512, 1)
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = FnoParams::init(toy_config(), 1).unwrap();
        assert!(params.forward(&random_input(1, 16, 3, 1)).is_err());
        assert!(params.forward(&random_input(1, 6, 2, 1)).is_err());
        let mut bad = toy_config();
        bad.conv_kernel = 2;
        assert!(FnoParams::init(bad, 0).is_err());
    }

    #[test]
    fn band_limited_inputs_agree_across_resolutions() {
        let params = FnoParams::init(FnoConfig::new(2, 8, 2, 5), 3).unwrap();
        let field = |n: usize| {
            Array3::from_shape_fn((1, n, 2), |(_, j, c)| {
                let x = j as f64 / n as f64;
                let tau = 2.0 * std::f64::consts::PI;
                if c == 0 {
                    0.3 + (tau * x).sin() - 0.4 * (3.0 * tau * x).cos()
                } else {
                    0.5 * (5.0 * tau * x).sin() + 0.2 * (2.0 * tau * x).cos()
                }
            })
        };
        let coarse = params.forward(&field(128)).unwrap();
        let fine = params.forward(&field(256)).unwrap();
        for j in 0..128 {
            assert!((coarse[[0, j, 0]] - fine[[0, 2 * j, 0]]).abs() <= 1e-6);
        }
    }

    #[test]
    fn end_to_end_gradient() {
        let mut config = FnoConfig::new(2, 4, 2, 3);
        config.conv_kernel = 3;
        let base = FnoParams::init(config, 5).unwrap();
        let np = base.len();
        let (b, n) = (2, 16);
        let mut x = base.as_slice().to_vec();
        // spectral weights are tiny at init; inflate them so the check bites
        for v in &mut x {
            *v *= 3.0;
        }
        x.extend(random_input(b, n, 2, 9).iter());
        let split = |x: &[f64]| {
            (
                FnoParams::from_vec(config, x[..np].to_vec()).unwrap(),
                Array3::from_shape_vec((b, n, 2), x[np..].to_vec()).unwrap(),
            )
        };
        let f = |x: &[f64]| {
            let (p, a) = split(x);
            p.forward(&a).unwrap().into_raw_vec_and_offset().0
        };
        let vjp = |x: &[f64], w: &[f64]| {
            let (p, a) = split(x);
            let (_, cache) = p.forward_cached(&a).unwrap();
            let g = Array3::from_shape_vec((b, n, 1), w.to_vec()).unwrap();
            let mut grads = vec![0.0; np];
            let ga = p.backward(&cache, &g, &mut grads, true).unwrap();
            grads.extend(ga.iter());
            grads
        };
        let rep = grad_check(f, vjp, &x, 1e-5, 1e-5, 17);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn capacity_examples() {
        let zero = FnoParams::zeros(toy_config()).unwrap();
        assert_eq!(capacity_gamma(&zero, 2.0, 2.0).unwrap(), 0.0);

        let config = FnoConfig::new(1, 1, 1, 5);
        let mut p = FnoParams::zeros(config).unwrap();
        p.tensor_mut("lift.weight").unwrap()[0] = 2.0;
        p.tensor_mut("proj1.weight").unwrap()[0] = 3.0;
        p.tensor_mut("proj2.weight").unwrap()[0] = 1.0;
        p.tensor_mut("layers.0.conv").unwrap()[0] = 1.0;
        p.tensor_mut("layers.0.spectral").unwrap()[0] = 0.5;
        let g = capacity_gamma(&p, 2.0, 2.0).unwrap();
        let expected = 2.0 * 3.0 * (1.0 + 6f64.sqrt() * 0.5);
        assert!((g - expected).abs() < 1e-12);
        assert!((g - 13.348).abs() < 1e-3);

        assert!(capacity_gamma(&p, 2.5, 2.0).is_err());
        assert!(capacity_gamma(&p, 2.0, 0.5).is_err());
        assert!(capacity_gamma(&p, 1.0, f64::INFINITY).unwrap() > 0.0);
    }

    #[test]
    fn capacity_is_homogeneous_per_layer() {
        let config = FnoConfig::new(2, 4, 2, 3);
        let p = FnoParams::init(config, 2).unwrap();
        let g0 = capacity_gamma(&p, 1.5, 2.0).unwrap();
        for alpha in [-2.0, 0.5, 3.0] {
            let mut scaled = p.clone();
            for name in ["layers.1.spectral", "layers.1.conv"] {
                scaled
                    .tensor_mut(name)
                    .unwrap()
                    .iter_mut()
                    .for_each(|v| *v *= alpha);
            }
            let g = capacity_gamma(&scaled, 1.5, 2.0).unwrap();
            assert!((g - f64::abs(alpha) * g0).abs() <= 1e-12 * g.abs().max(1.0));
        }
    }

    #[test]
    fn model_file_round_trip_and_corruption() {
        let p = FnoParams::init(toy_config(), 4).unwrap();
        let meta = ModelMeta {
            equation: Equation::Burgers,
            advection_speed: 1.0,
            stencil: Stencil::default(),
            dt: 1e-3,
            nx: 128,
            lambda: 0.01,
            integrator: Integrator::Euler,
            epochs: 3,
            seed: 9,
        };
        let bytes = to_bytes(&p, Some(&meta)).unwrap();
        assert_eq!(&bytes[..4], b"FFNM");
        let (back, m) = from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(m, Some(meta));

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            from_bytes(truncated),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(from_bytes(&bytes[..6]).is_err());

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(from_bytes(&wrong_magic), Err(Error::Format(_))));

        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            from_bytes(&extra),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn model_file_rejects_shape_mismatch() {
        let p = FnoParams::init(toy_config(), 4).unwrap();
        let bytes = to_bytes(&p, None).unwrap();
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + hlen]).unwrap();
        let edited = header.replacen("\"width\":4", "\"width\":5", 1);
        let mut out = b"FFNM".to_vec();
        out.extend_from_slice(&(edited.len() as u32).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[8 + hlen..]);
        assert!(matches!(from_bytes(&out), Err(Error::Format(_))));
    }
}
