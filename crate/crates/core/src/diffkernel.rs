//! Differentiable tensor primitives used by the FNO forward pass.
//!
//! Each primitive has a forward function and a `*_backward` that maps an
//! output cotangent to parameter and input cotangents. Fields are laid out
//! `[batch, position, channel]`. Complex tensors carry their cotangent as
//! `d/d re + i d/d im`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, CowArray, Ix2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type BatchedField = Array3<f64>;
pub type SpectralCoeffs = Array3<Complex64>;

/// Cosine/sine tables for the truncated real DFT on `n` points.
#[derive(Debug, Clone)]
pub struct DftTable {
    n: usize,
    modes: usize,
    /// `[cos; sin]`, shape `[2K, N]`.
    fwd: Array2<f64>,
    /// `[cos^T | -sin^T]`, shape `[N, 2K]`.
    inv: Array2<f64>,
}

impl DftTable {
    pub fn new(n: usize, kmax: usize) -> Result<Self> {
        let modes = kmax + 1;
        if modes > n / 2 + 1 {
            return Err(Error::InvalidArgument(format!(
                "kmax {kmax} needs at least {} grid points, got {n}",
                2 * kmax
            )));
        }
        let base: Vec<(f64, f64)> = (0..n)
            .map(|m| {
                let th = 2.0 * std::f64::consts::PI * m as f64 / n as f64;
                (th.cos(), th.sin())
            })
            .collect();
        let mut fwd = Array2::zeros((2 * modes, n));
        let mut inv = Array2::zeros((n, 2 * modes));
        for k in 0..modes {
            for j in 0..n {
                let (c, s) = base[(j * k) % n];
                fwd[[k, j]] = c;
                fwd[[modes + k, j]] = s;
                inv[[j, k]] = c;
                inv[[j, modes + k]] = -s;
            }
        }
        Ok(Self { n, modes, fwd, inv })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Hermitian weight of mode `k` in the inverse transform.
    fn weight(&self, k: usize) -> f64 {
        if k == 0 || 2 * k == self.n {
            1.0
        } else {
            2.0
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.n {
            return Err(Error::Shape(format!(
                "table built for {} points, field has {n}",
                self.n
            )));
        }
        Ok(())
    }

    /// `[cos; sin] v_b` for every batch entry, packed as `(re, -im)` times `w(k)`.
    fn analyse(&self, v: &BatchedField, weighted: bool) -> SpectralCoeffs {
        let (b, _, c) = v.dim();
        let k = self.modes;
        let scale = 1.0 / self.n as f64;
        let mut out = Array3::zeros((b, k, c));
        let mut buf = Array2::zeros((2 * k, c));
        for (vb, mut ob) in v.outer_iter().zip(out.outer_iter_mut()) {
            general_mat_mul(1.0, &self.fwd, &vb, 0.0, &mut buf);
            for kk in 0..k {
                let w = if weighted {
                    self.weight(kk) * scale
                } else {
                    1.0
                };
                for ch in 0..c {
                    ob[[kk, ch]] = Complex64::new(w * buf[[kk, ch]], -w * buf[[k + kk, ch]]);
                }
            }
        }
        out
    }

    /// `cos^T re_b - sin^T im_b` for every batch entry, with `re, im` scaled by `w(k)`.
    fn synthesise(&self, coeffs: &SpectralCoeffs, weighted: bool) -> BatchedField {
        let (b, k, c) = coeffs.dim();
        let scale = 1.0 / self.n as f64;
        let mut out = Array3::zeros((b, self.n, c));
        let mut buf = Array2::zeros((2 * k, c));
        for (cb, mut ob) in coeffs.outer_iter().zip(out.outer_iter_mut()) {
            for kk in 0..k {
                let w = if weighted {
                    self.weight(kk) * scale
                } else {
                    1.0
                };
                for ch in 0..c {
                    let z = cb[[kk, ch]];
                    buf[[kk, ch]] = w * z.re;
                    buf[[k + kk, ch]] = w * z.im;
                }
            }
            general_mat_mul(1.0, &self.inv, &buf, 0.0, &mut ob);
        }
        out
    }

    /// Unnormalized forward DFT truncated to modes `0..=kmax`.
    pub fn forward(&self, v: &BatchedField) -> Result<SpectralCoeffs> {
        self.check(v.dim().1)?;
        Ok(self.analyse(v, false))
    }

    /// Inverse real DFT with `1/N` normalization; missing modes are zero.
    pub fn inverse(&self, coeffs: &SpectralCoeffs) -> Result<BatchedField> {
        let k = coeffs.dim().1;
        if k != self.modes {
            return Err(Error::Shape(format!(
                "expected {} modes, got {k}",
                self.modes
            )));
        }
        Ok(self.synthesise(coeffs, true))
    }

    pub fn forward_backward(&self, grad: &SpectralCoeffs) -> BatchedField {
        self.synthesise(grad, false)
    }

    pub fn inverse_backward(&self, grad: &BatchedField) -> SpectralCoeffs {
        self.analyse(grad, true)
    }
}

/// Forward real DFT truncated to modes `0..=kmax`.
pub fn rdft_trunc(v: &BatchedField, kmax: usize) -> Result<SpectralCoeffs> {
    DftTable::new(v.dim().1, kmax)?.forward(v)
}

/// Inverse real DFT onto `n` points.
pub fn irdft(c: &SpectralCoeffs, n: usize) -> Result<BatchedField> {
    let modes = c.dim().1;
    if modes == 0 {
        return Err(Error::Shape("no spectral modes".into()));
    }
    DftTable::new(n, modes - 1)?.inverse(c)
}

/// Complex weights `[modes, c_in, c_out]` stored as interleaved `(re, im)`.
#[derive(Debug, Clone, Copy)]
pub struct SpectralWeights<'a> {
    data: &'a [f64],
    modes: usize,
    c_in: usize,
    c_out: usize,
}

impl<'a> SpectralWeights<'a> {
    pub fn new(data: &'a [f64], modes: usize, c_in: usize, c_out: usize) -> Result<Self> {
        if data.len() != 2 * modes * c_in * c_out {
            return Err(Error::Shape(format!(
                "spectral weights need {} reals, got {}",
                2 * modes * c_in * c_out,
                data.len()
            )));
        }
        Ok(Self {
            data,
            modes,
            c_in,
            c_out,
        })
    }

    #[inline]
    fn at(&self, k: usize, i: usize, o: usize) -> Complex64 {
        let idx = 2 * ((k * self.c_in + i) * self.c_out + o);
        Complex64::new(self.data[idx], self.data[idx + 1])
    }
}

/// Per-mode complex channel mixing `out[b,k,o] = sum_i R[k,i,o] c[b,k,i]`.
pub fn spectral_apply(r: SpectralWeights<'_>, c: &SpectralCoeffs) -> Result<SpectralCoeffs> {
    let (b, k, ci) = c.dim();
    if k != r.modes || ci != r.c_in {
        return Err(Error::Shape(format!(
            "weights are [{}, {}, {}], coefficients [{b}, {k}, {ci}]",
            r.modes, r.c_in, r.c_out
        )));
    }
    let mut out = Array3::zeros((b, k, r.c_out));
    for bb in 0..b {
        for kk in 0..k {
            for i in 0..ci {
                let x = c[[bb, kk, i]];
                for o in 0..r.c_out {
                    out[[bb, kk, o]] += r.at(kk, i, o) * x;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(dR interleaved, dc)`.
pub fn spectral_apply_backward(
    r: SpectralWeights<'_>,
    c: &SpectralCoeffs,
    grad: &SpectralCoeffs,
) -> (Vec<f64>, SpectralCoeffs) {
    let (b, k, ci) = c.dim();
    let mut gr = vec![0.0; r.data.len()];
    let mut gc = Array3::zeros((b, k, ci));
    for bb in 0..b {
        for kk in 0..k {
            for i in 0..ci {
                let x = c[[bb, kk, i]];
                let mut acc = Complex64::new(0.0, 0.0);
                for o in 0..r.c_out {
                    let g = grad[[bb, kk, o]];
                    let dr = g * x.conj();
                    let idx = 2 * ((kk * ci + i) * r.c_out + o);
                    gr[idx] += dr.re;
                    gr[idx + 1] += dr.im;
                    acc += g * r.at(kk, i, o).conj();
                }
                gc[[bb, kk, i]] = acc;
            }
        }
    }
    (gr, gc)
}

fn check_kernel(k: &ArrayView3<'_, f64>, v: &BatchedField) -> Result<()> {
    let (ck, ci, _) = k.dim();
    if ck % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv kernel size must be odd, got {ck}"
        )));
    }
    if ci != v.dim().2 {
        return Err(Error::Shape(format!(
            "kernel expects {ci} input channels, field has {}",
            v.dim().2
        )));
    }
    if ck > v.dim().1 {
        return Err(Error::Shape(format!(
            "kernel size {ck} exceeds grid size {}",
            v.dim().1
        )));
    }
    Ok(())
}

/// Output rows `z` that tap input row `z + j - half`, as `(out_lo, in_lo, len)`.
fn tap_range(j: usize, half: usize, n: usize) -> (usize, usize, usize) {
    let off = j as isize - half as isize;
    let out_lo = (-off).max(0) as usize;
    let out_hi = (n as isize - off).min(n as isize) as usize;
    (out_lo, (out_lo as isize + off) as usize, out_hi - out_lo)
}

/// Zero-padded cross-correlation with an odd kernel `[c_k, c_in, c_out]`.
pub fn conv1(k: ArrayView3<'_, f64>, v: &BatchedField) -> Result<BatchedField> {
    check_kernel(&k, v)?;
    let (b, n, _) = v.dim();
    let (ck, _, co) = k.dim();
    if ck == 1 {
        return Ok(unflat(flat(v).dot(&k.index_axis(Axis(0), 0)), b, n));
    }
    let half = (ck - 1) / 2;
    let mut out = Array3::zeros((b, n, co));
    for (vb, mut ob) in v.outer_iter().zip(out.outer_iter_mut()) {
        for j in 0..ck {
            let (o_lo, i_lo, len) = tap_range(j, half, n);
            let kj = k.index_axis(Axis(0), j);
            let mut dst = ob.slice_mut(s![o_lo..o_lo + len, ..]);
            dst += &vb.slice(s![i_lo..i_lo + len, ..]).dot(&kj);
        }
    }
    Ok(out)
}

/// Returns `(dK, dv)`.
pub fn conv1_backward(
    k: ArrayView3<'_, f64>,
    v: &BatchedField,
    grad: &BatchedField,
) -> (Array3<f64>, BatchedField) {
    let (b, n, ci) = v.dim();
    let (ck, _, co) = k.dim();
    if ck == 1 {
        let g = flat(grad);
        let gk = flat(v)
            .t()
            .dot(&g)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((1, ci, co))
            .expect("single tap");
        return (gk, unflat(g.dot(&k.index_axis(Axis(0), 0).t()), b, n));
    }
    let half = (ck - 1) / 2;
    let mut gk = Array3::zeros((ck, ci, co));
    let mut gv = Array3::zeros((b, n, ci));
    for ((vb, gb), mut gvb) in v
        .outer_iter()
        .zip(grad.outer_iter())
        .zip(gv.outer_iter_mut())
    {
        for j in 0..ck {
            let (o_lo, i_lo, len) = tap_range(j, half, n);
            let src = vb.slice(s![i_lo..i_lo + len, ..]);
            let g = gb.slice(s![o_lo..o_lo + len, ..]);
            let mut gkj = gk.index_axis_mut(Axis(0), j);
            gkj += &src.t().dot(&g);
            let mut dst = gvb.slice_mut(s![i_lo..i_lo + len, ..]);
            dst += &g.dot(&k.index_axis(Axis(0), j).t());
        }
    }
    (gk, gv)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_derivative_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact GELU `x * Phi(x)`.
pub fn gelu(v: &BatchedField) -> BatchedField {
    v.mapv(gelu_scalar)
}

/// GELU together with its pointwise derivative, for use in a backward pass.
pub fn gelu_with_derivative(v: &BatchedField) -> (BatchedField, BatchedField) {
    let mut out = v.clone();
    let mut der = v.clone();
    ndarray::Zip::from(&mut out)
        .and(&mut der)
        .and(v)
        .for_each(|o, d, &x| {
            let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
            *o = x * cdf;
            *d = cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
        });
    (out, der)
}

pub fn gelu_backward(derivative: &BatchedField, grad: &BatchedField) -> BatchedField {
    derivative * grad
}

fn flat(v: &BatchedField) -> CowArray<'_, f64, Ix2> {
    let (b, n, c) = v.dim();
    v.as_standard_layout()
        .into_shape_with_order((b * n, c))
        .expect("standard layout reshapes")
}

fn unflat(m: Array2<f64>, b: usize, n: usize) -> BatchedField {
    let c = m.ncols();
    m.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, n, c))
        .expect("standard layout reshapes")
}

/// `out[b,j,:] = W^T v[b,j,:] + bias` at every grid point; `W` is `[c_in, c_out]`.
pub fn affine_pointwise(
    w: ArrayView2<'_, f64>,
    bias: ArrayView1<'_, f64>,
    v: &BatchedField,
) -> Result<BatchedField> {
    let (b, n, c) = v.dim();
    if w.nrows() != c || bias.len() != w.ncols() {
        return Err(Error::Shape(format!(
            "affine weights [{}, {}] / bias [{}] against {c} channels",
            w.nrows(),
            w.ncols(),
            bias.len()
        )));
    }
    let out = flat(v).dot(&w) + bias;
    Ok(unflat(out, b, n))
}

/// Returns `(dW, dbias, dv)`.
pub fn affine_pointwise_backward(
    w: ArrayView2<'_, f64>,
    v: &BatchedField,
    grad: &BatchedField,
) -> (Array2<f64>, Array1<f64>, BatchedField) {
    let (b, n, _) = v.dim();
    let g = flat(grad);
    let gw = flat(v).t().dot(&g);
    let gb = g.sum_axis(Axis(0));
    let gv = unflat(g.dot(&w.t()), b, n);
    (gw, gb, gv)
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub checked: usize,
    /// Set when a gradient or probe value was not finite.
    pub non_finite_at: Option<usize>,
}

/// Checks `vjp` against central finite differences of the probe
/// `x -> <w, f(x)>` with a fixed random cotangent `w`.
///
/// `x` is the concatenation of every differentiated entry (parameters and
/// inputs). The error at each entry is `|g_rev - g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F, V>(f: F, vjp: V, x: &[f64], eps: f64, tol: f64, seed: u64) -> GradCheckReport
where
    F: Fn(&[f64]) -> Vec<f64>,
    V: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let y = f(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probe = |x: &[f64]| -> f64 { f(x).iter().zip(&w).map(|(a, b)| a * b).sum() };
    let rev = vjp(x, &w);
    let mut report = GradCheckReport {
        passed: true,
        max_error: 0.0,
        worst_index: 0,
        checked: x.len(),
        non_finite_at: None,
    };
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = probe(&xp);
        xp[i] = orig - eps;
        let fm = probe(&xp);
        xp[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let g = rev.get(i).copied().unwrap_or(f64::NAN);
        if !g.is_finite() || !fd.is_finite() {
            report.passed = false;
            report.non_finite_at.get_or_insert(i);
            continue;
        }
        let err = (g - fd).abs() / fd.abs().max(1.0);
        if err > report.max_error {
            report.max_error = err;
            report.worst_index = i;
        }
    }
    if report.max_error > tol {
        report.passed = false;
    }
    report
}
