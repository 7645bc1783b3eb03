//! Real FFT along the sequence axis of `[n, d]` tensors.
//!
//! Forward transform follows the engineering sign convention
//! `X[k] = sum_j x[j] * exp(-2*pi*i*j*k/n)`; the inverse carries the `1/n`
//! factor. Power-of-two lengths use an iterative radix-2 kernel, everything
//! else goes through Bluestein's chirp-z reduction onto a padded radix-2
//! transform. Lengths are never silently padded: the spectrum of an `[n, d]`
//! input always has exactly `floor(n/2) + 1` rows.

use std::f64::consts::PI;

use super::{ComplexSpectrum, Tensor};
use crate::error::{Error, Result};

/// Radix-2 twiddle factors for one transform length, computed once and
/// shared by every column of a tensor. Levels are concatenated: entry `k` of
/// level `len` holds `exp(-2*pi*i*k/len)`.
struct Radix2Plan {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Radix2Plan {
    fn new(n: usize) -> Radix2Plan {
        debug_assert!(n.is_power_of_two());
        let mut cos = Vec::with_capacity(n);
        let mut sin = Vec::with_capacity(n);
        let mut len = 2;
        while len <= n {
            let ang = -2.0 * PI / len as f64;
            for k in 0..len / 2 {
                let (s, c) = (ang * k as f64).sin_cos();
                cos.push(c);
                sin.push(s);
            }
            len <<= 1;
        }
        Radix2Plan { n, cos, sin }
    }

    fn run(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(re.len(), n);
        let mut j = 0usize;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        let mut level = 0;
        while len <= n {
            let half = len / 2;
            let tc = &self.cos[level..level + half];
            let ts = &self.sin[level..level + half];
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (c, s) = (tc[k], ts[k]);
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * c - im[b] * s;
                    let ti = re[b] * s + im[b] * c;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            level += half;
            len <<= 1;
        }
    }
}

/// Chirp table `w[m] = exp(-i*pi*m^2/n)`; the angle is reduced with exact
/// integer arithmetic modulo `2n` before touching floating point.
fn chirp(n: usize) -> (Vec<f64>, Vec<f64>) {
    let modulus = 2 * n as u64;
    let mut re = Vec::with_capacity(n);
    let mut im = Vec::with_capacity(n);
    for m in 0..n as u64 {
        let t = (m * m) % modulus;
        let ang = -PI * t as f64 / n as f64;
        let (s, c) = ang.sin_cos();
        re.push(c);
        im.push(s);
    }
    (re, im)
}

/// Bluestein chirp-z reduction onto a padded radix-2 transform. The chirp
/// and the spectrum of the (input-independent) convolution kernel are
/// precomputed, so running one more column costs two inner transforms.
struct BluesteinPlan {
    n: usize,
    m: usize,
    wr: Vec<f64>,
    wi: Vec<f64>,
    br: Vec<f64>,
    bi: Vec<f64>,
    inner: Radix2Plan,
}

impl BluesteinPlan {
    fn new(n: usize) -> BluesteinPlan {
        let m = (2 * n - 1).next_power_of_two();
        let (wr, wi) = chirp(n);
        let mut br = vec![0.0; m];
        let mut bi = vec![0.0; m];
        br[0] = wr[0];
        bi[0] = -wi[0];
        for j in 1..n {
            br[j] = wr[j];
            bi[j] = -wi[j];
            br[m - j] = wr[j];
            bi[m - j] = -wi[j];
        }
        let inner = Radix2Plan::new(m);
        inner.run(&mut br, &mut bi);
        BluesteinPlan { n, m, wr, wi, br, bi, inner }
    }

    /// `ar`/`ai` are caller-owned scratch of length `m`.
    fn run(&self, re: &mut [f64], im: &mut [f64], ar: &mut [f64], ai: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        ar.fill(0.0);
        ai.fill(0.0);
        for j in 0..n {
            ar[j] = re[j] * self.wr[j] - im[j] * self.wi[j];
            ai[j] = re[j] * self.wi[j] + im[j] * self.wr[j];
        }
        self.inner.run(ar, ai);
        // multiply by the kernel spectrum, conjugating for the inverse pass
        for j in 0..m {
            let r = ar[j] * self.br[j] - ai[j] * self.bi[j];
            let i = ar[j] * self.bi[j] + ai[j] * self.br[j];
            ar[j] = r;
            ai[j] = -i;
        }
        self.inner.run(ar, ai);
        let inv = 1.0 / m as f64;
        for k in 0..n {
            let cr = ar[k] * inv;
            let ci = -ai[k] * inv;
            re[k] = cr * self.wr[k] - ci * self.wi[k];
            im[k] = cr * self.wi[k] + ci * self.wr[k];
        }
    }
}

/// One length's transform machinery, built once per tensor-level call.
enum FftPlan {
    Radix2(Radix2Plan),
    Bluestein(Box<BluesteinPlan>, Vec<f64>, Vec<f64>),
}

impl FftPlan {
    fn new(n: usize) -> FftPlan {
        if n.is_power_of_two() {
            FftPlan::Radix2(Radix2Plan::new(n))
        } else {
            let plan = BluesteinPlan::new(n);
            let m = plan.m;
            FftPlan::Bluestein(Box::new(plan), vec![0.0; m], vec![0.0; m])
        }
    }

    fn forward(&mut self, re: &mut [f64], im: &mut [f64]) {
        match self {
            FftPlan::Radix2(p) => p.run(re, im),
            FftPlan::Bluestein(p, ar, ai) => p.run(re, im, ar, ai),
        }
    }

    /// Inverse DFT (with `1/n`) via conjugation.
    fn inverse(&mut self, re: &mut [f64], im: &mut [f64]) {
        let n = re.len();
        if n <= 1 {
            return;
        }
        for v in im.iter_mut() {
            *v = -*v;
        }
        self.forward(re, im);
        let inv = 1.0 / n as f64;
        for (r, i) in re.iter_mut().zip(im.iter_mut()) {
            *r *= inv;
            *i = -*i * inv;
        }
    }
}

pub(crate) fn spectrum_bins(n: usize) -> usize {
    n / 2 + 1
}

fn check_2d(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    if x.shape().len() != 2 {
        return Err(Error::Dim(format!("{} expects a [n, d] tensor, got shape {:?}", what, x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n == 0 || d == 0 {
        return Err(Error::Dim(format!("{} expects a non-empty tensor, got shape {:?}", what, x.shape())));
    }
    Ok((n, d))
}

/// Real FFT of every column of `x`, keeping the non-redundant half spectrum.
pub fn rfft(x: &Tensor) -> Result<ComplexSpectrum> {
    let (n, d) = check_2d(x, "rfft")?;
    let bins = spectrum_bins(n);
    let mut out = ComplexSpectrum::zeros(bins, d);
    let mut plan = FftPlan::new(n);
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for col in 0..d {
        for row in 0..n {
            re[row] = x.data()[row * d + col];
            im[row] = 0.0;
        }
        plan.forward(&mut re, &mut im);
        for k in 0..bins {
            out.re[k * d + col] = re[k];
            out.im[k * d + col] = im[k];
        }
        // A real signal's spectrum is Hermitian, so the DC bin (and the
        // Nyquist bin when n is even) is exactly real. The Bluestein path
        // leaves ~1e-16 residue there; pin it to the exact value so that
        // downstream code can rely on the symmetry bit for bit.
        out.im[col] = 0.0;
        if n % 2 == 0 && n > 1 {
            out.im[(n / 2) * d + col] = 0.0;
        }
    }
    Ok(out)
}

/// Elementwise complex product of two equally shaped spectra.
pub fn spectrum_filter_mul(x: &ComplexSpectrum, w: &ComplexSpectrum) -> Result<ComplexSpectrum> {
    if x.bins != w.bins || x.dims != w.dims {
        return Err(Error::Dim(format!(
            "spectrum product wants matching shapes, got {}x{} and {}x{}",
            x.bins, x.dims, w.bins, w.dims
        )));
    }
    let mut out = ComplexSpectrum::zeros(x.bins, x.dims);
    for i in 0..x.re.len() {
        out.re[i] = x.re[i] * w.re[i] - x.im[i] * w.im[i];
        out.im[i] = x.re[i] * w.im[i] + x.im[i] * w.re[i];
    }
    Ok(out)
}

/// Inverse real FFT back to an `[n, d]` tensor.
///
/// The half spectrum is extended to a Hermitian full spectrum; the imaginary
/// parts of the DC bin (and, for even `n`, the Nyquist bin) cannot influence
/// a real signal and are dropped.
pub fn irfft(spec: &ComplexSpectrum, n: usize) -> Result<Tensor> {
    if n == 0 || spec.dims == 0 {
        return Err(Error::Dim("irfft expects a non-empty target shape".into()));
    }
    let bins = spectrum_bins(n);
    if spec.bins != bins {
        return Err(Error::Dim(format!(
            "irfft to length {} wants {} bins, spectrum has {}",
            n, bins, spec.bins
        )));
    }
    let d = spec.dims;
    let mut out = Tensor::zeros(vec![n, d]);
    let mut plan = FftPlan::new(n);
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for col in 0..d {
        for k in 0..bins {
            re[k] = spec.re[k * d + col];
            im[k] = spec.im[k * d + col];
        }
        for k in 1..n - bins + 1 {
            re[n - k] = spec.re[k * d + col];
            im[n - k] = -spec.im[k * d + col];
        }
        plan.inverse(&mut re, &mut im);
        for (row, &v) in re.iter().enumerate() {
            out.data_mut()[row * d + col] = v;
        }
    }
    Ok(out)
}

/// Adjoint of [`rfft`] as a real-linear map: pulls a spectrum-space gradient
/// back to signal space. `dx[j] = Re(sum_k g[k] * exp(+2*pi*i*j*k/n))`.
pub fn rfft_adjoint(g: &ComplexSpectrum, n: usize) -> Result<Tensor> {
    if n == 0 || g.dims == 0 {
        return Err(Error::Dim("rfft adjoint expects a non-empty target shape".into()));
    }
    if g.bins != spectrum_bins(n) {
        return Err(Error::Dim(format!(
            "rfft adjoint to length {} wants {} bins, gradient has {}",
            n,
            spectrum_bins(n),
            g.bins
        )));
    }
    let d = g.dims;
    let mut out = Tensor::zeros(vec![n, d]);
    let mut plan = FftPlan::new(n);
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for col in 0..d {
        re[..].fill(0.0);
        im[..].fill(0.0);
        for k in 0..g.bins {
            re[k] = g.re[k * d + col];
            // conjugate in, conjugate out turns the forward kernel into exp(+i...)
            im[k] = -g.im[k * d + col];
        }
        plan.forward(&mut re, &mut im);
        for (row, &v) in re.iter().enumerate() {
            out.data_mut()[row * d + col] = v;
        }
    }
    Ok(out)
}

/// Adjoint of [`irfft`]: pushes a signal-space gradient to spectrum space.
/// Interior bins appear twice in the Hermitian extension, so they carry
/// weight `2/n`; DC and Nyquist carry `1/n`.
pub fn irfft_adjoint(dy: &Tensor) -> Result<ComplexSpectrum> {
    let (n, d) = check_2d(dy, "irfft adjoint")?;
    let bins = spectrum_bins(n);
    let mut out = ComplexSpectrum::zeros(bins, d);
    let mut plan = FftPlan::new(n);
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for col in 0..d {
        for row in 0..n {
            re[row] = dy.data()[row * d + col];
            im[row] = 0.0;
        }
        plan.forward(&mut re, &mut im);
        for k in 0..bins {
            let pair = k != 0 && !(n % 2 == 0 && k == n / 2);
            let w = if pair { 2.0 } else { 1.0 } / n as f64;
            out.re[k * d + col] = w * re[k];
            // the forward drops the unpaired bins' imaginary parts entirely,
            // so their adjoint entries are exactly zero, not FFT residue
            out.im[k * d + col] = if pair { w * im[k] } else { 0.0 };
        }
    }
    Ok(out)
}
