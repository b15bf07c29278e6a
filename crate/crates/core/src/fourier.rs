//! 2D spectra of images and the amplitude-mixing style mechanism.
//!
//! Amplitude carries style and phase carries structure. A generated sample
//! keeps the phase of its source image and takes a simplex-weighted mixture
//! of amplitudes from itself and its style providers.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::explore::Alpha;
use crate::tensor::Tensor;

/// Real and imaginary planes of a per-channel 2D DFT, `[c,h,w]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub real: Tensor,
    pub imag: Tensor,
}

/// Polar form of a [`Spectrum`]: amplitude `>= 0`, phase in `(-pi, pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpPhase {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

fn check_image(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(Error::shape(
            op,
            format!("expected [c,h,w], got {:?}", x.shape()),
        ));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Size(format!(
            "{op}: spatial extents must be powers of two, got {h}x{w}"
        )));
    }
    Ok((c, h, w))
}

/// In-place iterative radix-2 FFT over interleaved slices.
/// `inverse` flips the twiddle sign; no normalization is applied.
fn fft_1d(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (s, c) = (step * k as f64).sin_cos();
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Row transforms followed by column transforms on one `h x w` plane.
fn fft_plane(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    for r in 0..h {
        fft_1d(
            &mut re[r * w..(r + 1) * w],
            &mut im[r * w..(r + 1) * w],
            inverse,
        );
    }
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for cidx in 0..w {
        for r in 0..h {
            col_re[r] = re[r * w + cidx];
            col_im[r] = im[r * w + cidx];
        }
        fft_1d(&mut col_re, &mut col_im, inverse);
        for r in 0..h {
            re[r * w + cidx] = col_re[r];
            im[r * w + cidx] = col_im[r];
        }
    }
}

/// Forward transform with kernel `exp(-j 2 pi (y u / H + x v / W))`.
pub fn dft2(image: &Tensor) -> Result<Spectrum> {
    let (c, h, w) = check_image(image, "dft2")?;
    let mut re = image.data().to_vec();
    let mut im = vec![0.0; re.len()];
    for ch in 0..c {
        let span = ch * h * w..(ch + 1) * h * w;
        fft_plane(&mut re[span.clone()], &mut im[span], h, w, false);
    }
    Ok(Spectrum {
        real: Tensor::new(vec![c, h, w], re)?,
        imag: Tensor::new(vec![c, h, w], im)?,
    })
}

/// Inverse transform of a full complex spectrum, `1/(h w)` normalized.
pub fn idft2_complex(spec: &Spectrum) -> Result<(Tensor, Tensor)> {
    if spec.real.shape() != spec.imag.shape() {
        return Err(Error::shape(
            "idft2",
            format!(
                "real {:?} vs imag {:?}",
                spec.real.shape(),
                spec.imag.shape()
            ),
        ));
    }
    let (c, h, w) = check_image(&spec.real, "idft2")?;
    let mut re = spec.real.data().to_vec();
    let mut im = spec.imag.data().to_vec();
    for ch in 0..c {
        let span = ch * h * w..(ch + 1) * h * w;
        fft_plane(&mut re[span.clone()], &mut im[span], h, w, true);
    }
    let scale = 1.0 / (h * w) as f64;
    re.iter_mut().for_each(|v| *v *= scale);
    im.iter_mut().for_each(|v| *v *= scale);
    Ok((
        Tensor::new(vec![c, h, w], re)?,
        Tensor::new(vec![c, h, w], im)?,
    ))
}

/// Real part of the inverse transform plus the largest imaginary residue.
pub fn idft2_with_residue(spec: &Spectrum) -> Result<(Tensor, f64)> {
    let (re, im) = idft2_complex(spec)?;
    Ok((re, im.max_abs()))
}

pub fn idft2(spec: &Spectrum) -> Result<Tensor> {
    Ok(idft2_with_residue(spec)?.0)
}

pub fn decompose(spec: &Spectrum) -> AmpPhase {
    let amplitude = spec
        .real
        .zip_map(&spec.imag, |r, i| r.hypot(i))
        .expect("spectrum planes share a shape");
    let phase = spec
        .real
        .zip_map(&spec.imag, |r, i| i.atan2(r))
        .expect("spectrum planes share a shape");
    AmpPhase { amplitude, phase }
}

/// `A cos P + j A sin P`; with `P = atan2(I, R)` this inverts [`decompose`].
pub fn recompose(ap: &AmpPhase) -> Result<Spectrum> {
    if ap.amplitude.shape() != ap.phase.shape() {
        return Err(Error::shape(
            "recompose",
            format!("{:?} vs {:?}", ap.amplitude.shape(), ap.phase.shape()),
        ));
    }
    if let Some(bad) = ap.amplitude.data().iter().find(|a| a.is_nan() || **a < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "amplitude must be non-negative, found {bad}"
        )));
    }
    Ok(Spectrum {
        real: ap.amplitude.zip_map(&ap.phase, |a, p| a * p.cos())?,
        imag: ap.amplitude.zip_map(&ap.phase, |a, p| a * p.sin())?,
    })
}

/// `gamma * (alpha_0 a_self + sum_l alpha_l a_l) + (1 - gamma) a_self`.
pub fn mix_amplitudes(
    alpha: &Alpha,
    gamma: f64,
    a_self: &Tensor,
    providers: &[Tensor],
) -> Result<Tensor> {
    if alpha.len() != providers.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} mixing weights for {} providers",
            alpha.len(),
            providers.len()
        )));
    }
    alpha.check()?;
    check_gamma(gamma)?;
    for p in providers {
        if p.shape() != a_self.shape() {
            return Err(Error::shape(
                "mix_amplitudes",
                format!("{:?} vs {:?}", p.shape(), a_self.shape()),
            ));
        }
    }
    if a_self
        .data()
        .iter()
        .chain(providers.iter().flat_map(|p| p.data()))
        .any(|a| a.is_nan() || *a < 0.0)
    {
        return Err(Error::InvalidArgument(
            "amplitudes must be non-negative".into(),
        ));
    }
    let w = alpha.weights();
    let mut out: Vec<f64> = a_self.data().iter().map(|v| w[0] * v).collect();
    for (p, &a) in providers.iter().zip(&w[1..]) {
        for (o, v) in out.iter_mut().zip(p.data()) {
            *o += a * v;
        }
    }
    for (o, s) in out.iter_mut().zip(a_self.data()) {
        *o = gamma * *o + (1.0 - gamma) * s;
    }
    Tensor::new(a_self.shape().to_vec(), out)
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    Ok(())
}

/// Image whose spectrum has amplitude `amplitude` and the phase of `source`.
pub fn phase_swap(amplitude: &Tensor, source_phase: &Tensor) -> Result<Tensor> {
    let spec = recompose(&AmpPhase {
        amplitude: amplitude.clone(),
        phase: source_phase.clone(),
    })?;
    idft2(&spec)
}

/// Amplitude-mixed image before clamping, with the imaginary residue of the
/// inverse transform.
pub fn generate_f_unclamped(
    alpha: &Alpha,
    gamma: f64,
    x: &Tensor,
    providers: &[Tensor],
) -> Result<(Tensor, f64)> {
    let own = decompose(&dft2(x)?);
    let mut amps = Vec::with_capacity(providers.len());
    for p in providers {
        if p.shape() != x.shape() {
            return Err(Error::shape(
                "generate_f",
                format!("provider {:?} vs image {:?}", p.shape(), x.shape()),
            ));
        }
        amps.push(decompose(&dft2(p)?).amplitude);
    }
    let mixed = mix_amplitudes(alpha, gamma, &own.amplitude, &amps)?;
    let spec = recompose(&AmpPhase {
        amplitude: mixed,
        phase: own.phase,
    })?;
    idft2_with_residue(&spec)
}

/// Style-mixed image with pixels clamped to `[0, 1]`.
pub fn generate_f(alpha: &Alpha, gamma: f64, x: &Tensor, providers: &[Tensor]) -> Result<Tensor> {
    let (img, _) = generate_f_unclamped(alpha, gamma, x, providers)?;
    Ok(img.map(|v| v.clamp(0.0, 1.0)))
}

/// Per-sample basis for amplitude mixing.
///
/// Because the mixture is linear in `alpha`, the unclamped generated image is
/// `(1 - gamma) x + gamma * sum_l alpha_l d_l` where `d_0 = x` and
/// `d_l = phase_swap(A(provider_l), P(x))`. Precomputing the `d_l` makes
/// every inner step a cheap linear combination.
#[derive(Debug, Clone)]
pub struct FourierBasis {
    pub gamma: f64,
    pub source: Tensor,
    pub directions: Vec<Tensor>,
}

impl FourierBasis {
    pub fn new(
        gamma: f64,
        x: &Tensor,
        x_phase: &Tensor,
        provider_amps: &[&Tensor],
    ) -> Result<Self> {
        check_gamma(gamma)?;
        let mut directions = Vec::with_capacity(provider_amps.len() + 1);
        directions.push(x.clone());
        for a in provider_amps {
            directions.push(phase_swap(a, x_phase)?);
        }
        Ok(Self {
            gamma,
            source: x.clone(),
            directions,
        })
    }

    /// Unclamped generated image for the given mixing weights.
    pub fn generate(&self, alpha: &Alpha) -> Tensor {
        let w = alpha.weights();
        let mut out: Vec<f64> =
            self.directions
                .iter()
                .zip(w)
                .fold(vec![0.0; self.source.len()], |mut acc, (d, &a)| {
                    for (o, v) in acc.iter_mut().zip(d.data()) {
                        *o += a * v;
                    }
                    acc
                });
        for (o, s) in out.iter_mut().zip(self.source.data()) {
            *o = (1.0 - self.gamma) * s + self.gamma * *o;
        }
        Tensor::new(self.source.shape().to_vec(), out).expect("basis shape")
    }

    /// Chains an input-space gradient onto the mixing weights.
    pub fn alpha_grad(&self, input_grad: &[f64]) -> Vec<f64> {
        self.directions
            .iter()
            .map(|d| self.gamma * crate::autodiff::dot(input_grad, d.data()))
            .collect()
    }
}
