//! Training objectives. Everything here is a differentiable function of
//! candle tensors and returns a 0-d tensor.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::network::DecomposedFeatures;
use crate::ops::{self, dims4};

/// SSIM window and stabilizing constants (unit dynamic range).
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    /// Weight of the SSIM term in the reconstruction loss.
    pub mu: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 2.0,
            alpha3: 10.0,
            alpha4: 2.0,
            mu: 5.0,
            epsilon: 1.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 1.0) {
            return Err(FuseError::config(format!(
                "epsilon must exceed 1 so the correlation denominator stays positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Form of the decomposition term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// `CC_D^2 / (CC_B + eps)`
    Division,
    /// `CC_D^2 - CC_B`
    Subtraction,
    /// No decomposition term.
    Off,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(FuseError::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Pearson correlation over all non-batch elements of each batch item,
/// averaged over the batch. A zero-variance item contributes 0.
pub fn correlation_coefficient(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "correlation inputs differ")?;
    if a.rank() == 0 || a.elem_count() / a.dim(0)? < 2 {
        return Err(FuseError::shape("correlation needs at least two elements per item"));
    }
    let n = a.dim(0)?;
    let a = a.reshape((n, ()))?;
    let b = b.reshape((n, ()))?;
    let a = a.broadcast_sub(&a.mean_keepdim(1)?)?;
    let b = b.broadcast_sub(&b.mean_keepdim(1)?)?;
    let cov = (&a * &b)?.sum(1)?;
    let var = (a.sqr()?.sum(1)? * b.sqr()?.sum(1)?)?;
    // The offset keeps sqrt differentiable at zero variance; the numerator is
    // then exactly zero.
    let cc = (cov / (var + 1e-30)?.sqrt()?)?;
    Ok(cc.mean(0)?)
}

/// Correlations of the base and detail features across the two modalities.
pub struct DecompositionTerms {
    pub loss: Tensor,
    pub cc_base: Tensor,
    pub cc_detail: Tensor,
}

pub fn decomposition_terms(
    dec_a: &DecomposedFeatures,
    dec_b: &DecomposedFeatures,
    w: &LossWeights,
    variant: LossVariant,
) -> Result<DecompositionTerms> {
    let cc_detail = correlation_coefficient(&dec_a.detail, &dec_b.detail)?;
    let cc_base = correlation_coefficient(&dec_a.base, &dec_b.base)?;
    let loss = decomposition_from_cc(&cc_base, &cc_detail, w, variant)?;
    Ok(DecompositionTerms {
        loss,
        cc_base,
        cc_detail,
    })
}

pub fn decomposition_from_cc(cc_base: &Tensor, cc_detail: &Tensor, w: &LossWeights, variant: LossVariant) -> Result<Tensor> {
    Ok(match variant {
        LossVariant::Division => (cc_detail.sqr()? / (cc_base + w.epsilon)?)?,
        LossVariant::Subtraction => (cc_detail.sqr()? - cc_base)?,
        LossVariant::Off => cc_base.zeros_like()?,
    })
}

pub fn decomposition_loss(
    dec_a: &DecomposedFeatures,
    dec_b: &DecomposedFeatures,
    w: &LossWeights,
    variant: LossVariant,
) -> Result<Tensor> {
    Ok(decomposition_terms(dec_a, dec_b, w, variant)?.loss)
}

/// Normalized 1-d Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5), averaged
/// over batch and channels.
pub fn ssim_index(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y, "ssim inputs differ")?;
    let (b, c, h, w) = dims4(x)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FuseError::shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let dtype = x.dtype();
    let dev = x.device();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let row = Tensor::from_vec(taps.clone(), (1, 1, 1, SSIM_WINDOW), dev)?.to_dtype(dtype)?;
    let col = Tensor::from_vec(taps, (1, 1, SSIM_WINDOW, 1), dev)?.to_dtype(dtype)?;
    let x = x.reshape((b * c, 1, h, w))?;
    let y = y.reshape((b * c, 1, h, w))?;
    let n = b * c;
    let stack = Tensor::cat(&[&x, &y, &x.sqr()?, &y.sqr()?, &(&x * &y)?], 0)?;
    let filtered = stack.conv2d(&row, 0, 1, 1, 1)?.conv2d(&col, 0, 1, 1, 1)?;
    let part = |i: usize| filtered.narrow(0, i * n, n);
    let (mx, my) = (part(0)?, part(1)?);
    let (mxx, myy, mxy) = (mx.sqr()?, my.sqr()?, (&mx * &my)?);
    let sx = (part(2)? - &mxx)?;
    let sy = (part(3)? - &myy)?;
    let sxy = (part(4)? - &mxy)?;
    let num = (((mxy * 2.0)? + SSIM_C1)? * ((sxy * 2.0)? + SSIM_C2)?)?;
    let den = ((((mxx + myy)? + SSIM_C1)?) * ((sx + sy)? + SSIM_C2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// Mean squared error plus `mu * (1 - SSIM)`.
pub fn reconstruction_loss(orig: &Tensor, recon: &Tensor, w: &LossWeights) -> Result<Tensor> {
    same_shape(orig, recon, "reconstruction inputs differ")?;
    let mse = (orig - recon)?.sqr()?.mean_all()?;
    let ssim = ssim_index(orig, recon)?;
    Ok((mse + ((ssim.affine(-1.0, 1.0))? * w.mu)?)?)
}

/// Loss terms of one stage-I step.
pub struct Stage1Loss {
    pub total: Tensor,
    pub recon_a: Tensor,
    pub recon_b: Tensor,
    pub decomp: Tensor,
    pub cc_base: Tensor,
    pub cc_detail: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub fn stage1_total_loss(
    img_a: &Tensor,
    recon_a: &Tensor,
    img_b: &Tensor,
    recon_b: &Tensor,
    dec_a: &DecomposedFeatures,
    dec_b: &DecomposedFeatures,
    w: &LossWeights,
    variant: LossVariant,
) -> Result<Stage1Loss> {
    let l_a = reconstruction_loss(img_a, recon_a, w)?;
    let l_b = reconstruction_loss(img_b, recon_b, w)?;
    let d = decomposition_terms(dec_a, dec_b, w, variant)?;
    let total = ((&l_a + (&l_b * w.alpha1)?)? + (&d.loss * w.alpha2)?)?;
    Ok(Stage1Loss {
        total,
        recon_a: l_a,
        recon_b: l_b,
        decomp: d.loss,
        cc_base: d.cc_base,
        cc_detail: d.cc_detail,
    })
}

/// `|Gh * x| + |Gv * x|` with 3x3 Sobel kernels and reflect padding.
pub fn sobel_gradient(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x)?;
    let x = x.reshape((b * c, 1, h, w))?;
    let padded = ops::reflect_pad1(&x)?;
    let kernel = Tensor::from_vec(
        vec![
            -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, //
            -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
        ],
        (2, 1, 3, 3),
        x.device(),
    )?
    .to_dtype(x.dtype())?;
    let resp = padded.conv2d(&kernel, 0, 1, 1, 1)?.abs()?;
    let mag = (resp.narrow(1, 0, 1)? + resp.narrow(1, 1, 1)?)?;
    Ok(mag.reshape((b, c, h, w))?)
}

/// Loss terms of one stage-II step.
pub struct Stage2Loss {
    pub total: Tensor,
    pub intensity: Tensor,
    pub gradient: Tensor,
    pub decomp: Tensor,
    pub cc_base: Tensor,
    pub cc_detail: Tensor,
}

/// Intensity and texture terms against the elementwise maxima of the sources.
pub fn intensity_gradient_terms(fused: &Tensor, img_a: &Tensor, img_b: &Tensor) -> Result<(Tensor, Tensor)> {
    same_shape(fused, img_a, "fused and first source differ")?;
    same_shape(fused, img_b, "fused and second source differ")?;
    let intensity = (fused - img_a.maximum(img_b)?)?.abs()?.mean_all()?;
    let target = sobel_gradient(img_a)?.maximum(&sobel_gradient(img_b)?)?;
    let gradient = (sobel_gradient(fused)? - target)?.abs()?.mean_all()?;
    Ok((intensity, gradient))
}

pub fn stage2_total_loss(
    fused: &Tensor,
    img_a: &Tensor,
    img_b: &Tensor,
    dec_a: &DecomposedFeatures,
    dec_b: &DecomposedFeatures,
    w: &LossWeights,
    variant: LossVariant,
) -> Result<Stage2Loss> {
    let (intensity, gradient) = intensity_gradient_terms(fused, img_a, img_b)?;
    let d = decomposition_terms(dec_a, dec_b, w, variant)?;
    let total = ((&intensity + (&gradient * w.alpha3)?)? + (&d.loss * w.alpha4)?)?;
    Ok(Stage2Loss {
        total,
        intensity,
        gradient,
        decomp: d.loss,
        cc_base: d.cc_base,
        cc_detail: d.cc_detail,
    })
}
