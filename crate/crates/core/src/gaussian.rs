//! Diagonal Gaussian latent priors, reparameterized sampling, and the
//! closed-form pointwise KL divergence between the encoder posterior and a
//! region prior.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floor applied to encoder variances so `ln` stays finite.
pub const VAR_FLOOR: f64 = 1e-6;

/// A diagonal Gaussian prior for one region's latent values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != variance.len() {
            return Err(Error::validation(
                "prior mean and variance must share a positive dimension",
            ));
        }
        if variance.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::validation("prior variances must be positive"));
        }
        Ok(GaussianPrior { mean, variance })
    }

    /// `N(mean * 1, var * I)` in `d` dimensions.
    pub fn isotropic(mean: f64, var: f64, d: usize) -> Result<Self> {
        GaussianPrior::new(vec![mean; d], vec![var; d])
    }

    /// `N(scale * e_i, I)`: the i-th coordinate axis scaled, unit variance.
    pub fn axis(i: usize, scale: f64, d: usize) -> Result<Self> {
        if i >= d {
            return Err(Error::validation("axis index out of range"));
        }
        let mut mean = vec![0.0; d];
        mean[i] = scale;
        GaussianPrior::new(mean, vec![1.0; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }
}

/// Per-pixel posterior mean/variance fields, stored as `(d, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    mean: Array3<f64>,
    variance: Array3<f64>,
}

impl LatentStats {
    pub fn new(mean: Array3<f64>, variance: Array3<f64>) -> Result<Self> {
        if mean.dim() != variance.dim() {
            return Err(Error::validation("latent mean/variance shapes differ"));
        }
        if variance.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::validation(
                "latent variances must be strictly positive",
            ));
        }
        Ok(LatentStats { mean, variance })
    }

    /// Stats with unit variance everywhere (the reduced-encoder setting).
    pub fn with_unit_variance(mean: Array3<f64>) -> Self {
        let variance = Array3::ones(mean.dim());
        LatentStats { mean, variance }
    }

    pub fn dim(&self) -> usize {
        self.mean.dim().0
    }

    pub fn height(&self) -> usize {
        self.mean.dim().1
    }

    pub fn width(&self) -> usize {
        self.mean.dim().2
    }

    pub fn mean(&self) -> &Array3<f64> {
        &self.mean
    }

    pub fn variance(&self) -> &Array3<f64> {
        &self.variance
    }
}

/// Closed-form KL of two diagonal Gaussians, summed over coordinates:
/// `0.5 * sum_k (ln(s_k/v_k) - 1 + v_k/s_k + (m_k - mu_k)^2 / s_k)`
/// where `(m, v)` is the posterior and `(mu, s)` the prior.
pub fn kl_diag(mean: &[f64], var: &[f64], prior: &GaussianPrior) -> f64 {
    let mut acc = 0.0;
    for k in 0..prior.dim() {
        let s = prior.variance[k];
        let dm = mean[k] - prior.mean[k];
        acc += (s / var[k]).ln() - 1.0 + var[k] / s + dm * dm / s;
    }
    0.5 * acc
}

/// Gradient of [`kl_diag`] with respect to the posterior mean and variance.
pub fn kl_diag_grad(mean: &[f64], var: &[f64], prior: &GaussianPrior) -> (Vec<f64>, Vec<f64>) {
    let d = prior.dim();
    let mut dmean = vec![0.0; d];
    let mut dvar = vec![0.0; d];
    for k in 0..d {
        let s = prior.variance[k];
        dmean[k] = (mean[k] - prior.mean[k]) / s;
        dvar[k] = 0.5 * (1.0 / s - 1.0 / var[k]);
    }
    (dmean, dvar)
}

/// KL at a single pixel of a stats field.
pub fn kl_pointwise(stats: &LatentStats, pixel: (usize, usize), prior: &GaussianPrior) -> Result<f64> {
    if prior.dim() != stats.dim() {
        return Err(Error::validation(format!(
            "latent dimension mismatch: prior {} vs stats {}",
            prior.dim(),
            stats.dim()
        )));
    }
    let (i, j) = pixel;
    let d = stats.dim();
    let mean: Vec<f64> = (0..d).map(|k| stats.mean[[k, i, j]]).collect();
    let var: Vec<f64> = (0..d).map(|k| stats.variance[[k, i, j]]).collect();
    Ok(kl_diag(&mean, &var, prior))
}

/// Per-pixel KL against a single prior.
pub fn kl_field_single(stats: &LatentStats, prior: &GaussianPrior) -> Result<Array2<f64>> {
    if prior.dim() != stats.dim() {
        return Err(Error::validation("latent dimension mismatch"));
    }
    let (d, h, w) = stats.mean.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for k in 0..d {
                let s = prior.variance[k];
                let v = stats.variance[[k, i, j]];
                let dm = stats.mean[[k, i, j]] - prior.mean[k];
                acc += (s / v).ln() - 1.0 + v / s + dm * dm / s;
            }
            out[[i, j]] = 0.5 * acc;
        }
    }
    Ok(out)
}

/// Per-pixel KL fields against the foreground and background priors.
pub fn kl_field(
    stats: &LatentStats,
    prior_fg: &GaussianPrior,
    prior_bg: &GaussianPrior,
) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((
        kl_field_single(stats, prior_fg)?,
        kl_field_single(stats, prior_bg)?,
    ))
}

/// Reparameterized sample `Z = mean + sqrt(var) * eta` with `eta ~ N(0, I)`
/// drawn from the supplied generator.
pub fn sample_latent_with(stats: &LatentStats, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut z = Array3::zeros(stats.mean.dim());
    for (out, (&m, &v)) in z
        .iter_mut()
        .zip(stats.mean.iter().zip(stats.variance.iter()))
    {
        let eta: f64 = StandardNormal.sample(rng);
        *out = m + v.sqrt() * eta;
    }
    z
}

/// Seeded convenience wrapper around [`sample_latent_with`].
pub fn sample_latent(stats: &LatentStats, noise_seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    sample_latent_with(stats, &mut rng)
}

/// I.i.d. per-pixel draws from a region prior, shaped `(d, H, W)`.
pub fn sample_prior_image_with(
    prior: &GaussianPrior,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let d = prior.dim();
    let mut z = Array3::zeros((d, h, w));
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let eta: f64 = StandardNormal.sample(rng);
                z[[k, i, j]] = prior.mean[k] + prior.variance[k].sqrt() * eta;
            }
        }
    }
    z
}

/// Seeded convenience wrapper around [`sample_prior_image_with`].
pub fn sample_prior_image(prior: &GaussianPrior, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_prior_image_with(prior, h, w, &mut rng)
}

/// Standard-normal field of the given shape, for reparameterized sampling.
pub fn standard_normal_field(shape: &[usize], rng: &mut ChaCha8Rng) -> ndarray::ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape")
}
