//! Objective assembly: the piecewise-constant baseline energy, the
//! single-image splitting energy, its multi-phase generalization, the
//! dataset losses, and the two dataset regularizers (augmentation
//! consistency and the adversarial region-conservation term).
//!
//! Every energy is recorded on a [`Tape`] so one backward pass yields
//! gradients for all parameter blocks at the current point. The TV term of
//! the splitting variable `w` is a constant with respect to the optimized
//! blocks and is accounted for in the reported breakdown only.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianPrior;
use crate::grad::{tv_norm, SplitField};
use crate::image::Image;
use crate::nets::{encode_on_tape, Discriminator, ParamVars, UNet};
use crate::tape::{Tape, Var};

/// Probability clamp applied before logarithms in the cross-entropy terms.
pub const PROB_EPS: f64 = 1e-7;

/// Scalar knobs shared by the energies.
#[derive(Debug, Clone)]
pub struct Hyperparams {
    /// Boundary-length weight.
    pub nu: f64,
    /// Splitting penalty weight.
    pub lambda: f64,
    /// Latent dimension `d`.
    pub latent_dim: usize,
    /// Region priors: `[fg, bg]` for binary, one per region otherwise.
    pub priors: Vec<GaussianPrior>,
    /// Monte-Carlo samples for the reconstruction expectation.
    pub mc_samples: usize,
    /// Fix the posterior variance to 1 (no variance head).
    pub reduced_variance: bool,
    /// The reconstruction residual is multiplied by this before squaring,
    /// rebalancing reconstruction against the KL term (images live in
    /// [0, 1]; larger values emulate intensity-unit residuals).
    pub recon_scale: f64,
}

impl Hyperparams {
    /// Single-image defaults: `nu = 1`, `mu = (10, -10)`, unit variances,
    /// `d = 1`, one sample, reduced variance.
    pub fn single_image() -> Self {
        Hyperparams {
            nu: 1.0,
            lambda: 10.0,
            latent_dim: 1,
            priors: vec![
                GaussianPrior::isotropic(10.0, 1.0, 1).unwrap(),
                GaussianPrior::isotropic(-10.0, 1.0, 1).unwrap(),
            ],
            mc_samples: 1,
            reduced_variance: true,
            recon_scale: 1.0,
        }
    }

    /// Multi-phase defaults for `n` regions: `d = n`, `mu_i = 5 e_i`.
    pub fn multiphase(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::validation("multi-phase needs at least 2 regions"));
        }
        let priors = (0..n)
            .map(|i| GaussianPrior::axis(i, 5.0, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Hyperparams {
            nu: 1.0,
            lambda: 10.0,
            latent_dim: n,
            priors,
            mc_samples: 1,
            reduced_variance: true,
            recon_scale: 1.0,
        })
    }

    /// Dataset-training defaults: `d = 1`, `mu = (-3, 3)`, learned variance.
    pub fn dataset() -> Self {
        Hyperparams {
            nu: 1.0,
            lambda: 10.0,
            latent_dim: 1,
            priors: vec![
                GaussianPrior::isotropic(-3.0, 1.0, 1).unwrap(),
                GaussianPrior::isotropic(3.0, 1.0, 1).unwrap(),
            ],
            mc_samples: 1,
            reduced_variance: false,
            recon_scale: 1.0,
        }
    }

    pub fn validate(&self, phases: usize) -> Result<()> {
        if self.nu <= 0.0 || !self.nu.is_finite() {
            return Err(Error::validation("nu must be positive"));
        }
        if self.lambda <= 0.0 || !self.lambda.is_finite() {
            return Err(Error::validation("lambda must be positive"));
        }
        if self.mc_samples < 1 {
            return Err(Error::validation("mc_samples must be >= 1"));
        }
        if self.recon_scale <= 0.0 || !self.recon_scale.is_finite() {
            return Err(Error::validation("recon_scale must be positive"));
        }
        if self.priors.len() != phases {
            return Err(Error::validation(format!(
                "expected {phases} priors, got {}",
                self.priors.len()
            )));
        }
        for p in &self.priors {
            if p.dim() != self.latent_dim {
                return Err(Error::validation("prior dimension differs from latent_dim"));
            }
        }
        Ok(())
    }
}

/// Per-term decomposition of one energy evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub tv: f64,
    pub penalty: f64,
    pub aug_bce: f64,
    pub cri: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn finish(mut self) -> Self {
        self.total =
            self.reconstruction + self.kl + self.tv + self.penalty + self.aug_bce + self.cri;
        self
    }
}

/// Writes an energy trace as CSV with one row per iteration.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[EnergyBreakdown]) -> Result<()> {
    let mut out = String::from("iter,reconstruction,kl,tv,penalty,aug_bce,cri,total\n");
    for (i, b) in trace.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            i, b.reconstruction, b.kl, b.tv, b.penalty, b.aug_bce, b.cri, b.total
        ));
    }
    std::fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Reads a CSV written by [`write_trace_csv`].
pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<EnergyBreakdown>> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::io(format!("cannot read trace: {e}")))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::validation("empty trace"))?;
    let expected = "iter,reconstruction,kl,tv,penalty,aug_bce,cri,total";
    if header.trim() != expected {
        return Err(Error::validation(format!(
            "trace header mismatch: expected `{expected}`, got `{header}`"
        )));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::validation(format!("bad trace row: {line}")));
        }
        let f = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::validation(format!("bad number in trace: {s}")))
        };
        rows.push(EnergyBreakdown {
            reconstruction: f(cols[1])?,
            kl: f(cols[2])?,
            tv: f(cols[3])?,
            penalty: f(cols[4])?,
            aug_bce: f(cols[5])?,
            cri: f(cols[6])?,
            total: f(cols[7])?,
        });
    }
    Ok(rows)
}

// ---- baseline energy ----

/// Discrete piecewise-constant two-region energy:
/// `sum_x nu*||grad u_x|| + u_x*(I_x-c1)^2 + (1-u_x)*(I_x-c2)^2`,
/// with the squared terms summed over color channels.
pub fn cv_energy(img: &Image, u: &Array2<f64>, c1: &[f64], c2: &[f64], nu: f64) -> Result<f64> {
    let (c, h, w) = img.data().dim();
    if u.dim() != (h, w) {
        return Err(Error::validation("mask shape differs from image"));
    }
    if c1.len() != c || c2.len() != c {
        return Err(Error::validation("region constants must match channel count"));
    }
    let tv = tv_norm(&crate::grad::forward_grad(u)?);
    let mut data = 0.0;
    for i in 0..h {
        for j in 0..w {
            let ux = u[[i, j]];
            for ch in 0..c {
                let v = img.data()[[ch, i, j]];
                data += ux * (v - c1[ch]).powi(2) + (1.0 - ux) * (v - c2[ch]).powi(2);
            }
        }
    }
    Ok(nu * tv + data)
}

/// Exact minimizers of the data terms for fixed (possibly soft) weights:
/// per-channel weighted means of the image over each region.
pub fn weighted_region_means(img: &Image, weights: &Array2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, h, w) = img.data().dim();
    if weights.dim() != (h, w) {
        return Err(Error::validation("weights shape differs from image"));
    }
    let mut wsum = 0.0;
    for &x in weights.iter() {
        wsum += x;
    }
    let total = (h * w) as f64;
    if wsum <= 0.0 || wsum >= total {
        return Err(Error::validation(
            "both regions must be non-empty to define the region constants",
        ));
    }
    let mut c1 = vec![0.0; c];
    let mut c2 = vec![0.0; c];
    for ch in 0..c {
        let mut num1 = 0.0;
        let mut num2 = 0.0;
        for i in 0..h {
            for j in 0..w {
                let v = img.data()[[ch, i, j]];
                num1 += weights[[i, j]] * v;
                num2 += (1.0 - weights[[i, j]]) * v;
            }
        }
        c1[ch] = num1 / wsum;
        c2[ch] = num2 / (total - wsum);
    }
    Ok((c1, c2))
}

// ---- shared tape fragments ----

fn image_to_input(img: &Image) -> ArrayD<f64> {
    let (c, h, w) = img.data().dim();
    img.data()
        .clone()
        .into_shape_with_order(IxDyn(&[1, c, h, w]))
        .unwrap()
}

/// Stacks images of identical shape into an `(N, C, H, W)` batch.
pub fn images_to_batch(batch: &[Image]) -> Result<ArrayD<f64>> {
    if batch.is_empty() {
        return Err(Error::validation("empty image batch"));
    }
    let (c, h, w) = batch[0].data().dim();
    let mut out = Array4::zeros((batch.len(), c, h, w));
    for (n, img) in batch.iter().enumerate() {
        if img.data().dim() != (c, h, w) {
            return Err(Error::validation("batch images must share one shape"));
        }
        out.index_axis_mut(Axis(0), n).assign(img.data());
    }
    Ok(out.into_dyn())
}

/// Materializes a prior's per-coordinate constant as a `(B, d, H, W)` array.
fn prior_const(values: &[f64], b: usize, h: usize, w: usize) -> ArrayD<f64> {
    let d = values.len();
    let mut out = Array4::zeros((b, d, h, w));
    for n in 0..b {
        for (k, &v) in values.iter().enumerate() {
            out.index_axis_mut(Axis(0), n)
                .index_axis_mut(Axis(0), k)
                .fill(v);
        }
    }
    out.into_dyn()
}

/// Closed-form per-pixel KL field `(B, 1, H, W)` between the posterior
/// `(mean, variance)` and a diagonal prior, recorded on the tape.
fn kl_field_on_tape(
    tape: &mut Tape,
    mean: Var,
    variance: Option<Var>,
    prior: &GaussianPrior,
) -> Var {
    let shape = tape.value(mean).shape().to_vec();
    let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    debug_assert_eq!(d, prior.dim());
    let mu = tape.constant(prior_const(prior.mean(), b, h, w));
    let recip: Vec<f64> = prior.variance().iter().map(|s| 1.0 / s).collect();
    let recip_c = tape.constant(prior_const(&recip, b, h, w));
    let diff = tape.sub(mean, mu);
    let sq = tape.square(diff);
    let quad = tape.mul(sq, recip_c);
    match variance {
        None => {
            // unit posterior variance: ln(s) - 1 + 1/s collapses the
            // remaining per-coordinate terms into one constant
            let const_sum: f64 = prior
                .variance()
                .iter()
                .map(|&s| s.ln() - 1.0 + 1.0 / s)
                .sum();
            let reduced = tape.reduce_ch(quad);
            let with_const = tape.add_scalar(reduced, const_sum);
            tape.mul_scalar(with_const, 0.5)
        }
        Some(var) => {
            let ln_s: Vec<f64> = prior.variance().iter().map(|s| s.ln()).collect();
            let ln_s_c = tape.constant(prior_const(&ln_s, b, h, w));
            let ln_v = tape.ln(var);
            let t_log = tape.sub(ln_s_c, ln_v);
            let t_ratio = tape.mul(var, recip_c);
            let s1 = tape.add(t_log, t_ratio);
            let s2 = tape.add(s1, quad);
            let reduced = tape.reduce_ch(s2);
            let shifted = tape.add_scalar(reduced, -(d as f64));
            tape.mul_scalar(shifted, 0.5)
        }
    }
}

/// Reconstruction term: mean over the noise samples of
/// `0.5 * ||scale * (F(mean + sqrt(var) * eta) - input)||^2`.
fn reconstruction_on_tape(
    tape: &mut Tape,
    decoder: &UNet,
    dec_vars: &ParamVars,
    mean: Var,
    variance: Option<Var>,
    input: Var,
    noise: &[ArrayD<f64>],
    scale: f64,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for eta in noise {
        let eta_c = tape.constant(eta.clone());
        let z = match variance {
            Some(var) => {
                let sd = tape.sqrt(var);
                let scaled = tape.mul(sd, eta_c);
                tape.add(mean, scaled)
            }
            None => tape.add(mean, eta_c),
        };
        let (out, _) = decoder.forward(tape, dec_vars, z)?;
        let diff = tape.sub(out, input);
        let scaled_diff = tape.mul_scalar(diff, scale);
        let sq = tape.square(scaled_diff);
        let s = tape.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(prev) => tape.add(prev, s),
        });
    }
    let total = acc.expect("mc_samples >= 1");
    Ok(tape.mul_scalar(total, 0.5 / noise.len() as f64))
}

fn check_nets(encoder: &UNet, decoder: &UNet, img_channels: usize, hp: &Hyperparams) -> Result<()> {
    if encoder.spec.in_channels != img_channels {
        return Err(Error::validation("encoder input channels differ from image"));
    }
    if encoder.spec.out_channels != hp.latent_dim {
        return Err(Error::validation(
            "encoder output channels differ from latent_dim",
        ));
    }
    if encoder.spec.variance_head == hp.reduced_variance {
        return Err(Error::validation(
            "encoder variance head must match the reduced_variance setting",
        ));
    }
    if decoder.spec.in_channels != hp.latent_dim {
        return Err(Error::validation("decoder input channels differ from latent_dim"));
    }
    if decoder.spec.out_channels != img_channels {
        return Err(Error::validation("decoder output channels differ from image"));
    }
    Ok(())
}

// ---- single image ----

/// A single-image energy evaluation recorded on a tape.
pub struct SingleGraph {
    pub tape: Tape,
    pub breakdown: EnergyBreakdown,
    /// Differentiable part of the energy (everything except `nu*||w||`).
    pub loss: Var,
    pub phi: Var,
    pub enc: ParamVars,
    pub dec: ParamVars,
}

/// Splitting energy for one image:
/// `nu*||w|| + (lambda/2)*||w - grad S(phi)||^2 + reconstruction
///  + sum_x S(phi)_x KL_fg_x + (1 - S(phi)_x) KL_bg_x`.
///
/// `noise` carries `hp.mc_samples` standard-normal fields shaped
/// `(1, d, H, W)`.
pub fn single_image_energy(
    decoder: &UNet,
    encoder: &UNet,
    phi: &Array2<f64>,
    w: &SplitField,
    img: &Image,
    hp: &Hyperparams,
    noise: &[ArrayD<f64>],
) -> Result<SingleGraph> {
    hp.validate(2)?;
    let (c, h, wid) = img.data().dim();
    check_nets(encoder, decoder, c, hp)?;
    if phi.dim() != (h, wid) {
        return Err(Error::validation("phi shape differs from image"));
    }
    if w.height() != h || w.width() != wid {
        return Err(Error::validation("w shape differs from image"));
    }
    if noise.len() != hp.mc_samples {
        return Err(Error::validation("noise sample count differs from mc_samples"));
    }

    let mut tape = Tape::new();
    let input = tape.constant(image_to_input(img));
    let enc = encoder.params.register(&mut tape);
    let dec = decoder.params.register(&mut tape);
    let phi_var = tape.leaf(phi.clone().into_dyn());

    let stats = encode_on_tape(&mut tape, encoder, &enc, input)?;
    let recon = reconstruction_on_tape(
        &mut tape, decoder, &dec, stats.mean, stats.variance, input, noise, hp.recon_scale,
    )?;

    let kl_fg = kl_field_on_tape(&mut tape, stats.mean, stats.variance, &hp.priors[0]);
    let kl_bg = kl_field_on_tape(&mut tape, stats.mean, stats.variance, &hp.priors[1]);
    let sig = tape.sigmoid(phi_var);
    let sig4 = tape.reshape(sig, &[1, 1, h, wid]);
    let neg = tape.mul_scalar(sig4, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let fg_term = tape.mul(sig4, kl_fg);
    let bg_term = tape.mul(one_minus, kl_bg);
    let fg_sum = tape.sum_all(fg_term);
    let bg_sum = tape.sum_all(bg_term);
    let kl_term = tape.add(fg_sum, bg_sum);

    let grad_s = tape.grad_xy(sig);
    let w_c = tape.constant(w.data().clone().into_dyn());
    let diff = tape.sub(w_c, grad_s);
    let dsq = tape.square(diff);
    let dsum = tape.sum_all(dsq);
    let penalty = tape.mul_scalar(dsum, hp.lambda / 2.0);

    let partial = tape.add(recon, kl_term);
    let loss = tape.add(partial, penalty);

    let breakdown = EnergyBreakdown {
        reconstruction: tape.scalar(recon),
        kl: tape.scalar(kl_term),
        tv: hp.nu * tv_norm(w),
        penalty: tape.scalar(penalty),
        ..Default::default()
    }
    .finish();

    Ok(SingleGraph {
        tape,
        breakdown,
        loss,
        phi: phi_var,
        enc,
        dec,
    })
}

// ---- multi-phase ----

pub struct MultiGraph {
    pub tape: Tape,
    pub breakdown: EnergyBreakdown,
    pub loss: Var,
    pub phi: Var,
    pub enc: ParamVars,
    pub dec: ParamVars,
}

/// Multi-phase splitting energy: per-region splitting terms plus the
/// softmax-weighted KL sum and the shared reconstruction.
pub fn multiphase_energy(
    decoder: &UNet,
    encoder: &UNet,
    phi: &Array3<f64>,
    w: &[SplitField],
    img: &Image,
    hp: &Hyperparams,
    noise: &[ArrayD<f64>],
) -> Result<MultiGraph> {
    let n = phi.dim().0;
    if n < 2 {
        return Err(Error::validation("multi-phase needs at least 2 regions"));
    }
    hp.validate(n)?;
    let (c, h, wid) = img.data().dim();
    check_nets(encoder, decoder, c, hp)?;
    if phi.dim() != (n, h, wid) {
        return Err(Error::validation("phi shape differs from image"));
    }
    if w.len() != n {
        return Err(Error::validation("need one splitting field per region"));
    }
    for wi in w {
        if wi.height() != h || wi.width() != wid {
            return Err(Error::validation("w shape differs from image"));
        }
    }
    if noise.len() != hp.mc_samples {
        return Err(Error::validation("noise sample count differs from mc_samples"));
    }

    let mut tape = Tape::new();
    let input = tape.constant(image_to_input(img));
    let enc = encoder.params.register(&mut tape);
    let dec = decoder.params.register(&mut tape);
    let phi_var = tape.leaf(phi.clone().into_dyn());

    let stats = encode_on_tape(&mut tape, encoder, &enc, input)?;
    let recon = reconstruction_on_tape(
        &mut tape, decoder, &dec, stats.mean, stats.variance, input, noise, hp.recon_scale,
    )?;

    let soft = tape.softmax0(phi_var);
    let mut kl_term: Option<Var> = None;
    let mut penalty: Option<Var> = None;
    let mut tv = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let si = tape.slice_ch0(soft, i);
        let kl_i = kl_field_on_tape(&mut tape, stats.mean, stats.variance, &hp.priors[i]);
        let si4 = tape.reshape(si, &[1, 1, h, wid]);
        let term = tape.mul(si4, kl_i);
        let term_sum = tape.sum_all(term);
        kl_term = Some(match kl_term {
            None => term_sum,
            Some(prev) => tape.add(prev, term_sum),
        });

        let gi = tape.grad_xy(si);
        let wc = tape.constant(wi.data().clone().into_dyn());
        let diff = tape.sub(wc, gi);
        let dsq = tape.square(diff);
        let dsum = tape.sum_all(dsq);
        let pi = tape.mul_scalar(dsum, hp.lambda / 2.0);
        penalty = Some(match penalty {
            None => pi,
            Some(prev) => tape.add(prev, pi),
        });
        tv += hp.nu * tv_norm(wi);
    }
    let kl_term = kl_term.unwrap();
    let penalty = penalty.unwrap();
    let partial = tape.add(recon, kl_term);
    let loss = tape.add(partial, penalty);

    let breakdown = EnergyBreakdown {
        reconstruction: tape.scalar(recon),
        kl: tape.scalar(kl_term),
        tv,
        penalty: tape.scalar(penalty),
        ..Default::default()
    }
    .finish();

    Ok(MultiGraph {
        tape,
        breakdown,
        loss,
        phi: phi_var,
        enc,
        dec,
    })
}

// ---- dataset ----

pub struct DatasetGraph {
    pub tape: Tape,
    pub breakdown: EnergyBreakdown,
    pub loss: Var,
    pub enc: ParamVars,
    pub dec: ParamVars,
    pub seg: ParamVars,
}

/// Batch objective for dataset training: reconstruction plus the KL term
/// weighted by the segmentation network's soft masks. Regularizers are
/// separate losses ([`aug_invariance_bce`], [`cri_loss`]).
pub fn dataset_energy(
    decoder: &UNet,
    encoder: &UNet,
    seg: &UNet,
    batch: &[Image],
    hp: &Hyperparams,
    noise: &[ArrayD<f64>],
) -> Result<DatasetGraph> {
    hp.validate(2)?;
    let input_arr = images_to_batch(batch)?;
    let (b, c, h, w) = (
        input_arr.shape()[0],
        input_arr.shape()[1],
        input_arr.shape()[2],
        input_arr.shape()[3],
    );
    check_nets(encoder, decoder, c, hp)?;
    if seg.spec.in_channels != c || seg.spec.out_channels != 1 {
        return Err(Error::validation(
            "segmentation net must map the image to one channel",
        ));
    }
    if noise.len() != hp.mc_samples {
        return Err(Error::validation("noise sample count differs from mc_samples"));
    }
    for eta in noise {
        if eta.shape() != [b, hp.latent_dim, h, w] {
            return Err(Error::validation("noise shape differs from batch"));
        }
    }

    let mut tape = Tape::new();
    let input = tape.constant(input_arr);
    let enc = encoder.params.register(&mut tape);
    let dec = decoder.params.register(&mut tape);
    let seg_vars = seg.params.register(&mut tape);

    let stats = encode_on_tape(&mut tape, encoder, &enc, input)?;
    let recon = reconstruction_on_tape(
        &mut tape, decoder, &dec, stats.mean, stats.variance, input, noise, hp.recon_scale,
    )?;

    let (logits, _) = seg.forward(&mut tape, &seg_vars, input)?;
    let u = tape.sigmoid(logits);
    let kl_fg = kl_field_on_tape(&mut tape, stats.mean, stats.variance, &hp.priors[0]);
    let kl_bg = kl_field_on_tape(&mut tape, stats.mean, stats.variance, &hp.priors[1]);
    let neg = tape.mul_scalar(u, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let fg_term = tape.mul(u, kl_fg);
    let bg_term = tape.mul(one_minus, kl_bg);
    let fg_sum = tape.sum_all(fg_term);
    let bg_sum = tape.sum_all(bg_term);
    let kl_term = tape.add(fg_sum, bg_sum);

    let loss = tape.add(recon, kl_term);
    let breakdown = EnergyBreakdown {
        reconstruction: tape.scalar(recon),
        kl: tape.scalar(kl_term),
        ..Default::default()
    }
    .finish();

    Ok(DatasetGraph {
        tape,
        breakdown,
        loss,
        enc,
        dec,
        seg: seg_vars,
    })
}

// ---- augmentation consistency ----

/// A spatial symmetry: quarter turns followed by optional flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugOp {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugOp {
    pub fn rot90() -> Self {
        AugOp { quarter_turns: 1, hflip: false, vflip: false }
    }

    pub fn rot180() -> Self {
        AugOp { quarter_turns: 2, hflip: false, vflip: false }
    }

    pub fn rot270() -> Self {
        AugOp { quarter_turns: 3, hflip: false, vflip: false }
    }

    pub fn hflip() -> Self {
        AugOp { quarter_turns: 0, hflip: true, vflip: false }
    }

    pub fn vflip() -> Self {
        AugOp { quarter_turns: 0, hflip: false, vflip: true }
    }

    /// Random rotation (90/180/270 degrees) composed with random flips.
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        AugOp {
            quarter_turns: rng.gen_range(1..4u8),
            hflip: rng.gen(),
            vflip: rng.gen(),
        }
    }

    /// Applies the op to the trailing two axes of an `(N, C, H, W)` array.
    pub fn apply(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let mut out = x.clone();
        for _ in 0..(self.quarter_turns % 4) {
            out = rot90_ccw(&out);
        }
        if self.hflip {
            out.invert_axis(Axis(out.ndim() - 1));
            out = out.as_standard_layout().to_owned();
        }
        if self.vflip {
            out.invert_axis(Axis(out.ndim() - 2));
            out = out.as_standard_layout().to_owned();
        }
        out
    }
}

impl std::fmt::Display for AugOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rot{}{}{}",
            90 * self.quarter_turns as usize % 360,
            if self.hflip { "+hflip" } else { "" },
            if self.vflip { "+vflip" } else { "" }
        )
    }
}

fn rot90_ccw(x: &ArrayD<f64>) -> ArrayD<f64> {
    let nd = x.ndim();
    let h = x.shape()[nd - 2];
    let w = x.shape()[nd - 1];
    let lead: usize = x.shape()[..nd - 2].iter().product();
    let flat = x.view().into_shape_with_order((lead, h, w)).expect("contiguous");
    let mut out = Array3::zeros((lead, w, h));
    for l in 0..lead {
        for i in 0..h {
            for j in 0..w {
                // (i, j) moves to (W-1-j, i): columns become rows
                out[[l, w - 1 - j, i]] = flat[[l, i, j]];
            }
        }
    }
    let mut shape = x.shape()[..nd - 2].to_vec();
    shape.extend_from_slice(&[w, h]);
    out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()
}

pub struct AugGraph {
    pub tape: Tape,
    pub value: f64,
    pub loss: Var,
    pub seg: ParamVars,
}

/// Binary cross entropy between the segmentation of the augmented batch and
/// the augmented segmentation of the original batch. The target is treated
/// as a constant: gradients flow only through the prediction.
pub fn aug_invariance_bce(seg: &UNet, batch: &[Image], op: AugOp) -> Result<AugGraph> {
    let input = images_to_batch(batch)?;
    // detached target: run the network on the original batch, then augment
    let (logits, _) = seg.eval(&input)?;
    let probs = logits.map(|&x| stable_sigmoid_scalar(x));
    let target = op.apply(&probs);
    aug_invariance_bce_with_target(seg, batch, op, &target)
}

/// [`aug_invariance_bce`] with an explicit detached target, so gradient
/// oracles can hold the target constant while perturbing the network.
pub fn aug_invariance_bce_with_target(
    seg: &UNet,
    batch: &[Image],
    op: AugOp,
    target: &ArrayD<f64>,
) -> Result<AugGraph> {
    let input = images_to_batch(batch)?;
    let mut tape = Tape::new();
    let aug_input = tape.constant(op.apply(&input));
    let seg_vars = seg.params.register(&mut tape);
    let (pred_logits, _) = seg.forward(&mut tape, &seg_vars, aug_input)?;
    let pred = tape.sigmoid(pred_logits);
    let pred = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);

    let t = tape.constant(target.clone());
    let one_minus_t = tape.constant(target.map(|&v| 1.0 - v));
    let ln_p = tape.ln(pred);
    let neg_p = tape.mul_scalar(pred, -1.0);
    let om_p = tape.add_scalar(neg_p, 1.0);
    let ln_om = tape.ln(om_p);
    let term1 = tape.mul(t, ln_p);
    let term2 = tape.mul(one_minus_t, ln_om);
    let s = tape.add(term1, term2);
    let total = tape.sum_all(s);
    let loss = tape.mul_scalar(total, -1.0);
    let value = tape.scalar(loss);
    Ok(AugGraph {
        tape,
        value,
        loss,
        seg: seg_vars,
    })
}

fn stable_sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---- adversarial region terms ----

pub struct DiscGraph {
    pub tape: Tape,
    pub value: f64,
    pub loss: Var,
    pub disc: ParamVars,
}

/// Discriminator classification loss:
/// `-sum ln D(real) - sum ln(1 - D(fake_fg)) - sum ln(1 - D(fake_bg))`.
/// Fake batches are decoder renderings of prior samples, computed with the
/// decoder held fixed; only the discriminator receives gradients.
pub fn discriminator_bce(
    disc: &Discriminator,
    real: &ArrayD<f64>,
    fake_fg: &ArrayD<f64>,
    fake_bg: &ArrayD<f64>,
) -> Result<DiscGraph> {
    let mut tape = Tape::new();
    let disc_vars = disc.params.register(&mut tape);
    let mut loss: Option<Var> = None;
    for (arr, is_real) in [(real, true), (fake_fg, false), (fake_bg, false)] {
        let x = tape.constant(arr.clone());
        let p = disc.forward(&mut tape, &disc_vars, x)?;
        let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        let target = if is_real {
            p
        } else {
            let neg = tape.mul_scalar(p, -1.0);
            tape.add_scalar(neg, 1.0)
        };
        let ln = tape.ln(target);
        let s = tape.sum_all(ln);
        let term = tape.mul_scalar(s, -1.0);
        loss = Some(match loss {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    let loss = loss.unwrap();
    let value = tape.scalar(loss);
    Ok(DiscGraph {
        tape,
        value,
        loss,
        disc: disc_vars,
    })
}

pub struct CriGraph {
    pub tape: Tape,
    pub value: f64,
    pub loss: Var,
    pub seg: ParamVars,
}

/// Region-conservation loss: the segmentation masks gate prior samples into
/// a composed latent image, the frozen decoder renders it, and the frozen
/// discriminator scores it. Gradients flow only into the segmentation
/// network.
pub fn cri_loss(
    seg: &UNet,
    decoder: &UNet,
    disc: &Discriminator,
    batch: &[Image],
    z_fg: &ArrayD<f64>,
    z_bg: &ArrayD<f64>,
) -> Result<CriGraph> {
    let input = images_to_batch(batch)?;
    let b = input.shape()[0];
    let d = decoder.spec.in_channels;
    if z_fg.shape() != [b, d, input.shape()[2], input.shape()[3]] || z_bg.shape() != z_fg.shape() {
        return Err(Error::validation("prior sample shape differs from batch"));
    }

    let mut tape = Tape::new();
    let input_c = tape.constant(input);
    let seg_vars = seg.params.register(&mut tape);
    // decoder and discriminator are frozen: constants on the tape
    let dec_vars = decoder.params.register_constant(&mut tape);
    let disc_vars = disc.params.register_constant(&mut tape);

    let (logits, _) = seg.forward(&mut tape, &seg_vars, input_c)?;
    let u = tape.sigmoid(logits);
    let u_rep = if d == 1 { u } else { tape.repeat_ch(u, d) };
    let neg = tape.mul_scalar(u_rep, -1.0);
    let om = tape.add_scalar(neg, 1.0);
    let zf = tape.constant(z_fg.clone());
    let zb = tape.constant(z_bg.clone());
    let fg_part = tape.mul(zf, u_rep);
    let bg_part = tape.mul(zb, om);
    let composed = tape.add(fg_part, bg_part);
    let (rendered, _) = decoder.forward(&mut tape, &dec_vars, composed)?;
    let p = disc.forward(&mut tape, &disc_vars, rendered)?;
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let ln = tape.ln(p);
    let s = tape.sum_all(ln);
    let loss = tape.mul_scalar(s, -1.0);
    let value = tape.scalar(loss);
    Ok(CriGraph {
        tape,
        value,
        loss,
        seg: seg_vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::standard_normal_field;
    use crate::grad::{forward_grad, shrinkage};
    use crate::image::{make_synthetic, SyntheticKind};
    use crate::nets::{soft_mask, NetworkSpec};
    use ndarray::array;
    use rand::SeedableRng;

    fn tiny_unet(in_c: usize, out_c: usize, seed: u64) -> UNet {
        let mut net = UNet::build(
            NetworkSpec::new(in_c, out_c).with_depth(1).with_base_channels(2),
            seed,
        )
        .unwrap();
        crate::nets::perturb_params(&mut net.params, 0.2, seed ^ 0xA5A5);
        net
    }

    fn tiny_pair(hp: &Hyperparams, seed: u64) -> (UNet, UNet) {
        let mut enc = UNet::build(
            NetworkSpec::new(1, hp.latent_dim)
                .with_depth(1)
                .with_base_channels(2)
                .with_variance_head(!hp.reduced_variance),
            seed,
        )
        .unwrap();
        crate::nets::perturb_params(&mut enc.params, 0.2, seed ^ 0x5A5A);
        let dec = tiny_unet(hp.latent_dim, 1, seed + 1);
        (enc, dec)
    }

    /// Zeroes every parameter, then sets the primary head bias.
    fn constant_output_net(mut net: UNet, bias: f64) -> UNet {
        for (name, arr) in net.params.entries_mut() {
            arr.fill(0.0);
            if name == "head.b" {
                arr.fill(bias);
            }
        }
        net
    }

    fn test_image(h: usize, w: usize) -> Image {
        Image::from_gray(Array2::from_shape_fn((h, w), |(i, j)| {
            0.5 + 0.4 * ((i * w + j) as f64 * 0.7).sin()
        }))
        .unwrap()
    }

    #[test]
    fn cv_energy_hand_fixture() {
        // image [[0,0],[1,1]], u = bottom row, c1 = 1, c2 = 0: data terms
        // vanish and the stencil TV of u is 2
        let img = Image::from_gray(array![[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let u = array![[0.0, 0.0], [1.0, 1.0]];
        let e = cv_energy(&img, &u, &[1.0], &[0.0], 1.0).unwrap();
        assert!((e - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cv_energy_piecewise_constant_leaves_only_tv() {
        let (img, mask) = make_synthetic(SyntheticKind::TwoGaussianDisk, 16, 16, 0.0, 0).unwrap();
        let u = mask.fg_field();
        let e = cv_energy(&img, &u, &[0.8], &[0.2], 0.7).unwrap();
        let tv = tv_norm(&forward_grad(&u).unwrap());
        assert!((e - 0.7 * tv).abs() < 1e-12);
    }

    #[test]
    fn region_means_minimize_data_term() {
        let (img, mask) = make_synthetic(SyntheticKind::TwoGaussianDisk, 16, 16, 20.0, 1).unwrap();
        let u = mask.fg_field();
        let (c1, c2) = weighted_region_means(&img, &u).unwrap();
        let base = cv_energy(&img, &u, &c1, &c2, 1.0).unwrap();
        for delta in [-0.05, 0.05] {
            let e1 = cv_energy(&img, &u, &[c1[0] + delta], &c2, 1.0).unwrap();
            let e2 = cv_energy(&img, &u, &c1, &[c2[0] + delta], 1.0).unwrap();
            assert!(base < e1 && base < e2);
        }
    }

    #[test]
    fn region_means_require_nonempty_regions() {
        let img = test_image(4, 4);
        assert!(weighted_region_means(&img, &Array2::zeros((4, 4))).is_err());
        assert!(weighted_region_means(&img, &Array2::ones((4, 4))).is_err());
    }

    #[test]
    fn single_energy_penalty_zero_when_w_matches() {
        let hp = Hyperparams::single_image();
        let (enc, dec) = tiny_pair(&hp, 3);
        let img = test_image(8, 8);
        let phi = Array2::from_shape_fn((8, 8), |(i, j)| 0.3 * (i as f64 - j as f64));
        let s = soft_mask(&phi);
        let w = forward_grad(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = vec![standard_normal_field(&[1, 1, 8, 8], &mut rng)];
        let g = single_image_energy(&dec, &enc, &phi, &w, &img, &hp, &noise).unwrap();
        assert!(g.breakdown.penalty.abs() < 1e-18);
        let sum = g.breakdown.reconstruction + g.breakdown.kl + g.breakdown.tv + g.breakdown.penalty;
        assert!((g.breakdown.total - sum).abs() < 1e-8);
    }

    #[test]
    fn single_energy_constant_decoder_reconstructs_constant_image() {
        let hp = Hyperparams::single_image();
        let (enc, dec) = tiny_pair(&hp, 5);
        let dec = constant_output_net(dec, 0.3);
        let img = Image::from_gray(Array2::from_elem((8, 8), 0.3)).unwrap();
        let phi = Array2::zeros((8, 8));
        let w = SplitField::zeros(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = vec![standard_normal_field(&[1, 1, 8, 8], &mut rng)];
        let g = single_image_energy(&dec, &enc, &phi, &w, &img, &hp, &noise).unwrap();
        assert!(g.breakdown.reconstruction.abs() < 1e-20);
    }

    #[test]
    fn single_energy_reduced_kl_limit() {
        // encoder pinned at the fg prior mean and phi -> +inf: the KL term
        // collapses below 1e-10
        let hp = Hyperparams::single_image();
        let (enc, dec) = tiny_pair(&hp, 7);
        let enc = constant_output_net(enc, 10.0);
        let img = test_image(8, 8);
        let phi = Array2::from_elem((8, 8), 50.0);
        let w = SplitField::zeros(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = vec![standard_normal_field(&[1, 1, 8, 8], &mut rng)];
        let g = single_image_energy(&dec, &enc, &phi, &w, &img, &hp, &noise).unwrap();
        assert!(g.breakdown.kl < 1e-10, "kl = {}", g.breakdown.kl);
    }

    #[test]
    fn single_energy_gradients_match_finite_differences() {
        let hp = Hyperparams::single_image();
        let (enc, dec) = tiny_pair(&hp, 11);
        let img = test_image(8, 8);
        let phi = Array2::from_shape_fn((8, 8), |(i, j)| 0.2 * ((i + 2 * j) as f64 * 0.41).cos());
        let s = soft_mask(&phi);
        let w = shrinkage(&forward_grad(&s).unwrap(), hp.nu, hp.lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = vec![standard_normal_field(&[1, 1, 8, 8], &mut rng)];

        let mut g = single_image_energy(&dec, &enc, &phi, &w, &img, &hp, &noise).unwrap();
        g.tape.backward(g.loss);
        let dphi = g.tape.grad(g.phi);

        let h = 1e-5;
        let value_at = |phi: &Array2<f64>| {
            single_image_energy(&dec, &enc, phi, &w, &img, &hp, &noise)
                .unwrap()
                .breakdown
                .total
        };
        for idx in [(0usize, 0usize), (3, 4), (7, 7), (5, 2)] {
            let mut pp = phi.clone();
            pp[idx] += h;
            let mut pm = phi.clone();
            pm[idx] -= h;
            let fd = (value_at(&pp) - value_at(&pm)) / (2.0 * h);
            let an = dphi[[idx.0, idx.1]];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-3,
                "phi{idx:?}: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn multiphase_two_regions_match_binary_kl() {
        // softmax over (phi, -phi) equals sigmoid(2 phi): KL and
        // reconstruction agree with the binary energy at level field 2*phi
        let hp2 = Hyperparams::single_image();
        let hpm = Hyperparams {
            priors: hp2.priors.clone(),
            latent_dim: 1,
            ..Hyperparams::multiphase(2).unwrap()
        };
        let (enc, dec) = tiny_pair(&hp2, 13);
        let img = test_image(8, 8);
        let phi = Array2::from_shape_fn((8, 8), |(i, j)| 0.4 * ((i * 3 + j) as f64 * 0.23).sin());
        let mut phi_multi = Array3::zeros((2, 8, 8));
        phi_multi.index_axis_mut(Axis(0), 0).assign(&phi);
        phi_multi.index_axis_mut(Axis(0), 1).assign(&phi.map(|v| -v));
        let phi_bin = phi.map(|v| 2.0 * v);

        let s = soft_mask(&phi_bin);
        let wb = shrinkage(&forward_grad(&s).unwrap(), 1.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = vec![standard_normal_field(&[1, 1, 8, 8], &mut rng)];
        let gbin = single_image_energy(&dec, &enc, &phi_bin, &wb, &img, &hp2, &noise).unwrap();

        let soft = crate::nets::soft_masks_multi(&phi_multi);
        let wm: Vec<SplitField> = (0..2)
            .map(|i| {
                let si = soft.index_axis(Axis(0), i).to_owned();
                shrinkage(&forward_grad(&si).unwrap(), 1.0, 10.0).unwrap()
            })
            .collect();
        let gm = multiphase_energy(&dec, &enc, &phi_multi, &wm, &img, &hpm, &noise).unwrap();

        assert!(
            (gbin.breakdown.kl - gm.breakdown.kl).abs() < 1e-9,
            "binary kl {} vs multi kl {}",
            gbin.breakdown.kl,
            gm.breakdown.kl
        );
        assert!((gbin.breakdown.reconstruction - gm.breakdown.reconstruction).abs() < 1e-12);
    }

    #[test]
    fn multiphase_identical_priors_make_kl_flat() {
        let n = 3;
        let mut hp = Hyperparams::multiphase(n).unwrap();
        hp.priors = vec![GaussianPrior::isotropic(1.0, 1.0, n).unwrap(); n];
        let mut enc = UNet::build(
            NetworkSpec::new(1, n).with_depth(1).with_base_channels(2),
            1,
        )
        .unwrap();
        crate::nets::perturb_params(&mut enc.params, 0.2, 71);
        let dec = tiny_unet(n, 1, 2);
        let img = test_image(8, 8);
        let w: Vec<SplitField> = (0..n).map(|_| SplitField::zeros(8, 8)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = vec![standard_normal_field(&[1, n, 8, 8], &mut rng)];
        let phi_a = Array3::from_shape_fn((n, 8, 8), |(c, i, j)| (c + i + j) as f64 * 0.1);
        let phi_b = Array3::from_shape_fn((n, 8, 8), |(c, i, j)| ((c * i) as f64 - j as f64) * 0.2);
        let ga = multiphase_energy(&dec, &enc, &phi_a, &w, &img, &hp, &noise).unwrap();
        let gb = multiphase_energy(&dec, &enc, &phi_b, &w, &img, &hp, &noise).unwrap();
        assert!((ga.breakdown.kl - gb.breakdown.kl).abs() < 1e-9);
    }

    #[test]
    fn multiphase_penalty_zero_when_w_matches() {
        let n = 3;
        let hp = Hyperparams::multiphase(n).unwrap();
        let mut enc = UNet::build(
            NetworkSpec::new(1, n).with_depth(1).with_base_channels(2),
            3,
        )
        .unwrap();
        crate::nets::perturb_params(&mut enc.params, 0.2, 72);
        let dec = tiny_unet(n, 1, 4);
        let img = test_image(8, 8);
        let phi = Array3::from_shape_fn((n, 8, 8), |(c, i, j)| ((c + i + j) as f64 * 0.37).sin());
        let soft = crate::nets::soft_masks_multi(&phi);
        let w: Vec<SplitField> = (0..n)
            .map(|i| forward_grad(&soft.index_axis(Axis(0), i).to_owned()).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise = vec![standard_normal_field(&[1, n, 8, 8], &mut rng)];
        let g = multiphase_energy(&dec, &enc, &phi, &w, &img, &hp, &noise).unwrap();
        assert!(g.breakdown.penalty.abs() < 1e-18);
    }

    #[test]
    fn dataset_energy_matches_single_under_matched_inputs() {
        // a singleton batch whose segmentation probabilities equal S(phi)
        // reproduces the single-image KL + reconstruction
        let hp_single = Hyperparams {
            reduced_variance: false,
            ..Hyperparams::single_image()
        };
        let hp_data = Hyperparams {
            priors: hp_single.priors.clone(),
            ..Hyperparams::dataset()
        };
        let mut enc = UNet::build(
            NetworkSpec::new(1, 1)
                .with_depth(1)
                .with_base_channels(2)
                .with_variance_head(true),
            21,
        )
        .unwrap();
        crate::nets::perturb_params(&mut enc.params, 0.2, 73);
        let dec = tiny_unet(1, 1, 22);
        let seg = tiny_unet(1, 1, 23);
        let img = test_image(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = vec![standard_normal_field(&[1, 1, 8, 8], &mut rng)];

        let gd =
            dataset_energy(&dec, &enc, &seg, std::slice::from_ref(&img), &hp_data, &noise).unwrap();

        // recover phi = logit(U(I)) from the segmentation logits
        let input = images_to_batch(std::slice::from_ref(&img)).unwrap();
        let (logits, _) = seg.eval(&input).unwrap();
        let phi = Array2::from_shape_fn((8, 8), |(i, j)| logits[[0, 0, i, j]]);
        let w = SplitField::zeros(8, 8);
        let gs = single_image_energy(&dec, &enc, &phi, &w, &img, &hp_single, &noise).unwrap();

        assert!((gd.breakdown.kl - gs.breakdown.kl).abs() < 1e-9);
        assert!((gd.breakdown.reconstruction - gs.breakdown.reconstruction).abs() < 1e-12);
    }

    #[test]
    fn dataset_energy_additive_over_batch() {
        let hp = Hyperparams::dataset();
        let mut enc = UNet::build(
            NetworkSpec::new(1, 1)
                .with_depth(1)
                .with_base_channels(2)
                .with_variance_head(true),
            31,
        )
        .unwrap();
        crate::nets::perturb_params(&mut enc.params, 0.2, 74);
        let dec = tiny_unet(1, 1, 32);
        let seg = tiny_unet(1, 1, 33);
        let img = test_image(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let eta1 = standard_normal_field(&[1, 1, 8, 8], &mut rng);
        let mut eta2 = ArrayD::zeros(IxDyn(&[2, 1, 8, 8]));
        eta2.index_axis_mut(Axis(0), 0)
            .assign(&eta1.index_axis(Axis(0), 0));
        eta2.index_axis_mut(Axis(0), 1)
            .assign(&eta1.index_axis(Axis(0), 0));

        let g1 =
            dataset_energy(&dec, &enc, &seg, std::slice::from_ref(&img), &hp, &[eta1]).unwrap();
        let g2 =
            dataset_energy(&dec, &enc, &seg, &[img.clone(), img.clone()], &hp, &[eta2]).unwrap();
        assert!((g2.breakdown.total - 2.0 * g1.breakdown.total).abs() < 1e-8);
    }

    #[test]
    fn dataset_energy_rejects_empty_batch() {
        let hp = Hyperparams::dataset();
        let enc = UNet::build(
            NetworkSpec::new(1, 1)
                .with_depth(1)
                .with_base_channels(2)
                .with_variance_head(true),
            1,
        )
        .unwrap();
        let dec = tiny_unet(1, 1, 2);
        let seg = tiny_unet(1, 1, 3);
        assert!(dataset_energy(&dec, &enc, &seg, &[], &hp, &[]).is_err());
    }

    #[test]
    fn augmentation_ops_compose_correctly() {
        let x =
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 3]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
                .unwrap();
        // 90 degrees counterclockwise: the last column becomes the first row
        let r = AugOp::rot90().apply(&x);
        assert_eq!(r.shape(), &[1, 1, 3, 2]);
        assert_eq!(r[[0, 0, 0, 0]], 3.0);
        assert_eq!(r[[0, 0, 0, 1]], 6.0);
        assert_eq!(r[[0, 0, 2, 0]], 1.0);
        // four quarter turns are the identity
        let mut y = x.clone();
        for _ in 0..4 {
            y = AugOp::rot90().apply(&y);
        }
        assert_eq!(y, x);
        // flips are involutions
        let f = AugOp::hflip().apply(&AugOp::hflip().apply(&x));
        assert_eq!(f, x);
        let v = AugOp::vflip().apply(&AugOp::vflip().apply(&x));
        assert_eq!(v, x);
        // rot180 equals two quarter turns
        let a = AugOp::rot180().apply(&x);
        let b = AugOp::rot90().apply(&AugOp::rot90().apply(&x));
        assert_eq!(a, b);
    }

    #[test]
    fn aug_bce_constant_mask_equals_self_entropy() {
        // a constant-output segmentation net is equivariant under rot180,
        // so the BCE reduces to the mask's own entropy
        let seg = constant_output_net(tiny_unet(1, 1, 41), 0.4);
        let img = test_image(8, 8);
        let g = aug_invariance_bce(&seg, std::slice::from_ref(&img), AugOp::rot180()).unwrap();
        let p = 1.0 / (1.0 + (-0.4f64).exp());
        let expect = 64.0 * (-p * p.ln() - (1.0 - p) * (1.0 - p).ln());
        assert!((g.value - expect).abs() < 1e-9, "{} vs {expect}", g.value);
        assert!(g.value >= 0.0);
    }

    #[test]
    fn aug_bce_hard_mask_near_zero() {
        let seg = constant_output_net(tiny_unet(1, 1, 42), 30.0);
        let img = test_image(8, 8);
        let g = aug_invariance_bce(&seg, std::slice::from_ref(&img), AugOp::rot180()).unwrap();
        assert!(g.value >= 0.0 && g.value < 1e-2, "{}", g.value);
    }

    #[test]
    fn aug_bce_gradients_match_finite_differences() {
        // the target is detached, so the oracle holds it fixed while
        // perturbing the network
        let seg = tiny_unet(1, 1, 43);
        let img = test_image(8, 8);
        let op = AugOp { quarter_turns: 1, hflip: true, vflip: false };
        let input = images_to_batch(std::slice::from_ref(&img)).unwrap();
        let (logits, _) = seg.eval(&input).unwrap();
        let target = op.apply(&logits.map(|&x| stable_sigmoid_scalar(x)));

        let mut g =
            aug_invariance_bce_with_target(&seg, std::slice::from_ref(&img), op, &target).unwrap();
        g.tape.backward(g.loss);
        let h = 1e-5;
        let (name, arr) = &seg.params.entries()[0];
        let analytic = g.tape.grad(g.seg.get(name));
        for idx in [0, arr.len() / 2, arr.len() - 1] {
            let perturbed = |delta: f64| {
                let mut p = seg.params.clone();
                p.entries_mut()[0].1.as_slice_mut().unwrap()[idx] += delta;
                let net = UNet { spec: seg.spec.clone(), params: p };
                aug_invariance_bce_with_target(&net, std::slice::from_ref(&img), op, &target)
                    .unwrap()
                    .value
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-3,
                "{name}[{idx}]: {fd} vs {an}"
            );
        }
    }

    fn tiny_disc(seed: u64) -> Discriminator {
        let mut d = Discriminator::build(
            crate::nets::DiscSpec {
                channels: vec![2, 3],
                ..crate::nets::DiscSpec::new(1, (8, 8))
            },
            seed,
        )
        .unwrap();
        crate::nets::perturb_params(&mut d.params, 0.2, seed ^ 0x3C3C);
        d
    }

    #[test]
    fn discriminator_bce_constant_half() {
        // a zeroed discriminator outputs exactly 0.5 everywhere
        let mut d = tiny_disc(51);
        for (_, arr) in d.params.entries_mut() {
            arr.fill(0.0);
        }
        let real = ArrayD::from_elem(IxDyn(&[3, 1, 8, 8]), 0.5);
        let fg = ArrayD::from_elem(IxDyn(&[2, 1, 8, 8]), 0.1);
        let bg = ArrayD::from_elem(IxDyn(&[2, 1, 8, 8]), 0.9);
        let g = discriminator_bce(&d, &real, &fg, &bg).unwrap();
        let expect = 7.0 * std::f64::consts::LN_2;
        assert!((g.value - expect).abs() < 1e-9, "{} vs {expect}", g.value);
        assert!(g.value >= 0.0);
    }

    #[test]
    fn cri_constant_discriminator_gives_ln2_and_no_seg_gradient() {
        let mut d = tiny_disc(52);
        for (_, arr) in d.params.entries_mut() {
            arr.fill(0.0);
        }
        let dec = tiny_unet(1, 1, 53);
        let seg = tiny_unet(1, 1, 54);
        let img = test_image(8, 8);
        let z_fg = ArrayD::from_elem(IxDyn(&[1, 1, 8, 8]), -3.0);
        let z_bg = ArrayD::from_elem(IxDyn(&[1, 1, 8, 8]), 3.0);
        let mut g = cri_loss(&seg, &dec, &d, std::slice::from_ref(&img), &z_fg, &z_bg).unwrap();
        assert!((g.value - std::f64::consts::LN_2).abs() < 1e-9);
        g.tape.backward(g.loss);
        for (name, _) in seg.params.entries() {
            let grad = g.tape.grad(g.seg.get(name));
            assert!(grad.iter().all(|&v| v.abs() < 1e-15), "{name} has gradient");
        }
    }

    #[test]
    fn cri_gradients_match_finite_differences() {
        let d = tiny_disc(55);
        let dec = tiny_unet(1, 1, 56);
        let seg = tiny_unet(1, 1, 57);
        let img = test_image(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z_fg = standard_normal_field(&[1, 1, 8, 8], &mut rng) - 3.0;
        let z_bg = standard_normal_field(&[1, 1, 8, 8], &mut rng) + 3.0;
        let mut g = cri_loss(&seg, &dec, &d, std::slice::from_ref(&img), &z_fg, &z_bg).unwrap();
        g.tape.backward(g.loss);
        let h = 1e-5;
        let (name, arr) = &seg.params.entries()[0];
        let analytic = g.tape.grad(g.seg.get(name));
        for idx in [0, arr.len() - 1] {
            let perturbed = |delta: f64| {
                let mut p = seg.params.clone();
                p.entries_mut()[0].1.as_slice_mut().unwrap()[idx] += delta;
                let net = UNet { spec: seg.spec.clone(), params: p };
                cri_loss(&net, &dec, &d, std::slice::from_ref(&img), &z_fg, &z_bg)
                    .unwrap()
                    .value
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-3,
                "{name}[{idx}]: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("deepcv-trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let trace = vec![
            EnergyBreakdown {
                reconstruction: 1.5,
                kl: 2.25,
                tv: 0.125,
                penalty: 0.0625,
                aug_bce: 0.0,
                cri: 0.0,
                ..Default::default()
            }
            .finish(),
            EnergyBreakdown {
                reconstruction: 0.75,
                kl: 1.0,
                tv: 0.1,
                penalty: 0.05,
                aug_bce: 0.25,
                cri: 0.125,
                ..Default::default()
            }
            .finish(),
        ];
        let path = dir.join("trace.csv");
        write_trace_csv(&path, &trace).unwrap();
        let back = read_trace_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in trace.iter().zip(back.iter()) {
            assert_eq!(a, b);
        }
    }
}
