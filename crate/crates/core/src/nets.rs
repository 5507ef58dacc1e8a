//! The parametric maps: U-net encoder/decoder/segmentation networks, the
//! convolutional discriminator, sigmoid/softmax mask relaxations, and
//! parameter checkpointing.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::VAR_FLOOR;
use crate::image::LabelMask;
use crate::tape::{Tape, Var};

/// Pointwise nonlinearity used between stages.
///
/// The smooth options are the default family; ReLU variants are available
/// behind the same switch for experiments that accept non-smooth energies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    Softplus,
    /// `x * sigmoid(x)`: smooth with a ReLU-shaped positive side.
    Silu,
    Relu,
    LeakyRelu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(Error::validation(format!("unknown activation: {other}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    None,
    Instance,
}

/// Architecture description for a U-net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Number of down-sampling (and mirrored up-sampling) stages.
    pub depth: usize,
    /// Channel count at the first stage; doubles at every down stage.
    pub base_channels: usize,
    pub activation: Activation,
    pub normalization: Normalization,
    pub in_channels: usize,
    pub out_channels: usize,
    /// When set the network carries a second 1x1 head producing raw
    /// variances (made positive by softplus + floor in [`encode_on_tape`]).
    pub variance_head: bool,
}

impl NetworkSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        NetworkSpec {
            depth: 4,
            base_channels: 32,
            activation: Activation::Softplus,
            normalization: Normalization::None,
            in_channels,
            out_channels,
            variance_head: false,
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_base_channels(mut self, c: usize) -> Self {
        self.base_channels = c;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn with_variance_head(mut self, on: bool) -> Self {
        self.variance_head = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::validation("network depth must be >= 1"));
        }
        if self.base_channels < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::validation("channel counts must be >= 1"));
        }
        Ok(())
    }

    fn stage_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// A named, ordered collection of parameter arrays for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.entries.push((name.to_string(), value));
    }

    pub fn entries(&self) -> &[(String, ArrayD<f64>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, ArrayD<f64>)] {
        &mut self.entries
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Registers every array as a differentiable leaf on the tape.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(name, arr)| (name.clone(), tape.leaf(arr.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Registers every array as a constant (no gradients tracked).
    pub fn register_constant(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(name, arr)| (name.clone(), tape.constant(arr.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Adds uniform noise to every parameter; used by gradient-check oracles to
/// move networks off the zero-head initialization point.
pub fn perturb_params(params: &mut ParamSet, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, arr) in params.entries_mut() {
        arr.map_inplace(|v| *v += rng.gen_range(-scale..scale));
    }
}

/// Tape handles for a registered [`ParamSet`], in the same order.
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

fn xavier_conv(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<f64> {
    let fan_in = (cin * kh * kw) as f64;
    let fan_out = (cout * kh * kw) as f64;
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    let n = cout * cin * kh * kw;
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    ArrayD::from_shape_vec(IxDyn(&[cout, cin, kh, kw]), data).unwrap()
}

fn add_conv(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    norm: Normalization,
) {
    params.insert(&format!("{name}.w"), xavier_conv(rng, cout, cin, k, k));
    params.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
    add_conv_norm(params, name, cout, norm);
}

/// Output heads start at zero so the first optimizer steps cannot blow up
/// the network output; backbone gradients stay zero until the head grows.
fn add_conv_zero(params: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize) {
    params.insert(
        &format!("{name}.w"),
        ArrayD::zeros(IxDyn(&[cout, cin, k, k])),
    );
    params.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
}

fn add_conv_norm(params: &mut ParamSet, name: &str, cout: usize, norm: Normalization) {
    if norm == Normalization::Instance {
        params.insert(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[cout])));
        params.insert(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[cout])));
    }
}

/// A U-net: one stem convolution, `depth` halving stages, mirrored doubling
/// stages with skip concatenation, and 1x1 output head(s).
#[derive(Debug, Clone)]
pub struct UNet {
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

impl UNet {
    /// Deterministically initialized network for the given seed.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let norm = spec.normalization;
        add_conv(&mut params, &mut rng, "enc0", spec.in_channels, spec.base_channels, 3, norm);
        for k in 1..=spec.depth {
            add_conv(
                &mut params,
                &mut rng,
                &format!("down{k}"),
                spec.stage_channels(k - 1),
                spec.stage_channels(k),
                3,
                norm,
            );
        }
        for k in (1..=spec.depth).rev() {
            add_conv(
                &mut params,
                &mut rng,
                &format!("up{k}"),
                spec.stage_channels(k) + spec.stage_channels(k - 1),
                spec.stage_channels(k - 1),
                3,
                norm,
            );
        }
        add_conv_zero(&mut params, "head", spec.base_channels, spec.out_channels, 1);
        if spec.variance_head {
            add_conv_zero(&mut params, "head_var", spec.base_channels, spec.out_channels, 1);
        }
        Ok(UNet { spec, params })
    }

    fn activated(&self, tape: &mut Tape, x: Var) -> Var {
        match self.spec.activation {
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Silu => tape.silu(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, 0.01),
        }
    }

    fn stage(&self, tape: &mut Tape, vars: &ParamVars, name: &str, x: Var) -> Var {
        let w = vars.get(&format!("{name}.w"));
        let b = vars.get(&format!("{name}.b"));
        // replicate padding: constant inputs map to constant outputs, so
        // the decoder cannot paint structure from border position cues
        let mut h = tape.conv2d_replicate(x, w, b, 1, 1);
        if self.spec.normalization == Normalization::Instance {
            let gamma = vars.get(&format!("{name}.gamma"));
            let beta = vars.get(&format!("{name}.beta"));
            h = tape.instance_norm(h, gamma, beta, 1e-5);
        }
        self.activated(tape, h)
    }

    /// Records the forward pass on the tape. Returns the primary head output
    /// and, when configured, the raw (pre-positivity) variance head output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        input: Var,
    ) -> Result<(Var, Option<Var>)> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::validation(format!(
                "network expects (N,{},H,W) input, got {shape:?}",
                self.spec.in_channels
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let div = 1usize << self.spec.depth;
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(Error::validation(format!(
                "spatial size {h}x{w} is not divisible by 2^depth = {div}"
            )));
        }
        let mut x = self.stage(tape, vars, "enc0", input);
        let mut skips = vec![x];
        for k in 1..=self.spec.depth {
            let pooled = tape.avg_pool2(x);
            x = self.stage(tape, vars, &format!("down{k}"), pooled);
            if k < self.spec.depth {
                skips.push(x);
            }
        }
        for k in (1..=self.spec.depth).rev() {
            let up = tape.upsample2(x);
            let cat = tape.concat_ch(up, skips[k - 1]);
            x = self.stage(tape, vars, &format!("up{k}"), cat);
        }
        let hw = vars.get("head.w");
        let hb = vars.get("head.b");
        let primary = tape.conv2d(x, hw, hb, 1, 0);
        let variance = if self.spec.variance_head {
            let vw = vars.get("head_var.w");
            let vb = vars.get("head_var.b");
            Some(tape.conv2d(x, vw, vb, 1, 0))
        } else {
            None
        };
        Ok((primary, variance))
    }

    /// Forward pass on plain arrays (no gradients recorded).
    pub fn eval(&self, input: &ArrayD<f64>) -> Result<(ArrayD<f64>, Option<ArrayD<f64>>)> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let vars = self.params.register_constant(&mut tape);
        let (p, v) = self.forward(&mut tape, &vars, x)?;
        Ok((tape.value(p).clone(), v.map(|v| tape.value(v).clone())))
    }
}

/// Encoder output recorded on a tape: posterior mean and variance fields.
pub struct EncodedStats {
    pub mean: Var,
    /// Positive variance field; `None` in the reduced setting where the
    /// variance is the constant 1 and carries no parameters.
    pub variance: Option<Var>,
}

/// Runs the encoder and applies the positivity transform
/// (`softplus(raw) + floor`) to the variance head when present.
pub fn encode_on_tape(
    tape: &mut Tape,
    encoder: &UNet,
    vars: &ParamVars,
    image: Var,
) -> Result<EncodedStats> {
    let (mean, raw_var) = encoder.forward(tape, vars, image)?;
    let variance = raw_var.map(|rv| {
        let sp = tape.softplus(rv);
        tape.add_scalar(sp, VAR_FLOOR)
    });
    Ok(EncodedStats { mean, variance })
}

/// Architecture description for the discriminator: strided convolutions
/// followed by one fully connected layer squashed to `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscSpec {
    pub in_channels: usize,
    /// Input spatial size; fixes the fully connected layer's width.
    pub input_hw: (usize, usize),
    pub channels: Vec<usize>,
    pub activation: Activation,
    pub normalization: Normalization,
}

impl DiscSpec {
    pub fn new(in_channels: usize, input_hw: (usize, usize)) -> Self {
        DiscSpec {
            in_channels,
            input_hw,
            channels: vec![32, 64, 128, 256, 512],
            activation: Activation::LeakyRelu,
            normalization: Normalization::Instance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::validation("discriminator needs at least one layer"));
        }
        let div = 1usize << self.channels.len();
        let (h, w) = self.input_hw;
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(Error::validation(format!(
                "discriminator input {h}x{w} must be divisible by 2^{}",
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Image-to-probability network: stride-2 convolutions, one fully connected
/// layer, sigmoid output.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub spec: DiscSpec,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn build(spec: DiscSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = spec.in_channels;
        for (i, &cout) in spec.channels.iter().enumerate() {
            // instance norm is skipped on the first layer
            let norm = if i == 0 { Normalization::None } else { spec.normalization };
            params.insert(&format!("conv{i}.w"), xavier_conv(&mut rng, cout, cin, 4, 4));
            params.insert(&format!("conv{i}.b"), ArrayD::zeros(IxDyn(&[cout])));
            if norm == Normalization::Instance {
                params.insert(&format!("conv{i}.gamma"), ArrayD::ones(IxDyn(&[cout])));
                params.insert(&format!("conv{i}.beta"), ArrayD::zeros(IxDyn(&[cout])));
            }
            cin = cout;
        }
        let div = 1usize << spec.channels.len();
        let k = cin * (spec.input_hw.0 / div) * (spec.input_hw.1 / div);
        // zero head: the untrained discriminator scores everything 0.5
        params.insert("fc.w", ArrayD::zeros(IxDyn(&[1, k])));
        params.insert("fc.b", ArrayD::zeros(IxDyn(&[1])));
        Ok(Discriminator { spec, params })
    }

    /// Forward pass yielding per-sample probabilities shaped `(N,)`.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, input: Var) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::validation(format!(
                "discriminator expects (N,{},H,W), got {shape:?}",
                self.spec.in_channels
            )));
        }
        if (shape[2], shape[3]) != self.spec.input_hw {
            return Err(Error::validation(format!(
                "discriminator built for {:?} input, got {}x{}",
                self.spec.input_hw, shape[2], shape[3]
            )));
        }
        let n = shape[0];
        let mut x = input;
        for i in 0..self.spec.channels.len() {
            let w = vars.get(&format!("conv{i}.w"));
            let b = vars.get(&format!("conv{i}.b"));
            x = tape.conv2d(x, w, b, 2, 1);
            if i > 0 && self.spec.normalization == Normalization::Instance {
                let gamma = vars.get(&format!("conv{i}.gamma"));
                let beta = vars.get(&format!("conv{i}.beta"));
                x = tape.instance_norm(x, gamma, beta, 1e-5);
            }
            x = match self.spec.activation {
                Activation::Sigmoid => tape.sigmoid(x),
                Activation::Softplus => tape.softplus(x),
                Activation::Silu => tape.silu(x),
                Activation::Relu => tape.relu(x),
                Activation::LeakyRelu => tape.leaky_relu(x, 0.2),
            };
        }
        let flat_len = tape.value(x).len() / n;
        let flat = tape.reshape(x, &[n, flat_len]);
        let fw = vars.get("fc.w");
        let fb = vars.get("fc.b");
        let logits = tape.linear(flat, fw, fb);
        let probs = tape.sigmoid(logits);
        Ok(tape.reshape(probs, &[n]))
    }
}

/// Per-pixel level variables: one field for binary segmentation, `N` stacked
/// fields for multi-phase.
#[derive(Debug, Clone, PartialEq)]
pub enum LevelField {
    Binary(Array2<f64>),
    Multi(Array3<f64>),
}

impl LevelField {
    pub fn all_finite(&self) -> bool {
        match self {
            LevelField::Binary(a) => a.iter().all(|v| v.is_finite()),
            LevelField::Multi(a) => a.iter().all(|v| v.is_finite()),
        }
    }
}

/// Elementwise logistic sigmoid relaxation of a binary level field.
pub fn soft_mask(phi: &Array2<f64>) -> Array2<f64> {
    phi.map(|&x| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    })
}

/// Per-pixel softmax over the channel axis of an `(N, H, W)` field,
/// stabilized by max subtraction. Outputs sum to 1 at every pixel.
pub fn soft_masks_multi(phi: &Array3<f64>) -> Array3<f64> {
    let (n, h, w) = phi.dim();
    let mut out = Array3::zeros((n, h, w));
    for i in 0..h {
        for j in 0..w {
            let maxv = (0..n).fold(f64::NEG_INFINITY, |m, c| m.max(phi[[c, i, j]]));
            let mut denom = 0.0;
            for c in 0..n {
                let e = (phi[[c, i, j]] - maxv).exp();
                out[[c, i, j]] = e;
                denom += e;
            }
            for c in 0..n {
                out[[c, i, j]] /= denom;
            }
        }
    }
    out
}

/// Hard labels from a level field: sign for binary (ties to background),
/// per-pixel argmax with lowest-index tie-break for multi-phase.
pub fn binarize(phi: &LevelField) -> LabelMask {
    match phi {
        LevelField::Binary(a) => {
            let labels = a.map(|&v| if v > 0.0 { 1u8 } else { 0u8 });
            LabelMask::new(labels, 2).expect("binary mask")
        }
        LevelField::Multi(a) => {
            let (n, h, w) = a.dim();
            let mut labels = Array2::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let mut best = 0usize;
                    for c in 1..n {
                        if a[[c, i, j]] > a[[best, i, j]] {
                            best = c;
                        }
                    }
                    labels[[i, j]] = best as u8;
                }
            }
            LabelMask::new(labels, n.max(2)).expect("multi mask")
        }
    }
}

// ---- checkpointing ----

#[derive(Serialize, Deserialize)]
struct ArrayRecord {
    net: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayRecord>,
}

const CKPT_FORMAT: &str = "deepcv-params-v1";

/// Serializes named parameter sets into a single archive: one JSON manifest
/// line followed by the raw little-endian f64 data. Round-trips bit-exactly.
pub fn save_params(
    path: impl AsRef<Path>,
    nets: &[(&str, &ParamSet)],
    meta: &serde_json::Value,
) -> Result<()> {
    let mut arrays = Vec::new();
    for (net, params) in nets {
        for (name, arr) in params.entries() {
            arrays.push(ArrayRecord {
                net: net.to_string(),
                name: name.clone(),
                shape: arr.shape().to_vec(),
            });
        }
    }
    let manifest = Manifest {
        format: CKPT_FORMAT.to_string(),
        meta: meta.clone(),
        arrays,
    };
    let header = serde_json::to_string(&manifest)
        .map_err(|e| Error::io(format!("manifest encode: {e}")))?;
    let mut file = fs::File::create(path.as_ref())
        .map_err(|e| Error::io(format!("cannot create {}: {e}", path.as_ref().display())))?;
    file.write_all(header.as_bytes())?;
    file.write_all(b"\n")?;
    for (_, params) in nets {
        for (_, arr) in params.entries() {
            for v in arr.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Loads an archive written by [`save_params`].
pub fn load_params(path: impl AsRef<Path>) -> Result<(Vec<(String, ParamSet)>, serde_json::Value)> {
    let bytes = fs::read(path.as_ref())
        .map_err(|e| Error::io(format!("cannot read {}: {e}", path.as_ref().display())))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::io("malformed checkpoint: no manifest line"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::io(format!("malformed manifest: {e}")))?;
    if manifest.format != CKPT_FORMAT {
        return Err(Error::io(format!(
            "unsupported checkpoint format: {}",
            manifest.format
        )));
    }
    let mut data = &bytes[newline + 1..];
    let mut nets: Vec<(String, ParamSet)> = Vec::new();
    for rec in &manifest.arrays {
        let len: usize = rec.shape.iter().product();
        if data.len() < len * 8 {
            return Err(Error::io("truncated checkpoint data"));
        }
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            let mut buf = [0u8; 8];
            data.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&rec.shape), values)
            .map_err(|e| Error::io(format!("bad array shape: {e}")))?;
        match nets.iter_mut().find(|(n, _)| *n == rec.net) {
            Some((_, set)) => set.insert(&rec.name, arr),
            None => {
                let mut set = ParamSet::new();
                set.insert(&rec.name, arr);
                nets.push((rec.net.clone(), set));
            }
        }
    }
    Ok((nets, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(1, 1).with_depth(1).with_base_channels(2)
    }

    #[test]
    fn unet_shapes_mirror_input() {
        let spec = NetworkSpec::new(1, 3).with_depth(2).with_base_channels(4);
        let net = UNet::build(spec, 0).unwrap();
        let input = ArrayD::zeros(IxDyn(&[1, 1, 16, 12]));
        let (out, _) = net.eval(&input).unwrap();
        assert_eq!(out.shape(), &[1, 3, 16, 12]);
    }

    #[test]
    fn unet_bottleneck_spatial_size() {
        // 64x64 with depth 4 halves four times down to a 4x4 bottleneck.
        // A 16x16 probe at depth 4 reaches 1x1 and still works, while
        // depth 5 must be rejected: the halving rule is exercised at both
        // ends.
        let spec = NetworkSpec::new(1, 1).with_depth(4).with_base_channels(1);
        let net = UNet::build(spec, 1).unwrap();
        let input = ArrayD::zeros(IxDyn(&[1, 1, 64, 64]));
        assert!(net.eval(&input).is_ok());
        let probe = ArrayD::zeros(IxDyn(&[1, 1, 16, 16]));
        assert!(net.eval(&probe).is_ok());
        let spec5 = NetworkSpec::new(1, 1).with_depth(5).with_base_channels(1);
        let net5 = UNet::build(spec5, 1).unwrap();
        assert!(net5.eval(&probe).is_err());
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        let net =
            UNet::build(NetworkSpec::new(1, 1).with_depth(3).with_base_channels(2), 0).unwrap();
        let input = ArrayD::zeros(IxDyn(&[1, 1, 20, 20]));
        assert!(net.eval(&input).is_err());
    }

    #[test]
    fn unet_deterministic_per_seed() {
        let a = UNet::build(tiny_spec(), 7).unwrap();
        let b = UNet::build(tiny_spec(), 7).unwrap();
        let c = UNet::build(tiny_spec(), 8).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn unet_forward_deterministic() {
        let net = UNet::build(tiny_spec(), 3).unwrap();
        let input = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |d| (d[2] + d[3]) as f64 * 0.05);
        let (a, _) = net.eval(&input).unwrap();
        let (b, _) = net.eval(&input).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_variance_head_positive() {
        let spec = tiny_spec().with_variance_head(true);
        let net = UNet::build(spec, 5).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 8, 8]), 0.3));
        let vars = net.params.register(&mut tape);
        let stats = encode_on_tape(&mut tape, &net, &vars, x).unwrap();
        let var = stats.variance.expect("variance head");
        assert!(tape.value(var).iter().all(|&v| v >= VAR_FLOOR));
    }

    #[test]
    fn reduced_encoder_has_no_variance_parameters() {
        let net = UNet::build(tiny_spec(), 5).unwrap();
        assert!(net
            .params
            .entries()
            .iter()
            .all(|(name, _)| !name.starts_with("head_var")));
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 8, 8]), 0.3));
        let vars = net.params.register(&mut tape);
        let stats = encode_on_tape(&mut tape, &net, &vars, x).unwrap();
        assert!(stats.variance.is_none());
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        // miniature network, every parameter checked against central
        // differences of a scalar loss
        let mut net = UNet::build(tiny_spec(), 11).unwrap();
        perturb_params(&mut net.params, 0.2, 99);
        assert!(net.params.num_params() <= 500, "{}", net.params.num_params());
        let input = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |d| {
            ((d[2] * 8 + d[3]) as f64 * 0.618).sin() * 0.5
        });

        let loss_of = |params: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let vars = params.register(&mut tape);
            let net_ref = UNet { spec: net.spec.clone(), params: params.clone() };
            let (out, _) = net_ref.forward(&mut tape, &vars, x).unwrap();
            let sq = tape.square(out);
            let root = tape.sum_all(sq);
            tape.scalar(root)
        };

        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let vars = net.params.register(&mut tape);
        let (out, _) = net.forward(&mut tape, &vars, x).unwrap();
        let sq = tape.square(out);
        let root = tape.sum_all(sq);
        tape.backward(root);

        let h = 1e-5;
        for (pi, (name, arr)) in net.params.entries().iter().enumerate() {
            let gvar = vars.get(name);
            let analytic = tape.grad(gvar);
            for idx in 0..arr.len() {
                let mut plus = net.params.clone();
                plus.entries_mut()[pi].1.as_slice_mut().unwrap()[idx] += h;
                let mut minus = net.params.clone();
                minus.entries_mut()[pi].1.as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-2);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "{name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn discriminator_output_in_unit_interval() {
        let spec = DiscSpec {
            channels: vec![4, 8],
            ..DiscSpec::new(1, (16, 16))
        };
        let d = Discriminator::build(spec, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_shape_fn(IxDyn(&[3, 1, 16, 16]), |i| {
            (i[0] as f64 - 1.0) * 0.4
        }));
        let vars = d.params.register(&mut tape);
        let out = d.forward(&mut tape, &vars, x).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[3]);
        assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));

        let d2 = Discriminator::build(
            DiscSpec { channels: vec![4, 8], ..DiscSpec::new(1, (16, 16)) },
            2,
        )
        .unwrap();
        assert_eq!(d.params, d2.params);
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let spec = DiscSpec {
            channels: vec![2, 3],
            ..DiscSpec::new(1, (8, 8))
        };
        let mut d = Discriminator::build(spec.clone(), 4).unwrap();
        perturb_params(&mut d.params, 0.2, 98);
        assert!(d.params.num_params() <= 500, "{}", d.params.num_params());
        let input = ArrayD::from_shape_fn(IxDyn(&[2, 1, 8, 8]), |i| {
            ((i[0] + i[2] * 3 + i[3]) as f64 * 0.37).cos() * 0.5
        });
        let loss_of = |params: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let vars = params.register(&mut tape);
            let dref = Discriminator { spec: spec.clone(), params: params.clone() };
            let out = dref.forward(&mut tape, &vars, x).unwrap();
            let sq = tape.square(out);
            let root = tape.sum_all(sq);
            tape.scalar(root)
        };
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let vars = d.params.register(&mut tape);
        let out = d.forward(&mut tape, &vars, x).unwrap();
        let sq = tape.square(out);
        let root = tape.sum_all(sq);
        tape.backward(root);
        let h = 1e-5;
        for (pi, (name, arr)) in d.params.entries().iter().enumerate() {
            let analytic = tape.grad(vars.get(name));
            for idx in 0..arr.len() {
                let mut plus = d.params.clone();
                plus.entries_mut()[pi].1.as_slice_mut().unwrap()[idx] += h;
                let mut minus = d.params.clone();
                minus.entries_mut()[pi].1.as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-2);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "{name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        let phi = array![[0.0, 2.0], [-50.0, 50.0]];
        let s = soft_mask(&phi);
        assert_eq!(s[[0, 0]], 0.5);
        assert!((s[[0, 1]] - 0.8807970779778823).abs() < 1e-12);
        // limits: large |phi| saturates towards {0, 1}
        assert!(s[[1, 0]] >= 0.0 && s[[1, 0]] < 1e-20);
        assert!(s[[1, 1]] > 1.0 - 1e-15 && s[[1, 1]] <= 1.0);
    }

    #[test]
    fn softmax_known_values() {
        let mut phi = Array3::zeros((3, 1, 1));
        phi[[0, 0, 0]] = 1.0;
        let s = soft_masks_multi(&phi);
        assert!((s[[0, 0, 0]] - 0.5761168847658291).abs() < 1e-12);
        assert!((s[[1, 0, 0]] - 0.21194155761708544).abs() < 1e-12);
        assert!((s[[2, 0, 0]] - 0.21194155761708544).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_uniform() {
        let phi = Array3::from_elem((4, 2, 2), 1.7);
        let s = soft_masks_multi(&phi);
        assert!(s.iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let phi = Array3::from_shape_fn((3, 2, 2), |(c, i, j)| (c + i + j) as f64 * 0.3);
        let shifted = &phi + 5.0;
        let a = soft_masks_multi(&phi);
        let b = soft_masks_multi(&shifted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn binarize_rules() {
        let all_pos = LevelField::Binary(Array2::from_elem((3, 3), 1.0));
        assert_eq!(binarize(&all_pos).count(1), 9);
        // ties go to background
        let zeros = LevelField::Binary(Array2::zeros((3, 3)));
        assert_eq!(binarize(&zeros).count(1), 0);

        let mut phi = Array3::zeros((3, 1, 1));
        phi[[0, 0, 0]] = 0.2;
        phi[[1, 0, 0]] = 0.9;
        phi[[2, 0, 0]] = 0.1;
        let m = binarize(&LevelField::Multi(phi));
        assert_eq!(m.labels()[[0, 0]], 1);
        // argmax ties break to the lowest index
        let tie = LevelField::Multi(Array3::from_elem((3, 1, 1), 0.5));
        assert_eq!(binarize(&tie).labels()[[0, 0]], 0);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = std::env::temp_dir().join(format!("deepcv-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let net = UNet::build(tiny_spec(), 13).unwrap();
        let d = Discriminator::build(
            DiscSpec { channels: vec![2], ..DiscSpec::new(1, (8, 8)) },
            14,
        )
        .unwrap();
        let meta = serde_json::json!({"epoch": 3, "note": "fixture"});
        let path = dir.join("test.ckpt");
        save_params(&path, &[("f", &net.params), ("d", &d.params)], &meta).unwrap();
        let (nets, meta_back) = load_params(&path).unwrap();
        assert_eq!(meta_back["epoch"], 3);
        assert_eq!(nets.len(), 2);
        let f_back = &nets.iter().find(|(n, _)| n == "f").unwrap().1;
        for ((n0, a0), (n1, a1)) in net.params.entries().iter().zip(f_back.entries()) {
            assert_eq!(n0, n1);
            assert_eq!(a0.shape(), a1.shape());
            for (x, y) in a0.iter().zip(a1.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let d_back = &nets.iter().find(|(n, _)| n == "d").unwrap().1;
        assert_eq!(&d.params, d_back);
    }

    proptest! {
        #[test]
        fn softmax_outputs_sum_to_one(vals in proptest::collection::vec(-8.0f64..8.0, 3 * 4)) {
            let phi = Array3::from_shape_vec((3, 2, 2), vals).unwrap();
            let s = soft_masks_multi(&phi);
            for i in 0..2 {
                for j in 0..2 {
                    let tot: f64 = (0..3).map(|c| s[[c, i, j]]).sum();
                    prop_assert!((tot - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn threshold_and_sign_agree(vals in proptest::collection::vec(-5.0f64..5.0, 9)) {
            let phi = Array2::from_shape_vec((3, 3), vals).unwrap();
            prop_assume!(phi.iter().all(|&v| v != 0.0));
            let by_sign = binarize(&LevelField::Binary(phi.clone()));
            let s = soft_mask(&phi);
            let by_threshold = s.map(|&p| if p > 0.5 { 1u8 } else { 0u8 });
            prop_assert_eq!(by_sign.labels(), &by_threshold);
        }
    }
}
