//! Entropy-model networks: the prefix context model, the entropy-parameter
//! network and the per-block refinement networks, with loadable weights.
//!
//! All inference runs in `f64` over `f32` weights with a fixed accumulation
//! order, and transcendental functions come from `libm`, so outputs are
//! bit-identical across runs and platforms.
//!
//! Layer layout (`F_in = hyper_features + context_features`):
//!
//! * context model: one 5x5 same-padded convolution `C -> context_features`,
//!   then `max(0, x)`.
//! * hyperprior features: per-pixel affine map of the hyperlatent sample at
//!   `(y / 4, x / 4)`, `C_z -> hyper_features`.
//! * entropy parameters: `[P; C_ctx]` through a 1x1 layer to `hidden`, `max(0, x)`,
//!   then a 1x1 layer to `2C` rows: rows `0..C` are means, rows `C..2C` raw
//!   scales. Scales map through `softplus(x + ln(e - 1))` (so 0 gives 1) and
//!   are floored at [`SIGMA_MIN`].
//! * refinement for block `b >= 2`: `X1 = X + max(0, dw3x3(X))`, then
//!   single-head attention inside each cell of an 8x8 window grid
//!   (`X2 = X1 + W_o softmax(q k^T / sqrt(d)) v`), then a 1x1 head to
//!   `2 n_b` rows (`0..n_b` mean corrections, `n_b..2n_b` scale corrections).
//!   Refined scales are `max(sigma + d_sigma, SIGMA_MIN)`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::entropycoder::SIGMA_MIN;
use crate::formats::{self, FormatError, Tensor, HASH_LEN};
use crate::latent::{ChannelConfig, LatentTensor, LayoutError};
use crate::rng::Lcg64;

pub const CONTEXT_KERNEL: usize = 5;
pub const DEPTHWISE_KERNEL: usize = 3;
pub const ATTENTION_WINDOW: usize = 8;
/// Spatial downsampling from latent to hyperlatent grid.
pub const HYPER_STRIDE: usize = 4;

/// `ln(e - 1)`: softplus of this is exactly 1.
const SCALE_SHIFT: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("block {0} has no refinement network")]
    InvalidBlock(usize),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl From<LayoutError> for ModelError {
    fn from(e: LayoutError) -> Self {
        ModelError::InvalidConfig(e.to_string())
    }
}

fn shape_err(what: impl Into<String>, expected: &[usize], found: &[usize]) -> ModelError {
    ModelError::ShapeMismatch {
        what: what.into(),
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: ChannelConfig,
    pub hyper_channels: usize,
    pub context_features: usize,
    pub hyper_features: usize,
    pub hidden: usize,
    pub attention_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: ChannelConfig::default(),
            hyper_channels: 64,
            context_features: 128,
            hyper_features: 128,
            hidden: 128,
            attention_dim: 32,
        }
    }
}

impl ModelConfig {
    /// A reduced configuration for tests and fuzzing.
    pub fn small(channels: ChannelConfig) -> Self {
        Self {
            channels,
            hyper_channels: 4,
            context_features: 6,
            hyper_features: 5,
            hidden: 7,
            attention_dim: 3,
        }
    }

    pub fn fused_features(&self) -> usize {
        self.hyper_features + self.context_features
    }

    fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.hyper_channels,
            self.context_features,
            self.hyper_features,
            self.hidden,
            self.attention_dim,
        ];
        if dims.contains(&0) {
            return Err(ModelError::InvalidConfig(
                "all layer widths must be nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// Real feature map of shape `(F, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub features: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureField {
    pub fn zeros(features: usize, height: usize, width: usize) -> Self {
        Self {
            features,
            height,
            width,
            data: vec![0.0; features * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, f: usize) -> &[f64] {
        &self.data[f * self.plane()..(f + 1) * self.plane()]
    }
}

/// Per-symbol Gaussian parameters for the channels of one block, `(n, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub first_channel: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianField {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    out: usize,
    inp: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            out,
            inp,
            weight: vec![0.0; out * inp],
            bias: vec![0.0; out],
        }
    }

    /// Applies output rows `rows` to a channel-major input built from `inputs`
    /// (concatenated along features). Accumulates bias, then inputs in order.
    fn apply_rows(
        &self,
        inputs: &[&[f64]],
        plane: usize,
        rows: std::ops::Range<usize>,
    ) -> Vec<f64> {
        let mut out = vec![0.0; rows.len() * plane];
        for (o, j) in rows.enumerate() {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.iter_mut().for_each(|v| *v = f64::from(self.bias[j]));
            let mut i = 0;
            for src in inputs {
                for ch in src.chunks_exact(plane) {
                    let w = f64::from(self.weight[j * self.inp + i]);
                    if w != 0.0 {
                        for (d, s) in dst.iter_mut().zip(ch) {
                            *d += w * s;
                        }
                    }
                    i += 1;
                }
            }
        }
        out
    }

    fn apply(&self, inputs: &[&[f64]], plane: usize) -> Vec<f64> {
        self.apply_rows(inputs, plane, 0..self.out)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv2d {
    out: usize,
    inp: usize,
    kernel: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
struct DeltaNet {
    depthwise_weight: Vec<f32>,
    depthwise_bias: Vec<f32>,
    query: Dense,
    key: Dense,
    value: Dense,
    out: Dense,
    head: Dense,
}

/// Weights of the whole entropy model plus the hyperlatent prior, identified
/// by the content hash of their container serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    context: Conv2d,
    hyper: Dense,
    entropy_hidden: Dense,
    entropy_out: Dense,
    deltas: Vec<DeltaNet>,
    prior_mean: Vec<f32>,
    prior_scale: Vec<f32>,
    hash: [u8; HASH_LEN],
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `softplus(x + ln(e - 1))`, floored at `SIGMA_MIN`.
pub fn positive_scale(raw: f64) -> f64 {
    let x = raw + SCALE_SHIFT;
    let s = if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    };
    s.max(SIGMA_MIN)
}

fn delta_prefix(block: usize) -> String {
    format!("delta.{block}")
}

impl ModelBundle {
    /// All weights zero (refinement heads included); the hyperlatent prior is
    /// the unit Gaussian.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config.channels.total_channels();
        let fin = config.fused_features();
        let kk = CONTEXT_KERNEL * CONTEXT_KERNEL;
        let deltas = (2..=config.channels.num_blocks())
            .map(|b| {
                let n = config.channels.block_channels(b).len();
                DeltaNet {
                    depthwise_weight: vec![0.0; fin * DEPTHWISE_KERNEL * DEPTHWISE_KERNEL],
                    depthwise_bias: vec![0.0; fin],
                    query: Dense::zeros(config.attention_dim, fin),
                    key: Dense::zeros(config.attention_dim, fin),
                    value: Dense::zeros(config.attention_dim, fin),
                    out: Dense::zeros(fin, config.attention_dim),
                    head: Dense::zeros(2 * n, fin),
                }
            })
            .collect();
        let mut bundle = Self {
            context: Conv2d {
                out: config.context_features,
                inp: c,
                kernel: CONTEXT_KERNEL,
                weight: vec![0.0; config.context_features * c * kk],
                bias: vec![0.0; config.context_features],
            },
            hyper: Dense::zeros(config.hyper_features, config.hyper_channels),
            entropy_hidden: Dense::zeros(config.hidden, fin),
            entropy_out: Dense::zeros(2 * c, config.hidden),
            deltas,
            prior_mean: vec![0.0; config.hyper_channels],
            prior_scale: vec![1.0; config.hyper_channels],
            hash: [0; HASH_LEN],
            config,
        };
        bundle.rehash();
        Ok(bundle)
    }

    /// Seeded random weights scaled so that predicted scales span roughly
    /// `0.2..4` and refinements stay small relative to the base model.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut b = Self::zeros(config)?;
        let mut rng = Lcg64::new(seed);
        let fill = |v: &mut [f32], a: f64, rng: &mut Lcg64| {
            v.iter_mut().for_each(|x| *x = rng.uniform(-a, a) as f32);
        };
        let cfg = b.config.clone();
        let c = cfg.channels.total_channels();
        let fin = cfg.fused_features() as f64;
        let kk = (CONTEXT_KERNEL * CONTEXT_KERNEL) as f64;

        fill(
            &mut b.context.weight,
            0.6 * (3.0 / (c as f64 * kk)).sqrt(),
            &mut rng,
        );
        fill(&mut b.context.bias, 0.1, &mut rng);
        fill(
            &mut b.hyper.weight,
            0.6 * (3.0 / cfg.hyper_channels as f64).sqrt(),
            &mut rng,
        );
        fill(&mut b.hyper.bias, 0.1, &mut rng);
        fill(&mut b.entropy_hidden.weight, (3.0 / fin).sqrt(), &mut rng);
        fill(&mut b.entropy_hidden.bias, 0.1, &mut rng);
        let hidden_a = (3.0 / cfg.hidden as f64).sqrt();
        let (means, scales) = b.entropy_out.weight.split_at_mut(c * cfg.hidden);
        fill(means, hidden_a, &mut rng);
        fill(scales, 0.5 * hidden_a, &mut rng);
        let (mean_bias, scale_bias) = b.entropy_out.bias.split_at_mut(c);
        fill(mean_bias, 1.0, &mut rng);
        for v in scale_bias.iter_mut() {
            *v = rng.uniform(-1.5, 2.5) as f32;
        }
        let attn = cfg.attention_dim as f64;
        for d in &mut b.deltas {
            fill(&mut d.depthwise_weight, 0.3, &mut rng);
            fill(&mut d.depthwise_bias, 0.05, &mut rng);
            for layer in [&mut d.query, &mut d.key, &mut d.value] {
                fill(&mut layer.weight, (3.0 / fin).sqrt(), &mut rng);
                fill(&mut layer.bias, 0.05, &mut rng);
            }
            fill(&mut d.out.weight, 0.3 * (3.0 / attn).sqrt(), &mut rng);
            fill(&mut d.out.bias, 0.05, &mut rng);
            fill(&mut d.head.weight, 0.1 * (3.0 / fin).sqrt(), &mut rng);
            fill(&mut d.head.bias, 0.05, &mut rng);
        }
        fill(&mut b.prior_mean, 1.0, &mut rng);
        for v in b.prior_scale.iter_mut() {
            *v = rng.uniform(0.5, 4.0) as f32;
        }
        b.rehash();
        Ok(b)
    }

    /// Same bundle with every refinement weight and bias set to zero.
    pub fn with_zero_delta(&self) -> Self {
        let mut b = self.clone();
        for d in &mut b.deltas {
            d.depthwise_weight.iter_mut().for_each(|v| *v = 0.0);
            d.depthwise_bias.iter_mut().for_each(|v| *v = 0.0);
            for layer in [
                &mut d.query,
                &mut d.key,
                &mut d.value,
                &mut d.out,
                &mut d.head,
            ] {
                layer.weight.iter_mut().for_each(|v| *v = 0.0);
                layer.bias.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        b.rehash();
        b
    }

    fn rehash(&mut self) {
        self.hash = formats::write_container(&self.tensors()).1;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn channel_config(&self) -> &ChannelConfig {
        &self.config.channels
    }

    pub fn hash(&self) -> [u8; HASH_LEN] {
        self.hash
    }

    pub fn prior(&self) -> (&[f32], &[f32]) {
        (&self.prior_mean, &self.prior_scale)
    }

    /// Named tensors in container form.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let cfg = &self.config;
        let fin = cfg.fused_features();
        let k = CONTEXT_KERNEL;
        let mut m = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>, data: &[f32]| {
            m.insert(name, Tensor::f32(shape, data.to_vec()));
        };
        let blocks: Vec<f32> = cfg
            .channels
            .boundaries()
            .iter()
            .map(|&b| b as f32)
            .collect();
        put("meta.blocks".into(), vec![blocks.len()], &blocks);
        put(
            "meta.attention_dim".into(),
            vec![1],
            &[cfg.attention_dim as f32],
        );
        put(
            "context.weight".into(),
            vec![self.context.out, self.context.inp, k, k],
            &self.context.weight,
        );
        put(
            "context.bias".into(),
            vec![self.context.out],
            &self.context.bias,
        );
        for (name, d) in [
            ("hyper", &self.hyper),
            ("entropy.hidden", &self.entropy_hidden),
            ("entropy.out", &self.entropy_out),
        ] {
            put(format!("{name}.weight"), vec![d.out, d.inp], &d.weight);
            put(format!("{name}.bias"), vec![d.out], &d.bias);
        }
        for (i, d) in self.deltas.iter().enumerate() {
            let p = delta_prefix(i + 2);
            let dk = DEPTHWISE_KERNEL;
            put(
                format!("{p}.depthwise.weight"),
                vec![fin, dk, dk],
                &d.depthwise_weight,
            );
            put(format!("{p}.depthwise.bias"), vec![fin], &d.depthwise_bias);
            for (name, layer) in [
                ("attn.query", &d.query),
                ("attn.key", &d.key),
                ("attn.value", &d.value),
                ("attn.out", &d.out),
                ("head", &d.head),
            ] {
                put(
                    format!("{p}.{name}.weight"),
                    vec![layer.out, layer.inp],
                    &layer.weight,
                );
                put(format!("{p}.{name}.bias"), vec![layer.out], &layer.bias);
            }
        }
        put(
            "prior.mean".into(),
            vec![cfg.hyper_channels],
            &self.prior_mean,
        );
        put(
            "prior.scale".into(),
            vec![cfg.hyper_channels],
            &self.prior_scale,
        );
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        formats::write_container(&self.tensors()).0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (tensors, _) = formats::read_container(bytes)?;
        Self::from_tensors(&tensors)
    }

    /// Rebuilds a bundle from named tensors, inferring layer widths from
    /// shapes and checking every shape against them.
    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Self, ModelError> {
        let get = |name: &str| -> Result<&Tensor, ModelError> {
            tensors
                .get(name)
                .ok_or_else(|| ModelError::MissingTensor(name.to_owned()))
        };
        let first_dim = |name: &str| -> Result<usize, ModelError> {
            let t = get(name)?;
            match t.shape[..] {
                [n] => Ok(n),
                _ => Err(shape_err(name, &[0], &t.shape)),
            }
        };
        let blocks_t = get("meta.blocks")?;
        let mut boundaries = Vec::new();
        for &v in blocks_t.as_f32()? {
            if !(v >= 1.0 && v <= 1e7 && v.fract() == 0.0) {
                return Err(ModelError::InvalidConfig(format!("bad block boundary {v}")));
            }
            boundaries.push(v as usize);
        }
        let config = ModelConfig {
            channels: ChannelConfig::new(boundaries)?,
            hyper_channels: first_dim("prior.mean")?,
            context_features: first_dim("context.bias")?,
            hyper_features: first_dim("hyper.bias")?,
            hidden: first_dim("entropy.hidden.bias")?,
            attention_dim: {
                let t = get("meta.attention_dim")?;
                match t.as_f32()? {
                    [v] if *v >= 1.0 && *v <= 1e6 && v.fract() == 0.0 => *v as usize,
                    _ => return Err(ModelError::InvalidConfig("bad attention width".into())),
                }
            },
        };
        config.validate()?;
        let mut b = Self::zeros(config)?;
        let expected = b.tensors();
        for name in tensors.keys() {
            if !expected.contains_key(name) {
                return Err(ModelError::UnexpectedTensor(name.clone()));
            }
        }
        for (name, want) in &expected {
            let t = get(name)?;
            if t.shape != want.shape {
                return Err(shape_err(name.as_str(), &want.shape, &t.shape));
            }
        }
        let data =
            |name: &str| -> Vec<f32> { tensors[name].as_f32().expect("f32 container").to_vec() };
        b.context.weight = data("context.weight");
        b.context.bias = data("context.bias");
        for (name, d) in [
            ("hyper", &mut b.hyper),
            ("entropy.hidden", &mut b.entropy_hidden),
            ("entropy.out", &mut b.entropy_out),
        ] {
            d.weight = data(&format!("{name}.weight"));
            d.bias = data(&format!("{name}.bias"));
        }
        for (i, d) in b.deltas.iter_mut().enumerate() {
            let p = delta_prefix(i + 2);
            d.depthwise_weight = data(&format!("{p}.depthwise.weight"));
            d.depthwise_bias = data(&format!("{p}.depthwise.bias"));
            for (name, layer) in [
                ("attn.query", &mut d.query),
                ("attn.key", &mut d.key),
                ("attn.value", &mut d.value),
                ("attn.out", &mut d.out),
                ("head", &mut d.head),
            ] {
                layer.weight = data(&format!("{p}.{name}.weight"));
                layer.bias = data(&format!("{p}.{name}.bias"));
            }
        }
        b.prior_mean = data("prior.mean");
        b.prior_scale = data("prior.scale");
        b.rehash();
        Ok(b)
    }

    /// Hyperprior features `P` on the latent grid `height x width`.
    pub fn hyper_features(
        &self,
        hyper: &LatentTensor,
        height: usize,
        width: usize,
    ) -> Result<FeatureField, ModelError> {
        let want = [
            self.config.hyper_channels,
            height.div_ceil(HYPER_STRIDE),
            width.div_ceil(HYPER_STRIDE),
        ];
        let found = [hyper.channels(), hyper.height(), hyper.width()];
        if want != found {
            return Err(shape_err("hyperlatent", &want, &found));
        }
        let plane = height * width;
        // Nearest-neighbour upsample, then a pointwise affine layer.
        let mut up = vec![0.0; hyper.channels() * plane];
        for c in 0..hyper.channels() {
            for y in 0..height {
                for x in 0..width {
                    up[c * plane + y * width + x] =
                        f64::from(hyper.get(c, y / HYPER_STRIDE, x / HYPER_STRIDE));
                }
            }
        }
        Ok(FeatureField {
            features: self.config.hyper_features,
            height,
            width,
            data: self.hyper.apply(&[&up], plane),
        })
    }

    /// Context features of a prefix-masked latent.
    pub fn context_features(&self, masked: &LatentTensor) -> Result<FeatureField, ModelError> {
        let c = self.config.channels.total_channels();
        if masked.channels() != c {
            return Err(shape_err("latent channels", &[c], &[masked.channels()]));
        }
        let (h, w) = (masked.height(), masked.width());
        let plane = h * w;
        let conv = &self.context;
        let k = conv.kernel;
        let pad = k / 2;
        let active: Vec<usize> = (0..c)
            .filter(|&ch| masked.channel(ch).iter().any(|&v| v != 0))
            .collect();
        let input: Vec<Vec<f64>> = active
            .iter()
            .map(|&ch| masked.channel(ch).iter().map(|&v| f64::from(v)).collect())
            .collect();
        let mut out = vec![0.0; conv.out * plane];
        for f in 0..conv.out {
            let dst = &mut out[f * plane..(f + 1) * plane];
            dst.iter_mut().for_each(|v| *v = f64::from(conv.bias[f]));
            for (src, &ch) in input.iter().zip(&active) {
                let wbase = (f * conv.inp + ch) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = f64::from(conv.weight[wbase + ky * k + kx]);
                        if wt == 0.0 {
                            continue;
                        }
                        // output (y, x) reads input (y + ky - pad, x + kx - pad)
                        let y0 = pad.saturating_sub(ky);
                        let y1 = (h + pad).saturating_sub(ky).min(h);
                        let x0 = pad.saturating_sub(kx);
                        let x1 = (w + pad).saturating_sub(kx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = y + ky - pad;
                            let srow = &src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v = relu(*v));
        }
        Ok(FeatureField {
            features: conv.out,
            height: h,
            width: w,
            data: out,
        })
    }

    fn check_pair(&self, p: &FeatureField, c: &FeatureField) -> Result<(), ModelError> {
        if p.features != self.config.hyper_features {
            return Err(shape_err(
                "hyper features",
                &[self.config.hyper_features],
                &[p.features],
            ));
        }
        if c.features != self.config.context_features {
            return Err(shape_err(
                "context features",
                &[self.config.context_features],
                &[c.features],
            ));
        }
        if (p.height, p.width) != (c.height, c.width) {
            return Err(shape_err(
                "feature grid",
                &[p.height, p.width],
                &[c.height, c.width],
            ));
        }
        Ok(())
    }

    fn check_block(&self, block: usize) -> Result<(), ModelError> {
        if block == 0 || block > self.config.channels.num_blocks() {
            return Err(ModelError::InvalidBlock(block));
        }
        Ok(())
    }

    /// Base Gaussian parameters for one block from `[P; C_ctx]`.
    pub fn entropy_params(
        &self,
        p: &FeatureField,
        c: &FeatureField,
        block: usize,
    ) -> Result<GaussianField, ModelError> {
        self.check_pair(p, c)?;
        self.check_block(block)?;
        let plane = p.plane();
        let total = self.config.channels.total_channels();
        let range = self.config.channels.block_channels(block);
        let mut hidden = self.entropy_hidden.apply(&[&p.data, &c.data], plane);
        hidden.iter_mut().for_each(|v| *v = relu(*v));
        let mu = self
            .entropy_out
            .apply_rows(&[&hidden], plane, range.clone());
        let mut sigma =
            self.entropy_out
                .apply_rows(&[&hidden], plane, total + range.start..total + range.end);
        sigma.iter_mut().for_each(|v| *v = positive_scale(*v));
        Ok(GaussianField {
            first_channel: range.start,
            channels: range.len(),
            height: p.height,
            width: p.width,
            mu,
            sigma,
        })
    }

    /// Raw `(d_mu, d_sigma)` from the refinement network of `block`.
    pub fn delta_corrections(
        &self,
        p: &FeatureField,
        c: &FeatureField,
        block: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        self.check_pair(p, c)?;
        if block < 2 || block > self.config.channels.num_blocks() {
            return Err(ModelError::InvalidBlock(block));
        }
        let net = &self.deltas[block - 2];
        let (h, w) = (p.height, p.width);
        let plane = h * w;
        let fin = self.config.fused_features();

        let mut x = Vec::with_capacity(fin * plane);
        x.extend_from_slice(&p.data);
        x.extend_from_slice(&c.data);

        // depthwise residual block
        let k = DEPTHWISE_KERNEL;
        let mut x1 = x.clone();
        for f in 0..fin {
            let src = &x[f * plane..(f + 1) * plane];
            let wts = &net.depthwise_weight[f * k * k..(f + 1) * k * k];
            let bias = f64::from(net.depthwise_bias[f]);
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias;
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += f64::from(wts[ky * k + kx]) * src[sy as usize * w + sx as usize];
                        }
                    }
                    x1[f * plane + y * w + xx] += relu(acc);
                }
            }
        }

        // windowed single-head attention
        let d = self.config.attention_dim;
        let q = net.query.apply(&[&x1], plane);
        let kmat = net.key.apply(&[&x1], plane);
        let v = net.value.apply(&[&x1], plane);
        let attended = window_attention(&q, &kmat, &v, d, h, w).0;
        let proj = net.out.apply(&[&attended], plane);
        let x2: Vec<f64> = x1.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let head = net.head.apply(&[&x2], plane);
        let n = net.head.out / 2;
        let (dmu, dsigma) = head.split_at(n * plane);
        Ok((dmu.to_vec(), dsigma.to_vec()))
    }

    /// Residual refinement of a block's base parameters.
    pub fn delta_refine(
        &self,
        p: &FeatureField,
        c: &FeatureField,
        base: &GaussianField,
        block: usize,
    ) -> Result<GaussianField, ModelError> {
        let (dmu, dsigma) = self.delta_corrections(p, c, block)?;
        if dmu.len() != base.len() {
            return Err(shape_err("base parameters", &[dmu.len()], &[base.len()]));
        }
        let mut out = base.clone();
        for (m, d) in out.mu.iter_mut().zip(&dmu) {
            *m += d;
        }
        for (s, d) in out.sigma.iter_mut().zip(&dsigma) {
            *s = (*s + d).max(SIGMA_MIN);
        }
        Ok(out)
    }
}

/// Attention inside each cell of an 8x8 window grid over `h x w`.
/// `q`, `k`, `v` are `(d, h*w)` channel-major. Returns the attended values
/// `(d, h*w)` and, per window, its row-major `tokens x tokens` weight matrix.
pub(crate) fn window_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let plane = h * w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; d * plane];
    let mut all_weights = Vec::new();
    for wy in (0..h).step_by(ATTENTION_WINDOW) {
        for wx in (0..w).step_by(ATTENTION_WINDOW) {
            let tokens: Vec<usize> = (wy..(wy + ATTENTION_WINDOW).min(h))
                .flat_map(|y| (wx..(wx + ATTENTION_WINDOW).min(w)).map(move |x| y * w + x))
                .collect();
            let n = tokens.len();
            let mut weights = vec![0.0; n * n];
            let mut scores = vec![0.0; n];
            for (ti, &t) in tokens.iter().enumerate() {
                for (ui, &u) in tokens.iter().enumerate() {
                    let mut s = 0.0;
                    for i in 0..d {
                        s += q[i * plane + t] * k[i * plane + u];
                    }
                    scores[ui] = s * scale;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = libm::exp(*s - max);
                    sum += *s;
                }
                let row = &mut weights[ti * n..(ti + 1) * n];
                for (r, s) in row.iter_mut().zip(&scores) {
                    *r = s / sum;
                }
                for i in 0..d {
                    let mut acc = 0.0;
                    for (ui, &u) in tokens.iter().enumerate() {
                        acc += row[ui] * v[i * plane + u];
                    }
                    out[i * plane + t] = acc;
                }
            }
            all_weights.push(weights);
        }
    }
    (out, all_weights)
}
