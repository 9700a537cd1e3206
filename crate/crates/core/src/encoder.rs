//! Feed-forward encoder with optional residual adapters, and a linear head.
//!
//! # Parameter layout
//!
//! A full module flattens every backbone layer in order. Each layer stores its
//! weight matrix (`out × in`, row-major) followed by its bias. An adapter
//! module flattens, for each backbone layer in order, the down-projection
//! weights (`bottleneck × width`), down bias, up-projection weights
//! (`width × bottleneck`) and up bias.
//!
//! Layer `l` computes `a = act(W h + b)`. With adapters the layer output is
//! `a + U act(D a + d) + u`, which is the identity when `U` and `u` are zero.

use std::fmt;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::dot;
use crate::rng::{derive_seed, rng_from};

/// Standard deviation of the adapter down-projection initialization.
pub const ADAPTER_INIT_STD: f64 = 0.02;

const LAYOUT_TAG: &str = "layer-major;weights-then-bias;row-major;adapter=down.w,down.b,up.w,up.b";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the activation value.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Shared bottleneck width for every adapter; `None` uses half of each
    /// layer's width, rounded up.
    #[serde(default)]
    pub adapter_bottleneck: Option<usize>,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dims,
            embed_dim,
            activation: Activation::Tanh,
            adapter_bottleneck: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidInput("encoder dimensions must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidInput("encoder needs at least one hidden layer".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidInput("hidden widths must be positive".into()));
        }
        if let Some(b) = self.adapter_bottleneck {
            let narrowest = self.layer_widths()[1..].iter().copied().min().unwrap_or(0);
            if b == 0 || b > narrowest {
                return Err(Error::InvalidInput(format!(
                    "adapter bottleneck {b} must be in 1..={narrowest}"
                )));
            }
        }
        Ok(())
    }

    /// `[input_dim, hidden..., embed_dim]`.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend(&self.hidden_dims);
        widths.push(self.embed_dim);
        widths
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn bottleneck(&self, layer: usize) -> usize {
        let width = self.layer_widths()[layer + 1];
        self.adapter_bottleneck.unwrap_or(width.div_ceil(2))
    }

    pub fn full_param_count(&self) -> usize {
        self.layer_widths()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn adapter_param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|l| {
                let width = self.layer_widths()[l + 1];
                let b = self.bottleneck(l);
                width * b * 2 + b + width
            })
            .sum()
    }

    pub fn param_count(&self, kind: ModuleKind) -> usize {
        match kind {
            ModuleKind::Full => self.full_param_count(),
            ModuleKind::Adapter => self.adapter_param_count(),
        }
    }

    /// SHA-256 over the architecture and the flattening order.
    pub fn fingerprint(&self) -> Fingerprint {
        let bottlenecks: Vec<String> = (0..self.num_layers())
            .map(|l| self.bottleneck(l).to_string())
            .collect();
        let canonical = format!(
            "moma-encoder/1;input={};hidden={};embed={};act={};bottleneck={};order={}",
            self.input_dim,
            self.hidden_dims
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            self.embed_dim,
            self.activation,
            bottlenecks.join(","),
            LAYOUT_TAG,
        );
        let digest = Sha256::digest(canonical.as_bytes());
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&digest);
        Fingerprint(bytes)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..12])
    }
}

impl TryFrom<String> for Fingerprint {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        let raw = hex::decode(&value)
            .map_err(|e| Error::InvalidInput(format!("fingerprint `{value}`: {e}")))?;
        let bytes: [u8; 32] = raw
            .try_into()
            .map_err(|_| Error::InvalidInput(format!("fingerprint `{value}` is not 32 bytes")))?;
        Ok(Fingerprint(bytes))
    }
}

impl From<Fingerprint> for String {
    fn from(value: Fingerprint) -> Self {
        value.to_hex()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Full,
    Adapter,
}

impl ModuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Full => "full",
            ModuleKind::Adapter => "adapter",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModuleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModuleKind::Full),
            "adapter" => Ok(ModuleKind::Adapter),
            other => Err(Error::InvalidInput(format!("unknown module kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleMeta {
    pub id: String,
    pub task_name: String,
    pub created_from_seed: u64,
    pub train_mae: f64,
    pub notes: String,
}

/// A trained parameter bundle: either a whole encoder or the adapters that
/// sit on top of a frozen one.
#[derive(Clone, Debug, PartialEq)]
pub struct Module {
    kind: ModuleKind,
    config: EncoderConfig,
    fingerprint: Fingerprint,
    params: Vec<f64>,
    pub meta: ModuleMeta,
}

impl Module {
    pub fn new(
        kind: ModuleKind,
        config: EncoderConfig,
        params: Vec<f64>,
        meta: ModuleMeta,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.param_count(kind);
        if params.len() != expected {
            return Err(Error::shape(
                format!("{expected} {kind} parameters"),
                params.len(),
            ));
        }
        let fingerprint = config.fingerprint();
        Ok(Module {
            kind,
            config,
            fingerprint,
            params,
            meta,
        })
    }

    pub fn kind(&self) -> ModuleKind {
        self.kind
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Same module with its parameter vector swapped out.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Module::new(self.kind, self.config.clone(), params, self.meta.clone())
    }

    pub fn dense_layers(&self) -> Result<Vec<DenseLayer>> {
        match self.kind {
            ModuleKind::Full => Ok(unflatten_full(&self.config, &self.params)),
            ModuleKind::Adapter => Err(Error::InvalidModule(
                "adapter module has no dense backbone layers".into(),
            )),
        }
    }

    pub fn adapter_layers(&self) -> Result<Vec<AdapterLayer>> {
        match self.kind {
            ModuleKind::Adapter => Ok(unflatten_adapters(&self.config, &self.params)),
            ModuleKind::Full => Err(Error::InvalidModule("full module has no adapters".into())),
        }
    }
}

/// Linear prediction head over an embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Head {
    pub fn zeros(embed_dim: usize) -> Self {
        Head {
            weights: vec![0.0; embed_dim],
            bias: 0.0,
        }
    }

    pub fn predict(&self, embedding: &[f64]) -> f64 {
        dot(&self.weights, embedding) + self.bias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// One affine map `out × in`, weights row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    pub down: DenseLayer,
    pub up: DenseLayer,
}

fn unflatten_full(config: &EncoderConfig, params: &[f64]) -> Vec<DenseLayer> {
    let mut offset = 0;
    config
        .layer_widths()
        .windows(2)
        .map(|w| {
            let layer = take_dense(params, &mut offset, w[1], w[0]);
            layer
        })
        .collect()
}

fn unflatten_adapters(config: &EncoderConfig, params: &[f64]) -> Vec<AdapterLayer> {
    let widths = config.layer_widths();
    let mut offset = 0;
    (0..config.num_layers())
        .map(|l| {
            let (width, b) = (widths[l + 1], config.bottleneck(l));
            let down = take_dense(params, &mut offset, b, width);
            let up = take_dense(params, &mut offset, width, b);
            AdapterLayer { down, up }
        })
        .collect()
}

fn take_dense(params: &[f64], offset: &mut usize, rows: usize, cols: usize) -> DenseLayer {
    let weight = params[*offset..*offset + rows * cols].to_vec();
    *offset += rows * cols;
    let bias = params[*offset..*offset + rows].to_vec();
    *offset += rows;
    DenseLayer {
        rows,
        cols,
        weight,
        bias,
    }
}

pub fn flatten_dense(layers: &[DenseLayer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
        .collect()
}

pub fn flatten_adapters(layers: &[AdapterLayer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|a| {
            a.down
                .weight
                .iter()
                .chain(&a.down.bias)
                .chain(&a.up.weight)
                .chain(&a.up.bias)
                .copied()
        })
        .collect()
}

/// Fresh full module: Glorot-uniform weights, zero biases.
pub fn init_backbone(config: &EncoderConfig, seed: u64) -> Result<Module> {
    config.validate()?;
    let mut rng = rng_from(derive_seed(seed, &[0xBAC4_B0E]));
    let mut params = Vec::with_capacity(config.full_param_count());
    for w in config.layer_widths().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        params.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Module::new(
        ModuleKind::Full,
        config.clone(),
        params,
        ModuleMeta {
            created_from_seed: seed,
            notes: "initialized backbone".into(),
            ..ModuleMeta::default()
        },
    )
}

/// Adapters for `backbone` whose up-projections start at zero, so the
/// adapted encoder initially reproduces the backbone exactly.
pub fn attach_adapters(backbone: &Module, config: &EncoderConfig, seed: u64) -> Result<Module> {
    if backbone.kind() != ModuleKind::Full {
        return Err(Error::ConfigMismatch("adapters attach to a full backbone".into()));
    }
    if backbone.fingerprint() != config.fingerprint() {
        return Err(Error::ConfigMismatch(format!(
            "backbone fingerprint {} does not match config {}",
            backbone.fingerprint(),
            config.fingerprint()
        )));
    }
    let mut rng = rng_from(derive_seed(seed, &[0xADA_97E5]));
    let normal = Normal::new(0.0, ADAPTER_INIT_STD).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let widths = config.layer_widths();
    let mut params = Vec::with_capacity(config.adapter_param_count());
    for l in 0..config.num_layers() {
        let (width, b) = (widths[l + 1], config.bottleneck(l));
        params.extend((0..b * width).map(|_| normal.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, b));
        params.extend(std::iter::repeat_n(0.0, width * b + width));
    }
    Module::new(
        ModuleKind::Adapter,
        config.clone(),
        params,
        ModuleMeta {
            created_from_seed: seed,
            notes: "initialized adapters".into(),
            ..ModuleMeta::default()
        },
    )
}

/// Borrowed view of an encoder ready for forward/backward passes.
pub(crate) struct Encoder<'a> {
    config: &'a EncoderConfig,
    backbone: &'a [f64],
    adapters: Option<&'a [f64]>,
}

struct LayerTrace {
    input: Vec<f64>,
    z: Vec<f64>,
    a: Vec<f64>,
    /// Adapter bottleneck pre-activation and activation.
    adapter: Option<(Vec<f64>, Vec<f64>)>,
}

pub(crate) struct Trace {
    layers: Vec<LayerTrace>,
    pub embedding: Vec<f64>,
}

fn affine(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| b + dot(&weight[r * cols..(r + 1) * cols], x))
        .collect()
}

impl<'a> Encoder<'a> {
    pub(crate) fn new(module: &'a Module, backbone: Option<&'a Module>) -> Result<Self> {
        match module.kind() {
            ModuleKind::Full => Ok(Encoder {
                config: module.config(),
                backbone: module.params(),
                adapters: None,
            }),
            ModuleKind::Adapter => {
                let backbone = backbone.ok_or(Error::MissingBackbone)?;
                if backbone.kind() != ModuleKind::Full {
                    return Err(Error::ConfigMismatch("backbone must be a full module".into()));
                }
                if backbone.fingerprint() != module.fingerprint() {
                    return Err(Error::ConfigMismatch(format!(
                        "adapter fingerprint {} does not match backbone {}",
                        module.fingerprint(),
                        backbone.fingerprint()
                    )));
                }
                Ok(Encoder {
                    config: module.config(),
                    backbone: backbone.params(),
                    adapters: Some(module.params()),
                })
            }
        }
    }

    pub(crate) fn trainable_len(&self) -> usize {
        match self.adapters {
            Some(a) => a.len(),
            None => self.backbone.len(),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::shape(
                format!("input of dimension {}", self.config.input_dim),
                x.len(),
            ));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let act = self.config.activation;
        let widths = self.config.layer_widths();
        let mut layers = Vec::with_capacity(self.config.num_layers());
        let (mut bb_off, mut ad_off) = (0, 0);
        let mut h = x.to_vec();
        for l in 0..self.config.num_layers() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w = &self.backbone[bb_off..bb_off + n_in * n_out];
            let b = &self.backbone[bb_off + n_in * n_out..bb_off + n_in * n_out + n_out];
            bb_off += n_in * n_out + n_out;
            let z = affine(w, b, &h);
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            let (out, adapter) = match self.adapters {
                None => (a.clone(), None),
                Some(params) => {
                    let bn = self.config.bottleneck(l);
                    let dw = &params[ad_off..ad_off + bn * n_out];
                    ad_off += bn * n_out;
                    let db = &params[ad_off..ad_off + bn];
                    ad_off += bn;
                    let uw = &params[ad_off..ad_off + n_out * bn];
                    ad_off += n_out * bn;
                    let ub = &params[ad_off..ad_off + n_out];
                    ad_off += n_out;
                    let s = affine(dw, db, &a);
                    let t: Vec<f64> = s.iter().map(|&v| act.apply(v)).collect();
                    let lifted = affine(uw, ub, &t);
                    let out: Vec<f64> = a.iter().zip(&lifted).map(|(x, y)| x + y).collect();
                    (out, Some((s, t)))
                }
            };
            layers.push(LayerTrace {
                input: std::mem::replace(&mut h, out),
                z,
                a,
                adapter,
            });
        }
        Ok(Trace {
            layers,
            embedding: h,
        })
    }

    pub(crate) fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.embedding)
    }

    /// Accumulates `d loss / d trainable` into `grad` given `d loss / d embedding`.
    pub(crate) fn backward(&self, trace: &Trace, grad_embedding: &[f64], grad: &mut [f64]) {
        let act = self.config.activation;
        let widths = self.config.layer_widths();
        let num_layers = self.config.num_layers();

        // Offsets of every layer in both parameter vectors.
        let mut bb_offsets = Vec::with_capacity(num_layers);
        let mut ad_offsets = Vec::with_capacity(num_layers);
        let (mut bb, mut ad) = (0, 0);
        for l in 0..num_layers {
            bb_offsets.push(bb);
            ad_offsets.push(ad);
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            bb += n_in * n_out + n_out;
            let bn = self.config.bottleneck(l);
            ad += 2 * n_out * bn + bn + n_out;
        }

        let mut g_h = grad_embedding.to_vec();
        for l in (0..num_layers).rev() {
            let layer = &trace.layers[l];
            let (n_in, n_out) = (widths[l], widths[l + 1]);

            let g_a = match (self.adapters, &layer.adapter) {
                (Some(params), Some((s, t))) => {
                    let bn = self.config.bottleneck(l);
                    let off = ad_offsets[l];
                    let dw_off = off;
                    let db_off = dw_off + bn * n_out;
                    let uw_off = db_off + bn;
                    let ub_off = uw_off + n_out * bn;
                    let dw = &params[dw_off..db_off];
                    let uw = &params[uw_off..ub_off];

                    let mut g_t = vec![0.0; bn];
                    for r in 0..n_out {
                        let gr = g_h[r];
                        grad[ub_off + r] += gr;
                        let row = &uw[r * bn..(r + 1) * bn];
                        for c in 0..bn {
                            grad[uw_off + r * bn + c] += gr * t[c];
                            g_t[c] += row[c] * gr;
                        }
                    }
                    let g_s: Vec<f64> = (0..bn)
                        .map(|c| g_t[c] * act.derivative(s[c], t[c]))
                        .collect();
                    let mut g_a = g_h.clone();
                    for (r, &gs) in g_s.iter().enumerate() {
                        grad[db_off + r] += gs;
                        let row = &dw[r * n_out..(r + 1) * n_out];
                        for c in 0..n_out {
                            grad[dw_off + r * n_out + c] += gs * layer.a[c];
                            g_a[c] += row[c] * gs;
                        }
                    }
                    g_a
                }
                _ => g_h,
            };

            let g_z: Vec<f64> = (0..n_out)
                .map(|r| g_a[r] * act.derivative(layer.z[r], layer.a[r]))
                .collect();

            let off = bb_offsets[l];
            let w = &self.backbone[off..off + n_in * n_out];
            if self.adapters.is_none() {
                for (r, &gz) in g_z.iter().enumerate() {
                    grad[off + n_in * n_out + r] += gz;
                    for c in 0..n_in {
                        grad[off + r * n_in + c] += gz * layer.input[c];
                    }
                }
            }
            if l == 0 {
                break;
            }
            let mut g_in = vec![0.0; n_in];
            for (r, &gz) in g_z.iter().enumerate() {
                let row = &w[r * n_in..(r + 1) * n_in];
                for c in 0..n_in {
                    g_in[c] += row[c] * gz;
                }
            }
            g_h = g_in;
        }
    }
}

/// Embedding of `x`. Adapter modules need their frozen `backbone`; full
/// modules ignore it.
pub fn forward_embed(module: &Module, backbone: Option<&Module>, x: &[f64]) -> Result<Vec<f64>> {
    Encoder::new(module, backbone)?.embed(x)
}

pub fn forward_predict(
    module: &Module,
    backbone: Option<&Module>,
    head: &Head,
    x: &[f64],
) -> Result<f64> {
    check_head(module, head)?;
    Ok(head.predict(&forward_embed(module, backbone, x)?))
}

pub(crate) fn check_head(module: &Module, head: &Head) -> Result<()> {
    if head.weights.len() != module.config().embed_dim {
        return Err(Error::shape(
            format!("head of width {}", module.config().embed_dim),
            head.weights.len(),
        ));
    }
    Ok(())
}

/// Gradients of `(prediction − y)²` with respect to the trainable encoder
/// parameters (the whole backbone for full modules, adapters only otherwise)
/// and the head.
pub fn gradient(
    module: &Module,
    backbone: Option<&Module>,
    head: &Head,
    x: &[f64],
    y: f64,
) -> Result<(Vec<f64>, HeadGradient)> {
    check_head(module, head)?;
    let encoder = Encoder::new(module, backbone)?;
    let trace = encoder.trace(x)?;
    let residual = head.predict(&trace.embedding) - y;
    let scale = 2.0 * residual;
    let mut grad = vec![0.0; encoder.trainable_len()];
    let head_grad = HeadGradient {
        weights: trace.embedding.iter().map(|e| scale * e).collect(),
        bias: scale,
    };
    if scale != 0.0 {
        let g_embed: Vec<f64> = head.weights.iter().map(|w| scale * w).collect();
        encoder.backward(&trace, &g_embed, &mut grad);
    }
    Ok((grad, head_grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig::new(4, vec![6, 5], 3)
    }

    fn random_head(embed: usize, seed: u64) -> Head {
        let mut rng = rng_from(seed);
        Head {
            weights: (0..embed).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: rng.random_range(-1.0..1.0),
        }
    }

    #[test]
    fn backbone_init_is_deterministic_with_zero_biases() {
        let cfg = small_config();
        let a = init_backbone(&cfg, 1).unwrap();
        let b = init_backbone(&cfg, 1).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = init_backbone(&cfg, 2).unwrap();
        assert_ne!(a.params(), c.params());
        for (layer, widths) in a.dense_layers().unwrap().iter().zip(cfg.layer_widths().windows(2)) {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
            let limit = (6.0 / (widths[0] + widths[1]) as f64).sqrt();
            assert!(layer.weight.iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn adapter_counts_and_determinism() {
        let cfg = small_config();
        let bb = init_backbone(&cfg, 3).unwrap();
        let ad = attach_adapters(&bb, &cfg, 9).unwrap();
        // widths 6, 5, 3 with bottlenecks 3, 3, 2
        let expected = (6 * 3 * 2 + 3 + 6) + (5 * 3 * 2 + 3 + 5) + (3 * 2 * 2 + 2 + 3);
        assert_eq!(ad.params().len(), expected);
        assert_eq!(ad, attach_adapters(&bb, &cfg, 9).unwrap());
        for layer in ad.adapter_layers().unwrap() {
            assert!(layer.up.weight.iter().chain(&layer.up.bias).all(|&v| v == 0.0));
            assert!(layer.down.bias.iter().all(|&v| v == 0.0));
            assert!(layer.down.weight.iter().any(|&v| v != 0.0));
        }

        let other = EncoderConfig::new(4, vec![7], 3);
        assert!(matches!(attach_adapters(&bb, &other, 9), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn fresh_adapters_reproduce_backbone() {
        let cfg = small_config();
        let bb = init_backbone(&cfg, 5).unwrap();
        let ad = attach_adapters(&bb, &cfg, 6).unwrap();
        let mut rng = rng_from(11);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let plain = forward_embed(&bb, None, &x).unwrap();
            let adapted = forward_embed(&ad, Some(&bb), &x).unwrap();
            assert_eq!(plain, adapted);
        }
    }

    #[test]
    fn forward_examples() {
        let cfg = small_config();
        let zero = Module::new(ModuleKind::Full, cfg.clone(), vec![0.0; cfg.full_param_count()], ModuleMeta::default()).unwrap();
        assert_eq!(forward_embed(&zero, None, &[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);

        // One hidden layer, identity weight blocks, zero input.
        let cfg1 = EncoderConfig::new(3, vec![3], 3);
        let eye = DenseLayer { rows: 3, cols: 3, weight: vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], bias: vec![0.0; 3] };
        let m = Module::new(ModuleKind::Full, cfg1, flatten_dense(&[eye.clone(), eye]), ModuleMeta::default()).unwrap();
        assert_eq!(forward_embed(&m, None, &[0.0; 3]).unwrap(), vec![0.0; 3]);

        let bb = init_backbone(&cfg, 1).unwrap();
        let x = [0.3, -0.7, 1.1, 0.2];
        let head = Head { weights: vec![0.0; 3], bias: 3.5 };
        assert_eq!(forward_predict(&bb, None, &head, &x).unwrap(), 3.5);

        let e = forward_embed(&bb, None, &x).unwrap();
        let n2 = dot(&e, &e);
        let head = Head { weights: e.iter().map(|v| v / n2).collect(), bias: 0.0 };
        assert!((forward_predict(&bb, None, &head, &x).unwrap() - 1.0).abs() < 1e-12);

        let head = random_head(3, 4);
        let doubled = Head { weights: head.weights.iter().map(|w| 2.0 * w).collect(), bias: 2.0 * head.bias };
        let p = forward_predict(&bb, None, &head, &x).unwrap();
        assert!((forward_predict(&bb, None, &doubled, &x).unwrap() - 2.0 * p).abs() < 1e-12);
    }

    #[test]
    fn forward_errors() {
        let cfg = small_config();
        let bb = init_backbone(&cfg, 1).unwrap();
        let ad = attach_adapters(&bb, &cfg, 1).unwrap();
        assert!(matches!(forward_embed(&bb, None, &[1.0]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(forward_embed(&ad, None, &[0.0; 4]), Err(Error::MissingBackbone)));
        let other = init_backbone(&EncoderConfig::new(4, vec![6, 5], 2), 1).unwrap();
        assert!(matches!(forward_embed(&ad, Some(&other), &[0.0; 4]), Err(Error::ConfigMismatch(_))));
        assert!(forward_predict(&bb, None, &Head::zeros(2), &[0.0; 4]).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let cfg = small_config();
        let bb = init_backbone(&cfg, 8).unwrap();
        let layers = bb.dense_layers().unwrap();
        assert_eq!(layers.len(), 3);
        assert_eq!((layers[0].rows, layers[0].cols), (6, 4));
        assert_eq!(flatten_dense(&layers), bb.params());
        let ad = attach_adapters(&bb, &cfg, 8).unwrap();
        assert_eq!(flatten_adapters(&ad.adapter_layers().unwrap()), ad.params());
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let cfg = small_config();
        let bb = init_backbone(&cfg, 2).unwrap();
        let head = random_head(3, 1);
        let x = [0.1, 0.2, -0.3, 0.4];
        let y = forward_predict(&bb, None, &head, &x).unwrap();
        let (g, hg) = gradient(&bb, None, &head, &x, y).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(hg.weights.iter().all(|&v| v == 0.0) && hg.bias == 0.0);
    }

    #[test]
    fn adapter_gradient_covers_adapters_only() {
        let cfg = small_config();
        let bb = init_backbone(&cfg, 2).unwrap();
        let ad = attach_adapters(&bb, &cfg, 2).unwrap();
        let (g, _) = gradient(&ad, Some(&bb), &random_head(3, 2), &[0.5; 4], 3.0).unwrap();
        assert_eq!(g.len(), cfg.adapter_param_count());
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = small_config();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.activation = Activation::Relu;
        assert_ne!(a.fingerprint(), b.fingerprint());
        let hex = a.fingerprint().to_hex();
        assert_eq!(Fingerprint::try_from(hex).unwrap(), a.fingerprint());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::new(0, vec![2], 2).validate().is_err());
        assert!(EncoderConfig::new(2, vec![], 2).validate().is_err());
        let mut c = EncoderConfig::new(2, vec![4], 2);
        c.adapter_bottleneck = Some(3);
        assert!(c.validate().is_err());
        c.adapter_bottleneck = Some(2);
        assert!(c.validate().is_ok());
    }

    /// Central finite difference of the squared loss along one coordinate.
    fn fd_entry(
        module: &Module,
        backbone: Option<&Module>,
        head: &Head,
        x: &[f64],
        y: f64,
        index: usize,
    ) -> f64 {
        let h = 1e-5;
        let loss = |params: Vec<f64>| {
            let m = module.with_params(params).unwrap();
            (forward_predict(&m, backbone, head, x).unwrap() - y).powi(2)
        };
        let mut plus = module.params().to_vec();
        plus[index] += h;
        let mut minus = module.params().to_vec();
        minus[index] -= h;
        (loss(plus) - loss(minus)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradients_match_finite_differences(
            seed in any::<u64>(),
            input in 1usize..5,
            hidden in prop::collection::vec(1usize..6, 1..3),
            embed in 1usize..4,
            relu in any::<bool>(),
        ) {
            let mut cfg = EncoderConfig::new(input, hidden, embed);
            if relu { cfg.activation = Activation::Relu; }
            // Random biases keep ReLU pre-activations off the kink at zero.
            let mut rng = rng_from(seed ^ 0x55);
            let bb = init_backbone(&cfg, seed).unwrap();
            let shifted: Vec<f64> = bb.params().iter().map(|p| p + rng.random_range(-0.5..0.5)).collect();
            let bb = bb.with_params(shifted).unwrap();
            let head = random_head(embed, seed);
            let x: Vec<f64> = (0..input).map(|_| rng.random_range(-1.5..1.5)).collect();
            let y = rng.random_range(-2.0..2.0);

            let (g, _) = gradient(&bb, None, &head, &x, y).unwrap();
            for i in 0..g.len() {
                let fd = fd_entry(&bb, None, &head, &x, y, i);
                prop_assert!(rel_err(g[i], fd) < 1e-4, "full param {i}: {} vs {fd}", g[i]);
            }

            // Perturb the adapters away from their identity start so the
            // up-projection path carries gradient too.
            let ad = attach_adapters(&bb, &cfg, seed).unwrap();
            let perturbed: Vec<f64> = ad.params().iter().map(|p| p + rng.random_range(-0.3..0.3)).collect();
            let ad = ad.with_params(perturbed).unwrap();
            let (g, _) = gradient(&ad, Some(&bb), &head, &x, y).unwrap();
            for i in 0..g.len() {
                let fd = fd_entry(&ad, Some(&bb), &head, &x, y, i);
                prop_assert!(rel_err(g[i], fd) < 1e-4, "adapter param {i}: {} vs {fd}", g[i]);
            }
        }
    }
}
