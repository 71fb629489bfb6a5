//! Backbone, domain adaptive attention, the shared/specific branches and
//! their four heads.
//!
//! Parameters live in a name-keyed store so the optimizer, checkpointing and
//! gradient isolation checks can treat them uniformly. Matrices are stored
//! input × output (a `c × d` projection maps `c` features to `d`).

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, BatchStats, Graph, Tensor, Var};

pub const PARAMS_MAGIC: &[u8; 4] = b"DPRM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channels of each conv block; the last entry is the feature
    /// channel count `c`.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Embedding size `d` of both branches.
    pub embedding_dim: usize,
    /// Channel-attention reduction ratio `r`.
    pub reduction: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![8, 16, 32],
            strides: vec![2, 1, 1],
            embedding_dim: 32,
            reduction: 4,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// `floor((n + 2p - k) / s) + 1` for the 3×3, padding-1 blocks.
fn conv_extent(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

impl BackboneConfig {
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Spatial extent of the feature map for an `height × width` input,
    /// without validation.
    pub fn feature_extent(&self, height: usize, width: usize) -> (usize, usize) {
        self.strides.iter().fold((height, width), |(h, w), &s| (conv_extent(h, s), conv_extent(w, s)))
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config("backbone needs one stride per conv block".into()));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) || self.embedding_dim == 0 {
            return Err(Error::Config("backbone extents must be positive".into()));
        }
        let c = self.feature_channels();
        if self.reduction == 0 || c % self.reduction != 0 {
            return Err(Error::Config(format!("feature channels {c} not divisible by reduction {}", self.reduction)));
        }
        let (h, w) = self.feature_extent(height, width);
        if h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "feature map {h}x{w} for {height}x{width} input is below the 2x2 minimum"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parts of the network a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// `false` bypasses the attention module with a constant `A = 0.5`.
    pub attention: bool,
    pub dsp: bool,
    pub occ: bool,
    pub src_id: bool,
    pub tgt_id: bool,
}

impl ForwardOptions {
    pub fn full(mode: Mode) -> Self {
        ForwardOptions { mode, attention: true, dsp: true, occ: true, src_id: true, tgt_id: true }
    }

    /// Source-only pretraining: backbone, attention, shared branch and the
    /// source identity head.
    pub fn pretrain() -> Self {
        ForwardOptions { mode: Mode::Train, attention: true, dsp: false, occ: false, src_id: true, tgt_id: false }
    }

    /// Shared embedding only.
    pub fn embed(mode: Mode) -> Self {
        ForwardOptions { mode, attention: true, dsp: false, occ: false, src_id: false, tgt_id: false }
    }
}

/// Coarse parameter groups, by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    Attention,
    Dsh,
    Dsp,
    OccHead,
    SrcIdHead,
    TgtIdHead,
    DomainHead,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        let prefixes = [
            ("backbone.", ParamGroup::Backbone),
            ("attn.", ParamGroup::Attention),
            ("dsh.", ParamGroup::Dsh),
            ("dsp.", ParamGroup::Dsp),
            ("head.occ.", ParamGroup::OccHead),
            ("head.src_id.", ParamGroup::SrcIdHead),
            ("head.tgt_id.", ParamGroup::TgtIdHead),
            ("head.domain.", ParamGroup::DomainHead),
        ];
        prefixes.iter().find(|(p, _)| name.starts_with(p)).map(|&(_, g)| g).expect("known parameter prefix")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DaamParams {
    pub config: BackboneConfig,
    pub height: usize,
    pub width: usize,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

impl DaamParams {
    /// Weights ~ N(0, 2/fan_in), biases and batchnorm shifts 0, batchnorm
    /// scales 1. The attention's adaptive-scale 1×1 conv starts at 1 so the
    /// spatial map reaches the gate from the first step.
    pub fn init<R: Rng>(
        config: &BackboneConfig,
        height: usize,
        width: usize,
        n_source_ids: usize,
        n_clusters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(height, width)?;
        if n_source_ids == 0 || n_clusters == 0 {
            return Err(Error::Config("identity and cluster counts must be positive".into()));
        }
        let mut p = DaamParams {
            config: config.clone(),
            height,
            width,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        };
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            p.params.insert(format!("backbone.{i}.conv.weight"), he_normal(&[3, 3, cin, cout], 9 * cin, rng));
            p.params.insert(format!("backbone.{i}.conv.bias"), Tensor::zeros(&[cout]));
            p.add_batchnorm(&format!("backbone.{i}.bn"), cout);
            cin = cout;
        }
        let c = config.feature_channels();
        let d = config.embedding_dim;
        p.params.insert("attn.spatial.conv3.weight".into(), he_normal(&[3, 3, 1, 1], 9, rng));
        p.params.insert("attn.spatial.conv3.bias".into(), Tensor::zeros(&[1]));
        p.params.insert("attn.spatial.scale.weight".into(), Tensor::ones(&[1, 1, 1, 1]));
        p.params.insert("attn.spatial.scale.bias".into(), Tensor::zeros(&[1]));
        p.params.insert("attn.channel.w0".into(), he_normal(&[c, c / config.reduction], c, rng));
        p.params.insert("attn.channel.w1".into(), he_normal(&[c / config.reduction, c], c / config.reduction, rng));
        for branch in ["dsh", "dsp"] {
            p.params.insert(format!("{branch}.fc.weight"), he_normal(&[c, d], c, rng));
            p.add_batchnorm(&format!("{branch}.bn"), d);
        }
        p.set_head("head.occ", 1, rng);
        p.set_head("head.src_id", n_source_ids, rng);
        p.set_head("head.tgt_id", n_clusters, rng);
        p.set_head("head.domain", 2, rng);
        Ok(p)
    }

    fn add_batchnorm(&mut self, prefix: &str, f: usize) {
        self.params.insert(format!("{prefix}.gamma"), Tensor::ones(&[f]));
        self.params.insert(format!("{prefix}.beta"), Tensor::zeros(&[f]));
        self.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[f]));
        self.buffers.insert(format!("{prefix}.running_var"), Tensor::ones(&[f]));
    }

    fn set_head<R: Rng>(&mut self, prefix: &str, outputs: usize, rng: &mut R) {
        let d = self.config.embedding_dim;
        self.params.insert(format!("{prefix}.weight"), he_normal(&[d, outputs], d, rng));
        self.params.insert(format!("{prefix}.bias"), Tensor::zeros(&[outputs]));
    }

    /// Fresh `d × K` target identity head; cluster ids carry no meaning
    /// across relabelling rounds.
    pub fn reinit_target_head<R: Rng>(&mut self, n_clusters: usize, rng: &mut R) {
        self.set_head("head.tgt_id", n_clusters, rng);
    }

    pub fn n_source_ids(&self) -> usize {
        self.params["head.src_id.bias"].numel()
    }

    pub fn n_clusters(&self) -> usize {
        self.params["head.tgt_id.bias"].numel()
    }

    pub fn feature_extent(&self) -> (usize, usize) {
        self.config.feature_extent(self.height, self.width)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params.get(name).or_else(|| self.buffers.get(name)).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        if self.params.contains_key(name) {
            self.params.get_mut(name).unwrap()
        } else {
            self.buffers.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"))
        }
    }

    /// Learnable tensors, in name order.
    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    /// Batchnorm running statistics, in name order.
    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Exponential update of running statistics from one training batch.
    pub fn update_running(&mut self, stats: &[(String, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (prefix, s) in stats {
            let mean = self.buffers.get_mut(&format!("{prefix}.running_mean")).expect("bn buffer");
            mean.data_mut().iter_mut().zip(&s.mean).for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
            let var = self.buffers.get_mut(&format!("{prefix}.running_var")).expect("bn buffer");
            var.data_mut().iter_mut().zip(&s.var).for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
        }
    }

    /// Puts every learnable tensor on the graph, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound { vars: self.params.iter().map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable))).collect() }
    }

    // ---- persistence --------------------------------------------------

    /// DPRM layout: magic, `u32`-length prefixed JSON shape manifest, then
    /// one DTN1 tensor per manifest entry in manifest order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries: Vec<ManifestEntry> = self
            .params
            .iter()
            .map(|(n, t)| ManifestEntry { name: n.clone(), shape: t.shape().to_vec(), buffer: false })
            .chain(
                self.buffers
                    .iter()
                    .map(|(n, t)| ManifestEntry { name: n.clone(), shape: t.shape().to_vec(), buffer: true }),
            )
            .collect();
        let manifest = ParamManifest { config: self.config.clone(), height: self.height, width: self.width, entries };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.write_all(PARAMS_MAGIC)?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        for t in self.params.values().chain(self.buffers.values()) {
            write_tensor(&mut out, t)?;
        }
        Ok(out)
    }

    /// Reads a DPRM blob; returns the parameters and the number of bytes used.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 8 {
            return Err(Error::Format("truncated parameter file".into()));
        }
        if &bytes[..4] != PARAMS_MAGIC {
            return Err(Error::Format(format!("bad parameter magic {:?}", &bytes[..4])));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let json = bytes.get(8..8 + len).ok_or_else(|| Error::Format("truncated parameter manifest".into()))?;
        let manifest: ParamManifest =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("parameter manifest: {e}")))?;
        let mut cursor = &bytes[8 + len..];
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for e in &manifest.entries {
            let t = read_tensor(&mut cursor)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Integrity(format!("{}: manifest shape {:?}, payload {:?}", e.name, e.shape, t.shape())));
            }
            if e.buffer {
                buffers.insert(e.name.clone(), t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        let used = bytes.len() - cursor.len();
        let p = DaamParams { config: manifest.config, height: manifest.height, width: manifest.width, params, buffers };
        Ok((p, used))
    }

    /// Restores a saved blob into `self`. Entries whose shape differs from
    /// `self` are only tolerated for the target identity head, which keeps its
    /// current (fresh) values; their names are returned so the caller knows
    /// the head needs re-initialization.
    pub fn restore_from(&mut self, bytes: &[u8]) -> Result<Vec<String>> {
        let (saved, _) = Self::from_bytes(bytes)?;
        if saved.config != self.config || (saved.height, saved.width) != (self.height, self.width) {
            return Err(Error::Config("saved parameters were built for a different backbone".into()));
        }
        let mut reinit = Vec::new();
        for (store, saved_store) in [(&mut self.params, saved.params), (&mut self.buffers, saved.buffers)] {
            if store.len() != saved_store.len() || store.keys().zip(saved_store.keys()).any(|(a, b)| a != b) {
                return Err(Error::Integrity("parameter names differ from the saved manifest".into()));
            }
            for (name, t) in saved_store {
                let slot = store.get_mut(&name).unwrap();
                if slot.shape() == t.shape() {
                    *slot = t;
                } else if ParamGroup::of(&name) == ParamGroup::TgtIdHead {
                    reinit.push(name);
                } else {
                    return Err(Error::Integrity(format!(
                        "{name}: saved shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
            }
        }
        Ok(reinit)
    }

    /// SHA-256 over the serialized parameters.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_bytes().expect("in-memory write")))
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
}

#[derive(Serialize, Deserialize)]
struct ParamManifest {
    config: BackboneConfig,
    height: usize,
    width: usize,
    entries: Vec<ManifestEntry>,
}

/// Graph handles of every learnable tensor.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds parameter names to existing graph nodes.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: vars.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Graph nodes produced by one forward pass. Optional entries are absent
/// when the corresponding part was switched off.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub feature: Var,
    pub spatial: Option<Var>,
    pub channel: Option<Var>,
    pub attention: Var,
    pub shared_map: Var,
    pub specific_map: Var,
    pub f_sh: Var,
    pub f_sp: Option<Var>,
    pub p_occ: Option<Var>,
    pub p_src_id: Option<Var>,
    pub p_tgt_id: Option<Var>,
    pub p_domain: Option<Var>,
    /// Training-mode batch statistics keyed by batchnorm prefix.
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// Per-sample numeric view of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardArtifacts {
    pub feature: Tensor,
    pub spatial: Option<Tensor>,
    pub channel: Option<Tensor>,
    pub attention: Tensor,
    pub shared_map: Tensor,
    pub specific_map: Tensor,
    pub f_sh: Tensor,
    pub f_sp: Option<Tensor>,
    pub p_occ: Option<f64>,
    pub p_src_id: Option<Tensor>,
    pub p_tgt_id: Option<Tensor>,
    pub p_domain: Option<Tensor>,
}

fn row_of(g: &Graph, v: Var, i: usize) -> Tensor {
    let t = g.value(v);
    let shape = if t.rank() > 1 { t.shape()[1..].to_vec() } else { vec![1] };
    Tensor::new(shape, t.row(i).to_vec()).expect("row of a valid tensor")
}

impl ForwardVars {
    pub fn artifacts(&self, g: &Graph, i: usize) -> ForwardArtifacts {
        let opt = |v: Option<Var>| v.map(|v| row_of(g, v, i));
        ForwardArtifacts {
            feature: row_of(g, self.feature, i),
            spatial: opt(self.spatial),
            channel: opt(self.channel),
            attention: row_of(g, self.attention, i),
            shared_map: row_of(g, self.shared_map, i),
            specific_map: row_of(g, self.specific_map, i),
            f_sh: row_of(g, self.f_sh, i),
            f_sp: opt(self.f_sp),
            p_occ: self.p_occ.map(|v| g.value(v).row(i)[0]),
            p_src_id: opt(self.p_src_id),
            p_tgt_id: opt(self.p_tgt_id),
            p_domain: opt(self.p_domain),
        }
    }
}

fn batchnorm(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    bound: &Bound,
    params: &DaamParams,
    mode: Mode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let gamma = bound.var(&format!("{prefix}.gamma"));
    let beta = bound.var(&format!("{prefix}.beta"));
    let eps = params.config.bn_eps;
    match mode {
        Mode::Train => {
            let (y, s) = g.batchnorm_train(x, gamma, beta, eps)?;
            stats.push((prefix.to_string(), s));
            Ok(y)
        }
        Mode::Eval => g.batchnorm_eval(
            x,
            gamma,
            beta,
            params.get(&format!("{prefix}.running_mean")),
            params.get(&format!("{prefix}.running_var")),
            eps,
        ),
    }
}

/// Stacked conv(3×3, padding 1) → batchnorm → ReLU blocks on a
/// `[n, H, W, 3]` batch.
pub fn backbone_forward(
    g: &mut Graph,
    image: Var,
    bound: &Bound,
    params: &DaamParams,
    mode: Mode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    match g.shape(image) {
        [_, h, w, 3] if (*h, *w) == (params.height, params.width) => {}
        s => {
            return Err(Error::Config(format!(
                "input batch {s:?} does not match the configured {}x{}x3 images",
                params.height, params.width
            )))
        }
    }
    let mut x = image;
    for (i, &stride) in params.config.strides.iter().enumerate() {
        let conv = g.conv2d(x, bound.var(&format!("backbone.{i}.conv.weight")), stride, 1)?;
        let conv = g.add(conv, bound.var(&format!("backbone.{i}.conv.bias")))?;
        let normed = batchnorm(g, conv, &format!("backbone.{i}.bn"), bound, params, mode, stats)?;
        x = g.relu(normed)?;
    }
    Ok(x)
}

/// Channel mean → 3×3 stride-2 conv → nearest upsample back to `h × w` →
/// 1×1 adaptive scale. Returns the unsquashed `[n, h, w, 1]` map.
pub fn spatial_attention(g: &mut Graph, feature: Var, bound: &Bound) -> Result<Var> {
    let shape = g.shape(feature).to_vec();
    let (h, w) = match *shape.as_slice() {
        [_, h, w, _] => (h, w),
        _ => return Err(Error::dim("spatial_attention", format!("expected [n,h,w,c], got {shape:?}"))),
    };
    let pooled = g.avg_pool_channels(feature)?;
    let down = g.conv2d(pooled, bound.var("attn.spatial.conv3.weight"), 2, 1)?;
    let down = g.add(down, bound.var("attn.spatial.conv3.bias"))?;
    let up = g.upsample_nearest(down, h, w)?;
    let scaled = g.conv2d(up, bound.var("attn.spatial.scale.weight"), 1, 0)?;
    g.add(scaled, bound.var("attn.spatial.scale.bias"))
}

/// `ReLU(W1 · ReLU(W0 · GAP(F)))` as a `[n, c]` matrix.
pub fn channel_attention(g: &mut Graph, feature: Var, w0: Var, w1: Var) -> Result<Var> {
    let pooled = g.global_avg_pool_spatial(feature)?;
    let hidden = g.matmul(pooled, w0)?;
    let hidden = g.relu(hidden)?;
    let out = g.matmul(hidden, w1)?;
    g.relu(out)
}

/// Attention split of a `[n, h, w, c]` feature map.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSplit {
    pub spatial: Option<Var>,
    pub channel: Option<Var>,
    pub attention: Var,
    pub shared: Var,
    pub specific: Var,
}

/// `A = sigmoid(S × C)`, `F_sh = A ⊗ F`, `F_sp = F − F_sh`. With `enabled`
/// false the split is the constant `A = 0.5`.
pub fn attention_forward(g: &mut Graph, feature: Var, bound: &Bound, enabled: bool) -> Result<AttentionSplit> {
    let shape = g.shape(feature).to_vec();
    let (n, c) = (shape[0], shape[3]);
    let (spatial, channel, attention) = if enabled {
        let s = spatial_attention(g, feature, bound)?;
        let ch = channel_attention(g, feature, bound.var("attn.channel.w0"), bound.var("attn.channel.w1"))?;
        let ch4 = g.reshape(ch, &[n, 1, 1, c])?;
        let raw = g.mul(s, ch4)?;
        (Some(s), Some(ch), g.sigmoid(raw)?)
    } else {
        (None, None, g.constant(Tensor::full(&shape, 0.5)))
    };
    let shared = g.mul(attention, feature)?;
    let specific = g.sub(feature, shared)?;
    Ok(AttentionSplit { spatial, channel, attention, shared, specific })
}

/// GAP → FC(c×d) → batchnorm → ReLU, using the `prefix` parameter set
/// (`dsh` or `dsp`).
pub fn branch_forward(
    g: &mut Graph,
    map: Var,
    prefix: &str,
    bound: &Bound,
    params: &DaamParams,
    mode: Mode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let pooled = g.global_avg_pool_spatial(map)?;
    let proj = g.matmul(pooled, bound.var(&format!("{prefix}.fc.weight")))?;
    let normed = batchnorm(g, proj, &format!("{prefix}.bn"), bound, params, mode, stats)?;
    g.relu(normed)
}

fn linear(g: &mut Graph, x: Var, prefix: &str, bound: &Bound) -> Result<Var> {
    let y = g.matmul(x, bound.var(&format!("{prefix}.weight")))?;
    g.add(y, bound.var(&format!("{prefix}.bias")))
}

pub fn occ_head(g: &mut Graph, f_sh: Var, bound: &Bound) -> Result<Var> {
    let logit = linear(g, f_sh, "head.occ", bound)?;
    let n = g.shape(logit)[0];
    let logit = g.reshape(logit, &[n])?;
    g.sigmoid(logit)
}

pub fn softmax_head(g: &mut Graph, f: Var, prefix: &str, bound: &Bound) -> Result<Var> {
    let logits = linear(g, f, prefix, bound)?;
    g.softmax(logits)
}

/// Full forward pass on a `[n, H, W, 3]` image batch.
pub fn forward(g: &mut Graph, image: Var, bound: &Bound, params: &DaamParams, opts: ForwardOptions) -> Result<ForwardVars> {
    let mut stats = Vec::new();
    let feature = backbone_forward(g, image, bound, params, opts.mode, &mut stats)?;
    let split = attention_forward(g, feature, bound, opts.attention)?;
    let f_sh = branch_forward(g, split.shared, "dsh", bound, params, opts.mode, &mut stats)?;
    let f_sp = if opts.dsp {
        Some(branch_forward(g, split.specific, "dsp", bound, params, opts.mode, &mut stats)?)
    } else {
        None
    };
    let p_occ = if opts.occ { Some(occ_head(g, f_sh, bound)?) } else { None };
    let p_src_id = if opts.src_id { Some(softmax_head(g, f_sh, "head.src_id", bound)?) } else { None };
    let p_tgt_id = if opts.tgt_id { Some(softmax_head(g, f_sh, "head.tgt_id", bound)?) } else { None };
    let p_domain = match f_sp {
        Some(f) => Some(softmax_head(g, f, "head.domain", bound)?),
        None => None,
    };
    Ok(ForwardVars {
        feature,
        spatial: split.spatial,
        channel: split.channel,
        attention: split.attention,
        shared_map: split.shared,
        specific_map: split.specific,
        f_sh,
        f_sp,
        p_occ,
        p_src_id,
        p_tgt_id,
        p_domain,
        bn_stats: stats,
    })
}

/// Frozen-parameter forward pass over a stacked batch.
pub fn infer(params: &DaamParams, batch: &Tensor, opts: ForwardOptions) -> Result<(Graph, ForwardVars)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(batch.clone());
    let vars = forward(&mut g, x, &bound, params, opts)?;
    Ok((g, vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> DaamParams {
        DaamParams::init(&BackboneConfig::default(), 16, 8, 5, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 16 * 8 * 3).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![n, 16, 8, 3], data).unwrap()
    }

    #[test]
    fn feature_extent_rule() {
        let all_two = BackboneConfig { strides: vec![2, 2, 2], ..Default::default() };
        assert_eq!(all_two.feature_extent(16, 8), (2, 1));
        assert!(matches!(all_two.validate(16, 8), Err(Error::Config(_))));
        assert_eq!(BackboneConfig::default().feature_extent(16, 8), (8, 4));
    }

    #[test]
    fn default_backbone_output_shape() {
        let p = params(0);
        let (g, v) = infer(&p, &random_batch(2, 1), ForwardOptions::full(Mode::Train)).unwrap();
        assert_eq!(g.value(v.feature).shape(), &[2, 8, 4, 32]);
        assert_eq!(g.value(v.f_sh).shape(), &[2, 32]);
    }

    #[test]
    fn zero_image_with_zero_weights_gives_zero_features() {
        let mut p = params(0);
        for i in 0..3 {
            p.get_mut(&format!("backbone.{i}.conv.weight")).data_mut().fill(0.0);
        }
        let (g, v) = infer(&p, &Tensor::zeros(&[2, 16, 8, 3]), ForwardOptions::full(Mode::Eval)).unwrap();
        assert!(g.value(v.feature).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn initial_attention_is_balanced() {
        let mut p = params(3);
        *p.get_mut("attn.spatial.scale.weight") = Tensor::zeros(&[1, 1, 1, 1]);
        let (g, v) = infer(&p, &random_batch(3, 2), ForwardOptions::full(Mode::Train)).unwrap();
        assert!(g.value(v.attention).data().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn heads_are_distributions() {
        let p = params(4);
        let (g, v) = infer(&p, &random_batch(4, 5), ForwardOptions::full(Mode::Train)).unwrap();
        for head in [v.p_src_id, v.p_tgt_id, v.p_domain] {
            let t = g.value(head.unwrap());
            let m = t.shape()[1];
            for row in t.data().chunks(m) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let art = v.artifacts(&g, 1);
        assert_eq!(art.p_src_id.unwrap().numel(), 5);
        assert_eq!(art.p_tgt_id.unwrap().numel(), 3);
        assert!(art.f_sh.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn zero_head_inputs_give_neutral_outputs() {
        let p = params(5);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let f = g.constant(Tensor::zeros(&[2, 32]));
        let occ = occ_head(&mut g, f, &bound).unwrap();
        assert_eq!(g.value(occ).data(), &[0.5, 0.5]);
        let src = softmax_head(&mut g, f, "head.src_id", &bound).unwrap();
        assert!(g.value(src).data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn zero_projection_gives_zero_embedding() {
        let mut p = params(6);
        p.get_mut("dsh.fc.weight").data_mut().fill(0.0);
        let (g, v) = infer(&p, &random_batch(3, 7), ForwardOptions::full(Mode::Train)).unwrap();
        assert!(g.value(v.f_sh).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn eval_mode_is_repeatable() {
        let p = params(8);
        let batch = random_batch(2, 9);
        let (g1, v1) = infer(&p, &batch, ForwardOptions::full(Mode::Eval)).unwrap();
        let (g2, v2) = infer(&p, &batch, ForwardOptions::full(Mode::Eval)).unwrap();
        assert_eq!(g1.value(v1.f_sh), g2.value(v2.f_sh));
        assert_eq!(g1.value(v1.f_sp.unwrap()), g2.value(v2.f_sp.unwrap()));
    }

    #[test]
    fn round_trip_and_target_head_reinit_signal() {
        let p = params(10);
        let bytes = p.to_bytes().unwrap();
        let (back, used) = DaamParams::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, p);

        let mut other_k =
            DaamParams::init(&BackboneConfig::default(), 16, 8, 5, 7, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let fresh_head = other_k.get("head.tgt_id.weight").clone();
        let reinit = other_k.restore_from(&bytes).unwrap();
        assert_eq!(reinit, vec!["head.tgt_id.bias".to_string(), "head.tgt_id.weight".to_string()]);
        assert_eq!(other_k.get("head.tgt_id.weight"), &fresh_head);
        assert_eq!(other_k.get("dsh.fc.weight"), p.get("dsh.fc.weight"));

        assert!(matches!(DaamParams::from_bytes(&bytes[..bytes.len() - 10]), Err(Error::Format(_))));
    }
}
