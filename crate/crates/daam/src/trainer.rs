//! Source pretraining followed by rounds of target clustering and joint
//! optimization of the five-term objective, with resumable checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{total_loss, BatchLossInputs, LossBreakdown, LossConfig};
use crate::metrics::{evaluate_report, extract_features, EvalConfig};
use crate::net::{forward, BackboneConfig, Bound, DaamParams, ForwardOptions, Mode, ParamGroup};
use crate::synthetic::{Dataset, Domain, GeneratedData};
use crate::tensor::{grad_check, read_tensor, read_u32, write_tensor, GradCheckConfig, GradCheckReport, Graph, Tensor, Var};
use crate::weak_labels::{adjusted_rand_index, kmeans_pp, ClusterModel, KMeansConfig};

pub use crate::metrics::MetricsReport;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u16 = 1;
/// ChaCha stream of the adaptation RNG; pretraining uses stream 0.
const ADAPT_STREAM: u64 = 1;

/// Piecewise-constant learning rate. Milestones are given for a run of
/// `reference_epochs` epochs and scale linearly with the actual length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub reference_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base: 1e-3, milestones: vec![20, 120], gamma: 0.1, reference_epochs: 200 }
    }
}

impl LrSchedule {
    fn validate(&self, what: &str) -> Result<()> {
        if !(self.base > 0.0 && self.gamma > 0.0 && self.reference_epochs > 0) {
            return Err(Error::Config(format!("{what} schedule must be positive")));
        }
        Ok(())
    }
}

/// Learning rate at `epoch` of a run lasting `total_epochs`.
pub fn lr_at(epoch: usize, total_epochs: usize, schedule: &LrSchedule) -> f64 {
    let passed = schedule
        .milestones
        .iter()
        .filter(|&&m| epoch * schedule.reference_epochs >= m * total_epochs)
        .count();
    schedule.base * schedule.gamma.powi(passed as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Drops the domain-similarity (one-class) term.
    NoDs,
    /// Drops the domain-specific classification term.
    NoDsp,
    NoOrth,
    /// Target cross-entropy with every weight set to 1.
    NoWeights,
    /// Replaces the attention module by the constant `A = 0.5`.
    NoAttention,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::NoDs, Ablation::NoDsp, Ablation::NoOrth, Ablation::NoWeights, Ablation::NoAttention];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoDs => "no-ds",
            Ablation::NoDsp => "no-dsp",
            Ablation::NoOrth => "no-orth",
            Ablation::NoWeights => "no-weights",
            Ablation::NoAttention => "no-attention",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}; expected one of no-ds, no-dsp, no-orth, no-weights, no-attention")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub network: BackboneConfig,
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    /// Relative source : target share of every joint batch.
    pub mix: [usize; 2],
    /// Schedule of every adaptation round.
    pub lr: LrSchedule,
    /// Schedule of source pretraining.
    pub pretrain_lr: LrSchedule,
    pub momentum: f64,
    /// Cluster count; `None` scales 650 clusters per 751 identities to the
    /// target training set.
    pub clusters: Option<usize>,
    pub losses: LossConfig,
    pub ablations: Vec<Ablation>,
    pub kmeans: KMeansConfig,
    /// Evaluation after pretraining and after every iteration.
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            network: BackboneConfig::default(),
            iterations: 7,
            epochs_per_iteration: 40,
            pretrain_epochs: 40,
            batch_size: 32,
            mix: [1, 1],
            lr: LrSchedule::default(),
            pretrain_lr: LrSchedule::default(),
            momentum: 0.9,
            clusters: None,
            losses: LossConfig::default(),
            ablations: Vec::new(),
            kmeans: KMeansConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// `round(650 / 751 · n)`, at least 1.
pub fn default_clusters(n_target_identities: usize) -> usize {
    ((650.0 / 751.0 * n_target_identities as f64).round() as usize).max(1)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.mix.contains(&0) {
            return Err(Error::Config("both parts of the batch mix must be positive".into()));
        }
        let (s, t) = self.batch_split();
        if s == 0 || t == 0 {
            return Err(Error::Config(format!("batch of {} with mix {:?} leaves a domain empty", self.batch_size, self.mix)));
        }
        if self.iterations > 0 && self.epochs_per_iteration == 0 {
            return Err(Error::Config("epochs_per_iteration must be positive".into()));
        }
        self.lr.validate("learning-rate")?;
        self.pretrain_lr.validate("pretraining learning-rate")?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.clusters == Some(0) {
            return Err(Error::Config("cluster count must be positive".into()));
        }
        Ok(())
    }

    /// Source and target rows of one joint batch.
    pub fn batch_split(&self) -> (usize, usize) {
        let total = self.mix[0] + self.mix[1];
        let s = ((self.batch_size * self.mix[0]) as f64 / total as f64).round() as usize;
        (s.min(self.batch_size), self.batch_size - s.min(self.batch_size))
    }

    pub fn attention(&self) -> bool {
        !self.ablations.contains(&Ablation::NoAttention)
    }

    /// Loss terms after ablations.
    pub fn effective_losses(&self) -> LossConfig {
        let mut l = self.losses;
        for a in &self.ablations {
            match a {
                Ablation::NoDs => l.domain_similarity = false,
                Ablation::NoDsp => l.domain_specific = false,
                Ablation::NoOrth => l.orthogonality = false,
                Ablation::NoWeights => l.confidence_weights = false,
                Ablation::NoAttention => {}
            }
        }
        l
    }

    pub fn n_clusters(&self, target: Option<&Dataset>) -> usize {
        self.clusters.unwrap_or_else(|| target.map_or(1, |t| default_clusters(t.manifest.n_identities)))
    }

    /// Seed of the domain probe's train/test split, fixed for the whole run.
    pub fn probe_seed(&self) -> u64 {
        self.seed
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// `v ← μ·v + g; θ ← θ − lr·v` for every parameter that has a gradient.
/// All gradients are checked before anything is written, so a failure
/// leaves the state untouched.
pub fn sgd_step(
    params: &mut DaamParams,
    momentum: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    mu: f64,
    step: usize,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name);
        if p.shape() != g.shape() {
            return Err(Error::dim("sgd_step", format!("gradient of {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::numeric(
                "sgd_step",
                format!("step {step}: non-finite gradient for {name} (norm {})", g.l2_norm()),
            ));
        }
    }
    for (name, g) in grads {
        let v = momentum.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        v.data_mut().iter_mut().zip(g.data()).for_each(|(v, g)| *v = mu * *v + g);
        let p = params.get_mut(name);
        p.data_mut().iter_mut().zip(v.data()).for_each(|(p, v)| *p -= lr * v);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adapt,
    Done,
}

/// Position in the schedule. `iteration` is 0 during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub phase: Phase,
    pub iteration: usize,
    pub epoch: usize,
    pub step: usize,
    /// Weak labels for the current iteration exist.
    pub relabeled: bool,
}

/// Row indices of one batch into the source and target training sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: DaamParams,
    pub momentum: BTreeMap<String, Tensor>,
    pub cursor: Cursor,
    pub plan: Vec<PlannedBatch>,
    pub clusters: Option<ClusterModel>,
    pub loss_history: Vec<LossRecord>,
    pub metrics: Vec<MetricsReport>,
    /// Adjusted Rand index between weak labels and true target identities,
    /// one entry per relabelling.
    pub label_agreement: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Datasets a run draws from. Pretraining needs only `source`.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub source: &'a Dataset,
    pub target: Option<&'a Dataset>,
    pub query: Option<&'a Dataset>,
    pub gallery: Option<&'a Dataset>,
}

impl<'a> From<&'a GeneratedData> for TrainData<'a> {
    fn from(d: &'a GeneratedData) -> Self {
        TrainData {
            source: &d.source_train,
            target: Some(&d.target_train),
            query: Some(&d.target_query),
            gallery: Some(&d.target_gallery),
        }
    }
}

/// What one call to [`Trainer::advance`] did.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Step(LossRecord),
    Relabeled { iteration: usize, inertia: f64, agreement: f64 },
    /// End of pretraining (iteration 0) or of an adaptation round.
    IterationDone { iteration: usize, report: Option<MetricsReport> },
    Finished,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    config_hash: String,
    data: TrainData<'a>,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: TrainData<'a>) -> Result<Self> {
        config.validate()?;
        if data.source.is_empty() {
            return Err(Error::Data("source training set is empty".into()));
        }
        let k = config.n_clusters(data.target);
        if let Some(t) = data.target {
            if config.iterations > 0 && t.len() < k {
                return Err(Error::Config(format!("K = {k} exceeds the {} target training samples", t.len())));
            }
        }
        let m = &data.source.manifest;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = DaamParams::init(&config.network, m.height, m.width, m.n_identities, k, &mut rng)?;
        let momentum = params.params().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        let state = TrainState {
            params,
            momentum,
            cursor: Cursor { phase: Phase::Pretrain, iteration: 0, epoch: 0, step: 0, relabeled: false },
            plan: Vec::new(),
            clusters: None,
            loss_history: Vec::new(),
            metrics: Vec::new(),
            label_agreement: Vec::new(),
            rng,
        };
        Ok(Trainer { config_hash: config.hash(), config, data, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Starts at the first adaptation round from already pretrained
    /// parameters with fresh momentum. The target head is replaced at the
    /// first relabelling, so `params` may carry any cluster count.
    pub fn adapt_from(config: TrainConfig, data: TrainData<'a>, params: DaamParams) -> Result<Self> {
        if data.target.is_none() {
            return Err(Error::Data("adaptation needs a target training set".into()));
        }
        let mut t = Trainer::new(config, data)?;
        let fresh = &t.state.params;
        if params.config != fresh.config
            || (params.height, params.width) != (fresh.height, fresh.width)
            || params.n_source_ids() != fresh.n_source_ids()
        {
            return Err(Error::Config("pretrained parameters do not match the network configuration".into()));
        }
        t.state.params = params;
        t.enter_adaptation();
        Ok(t)
    }

    /// Leaves pretraining with zeroed momentum and an RNG on its own stream,
    /// so adaptation depends only on the seed and the pretrained parameters.
    fn enter_adaptation(&mut self) {
        let s = &mut self.state;
        s.momentum = s.params.params().map(|(n, p)| (n.clone(), Tensor::zeros(p.shape()))).collect();
        s.rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        s.rng.set_stream(ADAPT_STREAM);
        let adapt = self.config.iterations > 0 && self.data.target.is_some();
        s.cursor = Cursor {
            phase: if adapt { Phase::Adapt } else { Phase::Done },
            iteration: if adapt { 1 } else { 0 },
            epoch: 0,
            step: 0,
            relabeled: false,
        };
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn is_done(&self) -> bool {
        self.state.cursor.phase == Phase::Done
    }

    /// Performs one unit of work: a training step, a relabelling, or an
    /// end-of-iteration evaluation.
    pub fn advance(&mut self) -> Result<Event> {
        let c = self.state.cursor;
        match c.phase {
            Phase::Done => Ok(Event::Finished),
            Phase::Pretrain if c.epoch < self.config.pretrain_epochs => self.train_step(self.config.pretrain_epochs),
            Phase::Pretrain => {
                let report = self.evaluate(0)?;
                self.enter_adaptation();
                Ok(Event::IterationDone { iteration: 0, report })
            }
            Phase::Adapt if !c.relabeled => self.relabel(),
            Phase::Adapt if c.epoch < self.config.epochs_per_iteration => self.train_step(self.config.epochs_per_iteration),
            Phase::Adapt => {
                let report = self.evaluate(c.iteration)?;
                let last = c.iteration >= self.config.iterations;
                self.state.cursor = Cursor {
                    phase: if last { Phase::Done } else { Phase::Adapt },
                    iteration: if last { c.iteration } else { c.iteration + 1 },
                    epoch: 0,
                    step: 0,
                    relabeled: false,
                };
                Ok(Event::IterationDone { iteration: c.iteration, report })
            }
        }
    }

    /// Advances until the schedule is exhausted, reporting every event.
    pub fn run(&mut self, mut on_event: impl FnMut(&Trainer<'a>, &Event) -> Result<()>) -> Result<()> {
        loop {
            let e = self.advance()?;
            on_event(self, &e)?;
            if e == Event::Finished {
                return Ok(());
            }
        }
    }

    /// Advances until the current phase changes or the run ends.
    pub fn run_phase(&mut self) -> Result<()> {
        let phase = self.state.cursor.phase;
        while self.state.cursor.phase == phase && !self.is_done() {
            self.advance()?;
        }
        Ok(())
    }

    fn plan_epoch(&mut self) -> Vec<PlannedBatch> {
        let rng = &mut self.state.rng;
        let n_src = self.data.source.len();
        let pretrain = self.state.cursor.phase == Phase::Pretrain;
        let target = self.data.target.filter(|_| !pretrain);
        let (per_src, per_tgt) = if target.is_some() { self.config.batch_split() } else { (self.config.batch_size, 0) };
        let n_tgt = target.map_or(0, Dataset::len);
        // The larger set is traversed once; the other is drawn with replacement.
        let source_leads = n_src >= n_tgt;
        let (n_lead, per_lead, n_other, per_other) =
            if source_leads { (n_src, per_src, n_tgt, per_tgt) } else { (n_tgt, per_tgt, n_src, per_src) };
        let mut order: Vec<usize> = (0..n_lead).collect();
        order.shuffle(rng);
        let steps = n_lead.div_ceil(per_lead);
        while order.len() < steps * per_lead {
            order.push(rng.random_range(0..n_lead));
        }
        order
            .chunks(per_lead)
            .map(|lead| {
                let other: Vec<usize> = (0..per_other).map(|_| rng.random_range(0..n_other)).collect();
                if source_leads {
                    PlannedBatch { source: lead.to_vec(), target: other }
                } else {
                    PlannedBatch { source: other, target: lead.to_vec() }
                }
            })
            .collect()
    }

    fn train_step(&mut self, total_epochs: usize) -> Result<Event> {
        if self.state.plan.is_empty() {
            self.state.plan = self.plan_epoch();
        }
        let Cursor { phase, iteration, epoch, step, .. } = self.state.cursor;
        let batch = self.state.plan[step].clone();
        let pretrain = phase == Phase::Pretrain;
        let schedule = if pretrain { &self.config.pretrain_lr } else { &self.config.lr };
        let lr = lr_at(epoch, total_epochs, schedule);

        let mut images: Vec<&Tensor> = batch.source.iter().map(|&i| &self.data.source.samples[i].image).collect();
        let mut inputs = BatchLossInputs {
            domains: vec![Domain::Source; batch.source.len()],
            source_rows: (0..batch.source.len()).collect(),
            source_labels: batch.source.iter().map(|&i| self.data.source.samples[i].identity_id as usize).collect(),
            ..Default::default()
        };
        let losses = if pretrain { LossConfig::pretrain() } else { self.config.effective_losses() };
        if let (false, Some(target), Some(cm)) = (pretrain, self.data.target, self.state.clusters.as_ref()) {
            let base = batch.source.len();
            images.extend(batch.target.iter().map(|&i| &target.samples[i].image));
            inputs.domains.extend(std::iter::repeat_n(Domain::Target, batch.target.len()));
            inputs.target_rows = (base..base + batch.target.len()).collect();
            inputs.target_labels = batch.target.iter().map(|&i| cm.labels[i]).collect();
            inputs.target_weights = batch.target.iter().map(|&i| cm.weights[i]).collect();
        }
        let params = &self.state.params;
        inputs.validate(params.n_source_ids(), params.n_clusters())?;

        let opts = ForwardOptions {
            mode: Mode::Train,
            attention: self.config.attention(),
            dsp: losses.domain_specific || losses.orthogonality,
            occ: losses.domain_similarity,
            src_id: true,
            tgt_id: !pretrain,
        };
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let x = g.constant(Tensor::stack(&images)?);
        let vars = forward(&mut g, x, &bound, params, opts)?;
        let (loss, breakdown) = total_loss(&mut g, &vars, &inputs, &losses)?;
        g.backward(loss)?;

        let grads: BTreeMap<String, Tensor> = bound
            .iter()
            .filter(|(name, _)| !pretrain || pretrain_group(ParamGroup::of(name)))
            .filter_map(|(name, &v)| g.grad(v).map(|t| (name.clone(), t)))
            .collect();
        let stats = vars.bn_stats.clone();
        let global_step = self.state.loss_history.len();
        sgd_step(&mut self.state.params, &mut self.state.momentum, &grads, lr, self.config.momentum, global_step)?;
        self.state.params.update_running(&stats);

        let record = LossRecord { iteration, epoch, step, lr, losses: breakdown };
        self.state.loss_history.push(record);
        let c = &mut self.state.cursor;
        c.step += 1;
        if c.step == self.state.plan.len() {
            self.state.plan.clear();
            c.step = 0;
            c.epoch += 1;
            log::debug!("iteration {iteration} epoch {epoch}: L_total {:.5}", breakdown.total);
        }
        Ok(Event::Step(record))
    }

    fn relabel(&mut self) -> Result<Event> {
        let target = self.data.target.expect("adaptation runs with a target set");
        let k = self.config.n_clusters(Some(target));
        let feats = extract_features(target, &self.state.params, self.config.attention(), false)?;
        let seed = self.state.rng.random::<u64>();
        let model = kmeans_pp(&feats.f_sh, k, seed, self.config.kmeans)?;
        let truth: Vec<usize> = target.samples.iter().map(|s| s.identity_id as usize).collect();
        let agreement = adjusted_rand_index(&model.labels, &truth);
        self.state.params.reinit_target_head(k, &mut self.state.rng);
        for name in ["head.tgt_id.weight", "head.tgt_id.bias"] {
            let shape = self.state.params.get(name).shape().to_vec();
            self.state.momentum.insert(name.into(), Tensor::zeros(&shape));
        }
        let iteration = self.state.cursor.iteration;
        let inertia = model.inertia;
        log::info!(
            "iteration {iteration}: clustered {} target samples into {k} groups (inertia {inertia:.4}, ARI {agreement:.3}, mean weight {:.3e})",
            target.len(),
            model.weights.iter().sum::<f64>() / model.weights.len() as f64
        );
        self.state.clusters = Some(model);
        self.state.label_agreement.push(agreement);
        self.state.cursor.relabeled = true;
        Ok(Event::Relabeled { iteration, inertia, agreement })
    }

    fn evaluate(&mut self, iteration: usize) -> Result<Option<MetricsReport>> {
        let report = evaluate_params(&self.config, self.data, &self.state.params, iteration)?;
        if let Some(r) = &report {
            log::info!("iteration {iteration}: mAP {:.4} rank-1 {:.4}", r.map, r.cmc1);
            self.state.metrics.push(r.clone());
        }
        Ok(report)
    }

    // ---- checkpoints --------------------------------------------------

    /// DCKP layout: magic, `u16` version, `u32`-length prefixed JSON header
    /// (config hash, cursor, RNG state, epoch plan, clusters, histories),
    /// `u64`-length prefixed DPRM parameters, then the momentum buffers as
    /// a `u32` count of (`u32`-length name, DTN1 tensor) pairs.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let header = CheckpointHeader {
            config_hash: self.config_hash.clone(),
            cursor: s.cursor,
            rng: RngState {
                seed: hex::encode(s.rng.get_seed()),
                stream: s.rng.get_stream(),
                word_pos: s.rng.get_word_pos().to_string(),
            },
            plan: s.plan.clone(),
            clusters: s.clusters.clone(),
            loss_history: s.loss_history.clone(),
            metrics: s.metrics.clone(),
            label_agreement: s.label_agreement.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let params = s.params.to_bytes()?;
        let mut out = Vec::with_capacity(json.len() + params.len() * 2 + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        out.extend_from_slice(&params);
        out.extend_from_slice(&(s.momentum.len() as u32).to_le_bytes());
        for (name, t) in &s.momentum {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t)?;
        }
        Ok(out)
    }

    /// Restores a run from checkpoint bytes. The checkpoint must have been
    /// written under a configuration with the same hash.
    pub fn resume(config: TrainConfig, data: TrainData<'a>, bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Format(format!("checkpoint truncated in {what}")));
            }
            let (head, rest) = r.split_at(n);
            r = rest;
            Ok(head)
        };
        if take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a DCKP checkpoint".into()));
        }
        let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let len = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(len, "header")?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let expected = config.hash();
        if header.config_hash != expected {
            return Err(Error::Config(format!(
                "checkpoint was written under config {} but the current config hashes to {expected}; refusing to resume with different settings",
                header.config_hash
            )));
        }
        let plen = u64::from_le_bytes(take(8, "parameter length")?.try_into().unwrap()) as usize;
        let (params, _) = DaamParams::from_bytes(take(plen, "parameters")?)?;
        let mut rest = r;
        let count = read_u32(&mut rest, "momentum count")?;
        let mut momentum = BTreeMap::new();
        for _ in 0..count {
            let n = read_u32(&mut rest, "momentum name length")? as usize;
            if rest.len() < n {
                return Err(Error::Format("checkpoint truncated in momentum name".into()));
            }
            let name = String::from_utf8(rest[..n].to_vec()).map_err(|_| Error::Format("momentum name is not UTF-8".into()))?;
            rest = &rest[n..];
            let t = read_tensor(&mut rest)?;
            momentum.insert(name, t);
        }
        for (name, p) in params.params() {
            if momentum.get(name).map(Tensor::shape) != Some(p.shape()) {
                return Err(Error::Integrity(format!("momentum buffer for {name} missing or misshapen")));
            }
        }

        let mut trainer = Trainer::new(config, data)?;
        let seed: [u8; 32] = hex::decode(&header.rng.seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::Format("bad RNG seed in checkpoint".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(header.rng.word_pos.parse().map_err(|_| Error::Format("bad RNG position in checkpoint".into()))?);
        trainer.state = TrainState {
            params,
            momentum,
            cursor: header.cursor,
            plan: header.plan,
            clusters: header.clusters,
            loss_history: header.loss_history,
            metrics: header.metrics,
            label_agreement: header.label_agreement,
            rng,
        };
        Ok(trainer)
    }
}

/// The end-of-iteration evaluation of a run: retrieval on the target
/// query/gallery split plus, when enabled, domain probes on the source and
/// target training sets. `None` without a query/gallery split.
pub fn evaluate_params(
    config: &TrainConfig,
    data: TrainData<'_>,
    params: &DaamParams,
    iteration: usize,
) -> Result<Option<MetricsReport>> {
    let (Some(query), Some(gallery)) = (data.query, data.gallery) else {
        return Ok(None);
    };
    let mut report = evaluate_report(
        params,
        query,
        gallery,
        data.target.map(|t| (data.source, t)),
        config.attention(),
        &config.eval,
        config.probe_seed(),
    )?;
    report.iteration = Some(iteration);
    Ok(Some(report))
}

/// Parameters updated while pretraining on the source identities.
fn pretrain_group(g: ParamGroup) -> bool {
    matches!(g, ParamGroup::Backbone | ParamGroup::Attention | ParamGroup::Dsh | ParamGroup::SrcIdHead)
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    cursor: Cursor,
    rng: RngState,
    plan: Vec<PlannedBatch>,
    clusters: Option<ClusterModel>,
    loss_history: Vec<LossRecord>,
    metrics: Vec<MetricsReport>,
    label_agreement: Vec<f64>,
}

/// Source-only pretraining.
pub fn pretrain(source: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    let data = TrainData { source, target: None, query: None, gallery: None };
    let mut t = Trainer::new(config.clone(), data)?;
    t.run_phase()?;
    Ok(t.state)
}

/// Pretraining followed by `config.iterations` adaptation rounds. The
/// returned reports start with the direct-transfer evaluation (iteration 0).
pub fn run_alg1(data: &GeneratedData, config: &TrainConfig) -> Result<(TrainState, Vec<MetricsReport>)> {
    let mut t = Trainer::new(config.clone(), data.into())?;
    t.run(|_, _| Ok(()))?;
    let metrics = t.state.metrics.clone();
    Ok((t.state, metrics))
}

/// Central-difference audit of the gradient of the weighted total loss
/// with respect to every network parameter, on one training-mode batch.
pub fn audit_gradients(
    params: &DaamParams,
    batch: &Tensor,
    inputs: &BatchLossInputs,
    losses: &LossConfig,
    attention: bool,
    config: GradCheckConfig,
) -> Result<GradCheckReport> {
    inputs.validate(params.n_source_ids(), params.n_clusters())?;
    let names: Vec<String> = params.params().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor> = params.params().map(|(_, t)| t.clone()).collect();
    let opts = ForwardOptions {
        mode: Mode::Train,
        attention,
        dsp: losses.domain_specific || losses.orthogonality,
        occ: losses.domain_similarity,
        src_id: true,
        tgt_id: !inputs.target_rows.is_empty(),
    };
    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let x = g.constant(batch.clone());
        let fv = forward(g, x, &bound, params, opts)?;
        Ok(total_loss(g, &fv, inputs, losses)?.0)
    };
    grad_check(f, &tensors, config)
}
