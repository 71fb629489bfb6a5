//! Retrieval evaluation (single-query mAP and CMC), a logistic domain probe
//! and attention heatmap export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{infer, DaamParams, ForwardOptions, Mode};
use crate::synthetic::{foreground_mask_at, Dataset, Domain};
use crate::tensor::{write_tensor, Tensor};

const EXTRACT_CHUNK: usize = 64;

/// Per-sample embeddings of a dataset, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub f_sh: Vec<Vec<f64>>,
    pub f_sp: Option<Vec<Vec<f64>>>,
}

/// Eval-mode embeddings. `attention: false` replaces the attention module
/// by its constant bypass; `with_specific` also returns `f_sp`.
pub fn extract_features(dataset: &Dataset, params: &DaamParams, attention: bool, with_specific: bool) -> Result<Embeddings> {
    if dataset.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", dataset.manifest.name)));
    }
    let opts = ForwardOptions { attention, dsp: with_specific, ..ForwardOptions::embed(Mode::Eval) };
    let mut f_sh = Vec::with_capacity(dataset.len());
    let mut f_sp = with_specific.then(|| Vec::with_capacity(dataset.len()));
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EXTRACT_CHUNK) {
        let (g, vars) = infer(params, &dataset.batch(chunk)?, opts)?;
        let sh = g.value(vars.f_sh);
        f_sh.extend((0..chunk.len()).map(|i| sh.row(i).to_vec()));
        if let (Some(out), Some(v)) = (f_sp.as_mut(), vars.f_sp) {
            let sp = g.value(v);
            out.extend((0..chunk.len()).map(|i| sp.row(i).to_vec()));
        }
    }
    Ok(Embeddings { f_sh, f_sp })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
    Cosine,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                1.0 - dot / (na * nb).max(1e-12)
            }
        }
    }
}

/// Identity and camera of one query or gallery item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub identity: usize,
    pub camera: usize,
}

impl ItemMeta {
    pub fn of_dataset(d: &Dataset) -> Vec<ItemMeta> {
        (0..d.len()).map(|i| ItemMeta { identity: d.global_identity(i), camera: d.samples[i].camera_id as usize }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRanking {
    /// Gallery indices in rank order, same-identity same-camera items removed.
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
    /// 1-based ranks of the correct matches.
    pub hit_ranks: Vec<usize>,
    /// `None` for queries without a cross-camera match.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub queries: Vec<QueryRanking>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iteration: Option<usize>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub n_queries: usize,
    pub n_gallery: usize,
    pub excluded_queries: usize,
    pub probe_sh: Option<f64>,
    pub probe_sp: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "iteration,mAP,cmc1,cmc5,cmc10,probe_sh,probe_sp";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.17e}"));
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            self.iteration.map_or(String::new(), |i| i.to_string()),
            self.map,
            self.cmc1,
            self.cmc5,
            self.cmc10,
            opt(self.probe_sh),
            opt(self.probe_sp)
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Ranks the gallery for every query and scores it under the single-query
/// protocol. Ties in distance place non-matches first, so the result does
/// not depend on gallery order.
pub fn rank_and_score(
    query: &[Vec<f64>],
    query_meta: &[ItemMeta],
    gallery: &[Vec<f64>],
    gallery_meta: &[ItemMeta],
    distance: Distance,
) -> Result<(RankingResult, MetricsReport)> {
    if query.len() != query_meta.len() || gallery.len() != gallery_meta.len() {
        return Err(Error::Data("feature and metadata counts differ".into()));
    }
    let mut rankings = Vec::with_capacity(query.len());
    let (mut ap_sum, mut cmc, mut used) = (0.0, [0usize; 3], 0usize);
    for (q, qm) in query.iter().zip(query_meta) {
        let mut kept: Vec<(f64, bool, usize)> = gallery
            .iter()
            .zip(gallery_meta)
            .enumerate()
            .filter(|(_, (_, gm))| !(gm.identity == qm.identity && gm.camera == qm.camera))
            .map(|(j, (g, gm))| (distance.eval(q, g), gm.identity == qm.identity, j))
            .collect();
        kept.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let hit_ranks: Vec<usize> = kept.iter().enumerate().filter(|(_, k)| k.1).map(|(r, _)| r + 1).collect();
        let ap = (!hit_ranks.is_empty()).then(|| {
            hit_ranks.iter().enumerate().map(|(h, &r)| (h + 1) as f64 / r as f64).sum::<f64>() / hit_ranks.len() as f64
        });
        if let Some(ap) = ap {
            used += 1;
            ap_sum += ap;
            for (c, k) in cmc.iter_mut().zip([1, 5, 10]) {
                *c += (hit_ranks[0] <= k) as usize;
            }
        }
        rankings.push(QueryRanking {
            order: kept.iter().map(|k| k.2).collect(),
            distances: kept.iter().map(|k| k.0).collect(),
            hit_ranks,
            ap,
        });
    }
    if used == 0 {
        return Err(Error::Data("no query has a cross-camera match in the gallery".into()));
    }
    let n = used as f64;
    let report = MetricsReport {
        iteration: None,
        map: ap_sum / n,
        cmc1: cmc[0] as f64 / n,
        cmc5: cmc[1] as f64 / n,
        cmc10: cmc[2] as f64 / n,
        n_queries: query.len(),
        n_gallery: gallery.len(),
        excluded_queries: query.len() - used,
        probe_sh: None,
        probe_sp: None,
    };
    Ok((RankingResult { queries: rankings }, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub distance: Distance,
    /// Domain probes on `f_sh` and `f_sp` of the two training sets.
    pub probes: bool,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { distance: Distance::Euclidean, probes: true, probe: ProbeConfig::default() }
    }
}

/// Query/gallery evaluation of `params` on the shared embedding.
pub fn evaluate(params: &DaamParams, query: &Dataset, gallery: &Dataset, attention: bool, distance: Distance) -> Result<MetricsReport> {
    let q = extract_features(query, params, attention, false)?;
    let g = extract_features(gallery, params, attention, false)?;
    let (_, report) = rank_and_score(&q.f_sh, &ItemMeta::of_dataset(query), &g.f_sh, &ItemMeta::of_dataset(gallery), distance)?;
    Ok(report)
}

/// Retrieval metrics plus, when `probe_sets` is given and probes are
/// enabled, domain-probe accuracies of `f_sh` and `f_sp` over the union of
/// the two (source, target) sets.
pub fn evaluate_report(
    params: &DaamParams,
    query: &Dataset,
    gallery: &Dataset,
    probe_sets: Option<(&Dataset, &Dataset)>,
    attention: bool,
    cfg: &EvalConfig,
    probe_seed: u64,
) -> Result<MetricsReport> {
    let mut report = evaluate(params, query, gallery, attention, cfg.distance)?;
    if let (true, Some((source, target))) = (cfg.probes, probe_sets) {
        let src = extract_features(source, params, attention, true)?;
        let tgt = extract_features(target, params, attention, true)?;
        let domains: Vec<Domain> = std::iter::repeat_n(Domain::Source, src.f_sh.len())
            .chain(std::iter::repeat_n(Domain::Target, tgt.f_sh.len()))
            .collect();
        let sh: Vec<Vec<f64>> = src.f_sh.into_iter().chain(tgt.f_sh).collect();
        let sp: Vec<Vec<f64>> = src.f_sp.unwrap_or_default().into_iter().chain(tgt.f_sp.unwrap_or_default()).collect();
        report.probe_sh = Some(domain_probe_with(&sh, &domains, probe_seed, cfg.probe)?);
        report.probe_sp = Some(domain_probe_with(&sp, &domains, probe_seed, cfg.probe)?);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { train_fraction: 0.7, epochs: 300, lr: 0.5, l2: 1e-3 }
    }
}

/// Held-out accuracy of a logistic regression separating the two domains.
/// The split is stratified by domain; features are standardized with the
/// training statistics.
pub fn domain_probe(features: &[Vec<f64>], domains: &[Domain], seed: u64) -> Result<f64> {
    domain_probe_with(features, domains, seed, ProbeConfig::default())
}

pub fn domain_probe_with(features: &[Vec<f64>], domains: &[Domain], seed: u64, cfg: ProbeConfig) -> Result<f64> {
    if features.len() != domains.len() {
        return Err(Error::Data("probe features and domain tags differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for d in [Domain::Source, Domain::Target] {
        let mut idx: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == d).collect();
        if idx.len() < 2 {
            return Err(Error::Data("domain probe needs at least two samples of each domain".into()));
        }
        idx.shuffle(&mut rng);
        let cut = ((idx.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    let dim = features[0].len();
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for &i in &train {
        mean.iter_mut().zip(&features[i]).for_each(|(m, v)| *m += v / train.len() as f64);
    }
    for &i in &train {
        std.iter_mut().zip(&features[i]).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / train.len() as f64);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    let x = |i: usize| -> Vec<f64> { features[i].iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| x(i)).collect();
    let ys: Vec<f64> = train.iter().map(|&i| domains[i].index() as f64).collect();

    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let n = xs.len() as f64;
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (xi, &yi) in xs.iter().zip(&ys) {
            let z: f64 = b + xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - yi;
            gw.iter_mut().zip(xi).for_each(|(g, v)| *g += err * v / n);
            gb += err / n;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= cfg.lr * (g + cfg.l2 * *wi));
        b -= cfg.lr * gb;
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let z: f64 = b + x(i).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == (domains[i] == Domain::Target)
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

// ---- attention maps ---------------------------------------------------

/// Channel mean of an `[h, w, c]` attention tensor, row-major `h × w`.
pub fn channel_mean(attention: &Tensor) -> Vec<f64> {
    let c = *attention.shape().last().expect("rank >= 1");
    attention.data().chunks(c).map(|px| px.iter().sum::<f64>() / c as f64).collect()
}

/// Min-max normalized 8-bit grayscale; a constant map keeps its absolute
/// level.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            let t = if hi - lo > 1e-12 { (v - lo) / (hi - lo) } else { v.clamp(0.0, 1.0) };
            (t * 255.0).round() as u8
        })
        .collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

/// Files written for one exported sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub shared_pgm: PathBuf,
    pub specific_pgm: PathBuf,
    pub raw: PathBuf,
    /// Channel-mean `A` at feature resolution.
    pub mean_attention: Vec<f64>,
    pub extent: (usize, usize),
}

/// Writes `<stem>_shared.pgm` (channel-mean `A`), `<stem>_specific.pgm`
/// (channel-mean `1 − A`) and `<stem>_attention.dtn` (raw `[h, w, c]`
/// tensor) into `dir`.
pub fn export_attention(image: &Tensor, params: &DaamParams, attention: bool, dir: &Path, stem: &str) -> Result<AttentionExport> {
    let batch = Tensor::stack(&[image])?;
    let opts = ForwardOptions { attention, ..ForwardOptions::embed(Mode::Eval) };
    let (g, vars) = infer(params, &batch, opts)?;
    let a = vars.artifacts(&g, 0).attention;
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let shared = channel_mean(&a);
    let specific: Vec<f64> = channel_mean(&a.map(|v| 1.0 - v));
    std::fs::create_dir_all(dir)?;
    let out = AttentionExport {
        shared_pgm: dir.join(format!("{stem}_shared.pgm")),
        specific_pgm: dir.join(format!("{stem}_specific.pgm")),
        raw: dir.join(format!("{stem}_attention.dtn")),
        mean_attention: shared.clone(),
        extent: (h, w),
    };
    write_pgm(&out.shared_pgm, w, h, &to_gray(&shared))?;
    write_pgm(&out.specific_pgm, w, h, &to_gray(&specific))?;
    let mut f = BufWriter::new(File::create(&out.raw)?);
    write_tensor(&mut f, &a)?;
    f.flush()?;
    Ok(out)
}

/// Mean attention over foreground and background cells of a channel-mean
/// map at `extent`, using the body region of an `image_h × image_w` image.
pub fn foreground_contrast(mean_attention: &[f64], extent: (usize, usize), image_h: usize, image_w: usize) -> (f64, f64) {
    let mask = foreground_mask_at(image_h, image_w, extent.0, extent.1);
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in mean_attention.iter().zip(&mask) {
        if m {
            fg += v;
            nf += 1;
        } else {
            bg += v;
            nb += 1;
        }
    }
    (fg / nf.max(1) as f64, bg / nb.max(1) as f64)
}
