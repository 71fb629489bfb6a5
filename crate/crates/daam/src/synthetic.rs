//! Synthetic two-domain retrieval benchmark.
//!
//! Every identity owns a latent appearance vector that is rendered as a
//! clothing-like foreground pattern in a fixed body region. Domains differ only
//! in background texture, global illumination and colour cast, all scaled by
//! the shift magnitude `delta`; the foreground rendering never depends on the
//! domain, so "foreground = shared, background = specific" is known exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"DRID";
pub const DATASET_VERSION: u16 = 1;

/// Number of colour channels in every image.
pub const CHANNELS: usize = 3;
/// Length of the domain-factor part of [`SampleRecord::latent`].
pub const DOMAIN_FACTORS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Class index used by the domain classifier.
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    fn from_index(i: u32) -> Result<Self> {
        match i {
            0 => Ok(Domain::Source),
            1 => Ok(Domain::Target),
            _ => Err(Error::Format(format!("unknown domain tag {i}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_source_ids: usize,
    pub n_target_train_ids: usize,
    pub n_target_eval_ids: usize,
    /// Images per identity in the two training sets.
    pub samples_per_identity: usize,
    /// Images per identity in the target evaluation pool (query + gallery).
    pub eval_samples_per_identity: usize,
    pub queries_per_identity: usize,
    pub n_cameras: usize,
    /// Domain-shift magnitude; 0 makes both domains identically distributed.
    pub delta: f64,
    pub latent_dim: usize,
    /// Per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Per-sample pose/view variation of the foreground.
    pub view_noise: f64,
    /// Scale of the target illumination change (gain drop, bias, colour
    /// cast) relative to `delta`.
    pub illumination_shift: f64,
    /// Per-sample gain jitter, identical in both domains.
    pub illumination_jitter: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            height: 16,
            width: 8,
            n_source_ids: 32,
            n_target_train_ids: 32,
            n_target_eval_ids: 16,
            samples_per_identity: 8,
            eval_samples_per_identity: 10,
            queries_per_identity: 2,
            n_cameras: 4,
            delta: 1.0,
            latent_dim: 8,
            pixel_noise: 0.03,
            view_noise: 0.15,
            illumination_shift: 1.0,
            illumination_jitter: 0.03,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_source_ids < 2 || self.n_target_train_ids < 2 || self.n_target_eval_ids < 2 {
            return bad("every identity set needs n_identities >= 2");
        }
        if self.samples_per_identity < 2 {
            return bad("samples_per_identity must be >= 2");
        }
        if self.n_cameras < 2 {
            return bad("n_cameras must be >= 2");
        }
        if self.queries_per_identity == 0 || self.eval_samples_per_identity <= self.queries_per_identity {
            return bad("each eval identity needs at least one query and one gallery image");
        }
        if self.height < 4 || self.width < 4 {
            return bad("images must be at least 4x4");
        }
        if self.latent_dim < 8 {
            return bad("latent_dim must be >= 8");
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta must be finite and >= 0");
        }
        if !(self.pixel_noise >= 0.0 && self.view_noise >= 0.0 && self.illumination_jitter >= 0.0) {
            return bad("noise levels must be >= 0");
        }
        if !(0.0..=2.0).contains(&self.illumination_shift) {
            return bad("illumination_shift must lie in [0, 2]");
        }
        Ok(())
    }
}

/// One image with its labels. `identity_id` is local to the owning dataset
/// (`< manifest.n_identities`); add `manifest.identity_base` for the global id.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: Tensor,
    pub identity_id: u32,
    pub camera_id: u32,
    pub domain: Domain,
    /// Identity latent (`latent_dim`) followed by the [`DOMAIN_FACTORS`]
    /// nuisance factors used to render the sample. Diagnostics only.
    pub latent: Vec<f64>,
}

/// Byte offsets relative to the first byte after the manifest block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FileOffsets {
    pub images: u64,
    pub labels: u64,
    pub latents: u64,
    pub end: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub domain: Domain,
    pub role: SplitRole,
    pub n_identities: usize,
    /// First global identity id of this dataset's identity block.
    pub identity_base: usize,
    pub n_cameras: usize,
    pub samples_per_identity: usize,
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub latent_len: usize,
    pub seed: u64,
    pub delta: f64,
    pub offsets: FileOffsets,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SampleRecord>,
}

/// The four splits of one generated benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub target_query: Dataset,
    pub target_gallery: Dataset,
}

impl GeneratedData {
    pub fn datasets(&self) -> [&Dataset; 4] {
        [&self.source_train, &self.target_train, &self.target_query, &self.target_gallery]
    }
}

pub const SPLIT_FILES: [&str; 4] =
    ["source_train.drid", "target_train.drid", "target_query.drid", "target_gallery.drid"];

// ---- rendering --------------------------------------------------------

/// Foreground (body) rectangle `(row0, row1, col0, col1)`, half-open.
pub fn body_region(height: usize, width: usize) -> (usize, usize, usize, usize) {
    (height / 4, height - height / 4, width / 8, width - width / 8)
}

/// Image-resolution foreground mask, row-major `height × width`.
pub fn foreground_mask(height: usize, width: usize) -> Vec<bool> {
    let (r0, r1, c0, c1) = body_region(height, width);
    (0..height * width)
        .map(|i| {
            let (r, c) = (i / width, i % width);
            (r0..r1).contains(&r) && (c0..c1).contains(&c)
        })
        .collect()
}

/// Foreground mask pooled to an `fh × fw` grid: a cell is foreground when
/// more than half of the image pixels it covers are.
pub fn foreground_mask_at(height: usize, width: usize, fh: usize, fw: usize) -> Vec<bool> {
    let mask = foreground_mask(height, width);
    let mut out = Vec::with_capacity(fh * fw);
    for i in 0..fh {
        for j in 0..fw {
            let (ra, rb) = (i * height / fh, ((i + 1) * height).div_ceil(fh));
            let (ca, cb) = (j * width / fw, ((j + 1) * width).div_ceil(fw));
            let mut fg = 0usize;
            let mut total = 0usize;
            for r in ra..rb {
                for c in ca..cb {
                    total += 1;
                    fg += mask[r * width + c] as usize;
                }
            }
            out.push(2 * fg > total);
        }
    }
    out
}

fn squash(x: f64) -> f64 {
    0.15 + 0.7 / (1.0 + (-1.5 * x).exp())
}

/// Nuisance factors of one rendered sample.
#[derive(Clone, Copy, Debug)]
struct Nuisance {
    gain: f64,
    bias: f64,
    cast: [f64; 3],
    bg_phase: f64,
    view: f64,
}

impl Nuisance {
    fn as_vec(&self) -> [f64; DOMAIN_FACTORS] {
        [self.gain, self.bias, self.cast[0], self.cast[1], self.cast[2], self.bg_phase]
    }
}

/// Per-camera illumination: a fixed deterministic table shared by both
/// domains.
fn camera_gain(camera: usize, n_cameras: usize) -> f64 {
    1.0 + 0.1 * (camera as f64 / (n_cameras - 1) as f64 - 0.5)
}

struct Renderer<'a> {
    cfg: &'a GenConfig,
}

impl Renderer<'_> {
    fn nuisance(&self, domain: Domain, camera: usize, rng: &mut ChaCha8Rng) -> Nuisance {
        let delta = match domain {
            Domain::Source => 0.0,
            Domain::Target => self.cfg.delta,
        };
        let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * self.cfg.illumination_jitter;
        let view: f64 = rng.sample::<f64, _>(StandardNormal) * self.cfg.view_noise;
        let light = delta * self.cfg.illumination_shift;
        Nuisance {
            gain: (1.0 - 0.3 * light).max(0.2) * camera_gain(camera, self.cfg.n_cameras) + jitter,
            bias: 0.08 * light,
            cast: [0.12 * light, -0.08 * light, 0.1 * light],
            bg_phase: rng.random::<f64>() * std::f64::consts::TAU,
            view,
        }
    }

    fn render(&self, domain: Domain, identity: &[f64], n: &Nuisance, rng: &mut ChaCha8Rng) -> Tensor {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let delta = match domain {
            Domain::Source => 0.0,
            Domain::Target => self.cfg.delta,
        };
        let (r0, r1, c0, c1) = body_region(h, w);
        let mid = (r0 + r1) / 2;
        let torso = [squash(identity[0]), squash(identity[1]), squash(identity[2])];
        let legs = [squash(identity[3]), squash(identity[4]), squash(identity[5])];
        let stripe_amp = 0.15 * identity[6].tanh();
        let stripe_phase = identity[7];
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for r in 0..h {
            for c in 0..w {
                let fg = (r0..r1).contains(&r) && (c0..c1).contains(&c);
                for ch in 0..CHANNELS {
                    let base = if fg {
                        let body = if r < mid { torso[ch] } else { legs[ch] };
                        let stripe = if r < mid {
                            stripe_amp * (std::f64::consts::PI * (r - r0) as f64 / 2.0 + stripe_phase).sin()
                        } else {
                            0.0
                        };
                        let shade = 1.0 + n.view * (c as f64 - (w as f64 - 1.0) / 2.0) / w as f64;
                        (body + stripe) * shade
                    } else {
                        // Shared smooth backdrop plus a domain-specific
                        // high-contrast texture scaled by delta.
                        let smooth = 0.45 + 0.1 * (0.4 * r as f64 + n.bg_phase).sin();
                        let texture = 0.25
                            * ((std::f64::consts::PI * c as f64 / 1.5 + n.bg_phase * (ch as f64 + 1.0)).sin()
                                * (0.9 * r as f64 + n.bg_phase).cos());
                        smooth + delta * texture
                    };
                    let lit = base * n.gain + n.bias + n.cast[ch];
                    let noisy = lit + rng.sample::<f64, _>(StandardNormal) * self.cfg.pixel_noise;
                    data.push(noisy.clamp(0.0, 1.0));
                }
            }
        }
        Tensor::new(vec![h, w, CHANNELS], data).expect("extents match")
    }
}

fn latents(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

struct Block<'a> {
    name: &'a str,
    domain: Domain,
    role: SplitRole,
    identity_base: usize,
    samples_per_identity: usize,
}

fn build(cfg: &GenConfig, block: Block<'_>, samples: Vec<SampleRecord>, n_identities: usize) -> Dataset {
    Dataset {
        manifest: DatasetManifest {
            name: block.name.to_string(),
            domain: block.domain,
            role: block.role,
            n_identities,
            identity_base: block.identity_base,
            n_cameras: cfg.n_cameras,
            samples_per_identity: block.samples_per_identity,
            n_samples: samples.len(),
            height: cfg.height,
            width: cfg.width,
            latent_len: cfg.latent_dim + DOMAIN_FACTORS,
            seed: cfg.seed,
            delta: cfg.delta,
            offsets: FileOffsets::default(),
        },
        samples,
    }
}

/// Renders `per_id` images for every identity; cameras are assigned
/// round-robin over the running sample index of the block.
fn render_block(
    cfg: &GenConfig,
    domain: Domain,
    ids: &[Vec<f64>],
    per_id: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<SampleRecord> {
    let renderer = Renderer { cfg };
    let mut out = Vec::with_capacity(ids.len() * per_id);
    for (id, latent) in ids.iter().enumerate() {
        for _ in 0..per_id {
            let camera = out.len() % cfg.n_cameras;
            let nuisance = renderer.nuisance(domain, camera, rng);
            let image = renderer.render(domain, latent, &nuisance, rng);
            let mut full = latent.clone();
            full.extend_from_slice(&nuisance.as_vec());
            out.push(SampleRecord {
                image,
                identity_id: id as u32,
                camera_id: camera as u32,
                domain,
                latent: full,
            });
        }
    }
    out
}

/// Generates the source training set and the target train/query/gallery
/// splits. Source, target-train and target-eval identities are disjoint
/// blocks of global ids with independently drawn latents.
pub fn generate(cfg: &GenConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s);
        rng
    };
    let mut latent_rng = stream(0);
    let src_ids = latents(cfg.n_source_ids, cfg.latent_dim, &mut latent_rng);
    let tgt_ids = latents(cfg.n_target_train_ids, cfg.latent_dim, &mut latent_rng);
    let eval_ids = latents(cfg.n_target_eval_ids, cfg.latent_dim, &mut latent_rng);

    let spi = cfg.samples_per_identity;
    let source = render_block(cfg, Domain::Source, &src_ids, spi, &mut stream(1));
    let target = render_block(cfg, Domain::Target, &tgt_ids, spi, &mut stream(2));
    let pool = render_block(cfg, Domain::Target, &eval_ids, cfg.eval_samples_per_identity, &mut stream(3));

    let q = cfg.queries_per_identity;
    let (mut query, mut gallery) = (Vec::new(), Vec::new());
    for (i, s) in pool.into_iter().enumerate() {
        if i % cfg.eval_samples_per_identity < q {
            query.push(s);
        } else {
            gallery.push(s);
        }
    }
    for qs in &query {
        let covered = gallery.iter().any(|g| g.identity_id == qs.identity_id && g.camera_id != qs.camera_id);
        if !covered {
            return Err(Error::Config(format!(
                "query identity {} has no gallery image from another camera",
                qs.identity_id
            )));
        }
    }

    let eval_base = cfg.n_source_ids + cfg.n_target_train_ids;
    Ok(GeneratedData {
        source_train: build(
            cfg,
            Block { name: "source_train", domain: Domain::Source, role: SplitRole::Train, identity_base: 0, samples_per_identity: spi },
            source,
            cfg.n_source_ids,
        ),
        target_train: build(
            cfg,
            Block {
                name: "target_train",
                domain: Domain::Target,
                role: SplitRole::Train,
                identity_base: cfg.n_source_ids,
                samples_per_identity: spi,
            },
            target,
            cfg.n_target_train_ids,
        ),
        target_query: build(
            cfg,
            Block { name: "target_query", domain: Domain::Target, role: SplitRole::Query, identity_base: eval_base, samples_per_identity: q },
            query,
            cfg.n_target_eval_ids,
        ),
        target_gallery: build(
            cfg,
            Block {
                name: "target_gallery",
                domain: Domain::Target,
                role: SplitRole::Gallery,
                identity_base: eval_base,
                samples_per_identity: cfg.eval_samples_per_identity - q,
            },
            gallery,
            cfg.n_target_eval_ids,
        ),
    })
}

// ---- persistence ------------------------------------------------------

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn camera_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.manifest.n_cameras];
        for s in &self.samples {
            hist[s.camera_id as usize] += 1;
        }
        hist
    }

    pub fn global_identity(&self, i: usize) -> usize {
        self.manifest.identity_base + self.samples[i].identity_id as usize
    }

    /// Serializes to the DRID layout: magic, `u16` version, `u32`-length
    /// prefixed JSON manifest, then the images as DTN1 tensors, one
    /// `u32` (identity, camera, domain) triple per sample, and a single
    /// `[n, latent_len]` DTN1 tensor of latents. The manifest is written as
    /// given apart from its byte offsets.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        for s in &self.samples {
            write_tensor(&mut payload, &s.image)?;
        }
        let labels = payload.len() as u64;
        for s in &self.samples {
            for v in [s.identity_id, s.camera_id, s.domain.index() as u32] {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let latents_at = payload.len() as u64;
        let latent_len = self.samples.first().map_or(self.manifest.latent_len, |s| s.latent.len());
        if !self.samples.is_empty() {
            let flat: Vec<f64> = self.samples.iter().flat_map(|s| s.latent.iter().copied()).collect();
            write_tensor(&mut payload, &Tensor::new(vec![self.samples.len(), latent_len], flat)?)?;
        }
        let mut manifest = self.manifest.clone();
        manifest.offsets = FileOffsets { images: 0, labels, latents: latents_at, end: payload.len() as u64 };
        let json = serde_json::to_vec(&manifest)?;

        let mut out = Vec::with_capacity(10 + json.len() + payload.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let truncated = || Error::Format("truncated dataset file".into());
        if bytes.len() < 10 {
            return Err(truncated());
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(Error::Format(format!("bad dataset magic {:?}", &bytes[..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let json_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let json = bytes.get(10..10 + json_len).ok_or_else(truncated)?;
        let manifest: DatasetManifest =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let payload = &bytes[10 + json_len..];
        let off = &manifest.offsets;
        if (payload.len() as u64) < off.end {
            return Err(truncated());
        }
        if payload.len() as u64 != off.end {
            return Err(Error::Integrity(format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                off.end
            )));
        }

        let n = manifest.n_samples;
        let mut cursor = payload;
        let mut images = Vec::with_capacity(n);
        for _ in 0..n {
            images.push(read_tensor(&mut cursor)?);
        }
        let consumed = (payload.len() - cursor.len()) as u64;
        if consumed != off.labels {
            return Err(Error::Integrity(format!(
                "manifest declares {n} samples but the image block spans {} of {} bytes",
                consumed, off.labels
            )));
        }
        let label_bytes = off.latents.checked_sub(off.labels).ok_or_else(|| Error::Integrity("label block offsets".into()))?;
        if label_bytes != 12 * n as u64 {
            return Err(Error::Integrity(format!("{label_bytes} label bytes for {n} samples")));
        }
        let mut triples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut t = [0u32; 3];
            for v in &mut t {
                *v = crate::tensor::read_u32(&mut cursor, "label")?;
            }
            triples.push(t);
        }
        let latents = if n > 0 { Some(read_tensor(&mut cursor)?) } else { None };
        if !cursor.is_empty() {
            return Err(Error::Integrity("trailing bytes after latent block".into()));
        }

        let mut samples = Vec::with_capacity(n);
        for (i, (image, [id, cam, dom])) in images.into_iter().zip(triples).enumerate() {
            if image.shape() != [manifest.height, manifest.width, CHANNELS] {
                return Err(Error::Integrity(format!("image {i} has shape {:?}", image.shape())));
            }
            if id as usize >= manifest.n_identities || cam as usize >= manifest.n_cameras {
                return Err(Error::Integrity(format!("sample {i} label ({id}, {cam}) out of range")));
            }
            let latent = latents.as_ref().map(|l| l.row(i).to_vec()).unwrap_or_default();
            samples.push(SampleRecord { image, identity_id: id, camera_id: cam, domain: Domain::from_index(dom)?, latent });
        }
        Ok(Dataset { manifest, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Stacked `[n, h, w, 3]` batch of the selected samples.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        Tensor::stack(&images)
    }
}

impl GeneratedData {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (d, name) in self.datasets().into_iter().zip(SPLIT_FILES) {
            d.save(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<GeneratedData> {
        let load = |name: &str| {
            Dataset::load(&dir.join(name)).map_err(|e| match e {
                Error::Io(io) => Error::Data(format!("{}: {io}", dir.join(name).display())),
                other => other,
            })
        };
        Ok(GeneratedData {
            source_train: load(SPLIT_FILES[0])?,
            target_train: load(SPLIT_FILES[1])?,
            target_query: load(SPLIT_FILES[2])?,
            target_gallery: load(SPLIT_FILES[3])?,
        })
    }
}
