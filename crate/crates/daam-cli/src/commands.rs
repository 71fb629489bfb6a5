use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use daam::config::ExperimentConfig;
use daam::losses::BatchLossInputs;
use daam::metrics::{export_attention, foreground_contrast, MetricsReport};
use daam::net::DaamParams;
use daam::synthetic::{generate, Dataset, Domain, GeneratedData, SPLIT_FILES};
use daam::tensor::GradCheckConfig;
use daam::trainer::{audit_gradients, evaluate_params, Event, Phase, Trainer};
use daam::weak_labels::weight_from_sq_distance;
use daam::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::artifacts::{self, prepare, Reuse};
use crate::{Command, Common, FromCheckpoint};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(common) => gen(&common),
        Command::Train { common, data, resume } => train(&common, data.as_deref(), resume.as_deref()),
        Command::Eval { from } => eval(&from),
        Command::Gradcheck { common, samples, max_entries } => gradcheck(&common, samples, max_entries),
        Command::ExportAttn { from, samples, split } => export_attn(&from, &samples, &split),
        Command::SweepK { from, ks } => sweep_k(&from, &ks),
        Command::SweepIters { from } => sweep_iters(&from),
    }
}

/// Applies the command-line overrides to `base` and validates the result.
fn resolve(common: &Common, base: ExperimentConfig) -> Result<ExperimentConfig> {
    let mut cfg = base;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(n) = common.iterations {
        cfg.train.iterations = n;
    }
    if let Some(k) = common.clusters {
        cfg.train.clusters = Some(k);
    }
    for &a in &common.ablations {
        if !cfg.train.ablations.contains(&a) {
            cfg.train.ablations.push(a);
        }
    }
    cfg.train.ablations.sort();
    cfg.resolved()
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    resolve(common, base)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.out.clone().ok_or_else(|| Error::Config("no output directory; pass --out or set \"out\" in the config".into()))
}

fn datasets(dir: Option<&Path>, cfg: &ExperimentConfig) -> Result<GeneratedData> {
    match dir {
        Some(d) => artifacts::load_data(d, &cfg.data),
        None => generate(&cfg.data),
    }
}

fn gen(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(&cfg)?;
    prepare(&dir, &cfg, common.force, Reuse::Refuse)?;
    let data = generate(&cfg.data)?;
    let manifest = artifacts::save_data(&dir, &data, &cfg.data)?;
    for s in &manifest.splits {
        println!("{}\t{} samples\t{} identities\t{}", s.file, s.n_samples, s.n_identities, s.sha256);
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    config_sha256: String,
    params_sha256: String,
    metrics: &'a [MetricsReport],
    label_agreement: &'a [f64],
}

fn train(common: &Common, data_dir: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(&cfg)?;
    let reuse = if resume.is_some() { Reuse::SameConfig } else { Reuse::Refuse };
    prepare(&dir, &cfg, common.force, reuse)?;
    let data = datasets(data_dir, &cfg)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg.train.clone(), (&data).into(), &read(path)?)?,
        None => Trainer::new(cfg.train.clone(), (&data).into())?,
    };
    let checkpoints = dir.join("checkpoints");
    let clusters = dir.join("clusters");
    fs::create_dir_all(&checkpoints)?;
    fs::create_dir_all(&clusters)?;
    let started = Instant::now();
    trainer.run(|t, event| {
        match event {
            Event::Relabeled { iteration, inertia, agreement } => {
                log::info!("iteration {iteration}: weak labels inertia {inertia:.4}, ARI {agreement:.4}");
                if let Some(cm) = &t.state.clusters {
                    fs::write(clusters.join(format!("iter_{iteration:03}.json")), cm.to_json()?)?;
                }
            }
            Event::IterationDone { iteration, .. } => {
                fs::write(checkpoints.join(format!("iter_{iteration:03}.dckp")), t.checkpoint_bytes()?)?;
                fs::write(dir.join("metrics.csv"), artifacts::metrics_csv(&t.state.metrics))?;
                fs::write(dir.join("losses.csv"), artifacts::losses_csv(&t.state.loss_history))?;
            }
            Event::Step(_) | Event::Finished => {}
        }
        Ok(())
    })?;
    log::info!("training finished in {:.1} s", started.elapsed().as_secs_f64());

    let s = &trainer.state;
    fs::write(dir.join("params.dprm"), s.params.to_bytes()?)?;
    let report = TrainReport {
        config_sha256: cfg.hash(),
        params_sha256: s.params.hash(),
        metrics: &s.metrics,
        label_agreement: &s.label_agreement,
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{}", artifacts::metrics_csv(&s.metrics));
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// A checkpoint together with the config of the run that wrote it.
struct Loaded {
    run: ExperimentConfig,
    data: GeneratedData,
    bytes: Vec<u8>,
}

impl Loaded {
    fn trainer(&self) -> Result<Trainer<'_>> {
        Trainer::resume(self.run.train.clone(), (&self.data).into(), &self.bytes)
    }
}

fn load_checkpoint(from: &FromCheckpoint) -> Result<Loaded> {
    let config_path = match &from.common.config {
        Some(p) => p.clone(),
        None => from
            .checkpoint
            .parent()
            .and_then(Path::parent)
            .map(|run| run.join(artifacts::CONFIG_FILE))
            .ok_or_else(|| Error::Config("cannot locate the run config; pass --config".into()))?,
    };
    let run = ExperimentConfig::load(&config_path)?.resolved()?;
    let data = datasets(from.data.as_deref(), &run)?;
    let bytes = read(&from.checkpoint)?;
    Ok(Loaded { run, data, bytes })
}

/// Config for outputs derived from a checkpoint: the run's config with the
/// command-line overrides applied.
fn derived_config(from: &FromCheckpoint, run: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut base = run.clone();
    base.out = None;
    resolve(&from.common, base)
}

fn eval(from: &FromCheckpoint) -> Result<()> {
    let loaded = load_checkpoint(from)?;
    let trainer = loaded.trainer()?;
    let s = &trainer.state;
    let iteration = s.metrics.last().and_then(|m| m.iteration).unwrap_or(0);
    let report = evaluate_params(&loaded.run.train, (&loaded.data).into(), &s.params, iteration)?
        .ok_or_else(|| Error::Data("no query/gallery split to evaluate on".into()))?;
    match s.metrics.last() {
        Some(recorded) if recorded == &report => log::info!("matches the metrics recorded in the checkpoint"),
        Some(_) => log::warn!("differs from the metrics recorded in the checkpoint"),
        None => {}
    }
    let csv = artifacts::metrics_csv(std::slice::from_ref(&report));
    if let Some(dir) = &from.common.out {
        let mut cfg = loaded.run.clone();
        cfg.out = Some(dir.clone());
        prepare(dir, &cfg, from.common.force, Reuse::SameConfig)?;
        fs::write(dir.join("eval.csv"), &csv)?;
        fs::write(dir.join("eval.json"), report.to_json()? + "\n")?;
    }
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct GradcheckSummary {
    checked_entries: usize,
    parameter_tensors: usize,
    max_rel_error: f64,
    tol: f64,
    passed: bool,
    worst_parameter: Option<String>,
    seconds: f64,
}

/// Every `stride`-th image of `d`, so the batch spans identities.
fn spread(d: &Dataset, n: usize) -> Vec<usize> {
    let stride = (d.len() / n.max(1)).max(1);
    (0..n).map(|i| (i * stride) % d.len()).collect()
}

fn gradcheck(common: &Common, samples: usize, max_entries: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()));
    }
    let cfg = load_config(common)?;
    let data = generate(&cfg.data)?;
    let k = cfg.train.n_clusters(Some(&data.target_train));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let src = &data.source_train;
    let params = DaamParams::init(&cfg.train.network, cfg.data.height, cfg.data.width, src.manifest.n_identities, k, &mut rng)?;

    let si = spread(src, samples);
    let ti = spread(&data.target_train, samples);
    let mut images: Vec<&Tensor> = si.iter().map(|&i| &src.samples[i].image).collect();
    images.extend(ti.iter().map(|&i| &data.target_train.samples[i].image));
    let batch = Tensor::stack(&images)?;
    let inputs = BatchLossInputs {
        domains: [vec![Domain::Source; samples], vec![Domain::Target; samples]].concat(),
        source_rows: (0..samples).collect(),
        source_labels: si.iter().map(|&i| src.samples[i].identity_id as usize).collect(),
        target_rows: (samples..2 * samples).collect(),
        target_labels: (0..samples).map(|i| i % k).collect(),
        target_weights: (0..samples).map(|i| weight_from_sq_distance(0.25 * (i + 1) as f64)).collect(),
    };
    let config = GradCheckConfig { max_entries: (max_entries > 0).then_some(max_entries), ..Default::default() };
    let names: Vec<String> = params.params().map(|(n, _)| n.clone()).collect();

    let started = Instant::now();
    let report = audit_gradients(&params, &batch, &inputs, &cfg.train.effective_losses(), cfg.train.attention(), config)?;
    let worst = report.worst();
    let summary = GradcheckSummary {
        checked_entries: report.entries.len(),
        parameter_tensors: names.len(),
        max_rel_error: report.max_rel_error,
        tol: report.tol,
        passed: report.passed(),
        worst_parameter: worst.map(|e| format!("{}[{}]", names[e.input], e.index)),
        seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &cfg.out {
        prepare(dir, &cfg, common.force, Reuse::SameConfig)?;
        fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    println!(
        "{} entries over {} tensors: max relative error {:.3e} (tol {:.0e}) in {:.1} s",
        summary.checked_entries, summary.parameter_tensors, summary.max_rel_error, summary.tol, summary.seconds
    );
    if !summary.passed {
        let at = summary.worst_parameter.unwrap_or_default();
        return Err(Error::Numeric {
            op: "gradcheck",
            detail: format!("relative error {:.3e} at {at} exceeds {:.0e}", summary.max_rel_error, summary.tol),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct ExportedSample {
    split: String,
    index: usize,
    identity: u32,
    camera: u32,
    shared_pgm: PathBuf,
    specific_pgm: PathBuf,
    raw: PathBuf,
    foreground_mean: f64,
    background_mean: f64,
}

fn export_attn(from: &FromCheckpoint, samples: &[usize], split: &str) -> Result<()> {
    let loaded = load_checkpoint(from)?;
    let trainer = loaded.trainer()?;
    let dir = from.common.out.clone().ok_or_else(|| Error::Config("export-attn needs --out".into()))?;
    let mut cfg = loaded.run.clone();
    cfg.out = Some(dir.clone());
    prepare(&dir, &cfg, from.common.force, Reuse::SameConfig)?;

    let pos = SPLIT_FILES
        .iter()
        .position(|f| f.trim_end_matches(".drid") == split)
        .ok_or_else(|| Error::Config(format!("unknown split {split:?}")))?;
    let dataset = loaded.data.datasets()[pos];
    let (h, w) = (cfg.data.height, cfg.data.width);
    let mut rows = Vec::new();
    for &i in samples {
        let s = dataset
            .samples
            .get(i)
            .ok_or_else(|| Error::Data(format!("{split} has {} samples, index {i} is out of range", dataset.len())))?;
        let e = export_attention(&s.image, &trainer.state.params, cfg.train.attention(), &dir, &format!("{split}_{i:04}"))?;
        let (fg, bg) = foreground_contrast(&e.mean_attention, e.extent, h, w);
        println!("{split}[{i}]: mean attention foreground {fg:.4} background {bg:.4}");
        rows.push(ExportedSample {
            split: split.to_string(),
            index: i,
            identity: s.identity_id,
            camera: s.camera_id,
            shared_pgm: e.shared_pgm,
            specific_pgm: e.specific_pgm,
            raw: e.raw,
            foreground_mean: fg,
            background_mean: bg,
        });
    }
    fs::write(dir.join("attention.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    Ok(())
}

/// Parameters of a checkpoint written right after pretraining.
fn pretrained(loaded: &Loaded) -> Result<DaamParams> {
    let t = loaded.trainer()?;
    let c = t.state.cursor;
    let after_pretrain = match c.phase {
        Phase::Adapt => c.iteration == 1 && !c.relabeled && c.epoch == 0 && c.step == 0,
        Phase::Done => c.iteration == 0,
        Phase::Pretrain => false,
    };
    if !after_pretrain {
        return Err(Error::Config("sweeps start from the pretraining checkpoint (iter_000.dckp)".into()));
    }
    Ok(t.state.params)
}

fn sweep_dir(from: &FromCheckpoint, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = out_dir(cfg)?;
    prepare(&dir, cfg, from.common.force, Reuse::Refuse)?;
    Ok(dir)
}

fn sweep_k(from: &FromCheckpoint, ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("--ks needs positive cluster counts".into()));
    }
    let loaded = load_checkpoint(from)?;
    let params = pretrained(&loaded)?;
    let cfg = derived_config(from, &loaded.run)?;
    let dir = sweep_dir(from, &cfg)?;
    let mut csv = String::from("k,iterations,mAP,cmc1,cmc5,cmc10,label_agreement\n");
    for &k in ks {
        let mut train = cfg.train.clone();
        train.clusters = Some(k);
        let mut t = Trainer::adapt_from(train, (&loaded.data).into(), params.clone())?;
        t.run(|_, _| Ok(()))?;
        let s = &t.state;
        let last = s.metrics.last().ok_or_else(|| Error::Config("sweep-k needs --iterations of at least 1".into()))?;
        let ari = s.label_agreement.last().copied().unwrap_or(f64::NAN);
        log::info!("K = {k}: mAP {:.4} rank-1 {:.4}", last.map, last.cmc1);
        csv.push_str(&format!(
            "{k},{},{:.17e},{:.17e},{:.17e},{:.17e},{ari:.17e}\n",
            cfg.train.iterations, last.map, last.cmc1, last.cmc5, last.cmc10
        ));
        fs::write(dir.join("sweep_k.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn sweep_iters(from: &FromCheckpoint) -> Result<()> {
    let loaded = load_checkpoint(from)?;
    let params = pretrained(&loaded)?;
    let cfg = derived_config(from, &loaded.run)?;
    let dir = sweep_dir(from, &cfg)?;
    let data = (&loaded.data).into();
    let mut rows: Vec<MetricsReport> = evaluate_params(&cfg.train, data, &params, 0)?.into_iter().collect();
    let mut t = Trainer::adapt_from(cfg.train.clone(), data, params)?;
    t.run(|t, event| {
        if let Event::IterationDone { .. } = event {
            let all: Vec<MetricsReport> = rows.iter().chain(&t.state.metrics).cloned().collect();
            fs::write(dir.join("sweep_iters.csv"), artifacts::metrics_csv(&all))?;
        }
        Ok(())
    })?;
    rows.extend(t.state.metrics.iter().cloned());
    let csv = artifacts::metrics_csv(&rows);
    fs::write(dir.join("sweep_iters.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
