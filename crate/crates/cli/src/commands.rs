use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memscore::datasets::{
    generate_synthetic, load_manifest, save_manifest, split, write_synthetic, DatasetManifest,
    ManifestFormat, SplitSpec, SyntheticDataset,
};
use memscore::eval::{evaluate, kde, write_kde_csv, Bandwidth};
use memscore::featurevis::{
    activation_maximize, max_activating_images, render_grid, FeatureSpec, VisConfig, VisRecord,
};
use memscore::image::ImageTensor;
use memscore::models::{Branch, ModelConfig, Network};
use memscore::preprocess::{PipelineConfig, SimplePipelineConfig};
use memscore::scoring::{DirSource, ImageSource, ScoringModel};
use memscore::training::{
    pretrain_backbone, pretrain_segmenter, PretextConfig, PretextData, TrainConfig, TrainData,
};
use serde::{Deserialize, Serialize};

use crate::{EvalArgs, ModelArgs, Normalization, ServeArgs, SweepArgs, SynthArgs, TrainArgs, VisArgs};

/// Path with `suffix` appended to the file stem, e.g. `report.json` →
/// `report_kde.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn manifest_at(path: &Path) -> Result<DatasetManifest> {
    let fmt = ManifestFormat::from_path(path)
        .with_context(|| format!("{}: manifest must end in .csv or .json", path.display()))?;
    Ok(load_manifest(path, fmt)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.split.len() != 3 {
        bail!("--split takes three fractions, got {}", a.split.len());
    }
    let ds = generate_synthetic(a.n, a.size, a.seed, a.target)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let all = write_synthetic(&ds, &a.out)?;
    let spec = SplitSpec::new(a.split[0], a.split[1], a.split[2], a.seed);
    let (train, val, test) = split(&ds.manifest, &spec)?;
    for (name, part) in [("train.csv", &train), ("val.csv", &val), ("test.csv", &test)] {
        save_manifest(part, &a.out.join(name), ManifestFormat::Csv)?;
    }
    println!(
        "wrote {} images to {} ({} train / {} val / {} test)",
        ds.images.len(),
        all.display(),
        train.len(),
        val.len(),
        test.len()
    );
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

struct Setup {
    model: ModelConfig,
    train: TrainConfig,
    pipeline: PipelineConfig,
    train_data: TrainData,
    val_data: TrainData,
}

fn setup(a: &ModelArgs) -> Result<(Setup, DatasetManifest)> {
    let file: ConfigFile = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{}", p.display()))?
        }
        None => ConfigFile::default(),
    };
    let mut model = file.model.unwrap_or_else(|| ModelConfig::preset(a.preset, a.variant));
    if let (Some(f), Some(b)) = (a.frozen, model.backbone.as_mut()) {
        b.frozen = f;
    } else if a.frozen == Some(true) {
        bail!("--frozen needs a variant with a backbone");
    }
    model.validate()?;
    let mut train = file.train.unwrap_or_default();
    if let Some(v) = a.epochs {
        train.max_epochs = v;
    }
    if let Some(v) = a.patience {
        train.early_stop_patience = v;
    }
    if let Some(v) = a.seed {
        train.seed = v;
    }
    if a.eval_every.is_some() {
        train.eval_every = a.eval_every;
    }
    let simple = match a.normalization {
        Normalization::Imagenet => SimplePipelineConfig::imagenet(model.input_size),
        Normalization::Identity => SimplePipelineConfig::identity(model.input_size),
    };
    let pipeline = PipelineConfig::Simple(simple);

    let train_m = manifest_at(&a.manifest)?;
    let val_m = manifest_at(&a.val)?;
    let train_src = DirSource::for_manifest(&a.manifest);
    let val_src = DirSource::for_manifest(&a.val);
    let train_data = TrainData::from_manifest(&train_m, &train_src, &pipeline)?;
    let val_data = TrainData::from_manifest(&val_m, &val_src, &pipeline)?;
    Ok((
        Setup {
            model,
            train,
            pipeline,
            train_data,
            val_data,
        },
        train_m,
    ))
}

/// Pretext pretraining of whatever branches the network has.
fn pretrain(net: &mut Network<f32>, a: &ModelArgs, train_m: &DatasetManifest, pipeline: &PipelineConfig, seed: u64) -> Result<()> {
    if a.pretrain_epochs == 0 || net.branch(Branch::Backbone).is_none() {
        return Ok(());
    }
    let m = match &a.pretrain_manifest {
        Some(p) => manifest_at(p)?,
        None => train_m.clone(),
    };
    let ds = SyntheticDataset::from_manifest(&m).context("pretext pretraining needs a synthetic manifest")?;
    let PipelineConfig::Simple(simple) = pipeline else {
        bail!("pretext pretraining needs the simple pipeline");
    };
    let data = PretextData::from_synthetic(&ds, simple)?;
    let cfg = PretextConfig {
        epochs: a.pretrain_epochs,
        seed,
        ..PretextConfig::default()
    };
    let losses = pretrain_backbone(net, &data, &cfg)?;
    log::info!("backbone pretext losses {losses:?}");
    if net.branch(Branch::Segmenter).is_some() {
        let losses = pretrain_segmenter(net, &data, &cfg)?;
        log::info!("segmenter pretext losses {losses:?}");
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (mut s, train_m) = setup(&a.model)?;
    if let Some(v) = a.eta {
        s.train.eta = v;
    }
    if let Some(v) = a.gamma {
        s.train.gamma = v;
    }
    if let Some(v) = a.batch_size {
        s.train.batch_size = v;
    }
    let mut net = Network::build(&s.model, s.train.seed)?;
    pretrain(&mut net, &a.model, &train_m, &s.pipeline, s.train.seed)?;
    let out = memscore::training::train_data(net, &s.train_data, &s.val_data, &s.pipeline, &s.train)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    out.checkpoint.save(&a.out)?;
    let log_path = a.out.with_extension("jsonl");
    out.log.write_jsonl(create(&log_path)?)?;
    let best = out.log.best.and_then(|b| b.val_spearman);
    println!(
        "saved {} ({}) to {}; best val spearman {}; log {}",
        out.checkpoint.model_tag,
        s.model.variant.name(),
        a.out.display(),
        best.map_or("undefined".into(), |r| format!("{r:.4}")),
        log_path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    run: usize,
    eta: f64,
    gamma: f64,
    batch_size: usize,
    seed: u64,
    best_val_spearman: Option<f64>,
    best_step: Option<usize>,
    checkpoint: Option<String>,
    error: Option<String>,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let (s, _) = setup(&a.model)?;
    if a.model.pretrain_epochs > 0 {
        bail!("sweep does not run pretext pretraining; use train");
    }
    let mut grid = Vec::new();
    for &eta in &a.etas {
        for &gamma in &a.gammas {
            for &batch_size in &a.batch_sizes {
                grid.push(TrainConfig {
                    eta,
                    gamma,
                    batch_size,
                    ..s.train.clone()
                });
            }
        }
    }
    let runs = memscore::training::sweep(&s.model, &grid, &s.train_data, &s.val_data, &s.pipeline)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    memscore::training::write_curves_csv(create(&a.out.join("curves.csv"))?, &runs)?;
    let mut summary = Vec::new();
    for run in &runs {
        let mut row = SweepSummary {
            run: run.index,
            eta: run.config.eta,
            gamma: run.config.gamma,
            batch_size: run.config.batch_size,
            seed: run.config.seed,
            best_val_spearman: None,
            best_step: None,
            checkpoint: None,
            error: None,
        };
        match &run.result {
            Ok((log, ckpt)) => {
                let path = a.out.join(format!("run_{}.ckpt", run.index));
                ckpt.save(&path)?;
                log.write_jsonl(create(&path.with_extension("jsonl"))?)?;
                row.best_val_spearman = log.best.and_then(|b| b.val_spearman);
                row.best_step = log.best.map(|b| b.step);
                row.checkpoint = Some(path.display().to_string());
            }
            Err(e) => row.error = Some(e.clone()),
        }
        summary.push(row);
    }
    let mut w = create(&a.out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.flush()?;
    let failed = summary.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} runs ({} failed); curves in {}",
        summary.len(),
        failed,
        a.out.join("curves.csv").display()
    );
    Ok(())
}

fn write_scores(path: &Path, refs: &[String], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["image_ref", "score"])?;
    for (r, v) in refs.iter().zip(values) {
        w.write_record([r.as_str(), &v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = ScoringModel::load(&a.checkpoint)?;
    let manifest = manifest_at(&a.manifest)?;
    let src = DirSource::for_manifest(&a.manifest);
    let report = evaluate(&model, &src, &manifest)?;

    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.flush()?;
    let kde_path = a.kde.unwrap_or_else(|| sibling(&a.out, "_kde.csv"));
    let kp = kde(&report.predictions, Bandwidth::Auto)?;
    let kt = kde(&report.truths, Bandwidth::Auto)?;
    write_kde_csv(create(&kde_path)?, &kp, &kt)?;
    let preds = a.preds.unwrap_or_else(|| sibling(&a.out, "_preds.csv"));
    let truths = a.truths.unwrap_or_else(|| sibling(&a.out, "_truths.csv"));
    write_scores(&preds, &report.image_refs, &report.predictions)?;
    write_scores(&truths, &report.image_refs, &report.truths)?;
    println!(
        "n={} mse={:.5} rmse={:.4} spearman={} pred_min={:.4} frac_truth_below_pred_min={:.4}",
        report.n,
        report.mse,
        report.rmse,
        report.spearman.map_or("undefined".into(), |r| format!("{r:.4}")),
        report.pred_min,
        report.frac_truth_below_pred_min
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct VisSidecar {
    checkpoint: String,
    model_tag: String,
    config: VisConfig,
    filters: Vec<VisEntry>,
}

#[derive(Debug, Serialize)]
struct VisEntry {
    #[serde(flatten)]
    record: VisRecord,
    top_images: Vec<(String, f64)>,
}

pub fn vis(a: VisArgs) -> Result<()> {
    let model = ScoringModel::load(&a.checkpoint)?;
    let (mean, std) = match model.pipeline() {
        PipelineConfig::Simple(c) => (c.per_channel_mean, c.per_channel_std),
        PipelineConfig::Legacy(_) => ([0.0; 3], [1.0; 3]),
    };
    let cfg = VisConfig {
        steps: a.steps,
        step_size: a.step_size,
        jitter: a.jitter,
        seed: a.seed,
        input_mean: mean,
        input_std: std,
        ..VisConfig::default()
    };
    let manifest = a.manifest.as_deref().map(manifest_at).transpose()?;
    let src = a.manifest.as_deref().map(DirSource::for_manifest);

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut entries = Vec::new();
    let mut top_tiles: Vec<ImageTensor> = Vec::new();
    let mut top_labels = Vec::new();
    for &f in &a.filters {
        let spec = FeatureSpec::new(a.layer.clone(), f);
        let res = activation_maximize(model.network(), &spec, &cfg)?;
        let record = VisRecord {
            layer_id: a.layer.clone(),
            filter_index: f,
            initial_activation: res.trace[0],
            final_activation: *res.trace.last().unwrap(),
        };
        let top_images = match (&manifest, &src) {
            (Some(m), Some(s)) => {
                let top = max_activating_images(model.network(), &spec, m, s, model.pipeline(), a.top_k)?;
                for (r, v) in &top {
                    top_tiles.push(s.load(r)?);
                    top_labels.push(format!("f{f} {v:.2}"));
                }
                top
            }
            _ => Vec::new(),
        };
        labels.push(format!("f{f} {:.2}", record.final_activation));
        images.push(res.image);
        entries.push(VisEntry { record, top_images });
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    render_grid(&images, &labels, &a.out)?;
    if !top_tiles.is_empty() {
        render_grid(&top_tiles, &top_labels, &sibling(&a.out, "_top.png"))?;
    }
    let sidecar = VisSidecar {
        checkpoint: a.checkpoint.display().to_string(),
        model_tag: model.model_tag().to_string(),
        config: cfg,
        filters: entries,
    };
    let mut w = create(&a.out.with_extension("json"))?;
    serde_json::to_writer_pretty(&mut w, &sidecar)?;
    w.flush()?;
    println!("wrote {} filters of {} to {}", a.filters.len(), a.layer, a.out.display());
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let model = ScoringModel::load(&a.checkpoint)?;
    let cfg = memscore_service::ServiceConfig {
        max_image_bytes: a.max_bytes,
        cors_origins: a.cors_origins,
        ..Default::default()
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(memscore_service::serve(model, cfg, a.bind))
        .with_context(|| format!("cannot serve on {}", a.bind))?;
    Ok(())
}
