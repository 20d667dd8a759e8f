//! Experiment orchestration: data, model, attack, probes, artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use lethe_core::attacks::{AttackContext, AttackRegistry, LetheanStream, AttackStream};
use lethe_core::data::{
    load_cifar10_binary, load_idx, pixel_stats, pixel_stats_per_channel, synth_blobs, ImageSet, Split,
};
use lethe_core::engine::run_online;
use lethe_core::model::{ArchConfig, Model};
use lethe_core::probe::{probe_points, CorrelationReport, HistoricalProbe, ProbeMode};
use lethe_core::training::{load_checkpoint, pretrain, save_checkpoint, TrainHistory};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::report::{emit_plot, write_curve_csv, write_history_csv, write_probe_csv, write_steps_csv};
use crate::seeds;

/// Training set, full test split, and the fixed evaluation subset.
pub struct Datasets {
    pub train: Arc<ImageSet>,
    pub test: Arc<ImageSet>,
    pub eval: ImageSet,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let (train, test) = match &d.source {
        DataSource::Synthetic {
            classes,
            per_class,
            test_per_class,
            shape,
            separation,
        } => {
            let train = synth_blobs(*classes, *per_class, shape, *separation, seeds::derive(cfg.seed, seeds::TRAIN_DATA))?;
            let mut test = synth_blobs(*classes, *test_per_class, shape, *separation, seeds::derive(cfg.seed, seeds::TEST_DATA))?;
            test.split = Split::Test;
            (train, test)
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_idx(train_images, train_labels, Split::Train)?,
            load_idx(test_images, test_labels, Split::Test)?,
        ),
        DataSource::Cifar10 { dir } => (
            load_cifar10_binary(dir, Split::Train)?,
            load_cifar10_binary(dir, Split::Test)?,
        ),
    };
    let train = match d.train_limit {
        Some(n) => train.head(n),
        None => train,
    };
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Config("dataset has an empty split".into()));
    }
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, seeds::EVAL_SUBSET)));
    order.truncate(d.eval_limit.min(test.len()));
    order.sort_unstable();
    let eval = ImageSet::new(
        order.iter().map(|&i| test.images[i].clone()).collect(),
        Split::Test,
        format!("{} (eval subset of {})", test.provenance, order.len()),
    )?;
    Ok(Datasets {
        train: Arc::new(train),
        test: Arc::new(test),
        eval,
    })
}

/// Architecture from the config, or the desk default for the data shape.
pub fn resolve_arch(cfg: &ExperimentConfig, data: &Datasets) -> Result<ArchConfig> {
    if let Some(a) = &cfg.arch {
        return Ok(a.clone());
    }
    let shape = data.train.image_shape().expect("nonempty").to_vec();
    let classes = data
        .train
        .images
        .iter()
        .chain(&data.test.images)
        .map(|i| i.label + 1)
        .max()
        .unwrap_or(1);
    let classes = match &cfg.data.source {
        DataSource::Synthetic { classes, .. } => *classes,
        _ => classes.max(10),
    };
    Ok(ArchConfig::desk_default(shape[0], shape[1], classes))
}

/// Builds and pretrains, or loads the configured checkpoint.
pub fn obtain_model(cfg: &ExperimentConfig, data: &Datasets) -> Result<(Model, Option<TrainHistory>)> {
    match (&cfg.pretrain, &cfg.checkpoint) {
        (_, Some(path)) => Ok((load_checkpoint(path)?, None)),
        (Some(p), None) => {
            let arch = resolve_arch(cfg, data)?;
            let model = Model::build(arch, seeds::derive(cfg.seed, seeds::INIT))?;
            let (model, hist) = pretrain(model, &data.train, &p.to_config(seeds::derive(cfg.seed, seeds::SHUFFLE)))?;
            Ok((model, Some(hist)))
        }
        (None, None) => Err(HarnessError::Config("no model source configured".into())),
    }
}

/// Main-aux correlation over seen samples, plus lethean-item correlations
/// against the same history.
pub fn probe_model(model: &Model, train: &Arc<ImageSet>, samples: usize, items: usize, seed: u64) -> Result<Vec<CorrelationReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(samples.max(1).min(train.len()));
    let seen: Vec<_> = idx.iter().map(|&i| train.images[i].clone()).collect();
    let probe = HistoricalProbe::new(model, &seen)?;
    let mut reports = vec![probe.report(None, ProbeMode::HistMainAux)?];
    let mut stream = LetheanStream::new(train.clone(), seeds::derive(seed, seeds::STREAM))?;
    let mut lethean = Vec::with_capacity(items);
    for _ in 0..items.max(1) {
        lethean.push(stream.next_item(model)?.expect("lethean stream is endless"));
    }
    let points: Vec<_> = lethean.iter().map(|it| (&it.pixels, it.source_label)).collect();
    reports.push(probe_points(&probe, &points, ProbeMode::HistAuxAux)?);
    reports.push(probe_points(&probe, &points, ProbeMode::HistMainMain)?);
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub curve_csv: PathBuf,
    pub steps_csv: PathBuf,
    pub probe_csv: PathBuf,
    pub plot_svg: PathBuf,
    pub manifest: PathBuf,
    pub history_csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    master_seed: u64,
    /// Hex strings; TOML integers are signed 64-bit.
    seeds: std::collections::BTreeMap<&'a str, String>,
    artifacts: std::collections::BTreeMap<&'a str, String>,
    config: &'a ExperimentConfig,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_manifest(cfg: &ExperimentConfig, arts: &RunArtifacts) -> Result<()> {
    let seeds_map = seeds::ROLES.iter().map(|r| (*r, format!("{:016x}", seeds::derive(cfg.seed, r)))).collect();
    let name = |p: &Path| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let mut artifacts = std::collections::BTreeMap::new();
    artifacts.insert("checkpoint", name(&arts.checkpoint));
    artifacts.insert("curve_csv", name(&arts.curve_csv));
    artifacts.insert("steps_csv", name(&arts.steps_csv));
    artifacts.insert("probe_csv", name(&arts.probe_csv));
    artifacts.insert("plot_svg", name(&arts.plot_svg));
    if let Some(h) = &arts.history_csv {
        artifacts.insert("history_csv", name(h));
    }
    let m = Manifest {
        config_sha256: seeds::sha256_hex(cfg.to_toml().as_bytes()),
        master_seed: cfg.seed,
        seeds: seeds_map,
        artifacts,
        config: cfg,
    };
    let text = toml::to_string(&m).map_err(|e| HarnessError::Config(e.to_string()))?;
    fs::write(&arts.manifest, text).map_err(|e| HarnessError::io(&arts.manifest, e))
}

/// Pretrain (or load), attack, probe, and write every artifact into
/// `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let policy = cfg.ttt.to_policy()?;
    let params = cfg.attack.to_params()?;
    let registry = AttackRegistry::standard();
    if !registry.names().contains(&cfg.attack.name.as_str()) {
        return Err(HarnessError::Config(format!(
            "unknown attack `{}`; valid names: {}",
            cfg.attack.name,
            registry.names().join(", ")
        )));
    }
    let data = load_data(cfg)?;
    let (model, history) = obtain_model(cfg, &data)?;
    let stop = cfg.stop.to_criterion(model.num_classes());
    let (baseline, _) = model.evaluate(&data.eval.images)?;
    if baseline <= stop.accuracy {
        return Err(HarnessError::UnusableBaseline {
            baseline,
            threshold: stop.accuracy,
        });
    }

    let dir = cfg.out.clone();
    ensure_dir(&dir)?;
    let arts = RunArtifacts {
        checkpoint: dir.join("model.ltc"),
        curve_csv: dir.join("curve.csv"),
        steps_csv: dir.join("steps.csv"),
        probe_csv: dir.join("probe.csv"),
        plot_svg: dir.join("curve.svg"),
        manifest: dir.join("manifest.toml"),
        history_csv: history.as_ref().map(|_| dir.join("history.csv")),
        dir,
    };
    save_checkpoint(&model, &arts.checkpoint)?;
    if let (Some(h), Some(path)) = (&history, &arts.history_csv) {
        write_history_csv(path, h)?;
    }

    let reports = probe_model(
        &model,
        &data.train,
        cfg.probe.samples,
        cfg.probe.items,
        seeds::derive(cfg.seed, seeds::PROBE),
    )?;
    write_probe_csv(&arts.probe_csv, &reports)?;

    let stats = if cfg.data.per_channel_stats {
        pixel_stats_per_channel(&data.train)?
    } else {
        vec![pixel_stats(&data.train)?]
    };
    let ctx = AttackContext {
        train: data.train.clone(),
        test: data.test.clone(),
        stats,
        input_shape: model.input_shape().to_vec(),
        pretrained: Some(Arc::new(model.clone())),
        params,
    };
    let mut stream = registry.build(&cfg.attack.name, &ctx, seeds::derive(cfg.seed, seeds::STREAM))?;
    let (curve, _, records) = run_online(model, stream.as_mut(), &data.eval, cfg.eval.interval, &stop, &policy, cfg.seed)?;
    write_curve_csv(&arts.curve_csv, &curve)?;
    write_steps_csv(&arts.steps_csv, &records)?;
    emit_plot(&[arts.curve_csv.as_path()], &arts.plot_svg)?;
    write_manifest(cfg, &arts)?;
    Ok(arts)
}

/// Pretrain only: writes the checkpoint and per-epoch history.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
    if cfg.pretrain.is_none() {
        return Err(HarnessError::Config("pretrain needs a [pretrain] section".into()));
    }
    let data = load_data(cfg)?;
    let (model, history) = obtain_model(cfg, &data)?;
    ensure_dir(&cfg.out)?;
    let ck = cfg.out.join("model.ltc");
    let hist = cfg.out.join("history.csv");
    save_checkpoint(&model, &ck)?;
    write_history_csv(&hist, &history.unwrap_or_default())?;
    Ok((ck, hist))
}

/// Correlation probes only; writes `probe.csv`.
pub fn run_probe(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<CorrelationReport>)> {
    let data = load_data(cfg)?;
    let (model, _) = obtain_model(cfg, &data)?;
    let reports = probe_model(
        &model,
        &data.train,
        cfg.probe.samples,
        cfg.probe.items,
        seeds::derive(cfg.seed, seeds::PROBE),
    )?;
    ensure_dir(&cfg.out)?;
    let path = cfg.out.join("probe.csv");
    write_probe_csv(&path, &reports)?;
    Ok((path, reports))
}
