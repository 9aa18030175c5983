use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdfa::backbone::BackboneConfig;
use sdfa::checkpoint;
use sdfa::data::{load_directory, write_directory, Dataset, SyntheticDatasetSpec, SyntheticDomainSpec};
use sdfa::plot::{channel_curves_svg, difference_maps, write_mosaic};
use sdfa::trainer::{perturbed_view, run_fold, run_lodo, sweep_lambda, SdfaModel, StepRecord, TrainConfig};
use sdfa::SdfaError;
use serde::{Deserialize, Serialize};

use crate::{GenArgs, Overrides, PlotArgs, RunArgs, SweepArgs, TrainArgs};

const DEFAULT_OUT: &str = "sdfa_out";

/// Bad arguments or configuration; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if let Some(SdfaError::Config(_) | SdfaError::Json(_)) = cause.downcast_ref::<SdfaError>() {
            return 2;
        }
    }
    3
}

/// Everything a run needs; all keys optional in the JSON form.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid {what} {}: {e}", path.display())))
}

fn resolve(run: &RunArgs) -> Result<ExperimentConfig> {
    let o: &Overrides = &run.overrides;
    let mut cfg: ExperimentConfig = match &o.config {
        Some(path) => read_json(path, "config")?,
        None => ExperimentConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.lambda {
        t.lambda = v;
    }
    if let Some(v) = o.iterations {
        t.iterations = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = o.eval_every {
        t.eval_every = v;
    }
    t.enable_sds &= !o.no_sds;
    t.enable_sis &= !o.no_sis;
    t.enable_scl &= !o.no_scl;
    t.image_aug.enabled |= o.image_aug;
    if let Some(v) = o.base_width {
        cfg.backbone.base_width = v;
    }
    if let Some(v) = o.depth {
        cfg.backbone.depth = v;
    }
    // one seed drives initialization, sampling and noise
    cfg.backbone.seed = cfg.train.seed;
    if run.data.is_some() {
        cfg.data = run.data.clone();
    }
    if run.out.is_some() {
        cfg.out = run.out.clone();
    }
    if cfg.data.is_none() {
        return Err(usage("no dataset: pass --data or set `data` in the config"));
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        return Ok(load_directory(path)?);
    }
    let spec: SyntheticDatasetSpec = read_json(path, "synthetic dataset spec")?;
    Ok(spec.generate()?)
}

/// Loads the dataset and adapts channel and class counts to it.
fn prepare(run: &RunArgs) -> Result<(ExperimentConfig, Dataset, PathBuf)> {
    let mut cfg = resolve(run)?;
    let data = load_data(cfg.data.as_deref().expect("checked in resolve"))?;
    let first = data.samples.first().context("dataset has no samples")?;
    cfg.backbone.in_channels = first.channels;
    let max_class = data
        .samples
        .iter()
        .flat_map(|s| s.mask.iter())
        .copied()
        .max()
        .unwrap_or(0) as usize;
    if max_class >= cfg.backbone.num_classes {
        return Err(usage(format!(
            "masks contain class {max_class} but backbone.num_classes is {}",
            cfg.backbone.num_classes
        )));
    }
    cfg.backbone.validate()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("config.json"), &serde_json::to_string_pretty(&cfg)?)?;
    Ok((cfg, data, out))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

struct JsonLog(BufWriter<File>);

impl JsonLog {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self(BufWriter::new(f)))
    }

    fn push(&mut self, r: &StepRecord) -> sdfa::Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.0, "{line}").map_err(|source| SdfaError::Io {
            path: PathBuf::from("step log"),
            source,
        })
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush().context("flushing step log")
    }
}

fn resolve_holdout(data: &Dataset, key: &str) -> Result<usize> {
    if let Some(i) = data.domain_names.iter().position(|n| n == key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < data.domain_count() => Ok(i),
        _ => Err(usage(format!(
            "unknown holdout domain '{key}'; available: {}",
            data.domain_names.join(", ")
        ))),
    }
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut domains: Vec<SyntheticDomainSpec> = read_json(&a.spec, "domain spec list")?;
    if a.n == 0 || a.size == 0 {
        return Err(usage("--n and --size must be >= 1"));
    }
    if let Some(offset) = a.seed {
        for d in &mut domains {
            d.seed = d.seed.wrapping_add(offset);
            d.shape_seed = d.shape_seed.wrapping_add(offset);
        }
    }
    for d in &domains {
        d.validate()?;
    }
    let spec = SyntheticDatasetSpec {
        size: a.size,
        samples_per_domain: a.n,
        domains,
    };
    let data = spec.generate()?;
    write_directory(&a.out, &data, Some(&spec.domains))?;
    println!(
        "wrote {} domains x {} samples ({}x{}) to {}",
        data.domain_count(),
        a.n,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (cfg, data, out) = prepare(&a.run)?;
    let held_out = resolve_holdout(&data, &a.holdout)?;
    let mut log = JsonLog::create(&out.join("log.jsonl"))?;
    let outcome = run_fold(&data, held_out, &cfg.backbone, &cfg.train, &mut |r| log.push(r))?;
    log.finish()?;
    // the archive must not depend on where it was written
    let config_json = serde_json::to_string(&ExperimentConfig {
        out: None,
        ..cfg.clone()
    })?;
    checkpoint::save(&out.join("checkpoint.safetensors"), &outcome.model.store, &config_json)?;
    write_file(&out.join("eval.json"), &serde_json::to_string_pretty(&outcome.summary)?)?;
    let s = &outcome.summary;
    println!(
        "held out {}: test DSC {:.4}, ASD {:.3} px (best val DSC {:.4} at step {})",
        s.held_out_name, s.test.mean_dsc, s.test.mean_asd, s.best_val_dsc, s.best_step
    );
    Ok(())
}

pub fn lodo(a: RunArgs) -> Result<()> {
    let (cfg, data, out) = prepare(&a)?;
    let logs = out.join("logs");
    fs::create_dir_all(&logs)?;
    let mut current: Option<(usize, JsonLog)> = None;
    let table = run_lodo(&data, &cfg.backbone, &cfg.train, &mut |fold, r| {
        if current.as_ref().map(|(f, _)| *f) != Some(fold) {
            let path = logs.join(format!("fold_{}.jsonl", data.domain_names[fold]));
            let log = JsonLog::create(&path).map_err(|e| SdfaError::Data(format!("{e:#}")))?;
            if let Some((_, old)) = current.replace((fold, log)) {
                old.finish().map_err(|e| SdfaError::Data(format!("{e:#}")))?;
            }
        }
        current.as_mut().expect("log opened").1.push(r)
    })?;
    if let Some((_, log)) = current {
        log.finish()?;
    }
    write_file(&out.join("lodo.csv"), &table.to_csv()?)?;
    write_file(&out.join("lodo.json"), &serde_json::to_string_pretty(&table)?)?;
    for r in &table.rows {
        println!(
            "{:<24} DSC {:.4}  ASD {:.3}",
            r.held_out_name, r.test.mean_dsc, r.test.mean_asd
        );
    }
    println!("{:<24} DSC {:.4}", "mean", table.mean_dsc());
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    if a.values.is_empty() {
        return Err(usage("--values needs at least one lambda"));
    }
    if let Some(bad) = a.values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(usage(format!("lambda values must be >= 0, got {bad}")));
    }
    let (cfg, data, out) = prepare(&a.run)?;
    let table = sweep_lambda(&data, &cfg.backbone, &cfg.train, &a.values, &mut |_, _, _| Ok(()))?;
    write_file(&out.join("sweep.csv"), &table.to_csv()?)?;
    write_file(&out.join("sweep.json"), &serde_json::to_string_pretty(&table)?)?;
    print!("{}", table.to_csv()?);
    Ok(())
}

fn read_channel_curve(path: &Path) -> Result<Vec<(u64, f64)>> {
    let f = File::open(path).with_context(|| format!("opening log {}", path.display()))?;
    let mut points = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: StepRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: not a step record", path.display(), i + 1))?;
        if let Some(c) = r.channels_selected {
            points.push((r.step, c));
        }
    }
    if points.is_empty() {
        bail!("{} has no channel selection records", path.display());
    }
    Ok(points)
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let on = read_channel_curve(&a.scl_on)?;
    let off = read_channel_curve(&a.scl_off)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let model = match &a.checkpoint {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: ExperimentConfig = serde_json::from_str(&checkpoint::read_config(&bytes)?)?;
            let mut model = SdfaModel::new(cfg.backbone.clone())?;
            checkpoint::load_into(&bytes, &mut model.store)?;
            Some((cfg, model))
        }
        None => None,
    };
    let channels = match &model {
        Some((cfg, _)) => cfg.backbone.bottleneck_channels(),
        None => on.iter().chain(&off).map(|p| p.1).fold(1.0, f64::max).ceil() as usize,
    };
    let svg = a.out.join("channels_selected.svg");
    channel_curves_svg(
        &svg,
        &[
            ("with selective consistency".to_string(), on),
            ("without selective consistency".to_string(), off),
        ],
        channels,
    )?;
    println!("wrote {}", svg.display());

    if let Some((cfg, model)) = model {
        let data = load_data(a.data.as_deref().expect("clap enforces --data"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(cfg.train.seed));
        let picks = spread_samples(&data, a.samples);
        for (k, &i) in picks.iter().enumerate() {
            let sample = &data.samples[i];
            let view = perturbed_view(&model, sample, &cfg.train, None, &mut rng)?;
            let (h, w) = (view.z.shape()[2], view.z.shape()[3]);
            let planes = difference_maps(&view.z, &view.z_aug)?;
            let feature_png = a.out.join(format!("diff_{k}_feature.png"));
            write_mosaic(&feature_png, &planes, h, w, (16 / h.max(1)).max(1))?;
            let output_png = a.out.join(format!("diff_{k}_output.png"));
            let map = probability_shift(&view.logits, &view.logits_aug);
            write_mosaic(&output_png, &[map], sample.height, sample.width, 4)?;
            println!(
                "wrote {} and {} ({})",
                feature_png.display(),
                output_png.display(),
                sample.sample_id
            );
        }
    }
    Ok(())
}

/// Round-robin over domains so every domain is represented.
fn spread_samples(data: &Dataset, count: usize) -> Vec<usize> {
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); data.domain_count()];
    for (i, s) in data.samples.iter().enumerate() {
        per[s.domain_id].push(i);
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < count && per.iter().any(|p| round < p.len()) {
        for p in &per {
            if out.len() < count && round < p.len() {
                out.push(p[round]);
            }
        }
        round += 1;
    }
    out
}

/// Total-variation distance between the two softmax outputs per pixel,
/// scaled to a maximum of 1.
fn probability_shift(a: &sdfa_autograd::Tensor<f32>, b: &sdfa_autograd::Tensor<f32>) -> Vec<f32> {
    let s = a.shape();
    let (k, hw) = (s[1], s[2] * s[3]);
    let softmax = |t: &[f32], px: usize| -> Vec<f32> {
        let m = (0..k).map(|c| t[c * hw + px]).fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = (0..k).map(|c| (t[c * hw + px] - m).exp()).collect();
        let z: f32 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    };
    let tv: Vec<f32> = (0..hw)
        .map(|px| {
            let (p, q) = (softmax(a.data(), px), softmax(b.data(), px));
            0.5 * p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum::<f32>()
        })
        .collect();
    let max = tv.iter().copied().fold(0.0, f32::max);
    if max > 0.0 {
        tv.into_iter().map(|v| v / max).collect()
    } else {
        tv
    }
}
