//! Training loop with bottleneck feature augmentation, evaluation, and the
//! leave-one-domain-out experiment drivers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sdfa_autograd::{AdamW, AdamWConfig, Bound, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_on_graph, DirectionSelector, IntensityParams};
use crate::backbone::{BackboneConfig, BottleneckAugmentor, UNet};
use crate::covariance::{standard_noise, BankConfig, CovarianceBank, NoiseSource};
use crate::data::{lodo_split, Dataset, SegmentationSample};
use crate::error::{Result, SdfaError};
use crate::losses::{segmentation_loss_per_sample, selective_consistency_on_graph};
use crate::metrics::{evaluate_masks, EvalResult};

/// RNG streams derived from the run seed.
mod stream {
    pub const SELECTOR_INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const PAIRING: u64 = 4;
    pub const IMAGE_AUG: u64 = 5;
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Optional image-space augmentations (brightness, contrast, Gaussian noise,
/// elastic deformation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageAugConfig {
    pub enabled: bool,
    /// Additive shift drawn from `U(-brightness, brightness)`.
    pub brightness: f32,
    /// Gain drawn from `U(1 - contrast, 1 + contrast)` around the image mean.
    pub contrast: f32,
    pub noise_std: f32,
    /// Maximum displacement in pixels; 0 disables the deformation.
    pub elastic_alpha: f32,
    /// Control points per side of the displacement grid.
    pub elastic_grid: usize,
}

impl Default for ImageAugConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            brightness: 0.1,
            contrast: 0.2,
            noise_std: 0.03,
            elastic_alpha: 2.0,
            elastic_grid: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub lambda: f64,
    pub enable_sds: bool,
    pub enable_sis: bool,
    pub enable_scl: bool,
    pub seed: u64,
    pub cov_refresh: u64,
    pub buffer: usize,
    pub min_warm: usize,
    pub eval_every: u64,
    pub val_fraction: f64,
    /// With `lambda = 0` and no consistency term the augmented branch cannot
    /// influence the update, so it is not computed at all.
    pub skip_inert_branch: bool,
    pub image_aug: ImageAugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            iterations: 2000,
            batch_size: 4,
            lambda: 1.0,
            enable_sds: true,
            enable_sis: true,
            enable_scl: true,
            seed: 0,
            cov_refresh: 50,
            buffer: 256,
            min_warm: 8,
            eval_every: 200,
            val_fraction: 0.2,
            skip_inert_branch: true,
            image_aug: ImageAugConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The plain baseline: no augmented loss and every module off.
    pub fn erm(&self) -> Self {
        Self {
            lambda: 0.0,
            enable_sds: false,
            enable_sis: false,
            enable_scl: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SdfaError::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.cov_refresh == 0 || self.eval_every == 0 {
            return bad("cov_refresh and eval_every must be >= 1".into());
        }
        if self.buffer < 2 || self.min_warm == 0 || self.min_warm > self.buffer {
            return bad(format!(
                "need 1 <= min_warm <= buffer and buffer >= 2, got {} and {}",
                self.min_warm, self.buffer
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    /// Whether the augmented branch contributes to the loss.
    pub fn augmented_branch_active(&self) -> bool {
        !self.skip_inert_branch || self.lambda > 0.0 || self.enable_scl
    }

    fn bank(&self) -> BankConfig {
        BankConfig {
            capacity: self.buffer,
            refresh_every: self.cov_refresh,
            min_warm: self.min_warm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_ori: f64,
    pub loss_aug: Option<f64>,
    pub lambda: f64,
    pub scl: f64,
    pub total: f64,
    /// Selected channels per sample, averaged over the batch.
    pub channels_selected: Option<f64>,
    /// Whether the intensity noise came from pair covariances.
    pub covariance_noise: bool,
    pub grad_norm: f64,
}

/// Backbone plus the augmentation modules, all in one parameter store.
#[derive(Clone, Debug)]
pub struct SdfaModel {
    pub store: ParamStore<f32>,
    pub unet: UNet,
    pub selector: DirectionSelector,
    pub intensity: IntensityParams,
}

impl SdfaModel {
    pub fn new(backbone: BackboneConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seeded(backbone.seed, stream::SELECTOR_INIT);
        let unet = UNet::new(&mut store, backbone)?;
        let c = unet.bottleneck_channels();
        let selector = DirectionSelector::new(&mut store, "augment.selector", c, &mut rng)?;
        let intensity = IntensityParams::new(&mut store, "augment.intensity", c)?;
        Ok(Self {
            store,
            unet,
            selector,
            intensity,
        })
    }

    pub fn backbone(&self) -> &BackboneConfig {
        self.unet.config()
    }

    /// Argmax class map for each sample (inference path, no augmentation).
    pub fn predict_masks(&self, samples: &[SegmentationSample], batch_size: usize) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size.max(1)) {
            let (x, _) = batch_tensors(chunk)?;
            let logits = self.unet.predict(&self.store, x)?;
            out.extend(argmax_masks(&logits)?);
        }
        Ok(out)
    }
}

/// Images `(N, C, H, W)` and flattened class targets of equally sized samples.
pub fn batch_tensors(samples: &[SegmentationSample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| SdfaError::Data("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut img = Vec::with_capacity(samples.len() * c * h * w);
    let mut tgt = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.channels, s.height, s.width) != (c, h, w) {
            return Err(SdfaError::Data(format!(
                "sample {} is {}x{}x{}, batch expects {c}x{h}x{w}",
                s.sample_id, s.channels, s.height, s.width
            )));
        }
        img.extend_from_slice(&s.image);
        tgt.extend_from_slice(&s.mask);
    }
    Ok((Tensor::from_vec(&[samples.len(), c, h, w], img)?, tgt))
}

/// Per-sample argmax over the class axis of `(N, K, H, W)` logits.
pub fn argmax_masks(logits: &Tensor<f32>) -> Result<Vec<Vec<u8>>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            (0..hw)
                .map(|px| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(b * k + c) * hw + px] > d[(b * k + best) * hw + px] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: EvalResult,
    pub per_domain: BTreeMap<usize, EvalResult>,
}

/// Metrics over argmax predictions, overall and per domain. Never touches
/// parameters or augmentation state.
pub fn evaluate(model: &SdfaModel, samples: &[SegmentationSample], batch_size: usize) -> Result<EvalReport> {
    let first = samples
        .first()
        .ok_or_else(|| SdfaError::Data("nothing to evaluate".into()))?;
    let (h, w) = (first.height, first.width);
    let k = model.backbone().num_classes;
    let preds = model.predict_masks(samples, batch_size)?;
    let gts: Vec<Vec<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
    let overall = evaluate_masks(&preds, &gts, k, h, w)?;
    let mut per_domain = BTreeMap::new();
    let mut domains: Vec<usize> = samples.iter().map(|s| s.domain_id).collect();
    domains.sort_unstable();
    domains.dedup();
    for d in domains {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].domain_id == d).collect();
        let p: Vec<Vec<u8>> = idx.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<Vec<u8>> = idx.iter().map(|&i| gts[i].clone()).collect();
        per_domain.insert(d, evaluate_masks(&p, &g, k, h, w)?);
    }
    Ok(EvalReport { overall, per_domain })
}

/// Draws `d` and `s` for a bottleneck batch during training.
struct StepAugmentor<'a> {
    model: &'a SdfaModel,
    bank: &'a CovarianceBank,
    cfg: &'a TrainConfig,
    domains: &'a [usize],
    rng: &'a mut ChaCha8Rng,
    covariance_noise: bool,
}

impl BottleneckAugmentor<f32> for StepAugmentor<'_> {
    fn perturbation(&mut self, g: &mut Graph<f32>, p: &Bound, z: Var) -> Result<(Var, Var)> {
        let (n, c) = (g.shape(z)[0], g.shape(z)[1]);
        let mut xi = Vec::with_capacity(n * c);
        self.covariance_noise = self.cfg.enable_sis;
        for &domain in self.domains {
            let noise = if self.cfg.enable_sis {
                let (noise, source) = self.bank.sample_noise(domain, self.rng)?;
                self.covariance_noise &= source != NoiseSource::StandardNormal;
                noise
            } else {
                standard_noise(c, self.rng)
            };
            xi.extend(noise.into_iter().map(|v| v as f32));
        }
        let xi = g.constant(Tensor::from_vec(&[n, c], xi)?);
        let s = if self.cfg.enable_sis {
            self.model.intensity.compose(g, p, xi)?
        } else {
            xi
        };
        let d = if self.cfg.enable_sds {
            // the selector reads the feature but does not train the encoder
            let z_view = g.detach(z);
            self.model.selector.forward(g, p, z_view)?.hard
        } else {
            let coin: Vec<f32> = (0..n * c).map(|_| self.rng.gen_bool(0.5) as u8 as f32).collect();
            g.constant(Tensor::from_vec(&[n, c], coin)?)
        };
        Ok((d, s))
    }
}

pub struct Trainer {
    model: SdfaModel,
    cfg: TrainConfig,
    optimizer: AdamW<f32>,
    bank: CovarianceBank,
    train: Vec<SegmentationSample>,
    by_domain: Vec<(usize, Vec<usize>)>,
    batch_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    pairing_rng: ChaCha8Rng,
    image_rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(model: SdfaModel, train: Vec<SegmentationSample>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(SdfaError::Data("no training samples".into()));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in train.iter().enumerate() {
            groups.entry(s.domain_id).or_default().push(i);
        }
        let domains: Vec<usize> = groups.keys().copied().collect();
        let bank = CovarianceBank::new(model.unet.bottleneck_channels(), &domains, cfg.bank());
        let optimizer = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        });
        Ok(Self {
            batch_rng: seeded(cfg.seed, stream::BATCH),
            noise_rng: seeded(cfg.seed, stream::NOISE),
            pairing_rng: seeded(cfg.seed, stream::PAIRING),
            image_rng: seeded(cfg.seed, stream::IMAGE_AUG),
            by_domain: groups.into_iter().collect(),
            model,
            cfg,
            optimizer,
            bank,
            train,
            step: 0,
        })
    }

    pub fn model(&self) -> &SdfaModel {
        &self.model
    }

    pub fn into_model(self) -> SdfaModel {
        self.model
    }

    pub fn bank(&self) -> &CovarianceBank {
        &self.bank
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Domain drawn uniformly, then a sample uniformly within it.
    fn sample_batch(&mut self) -> Vec<SegmentationSample> {
        (0..self.cfg.batch_size)
            .map(|_| {
                let (_, idx) = &self.by_domain[self.batch_rng.gen_range(0..self.by_domain.len())];
                let mut s = self.train[idx[self.batch_rng.gen_range(0..idx.len())]].clone();
                if self.cfg.image_aug.enabled {
                    augment_image(&mut s, &self.cfg.image_aug, &mut self.image_rng);
                }
                s
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.sample_batch();
        self.step_on(&batch)
    }

    /// One update on an explicit batch.
    pub fn step_on(&mut self, batch: &[SegmentationSample]) -> Result<StepRecord> {
        self.step += 1;
        let (x, targets) = batch_tensors(batch)?;
        let domains: Vec<usize> = batch.iter().map(|s| s.domain_id).collect();
        let with_aug = self.cfg.augmented_branch_active();

        let mut g = Graph::<f32>::new();
        let p = self.model.store.bind(&mut g);
        let xv = g.constant(x);
        let enc = self.model.unet.encode(&mut g, &p, xv)?;
        let logits_ori = self.model.unet.decode(&mut g, &p, enc.bottleneck, &enc.skips)?;
        let seg_ori = segmentation_loss_per_sample(&mut g, logits_ori, &targets)?;
        let mean_ori = g.mean(seg_ori);

        let mut total = mean_ori;
        let mut loss_aug = None;
        let mut scl_value = 0.0;
        let mut channels_selected = None;
        let mut covariance_noise = false;
        if with_aug {
            let z = g.value(enc.bottleneck).clone();
            let (n, c, h, w) = z.dims4()?;
            // statistics only feed the intensity sampler
            let domains_observed: &[usize] = if self.cfg.enable_sis { &domains } else { &[] };
            for (b, &domain) in domains_observed.iter().enumerate() {
                let plane = &z.data()[b * c * h * w..(b + 1) * c * h * w];
                let pooled: Vec<f64> = plane
                    .chunks(h * w)
                    .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64)
                    .collect();
                self.bank.observe(domain, &[pooled])?;
            }
            self.bank.maybe_refresh(self.step, &mut self.pairing_rng)?;

            let mut aug = StepAugmentor {
                model: &self.model,
                bank: &self.bank,
                cfg: &self.cfg,
                domains: &domains,
                rng: &mut self.noise_rng,
                covariance_noise: false,
            };
            let (d, s) = aug.perturbation(&mut g, &p, enc.bottleneck)?;
            covariance_noise = aug.covariance_noise;
            let z_aug = augment_on_graph(&mut g, enc.bottleneck, d, s)?;
            let logits_aug = self.model.unet.decode(&mut g, &p, z_aug, &enc.skips)?;
            let seg_aug = segmentation_loss_per_sample(&mut g, logits_aug, &targets)?;
            let mean_aug = g.mean(seg_aug);
            let weighted = g.scale(mean_aug, self.cfg.lambda as f32);
            total = g.add(total, weighted)?;
            if self.cfg.enable_scl {
                let reference = g.detach(seg_ori);
                let scl = selective_consistency_on_graph(&mut g, reference, seg_aug)?;
                scl_value = g.value(scl).item() as f64;
                total = g.add(total, scl)?;
            }
            loss_aug = Some(g.value(mean_aug).item() as f64);
            channels_selected = Some(g.value(d).sum() as f64 / n as f64);
        }

        let total_value = g.value(total).item() as f64;
        let mut record = StepRecord {
            step: self.step,
            loss_ori: g.value(mean_ori).item() as f64,
            loss_aug,
            lambda: self.cfg.lambda,
            scl: scl_value,
            total: total_value,
            channels_selected,
            covariance_noise,
            grad_norm: 0.0,
        };
        if !total_value.is_finite() {
            return Err(SdfaError::NonFinite(format!(
                "loss at step {}: {}",
                self.step,
                serde_json::to_string(&record)?
            )));
        }
        let mut grads = g.backward(total)?;
        let grads = self.model.store.collect_grads(&p, &mut grads);
        let sq: f64 = grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        record.grad_norm = sq.sqrt();
        if !record.grad_norm.is_finite() {
            return Err(SdfaError::NonFinite(format!(
                "gradient at step {}: {}",
                self.step,
                serde_json::to_string(&record)?
            )));
        }
        self.optimizer.step(&mut self.model.store, &grads);
        Ok(record)
    }
}

fn bilinear(img: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Brightness, contrast and noise on the image; elastic warping on image
/// and mask together.
pub fn augment_image<R: Rng>(s: &mut SegmentationSample, cfg: &ImageAugConfig, rng: &mut R) {
    let (h, w) = (s.height, s.width);
    if cfg.elastic_alpha > 0.0 && cfg.elastic_grid >= 1 {
        let n = cfg.elastic_grid + 1;
        let mut field = || -> Vec<f32> {
            (0..n * n)
                .map(|_| rng.gen_range(-1.0..=1.0) * cfg.elastic_alpha)
                .collect()
        };
        let (dy, dx) = (field(), field());
        let scale_y = cfg.elastic_grid as f32 / (h.max(2) - 1) as f32;
        let scale_x = cfg.elastic_grid as f32 / (w.max(2) - 1) as f32;
        let old_img = s.image.clone();
        let old_mask = s.mask.clone();
        for y in 0..h {
            for x in 0..w {
                let (gy, gx) = (y as f32 * scale_y, x as f32 * scale_x);
                let sy = y as f32 + bilinear(&dy, n, n, gy, gx);
                let sx = x as f32 + bilinear(&dx, n, n, gy, gx);
                for c in 0..s.channels {
                    let plane = &old_img[c * h * w..(c + 1) * h * w];
                    s.image[c * h * w + y * w + x] = bilinear(plane, h, w, sy, sx);
                }
                let my = sy.round().clamp(0.0, (h - 1) as f32) as usize;
                let mx = sx.round().clamp(0.0, (w - 1) as f32) as usize;
                s.mask[y * w + x] = old_mask[my * w + mx];
            }
        }
    }
    let shift = if cfg.brightness > 0.0 {
        rng.gen_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let gain = if cfg.contrast > 0.0 {
        rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)
    } else {
        1.0
    };
    let mean = s.image.iter().sum::<f32>() / s.image.len() as f32;
    let noise = Normal::new(0.0f32, cfg.noise_std.max(0.0)).expect("finite std");
    for v in &mut s.image {
        let eps = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
        *v = ((*v - mean) * gain + mean + shift + eps).clamp(0.0, 1.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub val_dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub held_out_domain: usize,
    pub held_out_name: String,
    pub seed: u64,
    pub lambda: f64,
    pub enable_sds: bool,
    pub enable_sis: bool,
    pub enable_scl: bool,
    pub best_step: u64,
    pub best_val_dsc: f64,
    pub val_history: Vec<EvalPoint>,
    pub test: EvalResult,
}

pub struct FoldOutcome {
    pub summary: FoldSummary,
    /// Parameters at the selected step.
    pub model: SdfaModel,
}

/// Trains one fold from a fresh initialization derived from `cfg.seed` and
/// reports held-out metrics of the checkpoint with the best validation DSC.
pub fn run_fold(
    dataset: &Dataset,
    held_out: usize,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    let split = lodo_split(&dataset.samples, held_out, cfg.val_fraction, cfg.seed)?;
    let model = SdfaModel::new(BackboneConfig {
        seed: cfg.seed,
        ..backbone.clone()
    })?;
    let mut trainer = Trainer::new(model, split.train, cfg.clone())?;
    let eval_batch = cfg.batch_size.max(8);
    let mut history = Vec::new();
    let mut best: Option<(u64, f64, ParamStore<f32>)> = None;
    for step in 1..=cfg.iterations {
        let record = trainer.step()?;
        on_step(&record)?;
        if step % cfg.eval_every == 0 || step == cfg.iterations {
            let val_dsc = if split.val.is_empty() {
                f64::NAN
            } else {
                evaluate(trainer.model(), &split.val, eval_batch)?.overall.mean_dsc
            };
            history.push(EvalPoint { step, val_dsc });
            let better = match &best {
                None => true,
                Some((_, b, _)) => val_dsc > *b,
            };
            if better {
                best = Some((step, val_dsc, trainer.model().store.clone()));
            }
        }
    }
    let (best_step, best_val_dsc, params) = best.expect("at least one evaluation");
    let mut model = trainer.into_model();
    model.store = params;
    let test = evaluate(&model, &split.test, eval_batch)?.overall;
    Ok(FoldOutcome {
        summary: FoldSummary {
            held_out_domain: held_out,
            held_out_name: dataset
                .domain_names
                .get(held_out)
                .cloned()
                .unwrap_or_else(|| held_out.to_string()),
            seed: cfg.seed,
            lambda: cfg.lambda,
            enable_sds: cfg.enable_sds,
            enable_sis: cfg.enable_sis,
            enable_scl: cfg.enable_scl,
            best_step,
            best_val_dsc,
            val_history: history,
            test,
        },
        model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoTable {
    pub rows: Vec<FoldSummary>,
}

impl LodoTable {
    pub fn mean_dsc(&self) -> f64 {
        self.rows.iter().map(|r| r.test.mean_dsc).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "held_out_domain",
            "held_out_name",
            "seed",
            "lambda",
            "sds",
            "sis",
            "scl",
            "best_step",
            "best_val_dsc",
            "test_dsc",
            "test_asd",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.held_out_domain.to_string(),
                r.held_out_name.clone(),
                r.seed.to_string(),
                r.lambda.to_string(),
                r.enable_sds.to_string(),
                r.enable_sis.to_string(),
                r.enable_scl.to_string(),
                r.best_step.to_string(),
                r.best_val_dsc.to_string(),
                r.test.mean_dsc.to_string(),
                r.test.mean_asd.to_string(),
            ])?;
        }
        csv_string(w)
    }
}

/// One fold per domain.
pub fn run_lodo(
    dataset: &Dataset,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, &StepRecord) -> Result<()>,
) -> Result<LodoTable> {
    if dataset.domain_count() < 2 {
        return Err(SdfaError::Data(
            "leave-one-domain-out needs at least two domains".into(),
        ));
    }
    let mut rows = Vec::with_capacity(dataset.domain_count());
    for held_out in 0..dataset.domain_count() {
        let outcome = run_fold(dataset, held_out, backbone, cfg, &mut |r| on_step(held_out, r))?;
        rows.push(outcome.summary);
    }
    Ok(LodoTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub per_domain_dsc: Vec<f64>,
    pub mean_dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub domain_names: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("lambda")
            .chain(self.domain_names.iter().map(String::as_str))
            .chain(std::iter::once("mean"));
        w.write_record(header)?;
        for r in &self.rows {
            let fields = std::iter::once(r.lambda)
                .chain(r.per_domain_dsc.iter().copied())
                .chain(std::iter::once(r.mean_dsc))
                .map(|v| v.to_string());
            w.write_record(fields)?;
        }
        csv_string(w)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| SdfaError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv fields are UTF-8"))
}

/// A full leave-one-domain-out run per `lambda` value.
pub fn sweep_lambda(
    dataset: &Dataset,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    values: &[f64],
    on_step: &mut dyn FnMut(f64, usize, &StepRecord) -> Result<()>,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(SdfaError::Config("no lambda values to sweep".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &lambda in values {
        let run_cfg = TrainConfig { lambda, ..cfg.clone() };
        let table = run_lodo(dataset, backbone, &run_cfg, &mut |d, r| on_step(lambda, d, r))?;
        rows.push(SweepRow {
            lambda,
            per_domain_dsc: table.rows.iter().map(|r| r.test.mean_dsc).collect(),
            mean_dsc: table.mean_dsc(),
        });
    }
    Ok(SweepTable {
        domain_names: dataset.domain_names.clone(),
        rows,
    })
}

/// Original and perturbed views of one sample, for inspection.
#[derive(Clone, Debug)]
pub struct PerturbedView {
    pub z: Tensor<f32>,
    pub z_aug: Tensor<f32>,
    pub logits: Tensor<f32>,
    pub logits_aug: Tensor<f32>,
}

/// Runs the dual forward pass on one sample without recording gradients.
/// Noise is standard normal when no statistics are supplied.
pub fn perturbed_view(
    model: &SdfaModel,
    sample: &SegmentationSample,
    cfg: &TrainConfig,
    bank: Option<&CovarianceBank>,
    rng: &mut ChaCha8Rng,
) -> Result<PerturbedView> {
    let (x, _) = batch_tensors(std::slice::from_ref(sample))?;
    let mut g = Graph::<f32>::inference();
    let p = model.store.bind(&mut g);
    let xv = g.constant(x);
    let c = model.unet.bottleneck_channels();
    let fallback = CovarianceBank::new(c, &[sample.domain_id], cfg.bank());
    let mut aug = StepAugmentor {
        model,
        bank: bank.unwrap_or(&fallback),
        cfg,
        domains: &[sample.domain_id],
        rng,
        covariance_noise: false,
    };
    let out = model.unet.forward_dual(&mut g, &p, xv, Some(&mut aug))?;
    let (d, s) = (out.direction.expect("augmented"), out.intensity.expect("augmented"));
    let z_aug = augment_on_graph(&mut g, out.bottleneck, d, s)?;
    Ok(PerturbedView {
        z: g.value(out.bottleneck).clone(),
        z_aug: g.value(z_aug).clone(),
        logits: g.value(out.logits_ori).clone(),
        logits_aug: g.value(out.logits_aug.expect("augmented")).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticDatasetSpec;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            base_width: 4,
            depth: 2,
            ..Default::default()
        }
    }

    fn toy_data() -> Dataset {
        SyntheticDatasetSpec::four_domains(16, 12, 1).generate().unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                iterations: 0,
                ..Default::default()
            },
            TrainConfig {
                lambda: -0.5,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let erm = TrainConfig::default().erm();
        assert!(!erm.augmented_branch_active());
        assert!(TrainConfig {
            skip_inert_branch: false,
            ..erm
        }
        .augmented_branch_active());
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        let t = Tensor::from_vec(&[1, 2, 1, 2], vec![0.5f32, 1.0, 0.5, 0.0]).unwrap();
        assert_eq!(argmax_masks(&t).unwrap(), vec![vec![0u8, 0]]);
    }

    #[test]
    fn steps_are_finite_and_logged() {
        let data = toy_data();
        let model = SdfaModel::new(tiny()).unwrap();
        let cfg = TrainConfig {
            min_warm: 2,
            cov_refresh: 2,
            ..Default::default()
        };
        let mut t = Trainer::new(model, data.samples, cfg).unwrap();
        let mut saw_cov = false;
        for _ in 0..12 {
            let r = t.step().unwrap();
            assert!(r.total.is_finite() && r.grad_norm > 0.0);
            let cs = r.channels_selected.unwrap();
            assert!((0.0..=t.model().unet.bottleneck_channels() as f64).contains(&cs));
            saw_cov |= r.covariance_noise;
        }
        assert!(saw_cov);
        assert_eq!(t.steps_done(), 12);
    }

    #[test]
    fn scl_off_gives_zero_term() {
        let data = toy_data();
        let cfg = TrainConfig {
            enable_scl: false,
            ..Default::default()
        };
        let mut t = Trainer::new(SdfaModel::new(tiny()).unwrap(), data.samples, cfg).unwrap();
        for _ in 0..5 {
            assert_eq!(t.step().unwrap().scl, 0.0);
        }
    }

    #[test]
    fn image_augmentation_keeps_range_and_labels() {
        let data = toy_data();
        let mut s = data.samples[0].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        augment_image(
            &mut s,
            &ImageAugConfig {
                enabled: true,
                ..Default::default()
            },
            &mut rng,
        );
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.iter().all(|&m| m <= 1));
        let mut same = data.samples[0].clone();
        let off = ImageAugConfig {
            brightness: 0.0,
            contrast: 0.0,
            noise_std: 0.0,
            elastic_alpha: 0.0,
            ..Default::default()
        };
        augment_image(&mut same, &off, &mut rng);
        assert_eq!(same.mask, data.samples[0].mask);
        for (a, b) in same.image.iter().zip(&data.samples[0].image) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
