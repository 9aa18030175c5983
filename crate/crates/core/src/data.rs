//! Multi-domain segmentation samples: a synthetic generator with fixed
//! anatomy and shifting appearance, a PNG directory loader, and the
//! leave-one-domain-out splitter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, SdfaError};

/// Soft-edge steepness of rendered blobs (in units of the normalized radius).
const EDGE_SHARPNESS: f32 = 12.0;
const TEXTURE_AMPLITUDE: f32 = 0.25;
/// Semi-axis bounds as fractions of the image side.
const SEMI_AXIS: (f32, f32) = (0.09, 0.2);

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub domain_id: usize,
    pub sample_id: String,
}

impl SegmentationSample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m > 0).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub intensity_bias: f32,
    pub contrast_gain: f32,
    pub noise_std: f32,
    /// Stripe cycles across the image; 0 disables the texture.
    pub texture_freq: f32,
    pub blob_count: (usize, usize),
    /// Appearance stream (texture phase, noise).
    pub seed: u64,
    /// Shape stream; domains sharing it get identical masks.
    pub shape_seed: u64,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            name: "domain".into(),
            intensity_bias: 0.0,
            contrast_gain: 1.0,
            noise_std: 0.0,
            texture_freq: 0.0,
            blob_count: (1, 3),
            seed: 0,
            shape_seed: 0,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, why: &str| {
            Err(SdfaError::Config(format!(
                "domain '{}': field `{name}` {why}",
                self.name
            )))
        };
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return field("noise_std", "must be a finite value >= 0");
        }
        if !(self.contrast_gain > 0.0 && self.contrast_gain.is_finite()) {
            return field("contrast_gain", "must be a finite value > 0");
        }
        if !(self.texture_freq >= 0.0 && self.texture_freq.is_finite()) {
            return field("texture_freq", "must be a finite value >= 0");
        }
        if !self.intensity_bias.is_finite() {
            return field("intensity_bias", "must be finite");
        }
        if self.blob_count.0 == 0 || self.blob_count.0 > self.blob_count.1 {
            return field("blob_count", "must be a range [min, max] with 1 <= min <= max");
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return field("name", "must be a non-empty directory name");
        }
        Ok(())
    }
}

/// A whole synthetic dataset: one entry per domain, all with the same size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub size: usize,
    pub samples_per_domain: usize,
    pub domains: Vec<SyntheticDomainSpec>,
}

impl SyntheticDatasetSpec {
    /// Four domains with strong appearance differences and shared anatomy.
    pub fn four_domains(size: usize, samples_per_domain: usize, seed: u64) -> Self {
        let mk = |i: u64, name: &str, bias: f32, gain: f32, noise: f32, tex: f32| SyntheticDomainSpec {
            name: name.into(),
            intensity_bias: bias,
            contrast_gain: gain,
            noise_std: noise,
            texture_freq: tex,
            blob_count: (1, 3),
            seed: seed.wrapping_mul(16).wrapping_add(i),
            shape_seed: seed.wrapping_mul(16).wrapping_add(8 + i),
        };
        Self {
            size,
            samples_per_domain,
            domains: vec![
                mk(0, "d0_clean", 0.0, 1.0, 0.03, 0.0),
                mk(1, "d1_dim_striped", 0.2, 0.5, 0.08, 3.0),
                mk(2, "d2_bright_saturated", -0.2, 1.6, 0.05, 6.0),
                mk(3, "d3_noisy_lowcontrast", 0.35, 0.4, 0.12, 9.0),
            ],
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.domains.len() || self.domains.is_empty() {
            return Err(SdfaError::Config(
                "field `domains` needs at least one entry and unique names".into(),
            ));
        }
        // ids follow sorted names, as in `load_directory`
        let mut ordered: Vec<&SyntheticDomainSpec> = self.domains.iter().collect();
        ordered.sort_by(|a, b| a.name.cmp(&b.name));
        let mut samples = Vec::new();
        for (id, spec) in ordered.iter().enumerate() {
            samples.extend(generate_domain(
                spec,
                id,
                self.samples_per_domain,
                self.size,
                self.size,
            )?);
        }
        Ok(Dataset {
            domain_names: ordered.iter().map(|d| d.name.clone()).collect(),
            samples,
        })
    }
}

struct Blob {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    cos: f32,
    sin: f32,
}

fn draw_blobs(rng: &mut ChaCha8Rng, count: (usize, usize), h: usize, w: usize) -> Vec<Blob> {
    let side = h.min(w) as f32;
    let n = rng.gen_range(count.0..=count.1);
    (0..n)
        .map(|_| {
            let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
            Blob {
                cx: rng.gen_range(0.2..0.8) * w as f32,
                cy: rng.gen_range(0.2..0.8) * h as f32,
                a: rng.gen_range(SEMI_AXIS.0..SEMI_AXIS.1) * side,
                b: rng.gen_range(SEMI_AXIS.0..SEMI_AXIS.1) * side,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect()
}

/// Soft shape intensity and hard mask of a pixel center.
fn render(blobs: &[Blob], y: usize, x: usize) -> (f32, bool) {
    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
    let mut soft = 0.0f32;
    let mut inside = false;
    for bl in blobs {
        let (dx, dy) = (px - bl.cx, py - bl.cy);
        let u = (dx * bl.cos + dy * bl.sin) / bl.a;
        let v = (-dx * bl.sin + dy * bl.cos) / bl.b;
        let r = (u * u + v * v).sqrt();
        soft = soft.max(1.0 / (1.0 + (-(1.0 - r) * EDGE_SHARPNESS).exp()));
        inside |= r <= 1.0;
    }
    (soft, inside)
}

/// `n` single-channel samples of one domain.
pub fn generate_domain(
    spec: &SyntheticDomainSpec,
    domain_id: usize,
    n: usize,
    height: usize,
    width: usize,
) -> Result<Vec<SegmentationSample>> {
    spec.validate()?;
    if n == 0 || height == 0 || width == 0 {
        return Err(SdfaError::Config("need at least one non-empty sample".into()));
    }
    let mut shape_rng = ChaCha8Rng::seed_from_u64(spec.shape_seed);
    let mut look_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    look_rng.set_stream(1);
    let noise = Normal::new(0.0f32, spec.noise_std.max(0.0)).expect("finite std");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let blobs = draw_blobs(&mut shape_rng, spec.blob_count, height, width);
        let angle: f32 = look_rng.gen_range(0.0..std::f32::consts::PI);
        let phase: f32 = look_rng.gen_range(0.0..std::f32::consts::TAU);
        let (kx, ky) = (
            std::f32::consts::TAU * spec.texture_freq * angle.cos() / width as f32,
            std::f32::consts::TAU * spec.texture_freq * angle.sin() / height as f32,
        );
        let mut image = Vec::with_capacity(height * width);
        let mut mask = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (shape, inside) = render(&blobs, y, x);
                let texture = if spec.texture_freq > 0.0 {
                    TEXTURE_AMPLITUDE * (kx * x as f32 + ky * y as f32 + phase).sin()
                } else {
                    0.0
                };
                let eps = if spec.noise_std > 0.0 {
                    noise.sample(&mut look_rng)
                } else {
                    0.0
                };
                let v = spec.contrast_gain * (shape + texture) + spec.intensity_bias + eps;
                image.push(v.clamp(0.0, 1.0));
                mask.push(inside as u8);
            }
        }
        out.push(SegmentationSample {
            image,
            mask,
            channels: 1,
            height,
            width,
            domain_id,
            sample_id: format!("{}/{i:05}", spec.name),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub domain_names: Vec<String>,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn domain_count(&self) -> usize {
        self.domain_names.len()
    }

    pub fn domain_len(&self, domain: usize) -> usize {
        self.samples.iter().filter(|s| s.domain_id == domain).count()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub name: String,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticDomainSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub domains: Vec<ManifestDomain>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `root/<domain>/{images,masks}/<id>.png` plus a manifest.
pub fn write_directory(root: &Path, data: &Dataset, specs: Option<&[SyntheticDomainSpec]>) -> Result<()> {
    let mut manifest = Manifest { domains: Vec::new() };
    for (id, name) in data.domain_names.iter().enumerate() {
        let img_dir = root.join(name).join("images");
        let mask_dir = root.join(name).join("masks");
        for d in [&img_dir, &mask_dir] {
            std::fs::create_dir_all(d).map_err(io_err(d))?;
        }
        let mut count = 0;
        for s in data.samples.iter().filter(|s| s.domain_id == id) {
            if s.channels != 1 {
                return Err(SdfaError::Data("only single-channel samples can be written".into()));
            }
            let stem = s.sample_id.rsplit('/').next().unwrap_or(&s.sample_id);
            let file = format!("{stem}.png");
            let (w, h) = (s.width as u32, s.height as u32);
            let img = GrayImage::from_raw(w, h, s.image.iter().map(|&v| to_u8(v)).collect())
                .expect("buffer matches dimensions");
            let path = img_dir.join(&file);
            img.save(&path).map_err(|source| SdfaError::Image { path, source })?;
            let mask = GrayImage::from_raw(w, h, s.mask.clone()).expect("buffer matches dimensions");
            let path = mask_dir.join(&file);
            mask.save(&path).map_err(|source| SdfaError::Image { path, source })?;
            count += 1;
        }
        manifest.domains.push(ManifestDomain {
            name: name.clone(),
            count,
            generator: specs.and_then(|s| s.iter().find(|d| &d.name == name).cloned()),
        });
    }
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))
}

fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| SdfaError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every `<domain>/images/*.png` with its `<domain>/masks/*.png`
/// partner. Domain ids follow the sorted domain directory names.
pub fn load_directory(root: &Path) -> Result<Dataset> {
    let mut domains = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.join("images").is_dir() {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| SdfaError::Data(format!("non UTF-8 domain directory {}", path.display())))?;
            domains.push(name.to_string());
        }
    }
    domains.sort();
    if domains.is_empty() {
        return Err(SdfaError::Data(format!(
            "no <domain>/images directories under {}",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    for (id, name) in domains.iter().enumerate() {
        let images = list_pngs(&root.join(name).join("images"))?;
        let masks = list_pngs(&root.join(name).join("masks"))?;
        if let Some(stem) = images.keys().find(|k| !masks.contains_key(*k)) {
            return Err(SdfaError::Data(format!("image {name}/{stem} has no mask")));
        }
        if let Some(stem) = masks.keys().find(|k| !images.contains_key(*k)) {
            return Err(SdfaError::Data(format!("mask {name}/{stem} has no image")));
        }
        let mut dims: Option<(usize, usize, usize)> = None;
        for (stem, img_path) in &images {
            let img = open_image(img_path)?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            let (channels, image) = if img.color().has_color() {
                let rgb = img.to_rgb32f();
                let mut planar = vec![0.0f32; 3 * h * w];
                for (i, px) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        planar[c * h * w + i] = px.0[c];
                    }
                }
                (3, planar)
            } else {
                (1, img.to_luma32f().into_raw())
            };
            let mask_img = open_image(&masks[stem])?.to_luma8();
            if (mask_img.width() as usize, mask_img.height() as usize) != (w, h) {
                return Err(SdfaError::Data(format!(
                    "{name}/{stem}: mask size differs from image size"
                )));
            }
            match dims {
                None => dims = Some((channels, h, w)),
                Some(d) if d != (channels, h, w) => {
                    return Err(SdfaError::Data(format!(
                        "{name}/{stem}: {channels}x{h}x{w} differs from {}x{}x{} seen earlier in the domain",
                        d.0, d.1, d.2
                    )))
                }
                _ => {}
            }
            samples.push(SegmentationSample {
                image,
                mask: mask_img.into_raw(),
                channels,
                height: h,
                width: w,
                domain_id: id,
                sample_id: format!("{name}/{stem}"),
            });
        }
    }
    Ok(Dataset {
        domain_names: domains,
        samples,
    })
}

#[derive(Clone, Debug)]
pub struct LodoSplit {
    pub held_out_domain: usize,
    pub train: Vec<SegmentationSample>,
    pub val: Vec<SegmentationSample>,
    pub test: Vec<SegmentationSample>,
}

/// Validation count for a domain of `n` samples.
pub fn val_count(n: usize, val_fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * val_fraction).floor() as usize).clamp(1, n - 1)
}

/// Holds out one domain for testing and draws a seeded per-domain validation
/// subset from each remaining domain.
pub fn lodo_split(samples: &[SegmentationSample], held_out: usize, val_fraction: f64, seed: u64) -> Result<LodoSplit> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(SdfaError::Config(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let mut domains: Vec<usize> = samples.iter().map(|s| s.domain_id).collect();
    domains.sort_unstable();
    domains.dedup();
    if !domains.contains(&held_out) {
        return Err(SdfaError::Data(format!("held-out domain {held_out} has no samples")));
    }
    if domains.len() < 2 {
        return Err(SdfaError::Data(
            "leave-one-domain-out needs at least two domains".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = LodoSplit {
        held_out_domain: held_out,
        train: Vec::new(),
        val: Vec::new(),
        test: samples.iter().filter(|s| s.domain_id == held_out).cloned().collect(),
    };
    for &d in domains.iter().filter(|&&d| d != held_out) {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].domain_id == d).collect();
        let n_val = val_count(idx.len(), val_fraction);
        idx.shuffle(&mut rng);
        let (val, train) = idx.split_at_mut(n_val);
        val.sort_unstable();
        train.sort_unstable();
        split.val.extend(val.iter().map(|&i| samples[i].clone()));
        split.train.extend(train.iter().map(|&i| samples[i].clone()));
    }
    Ok(split)
}
