//! Compact U-Net with a perturbation hook on the deepest encoder feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdfa_autograd::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdfaError};
use crate::init::{fan_in_uniform, he_uniform};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            base_width: 16,
            depth: 4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(SdfaError::Config(format!(
                "need at least one input channel and two classes, got {} and {}",
                self.in_channels, self.num_classes
            )));
        }
        if self.base_width < 4 {
            return Err(SdfaError::Config(format!(
                "base_width must be >= 4, got {}",
                self.base_width
            )));
        }
        if !(2..=8).contains(&self.depth) {
            return Err(SdfaError::Config(format!("depth must be in 2..=8, got {}", self.depth)));
        }
        Ok(())
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Channel count of the bottleneck feature.
    pub fn bottleneck_channels(&self) -> usize {
        self.level_width(self.depth - 1)
    }

    /// Spatial sizes must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Norm {
    /// Per channel over pixels.
    Instance,
    /// Per sample over channels and pixels.
    Layer,
}

/// Two 3x3 convolutions, each followed by normalization and ReLU.
/// No conv bias: the normalization would cancel it.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv1: ParamId,
    conv2: ParamId,
    norm: Norm,
}

impl ConvBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        norm: Norm,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm,
            conv1: store.add(
                format!("{prefix}.conv1.weight"),
                fan_in_uniform(rng, &[cout, cin, 3, 3], cin * 9),
            )?,
            conv2: store.add(
                format!("{prefix}.conv2.weight"),
                fan_in_uniform(rng, &[cout, cout, 3, 3], cout * 9),
            )?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let eps = T::from_f64_lossy(NORM_EPS);
        let mut h = x;
        for w in [self.conv1, self.conv2] {
            h = g.conv2d(h, p[w], None, 1)?;
            h = match self.norm {
                Norm::Instance => g.instance_norm(h, eps)?,
                Norm::Layer => g.layer_norm(h, eps)?,
            };
            h = g.relu(h);
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    up_w: ParamId,
    up_b: ParamId,
    block: ConvBlock,
}

/// Bottleneck feature plus the skip activations of every encoder level
/// (finest first).
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bottleneck: Var,
    pub skips: Vec<Var>,
}

/// Supplies the direction `d` and intensity `s` (both `(N, C)`) for a
/// bottleneck batch.
pub trait BottleneckAugmentor<T: Scalar> {
    fn perturbation(&mut self, g: &mut Graph<T>, p: &Bound, bottleneck: Var) -> Result<(Var, Var)>;
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub logits_ori: Var,
    pub logits_aug: Option<Var>,
    pub bottleneck: Var,
    pub direction: Option<Var>,
    pub intensity: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: BackboneConfig,
    encoder: Vec<ConvBlock>,
    middle: ConvBlock,
    decoder: Vec<UpBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

impl UNet {
    /// Registers all parameters, initialized deterministically from `config.seed`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            let cout = config.level_width(level);
            encoder.push(ConvBlock::new(
                store,
                &format!("encoder.{level}"),
                cin,
                cout,
                Norm::Instance,
                &mut rng,
            )?);
            cin = cout;
        }
        let c = config.bottleneck_channels();
        let middle = ConvBlock::new(store, "bottleneck", cin, c, Norm::Instance, &mut rng)?;

        let mut decoder = Vec::with_capacity(config.depth);
        let mut cin = c;
        for level in (0..config.depth).rev() {
            let cout = config.level_width(level);
            let prefix = format!("decoder.{level}");
            let up_w = store.add(
                format!("{prefix}.up.weight"),
                // each output pixel sees a single tap per input channel; the
                // result is concatenated with normalized skips, so keep its scale
                he_uniform(&mut rng, &[cin, cout, 2, 2], cin),
            )?;
            let up_b = store.add(format!("{prefix}.up.bias"), Tensor::zeros(&[cout]))?;
            // instance norm here would cancel channel-constant bottleneck offsets
            let block = ConvBlock::new(store, &prefix, 2 * cout, cout, Norm::Layer, &mut rng)?;
            decoder.push(UpBlock { up_w, up_b, block });
            cin = cout;
        }
        let k = config.num_classes;
        let head_w = store.add(
            "head.weight".to_string(),
            fan_in_uniform(&mut rng, &[k, cin, 1, 1], cin),
        )?;
        let head_b = store.add("head.bias".to_string(), fan_in_uniform(&mut rng, &[k], cin))?;
        Ok(Self {
            config,
            encoder,
            middle,
            decoder,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.config.bottleneck_channels()
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(SdfaError::Shape(format!(
                "expected input (N, {}, H, W), got {s:?}",
                self.config.in_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) || s[2] == 0 || s[3] == 0 {
            let pad = |v: usize| v.max(1).div_ceil(m) * m;
            return Err(SdfaError::Shape(format!(
                "spatial size {}x{} is not a multiple of {m} (depth {}); pad to {}x{}",
                s[2],
                s[3],
                self.config.depth,
                pad(s[2]),
                pad(s[3])
            )));
        }
        Ok(())
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Encoded> {
        self.check_input(g, x)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for block in &self.encoder {
            let s = block.forward(g, p, h)?;
            skips.push(s);
            h = g.max_pool2x2(s)?;
        }
        let bottleneck = self.middle.forward(g, p, h)?;
        Ok(Encoded { bottleneck, skips })
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, bottleneck: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != self.config.depth {
            return Err(SdfaError::Shape(format!(
                "decoder expects {} skips, got {}",
                self.config.depth,
                skips.len()
            )));
        }
        let mut h = bottleneck;
        for (up, &skip) in self.decoder.iter().zip(skips.iter().rev()) {
            h = g.conv_transpose2x2(h, p[up.up_w], Some(p[up.up_b]))?;
            h = g.concat_channels(&[h, skip])?;
            h = up.block.forward(g, p, h)?;
        }
        Ok(g.conv2d(h, p[self.head_w], Some(p[self.head_b]), 0)?)
    }

    /// Plain segmentation forward pass.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let enc = self.encode(g, p, x)?;
        self.decode(g, p, enc.bottleneck, &enc.skips)
    }

    /// Original pass plus, when an augmentor is given, a second decoder pass
    /// on the perturbed bottleneck. Both passes share weights and skips.
    pub fn forward_dual<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        augmentor: Option<&mut dyn BottleneckAugmentor<T>>,
    ) -> Result<ForwardOutputs> {
        let enc = self.encode(g, p, x)?;
        let logits_ori = self.decode(g, p, enc.bottleneck, &enc.skips)?;
        let mut out = ForwardOutputs {
            logits_ori,
            logits_aug: None,
            bottleneck: enc.bottleneck,
            direction: None,
            intensity: None,
        };
        if let Some(aug) = augmentor {
            let (d, s) = aug.perturbation(g, p, enc.bottleneck)?;
            let (n, c) = (g.shape(enc.bottleneck)[0], g.shape(enc.bottleneck)[1]);
            for v in [d, s] {
                if g.shape(v) != [n, c] {
                    return Err(SdfaError::Shape(format!(
                        "perturbation must be ({n}, {c}), got {:?}",
                        g.shape(v)
                    )));
                }
            }
            let z_aug = crate::augment::augment_on_graph(g, enc.bottleneck, d, s)?;
            out.logits_aug = Some(self.decode(g, p, z_aug, &enc.skips)?);
            out.direction = Some(d);
            out.intensity = Some(s);
        }
        Ok(out)
    }

    /// Logits for a batch without recording gradients.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let xv = g.constant(x);
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    /// Bottleneck activations for a batch without recording gradients.
    pub fn bottleneck<T: Scalar>(&self, store: &ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let xv = g.constant(x);
        let enc = self.encode(&mut g, &p, xv)?;
        Ok(g.value(enc.bottleneck).clone())
    }
}
