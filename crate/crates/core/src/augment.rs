//! Channel-selective feature perturbation at the encoder bottleneck.
//!
//! A perturbed feature is `z + d ⊙ s`, where `d ∈ {0,1}^C` comes from a small
//! learned selector and `s` is a per-channel intensity `μ + σ ⊙ ξ`. The
//! binary `d` is trained with a straight-through estimator: the forward pass
//! uses the thresholded value, the backward pass the sigmoid probabilities.

use rand::Rng;
use sdfa_autograd::{Bound, CustomOp, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{Result, SdfaError};
use crate::init::fan_in_uniform;

/// Encoder activation of a single sample, shape `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Scalar> {
    tensor: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(SdfaError::Shape("feature map dims must be positive".into()));
        }
        let tensor = Tensor::from_vec(&[channels, height, width], values)?;
        if !tensor.is_finite() {
            return Err(SdfaError::NonFinite("feature map".into()));
        }
        Ok(Self { tensor })
    }

    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        match *tensor.shape() {
            [c, h, w] => Self::new(c, h, w, tensor.into_vec()),
            _ => Err(SdfaError::Shape(format!(
                "feature map must be (C, H, W), got {:?}",
                tensor.shape()
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn values(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn at(&self, c: usize, h: usize, w: usize) -> T {
        self.tensor.data()[(c * self.height() + h) * self.width() + w]
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.tensor
    }
}

/// Per-channel augmentation strength `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityVector<T>(pub Vec<T>);

/// Soft probabilities and the binary direction derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionState<T> {
    pub soft: Vec<T>,
    pub hard: Vec<bool>,
}

/// `soft > 0.5`, strictly.
pub fn threshold<T: Scalar>(soft: &[T]) -> Vec<bool> {
    let half = T::from_f64_lossy(0.5);
    soft.iter().map(|&p| p > half).collect()
}

/// `s[c] = mu[c] + sigma[c] * xi[c]`.
pub fn compose_intensity<T: Scalar>(xi: &[T], mu: &[T], sigma: &[T]) -> Result<IntensityVector<T>> {
    if xi.len() != mu.len() || xi.len() != sigma.len() {
        return Err(SdfaError::Shape(format!(
            "intensity: xi {}, mu {}, sigma {}",
            xi.len(),
            mu.len(),
            sigma.len()
        )));
    }
    Ok(IntensityVector(
        xi.iter().zip(mu).zip(sigma).map(|((&x, &m), &s)| m + s * x).collect(),
    ))
}

/// `out[c, h, w] = z[c, h, w] + d[c] * s[c]`.
pub fn apply_augmentation<T: Scalar>(z: &FeatureMap<T>, d: &[bool], s: &IntensityVector<T>) -> Result<FeatureMap<T>> {
    let c = z.channels();
    if d.len() != c || s.0.len() != c {
        return Err(SdfaError::Shape(format!(
            "augmentation: feature has {c} channels, direction {}, intensity {}",
            d.len(),
            s.0.len()
        )));
    }
    let hw = z.height() * z.width();
    let mut out = z.values().to_vec();
    for (ch, plane) in out.chunks_mut(hw).enumerate() {
        if d[ch] {
            let off = s.0[ch];
            for v in plane {
                *v += off;
            }
        }
    }
    FeatureMap::new(c, z.height(), z.width(), out)
}

/// Hard threshold forward, identity backward.
struct StraightThrough;

impl<T: Scalar> CustomOp<T> for StraightThrough {
    fn name(&self) -> &'static str {
        "straight_through_threshold"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone())]
    }
}

/// Records `1{soft > 0.5}` on the graph with the straight-through gradient.
pub fn straight_through<T: Scalar>(g: &mut Graph<T>, soft: Var) -> Var {
    let half = T::from_f64_lossy(0.5);
    let hard = g.value(soft).map(|p| if p > half { T::one() } else { T::zero() });
    g.custom(&[soft], hard, Box::new(StraightThrough))
}

/// Output of the selector on a batch: `hard` carries the straight-through
/// gradient, `soft` the sigmoid probabilities, both `(N, C)`.
#[derive(Clone, Copy, Debug)]
pub struct Direction {
    pub hard: Var,
    pub soft: Var,
}

/// conv3x3 → ReLU → conv3x3 → ReLU → global average pool → dense → sigmoid.
#[derive(Clone, Debug)]
pub struct DirectionSelector {
    channels: usize,
    hidden: usize,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl DirectionSelector {
    pub fn hidden_width(channels: usize) -> usize {
        (channels / 4).max(4)
    }

    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(SdfaError::Config("selector needs at least one channel".into()));
        }
        let hidden = Self::hidden_width(channels);
        let mut add = |name: &str, shape: &[usize], fan_in: usize| {
            store.add(format!("{prefix}.{name}"), fan_in_uniform(rng, shape, fan_in))
        };
        Ok(Self {
            channels,
            hidden,
            conv1_w: add("conv1.weight", &[hidden, channels, 3, 3], channels * 9)?,
            conv1_b: add("conv1.bias", &[hidden], channels * 9)?,
            conv2_w: add("conv2.weight", &[hidden, hidden, 3, 3], hidden * 9)?,
            conv2_b: add("conv2.bias", &[hidden], hidden * 9)?,
            fc_w: add("fc.weight", &[channels, hidden], hidden)?,
            fc_b: add("fc.bias", &[channels], hidden)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn fc_weight(&self) -> ParamId {
        self.fc_w
    }

    pub fn fc_bias(&self) -> ParamId {
        self.fc_b
    }

    /// Pre-sigmoid scores, `(N, C)`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let c = g.shape(z).get(1).copied().unwrap_or(0);
        if g.shape(z).len() != 4 || c != self.channels {
            return Err(SdfaError::Config(format!(
                "selector built for {} channels, feature has shape {:?}",
                self.channels,
                g.shape(z)
            )));
        }
        let h = g.conv2d(z, p[self.conv1_w], Some(p[self.conv1_b]), 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, p[self.conv2_w], Some(p[self.conv2_b]), 1)?;
        let h = g.relu(h);
        let pooled = g.global_avg_pool(h)?;
        Ok(g.linear(pooled, p[self.fc_w], Some(p[self.fc_b]))?)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Direction> {
        let logits = self.logits(g, p, z)?;
        let soft = g.sigmoid(logits);
        let hard = straight_through(g, soft);
        Ok(Direction { hard, soft })
    }

    /// Direction for a single feature map without recording gradients.
    pub fn select<T: Scalar>(&self, store: &ParamStore<T>, z: &FeatureMap<T>) -> Result<DirectionState<T>> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let (c, h, w) = (z.channels(), z.height(), z.width());
        let x = g.constant(z.as_tensor().clone().reshape(&[1, c, h, w])?);
        let dir = self.forward(&mut g, &p, x)?;
        let soft = g.value(dir.soft).data().to_vec();
        let hard = g.value(dir.hard).data().iter().map(|&v| v > T::zero()).collect();
        Ok(DirectionState { soft, hard })
    }
}

/// Learnable shift `μ` and scale `σ` of the intensity, initialized to 0 and 1.
#[derive(Clone, Debug)]
pub struct IntensityParams {
    channels: usize,
    mu: ParamId,
    sigma: ParamId,
}

impl IntensityParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            mu: store.add(format!("{prefix}.mu"), Tensor::zeros(&[channels]))?,
            sigma: store.add(format!("{prefix}.sigma"), Tensor::full(&[channels], T::one()))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mu(&self) -> ParamId {
        self.mu
    }

    pub fn sigma(&self) -> ParamId {
        self.sigma
    }

    /// `μ + σ ⊙ ξ` for a batch of noise rows `(N, C)`.
    pub fn compose<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, xi: Var) -> Result<Var> {
        let scaled = g.mul_rows(xi, p[self.sigma])?;
        Ok(g.add_rows(scaled, p[self.mu])?)
    }
}

/// `z + d ⊙ s` on a batch: `z (N, C, H, W)`, `d` and `s` `(N, C)`.
pub fn augment_on_graph<T: Scalar>(g: &mut Graph<T>, z: Var, d: Var, s: Var) -> Result<Var> {
    let offset = g.mul(d, s)?;
    Ok(g.add_channelwise(z, offset)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_direction_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = random_map(&mut rng, 5, 3, 2);
        let s = IntensityVector(vec![1.5; 5]);
        let out = apply_augmentation(&z, &[false; 5], &s).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn hand_example() {
        let z = FeatureMap::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let out = apply_augmentation(&z, &[true, false], &IntensityVector(vec![0.5, 0.5])).unwrap();
        assert_eq!(out.values(), &[1.5, 2.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_map(&mut rng, 8, 4, 4);
        let d: Vec<bool> = (0..8).map(|_| rng.gen_bool(0.5)).collect();
        let s = IntensityVector((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        let out = apply_augmentation(&z, &d, &s).unwrap();
        for (c, (&on, &off)) in d.iter().zip(&s.0).enumerate() {
            for h in 0..4 {
                for w in 0..4 {
                    let expect = z.at(c, h, w) + if on { off } else { 0.0 };
                    assert_eq!(out.at(c, h, w).to_bits(), expect.to_bits());
                }
            }
        }
    }

    #[test]
    fn augmentation_dimension_errors() {
        let z = FeatureMap::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        assert!(apply_augmentation(&z, &[true], &IntensityVector(vec![0.5, 0.5])).is_err());
        assert!(apply_augmentation(&z, &[true, true], &IntensityVector(vec![0.5])).is_err());
        assert!(FeatureMap::<f64>::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn intensity_cases() {
        let s = compose_intensity(&[3.0, -1.0], &[0.2, 0.4], &[0.0, 0.0]).unwrap();
        assert_eq!(s.0, vec![0.2, 0.4]);
        let s = compose_intensity(&[0.3, -0.7], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(s.0, vec![0.3, -0.7]);
        assert!(compose_intensity(&[0.3], &[0.0, 0.0], &[1.0, 1.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xi: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mu: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..2.0)).collect();
        let s = compose_intensity(&xi, &mu, &sigma).unwrap();
        for c in 0..16 {
            assert!((s.0[c] - (mu[c] + sigma[c] * xi[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_tie_maps_to_zero() {
        assert_eq!(threshold(&[0.5f64, 0.500001, 0.499]), vec![false, true, false]);
    }

    fn selector_with_bias(bias: &[f64]) -> (ParamStore<f64>, DirectionSelector) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let sel = DirectionSelector::new(&mut store, "sel", bias.len(), &mut rng).unwrap();
        let name = store.name(sel.fc_weight()).to_string();
        let shape = store.get(sel.fc_weight()).shape().to_vec();
        store.set(&name, Tensor::zeros(&shape)).unwrap();
        let name = store.name(sel.fc_bias()).to_string();
        store
            .set(&name, Tensor::from_vec(&[bias.len()], bias.to_vec()).unwrap())
            .unwrap();
        (store, sel)
    }

    #[test]
    fn selector_thresholds_pre_sigmoid_scores() {
        let (store, sel) = selector_with_bias(&[2.0, -3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_map(&mut rng, 2, 3, 3);
        let state = sel.select(&store, &z).unwrap();
        assert_eq!(state.hard, vec![true, false]);
        assert_eq!(state.hard, threshold(&state.soft));

        let (store, sel) = selector_with_bias(&[0.0; 4]);
        let z = random_map(&mut rng, 4, 2, 2);
        let state = sel.select(&store, &z).unwrap();
        assert_eq!(state.soft, vec![0.5; 4]);
        assert_eq!(state.hard, vec![false; 4]);
    }

    #[test]
    fn selector_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let sel = DirectionSelector::new(&mut store, "sel", 4, &mut rng).unwrap();
        let z = random_map(&mut rng, 3, 2, 2);
        assert!(matches!(sel.select(&store, &z), Err(SdfaError::Config(_))));
    }

    /// For a linear readout `f(d) = Σ a_c d_c` the straight-through gradient
    /// with respect to the selector weights equals the exact gradient of
    /// `f(soft)`, which central differences can measure.
    #[test]
    fn straight_through_gradient_matches_soft_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let sel = DirectionSelector::new(&mut store, "sel", 4, &mut rng).unwrap();
        let z = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let readout = Tensor::from_fn(&[2, 4], |_| rng.gen_range(-1.0..1.0));

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(z.clone());
        let dir = sel.forward(&mut g, &p, x).unwrap();
        let a = g.constant(readout.clone());
        let prod = g.mul(dir.hard, a).unwrap();
        let loss = g.sum(prod);
        let mut grads = g.backward(loss).unwrap();
        let analytic = store.collect_grads(&p, &mut grads);

        let soft_objective = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::inference();
            let p = store.bind(&mut g);
            let x = g.constant(z.clone());
            let dir = sel.forward(&mut g, &p, x).unwrap();
            g.value(dir.soft)
                .data()
                .iter()
                .zip(readout.data())
                .map(|(s, a)| s * a)
                .sum()
        };

        let h = 1e-6;
        let mut worst = 0.0f64;
        for id in store.ids().collect::<Vec<_>>() {
            let an = analytic[id.index()].as_ref().unwrap();
            let mut scale = 1e-12f64;
            let mut diff = 0.0f64;
            for i in 0..store.get(id).numel() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= h;
                let fd = (soft_objective(&plus) - soft_objective(&minus)) / (2.0 * h);
                scale = scale.max(fd.abs()).max(an.data()[i].abs());
                diff = diff.max((fd - an.data()[i]).abs());
            }
            worst = worst.max(diff / scale);
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn graph_augmentation_matches_pure_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random_map(&mut rng, 3, 2, 2);
        let d = vec![true, false, true];
        let s = IntensityVector(vec![0.25, -1.0, 0.75]);
        let expect = apply_augmentation(&z, &d, &s).unwrap();

        let mut g = Graph::<f64>::new();
        let zv = g.constant(z.as_tensor().clone().reshape(&[1, 3, 2, 2]).unwrap());
        let dv = g.constant(Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 1.0]).unwrap());
        let sv = g.constant(Tensor::from_vec(&[1, 3], s.0.clone()).unwrap());
        let out = augment_on_graph(&mut g, zv, dv, sv).unwrap();
        assert_eq!(g.value(out).data(), expect.values());
    }
}
