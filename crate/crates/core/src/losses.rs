//! Segmentation losses, the gated consistency penalty and their composition.
//!
//! Per-sample segmentation loss is Dice + cross-entropy. The consistency
//! penalty only looks at samples whose augmented loss exceeds the original
//! one; the original loss acts as a fixed reference there.

use sdfa_autograd::{CustomOp, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdfaError};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1e-5;

/// Soft multi-class Dice loss for one sample.
///
/// `pred` holds class probabilities `(K, H, W)`, `target` a one-hot map of
/// the same shape.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() || pred.rank() != 3 {
        return Err(SdfaError::Shape(format!(
            "dice: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let k = pred.shape()[0];
    let hw = pred.numel() / k;
    let eps = T::from_f64_lossy(DICE_EPS);
    let two = T::from_f64_lossy(2.0);
    let mut acc = T::zero();
    for c in 0..k {
        let p = &pred.data()[c * hw..(c + 1) * hw];
        let t = &target.data()[c * hw..(c + 1) * hw];
        let inter: T = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
        let denom = p.iter().copied().sum::<T>() + t.iter().copied().sum::<T>();
        acc += (two * inter + eps) / (denom + eps);
    }
    Ok(T::one() - acc / T::from_usize(k).unwrap())
}

/// Mean pixel cross-entropy of `logits (K, H, W)` against class indices.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, target: &[u8]) -> Result<T> {
    if logits.rank() != 3 {
        return Err(SdfaError::Shape(format!("ce: logits {:?}", logits.shape())));
    }
    let k = logits.shape()[0];
    let hw = logits.numel() / k;
    if target.len() != hw {
        return Err(SdfaError::Shape(format!(
            "ce: {} target pixels for {hw} logits per class",
            target.len()
        )));
    }
    check_indices(target, k)?;
    let mut acc = T::zero();
    for (px, &t) in target.iter().enumerate() {
        let lse = log_sum_exp((0..k).map(|c| logits.data()[c * hw + px]));
        acc += lse - logits.data()[t as usize * hw + px];
    }
    Ok(acc / T::from_usize(hw).unwrap())
}

fn check_indices(target: &[u8], k: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
        return Err(SdfaError::Shape(format!(
            "target class {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

fn log_sum_exp<T: Scalar>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(T::neg_infinity(), T::max);
    m + vals.map(|v| (v - m).exp()).sum::<T>().ln()
}

/// One-hot encoding `(K, H, W)` of a class-index map.
pub fn one_hot<T: Scalar>(target: &[u8], classes: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    if target.len() != height * width {
        return Err(SdfaError::Shape("one_hot: target size".into()));
    }
    check_indices(target, classes)?;
    let hw = height * width;
    let mut data = vec![T::zero(); classes * hw];
    for (px, &t) in target.iter().enumerate() {
        data[t as usize * hw + px] = T::one();
    }
    Ok(Tensor::from_vec(&[classes, height, width], data)?)
}

fn mean<T: Scalar>(v: &[T]) -> T {
    if v.is_empty() {
        return T::zero();
    }
    v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap()
}

/// `mean(ori) + lambda * mean(aug)`.
pub fn supervised_loss(ori: &[f64], aug: &[f64], lambda: f64) -> Result<f64> {
    if ori.len() != aug.len() {
        return Err(SdfaError::Shape(format!(
            "supervised loss: {} original vs {} augmented",
            ori.len(),
            aug.len()
        )));
    }
    Ok(mean(ori) + lambda * mean(aug))
}

/// `(1/N) Σ 1[aug_i > ori_i] |aug_i - ori_i|`.
pub fn selective_consistency(ori: &[f64], aug: &[f64]) -> Result<f64> {
    if ori.len() != aug.len() || ori.is_empty() {
        return Err(SdfaError::Shape(format!(
            "consistency: {} original vs {} augmented losses",
            ori.len(),
            aug.len()
        )));
    }
    let penalty: f64 = ori
        .iter()
        .zip(aug)
        .filter(|(o, a)| a > o)
        .map(|(o, a)| (a - o).abs())
        .fold(0.0, |acc, v| acc + v);
    Ok(penalty / ori.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_sample_ori: Vec<f64>,
    pub per_sample_aug: Vec<f64>,
    pub lambda: f64,
    pub scl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn supervised(&self) -> f64 {
        mean(&self.per_sample_ori) + self.lambda * mean(&self.per_sample_aug)
    }
}

/// Fills a [`LossBreakdown`]; the consistency term is zero when disabled.
pub fn total_loss(ori: &[f64], aug: &[f64], lambda: f64, with_consistency: bool) -> Result<LossBreakdown> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(SdfaError::Config(format!(
            "lambda must be a finite value >= 0, got {lambda}"
        )));
    }
    let supervised = supervised_loss(ori, aug, lambda)?;
    let scl = if with_consistency {
        selective_consistency(ori, aug)?
    } else {
        0.0
    };
    Ok(LossBreakdown {
        per_sample_ori: ori.to_vec(),
        per_sample_aug: aug.to_vec(),
        lambda,
        scl,
        total: supervised + scl,
    })
}

struct SoftmaxChannels;

impl<T: Scalar> CustomOp<T> for SoftmaxChannels {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let s = y.shape();
        let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
        let mut dx = vec![T::zero(); y.numel()];
        for b in 0..n {
            for px in 0..hw {
                let idx = |c: usize| (b * k + c) * hw + px;
                let dot: T = (0..k).map(|c| y.data()[idx(c)] * grad.data()[idx(c)]).sum();
                for c in 0..k {
                    dx[idx(c)] = y.data()[idx(c)] * (grad.data()[idx(c)] - dot);
                }
            }
        }
        vec![Some(Tensor::from_vec(s, dx).expect("softmax grad shape"))]
    }
}

/// Softmax over the class axis of `(N, K, H, W)` logits.
pub fn softmax_channels<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let (n, k, h, w) = g.value(logits).dims4()?;
    let hw = h * w;
    let x = g.value(logits).data();
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for px in 0..hw {
            let idx = |c: usize| (b * k + c) * hw + px;
            let m = (0..k).map(|c| x[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (x[idx(c)] - m).exp();
                y[idx(c)] = e;
                z += e;
            }
            for c in 0..k {
                y[idx(c)] /= z;
            }
        }
    }
    let y = Tensor::from_vec(&[n, k, h, w], y)?;
    Ok(g.custom(&[logits], y, Box::new(SoftmaxChannels)))
}

fn check_batch_targets(shape: &[usize], targets: &[u8]) -> Result<(usize, usize, usize)> {
    let (n, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if targets.len() != n * hw {
        return Err(SdfaError::Shape(format!(
            "{} target pixels for batch {shape:?}",
            targets.len()
        )));
    }
    check_indices(targets, k)?;
    Ok((n, k, hw))
}

struct DicePerSample {
    targets: Vec<u8>,
}

impl<T: Scalar> CustomOp<T> for DicePerSample {
    fn name(&self) -> &'static str {
        "dice_per_sample"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = inputs[0];
        let s = p.shape();
        let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
        let eps = T::from_f64_lossy(DICE_EPS);
        let two = T::from_f64_lossy(2.0);
        let kf = T::from_usize(k).unwrap();
        let mut dp = vec![T::zero(); p.numel()];
        for b in 0..n {
            let gb = grad.data()[b];
            let tg = &self.targets[b * hw..(b + 1) * hw];
            for c in 0..k {
                let pc = &p.data()[(b * k + c) * hw..(b * k + c + 1) * hw];
                let mut inter = T::zero();
                let mut sum_p = T::zero();
                let mut sum_t = T::zero();
                for (&pv, &t) in pc.iter().zip(tg) {
                    sum_p += pv;
                    if t as usize == c {
                        inter += pv;
                        sum_t += T::one();
                    }
                }
                let num = two * inter + eps;
                let den = sum_p + sum_t + eps;
                let den2 = den * den;
                let out = &mut dp[(b * k + c) * hw..(b * k + c + 1) * hw];
                for (o, &t) in out.iter_mut().zip(tg) {
                    let tv = if t as usize == c { T::one() } else { T::zero() };
                    let dterm = (two * tv * den - num) / den2;
                    *o = -gb * dterm / kf;
                }
            }
        }
        vec![Some(Tensor::from_vec(s, dp).expect("dice grad shape"))]
    }
}

/// Dice loss of each sample, `(N)`, from probabilities `(N, K, H, W)`.
pub fn dice_per_sample<T: Scalar>(g: &mut Graph<T>, probs: Var, targets: &[u8]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 4 {
        return Err(SdfaError::Shape(format!("dice: probabilities {shape:?}")));
    }
    let (n, k, hw) = check_batch_targets(&shape, targets)?;
    let p = g.value(probs);
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let pred = Tensor::from_vec(&[k, hw, 1], p.data()[b * k * hw..(b + 1) * k * hw].to_vec())?;
        let onehot = one_hot::<T>(&targets[b * hw..(b + 1) * hw], k, hw, 1)?;
        out.push(dice_loss(&pred, &onehot)?);
    }
    let value = Tensor::from_vec(&[n], out)?;
    Ok(g.custom(
        &[probs],
        value,
        Box::new(DicePerSample {
            targets: targets.to_vec(),
        }),
    ))
}

struct CePerSample {
    targets: Vec<u8>,
}

impl<T: Scalar> CustomOp<T> for CePerSample {
    fn name(&self) -> &'static str {
        "ce_per_sample"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let s = x.shape();
        let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
        let inv_hw = T::one() / T::from_usize(hw).unwrap();
        let mut dx = vec![T::zero(); x.numel()];
        for b in 0..n {
            let scale = grad.data()[b] * inv_hw;
            for px in 0..hw {
                let idx = |c: usize| (b * k + c) * hw + px;
                let m = (0..k).map(|c| x.data()[idx(c)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..k).map(|c| (x.data()[idx(c)] - m).exp()).sum();
                let t = self.targets[b * hw + px] as usize;
                for c in 0..k {
                    let p = (x.data()[idx(c)] - m).exp() / z;
                    let onehot = if c == t { T::one() } else { T::zero() };
                    dx[idx(c)] = scale * (p - onehot);
                }
            }
        }
        vec![Some(Tensor::from_vec(s, dx).expect("ce grad shape"))]
    }
}

/// Cross-entropy of each sample, `(N)`, from logits `(N, K, H, W)`.
pub fn ce_per_sample<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[u8]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 4 {
        return Err(SdfaError::Shape(format!("ce: logits {shape:?}")));
    }
    let (n, k, hw) = check_batch_targets(&shape, targets)?;
    let x = g.value(logits);
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let l = Tensor::from_vec(&[k, hw, 1], x.data()[b * k * hw..(b + 1) * k * hw].to_vec())?;
        out.push(ce_loss(&l, &targets[b * hw..(b + 1) * hw])?);
    }
    let value = Tensor::from_vec(&[n], out)?;
    Ok(g.custom(
        &[logits],
        value,
        Box::new(CePerSample {
            targets: targets.to_vec(),
        }),
    ))
}

/// Dice + cross-entropy per sample from logits.
pub fn segmentation_loss_per_sample<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[u8]) -> Result<Var> {
    let probs = softmax_channels(g, logits)?;
    let dice = dice_per_sample(g, probs, targets)?;
    let ce = ce_per_sample(g, logits, targets)?;
    Ok(g.add(dice, ce)?)
}

struct SelectiveConsistency;

impl<T: Scalar> CustomOp<T> for SelectiveConsistency {
    fn name(&self) -> &'static str {
        "selective_consistency"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (ori, aug) = (inputs[0], inputs[1]);
        let n = T::from_usize(ori.numel()).unwrap();
        let g = grad.item();
        let daug = ori
            .data()
            .iter()
            .zip(aug.data())
            .map(|(&o, &a)| if a > o { g / n } else { T::zero() })
            .collect();
        vec![None, Some(Tensor::from_vec(aug.shape(), daug).expect("scl grad shape"))]
    }
}

/// Gated consistency penalty on the graph. The gate and the original losses
/// are constants for differentiation.
pub fn selective_consistency_on_graph<T: Scalar>(g: &mut Graph<T>, ori: Var, aug: Var) -> Result<Var> {
    if g.shape(ori) != g.shape(aug) || g.shape(ori).len() != 1 || g.shape(ori)[0] == 0 {
        return Err(SdfaError::Shape(format!(
            "consistency: {:?} vs {:?}",
            g.shape(ori),
            g.shape(aug)
        )));
    }
    let n = T::from_usize(g.shape(ori)[0]).unwrap();
    let penalty: T = g
        .value(ori)
        .data()
        .iter()
        .zip(g.value(aug).data())
        .filter(|(o, a)| a > o)
        .map(|(&o, &a)| a - o)
        .fold(T::zero(), |acc, v| acc + v);
    Ok(g.custom(&[ori, aug], Tensor::scalar(penalty / n), Box::new(SelectiveConsistency)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_perfect_and_disjoint() {
        let target: Vec<u8> = (0..16).map(|i| (i % 3 == 0) as u8).collect();
        let t = one_hot::<f64>(&target, 2, 4, 4).unwrap();
        assert!(dice_loss(&t, &t).unwrap() <= 1e-4);

        let inverted: Vec<u8> = target.iter().map(|&v| 1 - v).collect();
        let p = one_hot::<f64>(&inverted, 2, 4, 4).unwrap();
        assert!((dice_loss(&p, &t).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn dice_hand_evaluation() {
        // 2x2 grid; target foreground on pixels {0, 1}, prediction on {1, 2}
        let t = one_hot::<f64>(&[1, 1, 0, 0], 2, 2, 2).unwrap();
        let p = one_hot::<f64>(&[0, 1, 1, 0], 2, 2, 2).unwrap();
        let e = DICE_EPS;
        let per_class = (2.0 * 1.0 + e) / (2.0 + 2.0 + e);
        let expect = 1.0 - (per_class + per_class) / 2.0;
        assert!((dice_loss(&p, &t).unwrap() - expect).abs() < 1e-15);
        assert!(dice_loss(&p, &Tensor::zeros(&[2, 2, 1])).is_err());
    }

    #[test]
    fn ce_cases() {
        let target = [0u8, 1, 1, 0];
        let mut logits = Tensor::<f64>::zeros(&[2, 2, 2]);
        for (px, &t) in target.iter().enumerate() {
            logits.data_mut()[t as usize * 4 + px] = 20.0;
        }
        assert!(ce_loss(&logits, &target).unwrap() < 1e-3);

        let uniform = Tensor::<f64>::zeros(&[2, 2, 2]);
        assert!((ce_loss(&uniform, &target).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!(ce_loss(&uniform, &[0, 2, 0, 0]).is_err());
    }

    #[test]
    fn ce_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (k, hw) = (3, 12);
        let logits = Tensor::from_fn(&[k, 3, 4], |_| rng.gen_range(-4.0..4.0));
        let target: Vec<u8> = (0..hw).map(|_| rng.gen_range(0..k as u8)).collect();
        let mut acc = 0.0f64;
        for px in 0..hw {
            let xs: Vec<f64> = (0..k).map(|c| logits.data()[c * hw + px]).collect();
            let denom: f64 = xs.iter().map(|x| x.exp()).sum();
            acc -= (xs[target[px] as usize].exp() / denom).ln();
        }
        assert!((ce_loss(&logits, &target).unwrap() - acc / hw as f64).abs() < 1e-10);
    }

    #[test]
    fn supervised_cases() {
        assert_eq!(
            supervised_loss(&[0.2, 0.4], &[9.0, 9.0], 0.0).unwrap(),
            0.30000000000000004
        );
        assert_eq!(supervised_loss(&[0.4], &[0.6], 1.0).unwrap(), 1.0);
        assert!(supervised_loss(&[0.4], &[0.6, 0.1], 1.0).is_err());
    }

    #[test]
    fn consistency_cases() {
        assert_eq!(selective_consistency(&[1.0, 2.0], &[0.5, 2.0]).unwrap(), 0.0);
        assert_eq!(selective_consistency(&[1.0, 1.0], &[1.5, 0.5]).unwrap(), 0.25);
        assert_eq!(selective_consistency(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(selective_consistency(&[], &[]).is_err());
    }

    #[test]
    fn total_cases() {
        let b = total_loss(&[0.7, 0.3], &[5.0, 5.0], 0.0, false).unwrap();
        assert_eq!(b.total, 0.5);
        assert_eq!(b.scl, 0.0);
        let b = total_loss(&[1.0], &[1.5], 1.0, true).unwrap();
        assert_eq!(b.total, 3.0);
        assert!(total_loss(&[1.0], &[1.5], -1.0, true).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ori: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..2.0)).collect();
        let aug: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..2.0)).collect();
        let lambda = rng.gen_range(0.0..1.0);
        let b = total_loss(&ori, &aug, lambda, true).unwrap();
        let mo = ori.iter().sum::<f64>() / 9.0;
        let ma = aug.iter().sum::<f64>() / 9.0;
        let mut scl = 0.0;
        for i in 0..9 {
            if aug[i] > ori[i] {
                scl += aug[i] - ori[i];
            }
        }
        assert!((b.total - (mo + lambda * ma + scl / 9.0)).abs() < 1e-12);
        assert!((b.total - (b.supervised() + b.scl)).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_pure_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, k, h, w) = (3, 3, 4, 4);
        let logits = Tensor::from_fn(&[n, k, h, w], |_| rng.gen_range(-3.0..3.0));
        let targets: Vec<u8> = (0..n * h * w).map(|_| rng.gen_range(0..k as u8)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.param(logits.clone());
        let p = softmax_channels(&mut g, x).unwrap();
        let dice = dice_per_sample(&mut g, p, &targets).unwrap();
        let ce = ce_per_sample(&mut g, x, &targets).unwrap();
        let hw = h * w;
        for b in 0..n {
            let l = Tensor::from_vec(&[k, h, w], logits.data()[b * k * hw..(b + 1) * k * hw].to_vec()).unwrap();
            let t = &targets[b * hw..(b + 1) * hw];
            assert!((g.value(ce).data()[b] - ce_loss(&l, t).unwrap()).abs() < 1e-12);
            let probs = Tensor::from_vec(&[k, h, w], g.value(p).data()[b * k * hw..(b + 1) * k * hw].to_vec()).unwrap();
            let onehot = one_hot(t, k, h, w).unwrap();
            assert!((g.value(dice).data()[b] - dice_loss(&probs, &onehot).unwrap()).abs() < 1e-12);
        }
    }

    fn fd_check(x0: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let l = f(&mut g, x);
        let grads = g.backward(l).unwrap();
        let an = grads.get(x).unwrap().clone();
        let eval = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.param(t);
            let l = f(&mut g, x);
            g.value(l).item()
        };
        let h = 1e-6;
        let mut fd = Vec::with_capacity(x0.numel());
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            fd.push((eval(p) - eval(m)) / (2.0 * h));
        }
        let err = fd.iter().zip(an.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = fd.iter().map(|v| v.abs()).fold(1e-3, f64::max);
        assert!(err / scale < 1e-5, "relative error {}", err / scale);
    }

    fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(v).to_vec();
        let w = g.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
        let p = g.mul(v, w).unwrap();
        g.sum(p)
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, k, h, w) = (2, 3, 4, 4);
        let logits = Tensor::from_fn(&[n, k, h, w], |_| rng.gen_range(-2.0..2.0));
        let targets: Vec<u8> = (0..n * h * w).map(|_| rng.gen_range(0..k as u8)).collect();

        fd_check(&logits, |g, x| {
            let p = softmax_channels(g, x).unwrap();
            weighted_sum(g, p, 7)
        });
        fd_check(&logits, |g, x| {
            let v = ce_per_sample(g, x, &targets).unwrap();
            weighted_sum(g, v, 8)
        });
        fd_check(&logits, |g, x| {
            let p = softmax_channels(g, x).unwrap();
            let v = dice_per_sample(g, p, &targets).unwrap();
            weighted_sum(g, v, 9)
        });
        fd_check(&logits, |g, x| {
            let v = segmentation_loss_per_sample(g, x, &targets).unwrap();
            g.mean(v)
        });
    }

    #[test]
    fn consistency_gradient_flows_into_augmented_only() {
        let ori = Tensor::from_vec(&[4], vec![1.0, 1.0, 0.5, 2.0]).unwrap();
        let aug = Tensor::from_vec(&[4], vec![1.5, 0.5, 0.9, 2.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let o = g.param(ori.clone());
        let a = g.param(aug.clone());
        let l = selective_consistency_on_graph(&mut g, o, a).unwrap();
        assert!((g.value(l).item() - selective_consistency(ori.data(), aug.data()).unwrap()).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(o).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(grads.get(a).unwrap().data(), &[0.25, 0.0, 0.25, 0.0]);
        // away from ties the soft path agrees with finite differences
        let untied = Tensor::from_vec(&[4], vec![1.5, 0.5, 0.9, 1.7]).unwrap();
        fd_check(&untied, |g, x| {
            let o = g.constant(ori.clone());
            selective_consistency_on_graph(g, o, x).unwrap()
        });
    }
}
