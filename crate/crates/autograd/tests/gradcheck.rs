//! Analytic gradients of every built-in op against central finite
//! differences in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdfa_autograd::{Graph, Tensor, Var};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces an arbitrary node to a scalar through a fixed random projection so
/// every output element contributes.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let r = g.constant(random(&mut rng, &shape));
    let prod = g.mul(out, r).unwrap();
    g.sum(prod)
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = project(&mut g, out, 99);
    let grads = g.backward(loss).unwrap();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = project(&mut g, out, 99);
        g.value(loss).item()
    };

    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let numeric: Vec<f64> = (0..t.numel())
            .map(|i| {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += STEP;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= STEP;
                (eval(&plus) - eval(&minus)) / (2.0 * STEP)
            })
            .collect();
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

#[test]
fn conv2d_padded_3x3() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ins = vec![
        random(&mut rng, &[2, 3, 4, 4]),
        random(&mut rng, &[4, 3, 3, 3]),
        random(&mut rng, &[4]),
    ];
    let err = check(ins, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1).unwrap());
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn conv2d_unpadded_and_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ins = vec![random(&mut rng, &[1, 2, 4, 5]), random(&mut rng, &[3, 2, 3, 2])];
    let err = check(ins, |g, v| g.conv2d(v[0], v[1], None, 0).unwrap());
    assert!(err < TOL, "rel err {err}");

    let ins = vec![
        random(&mut rng, &[2, 3, 2, 2]),
        random(&mut rng, &[2, 3, 1, 1]),
        random(&mut rng, &[2]),
    ];
    let err = check(ins, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 0).unwrap());
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn conv_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ins = vec![
        random(&mut rng, &[2, 3, 2, 3]),
        random(&mut rng, &[3, 2, 2, 2]),
        random(&mut rng, &[2]),
    ];
    let err = check(ins, |g, v| g.conv_transpose2x2(v[0], v[1], Some(v[2])).unwrap());
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn pooling_and_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ins = vec![random(&mut rng, &[2, 2, 4, 4])];
    let err = check(ins.clone(), |g, v| g.max_pool2x2(v[0]).unwrap());
    assert!(err < TOL, "max pool rel err {err}");
    let err = check(ins.clone(), |g, v| g.instance_norm(v[0], 1e-5).unwrap());
    assert!(err < TOL, "instance norm rel err {err}");
    let err = check(ins.clone(), |g, v| g.layer_norm(v[0], 1e-5).unwrap());
    assert!(err < TOL, "layer norm rel err {err}");
    let err = check(ins, |g, v| g.global_avg_pool(v[0]).unwrap());
    assert!(err < TOL, "gap rel err {err}");
}

#[test]
fn elementwise_and_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    let row = random(&mut rng, &[4]);
    let err = check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let m = g.mul(d, v[1]).unwrap();
        let r = g.relu(m);
        let sg = g.sigmoid(r);
        let sc = g.scale(sg, 1.7);
        g.add_scalar(sc, 0.3)
    });
    assert!(err < TOL, "elementwise rel err {err}");
    let err = check(vec![a.clone(), row.clone()], |g, v| {
        let m = g.mul_rows(v[0], v[1]).unwrap();
        g.add_rows(m, v[1]).unwrap()
    });
    assert!(err < TOL, "row broadcast rel err {err}");

    let x = random(&mut rng, &[2, 3, 2, 2]);
    let off = random(&mut rng, &[2, 3]);
    let err = check(vec![x, off], |g, v| g.add_channelwise(v[0], v[1]).unwrap());
    assert!(err < TOL, "channelwise rel err {err}");
}

#[test]
fn linear_concat_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ins = vec![
        random(&mut rng, &[3, 5]),
        random(&mut rng, &[2, 5]),
        random(&mut rng, &[2]),
    ];
    let err = check(ins, |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap());
    assert!(err < TOL, "linear rel err {err}");

    let ins = vec![random(&mut rng, &[2, 1, 2, 2]), random(&mut rng, &[2, 3, 2, 2])];
    let err = check(ins, |g, v| g.concat_channels(&[v[0], v[1]]).unwrap());
    assert!(err < TOL, "concat rel err {err}");

    let ins = vec![random(&mut rng, &[4, 3])];
    let err = check(ins, |g, v| {
        let m = g.mean(v[0]);
        let s = g.sum(v[0]);
        g.mul(m, s).unwrap()
    });
    assert!(err < TOL, "reductions rel err {err}");
}

#[test]
fn small_unet_block_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ins = vec![
        random(&mut rng, &[1, 1, 4, 4]),
        random(&mut rng, &[2, 1, 3, 3]),
        random(&mut rng, &[2, 2, 2, 2]),
        random(&mut rng, &[1, 4, 3, 3]),
    ];
    let err = check(ins, |g, v| {
        let h = g.conv2d(v[0], v[1], None, 1).unwrap();
        let h = g.instance_norm(h, 1e-5).unwrap();
        let h = g.relu(h);
        let skip = h;
        let d = g.max_pool2x2(h).unwrap();
        let u = g.conv_transpose2x2(d, v[2], None).unwrap();
        let c = g.concat_channels(&[skip, u]).unwrap();
        g.conv2d(c, v[3], None, 1).unwrap()
    });
    assert!(err < TOL, "block rel err {err}");
}

#[test]
fn detached_and_constant_inputs_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::full(&[2], 2.0));
    let c = g.constant(Tensor::full(&[2], 3.0));
    let d = g.detach(a);
    let p = g.mul(a, c).unwrap();
    let q = g.mul(p, d).unwrap();
    let loss = g.sum(q);
    let grads = g.backward(loss).unwrap();
    // d/da (a * 3 * stop(a)) = 3 * a
    assert_eq!(grads.get(a).unwrap().data(), &[6.0, 6.0]);
    assert!(grads.get(c).is_none());
    assert!(grads.get(d).is_none());
}

#[test]
fn inference_graph_records_nothing() {
    let mut g = Graph::<f64>::inference();
    let a = g.param(Tensor::full(&[2], 1.0));
    assert!(!g.requires_grad(a));
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::full(&[2], 1.0));
    assert!(g.backward(a).is_err());
}

#[test]
fn shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(g.conv2d(x, w, None, 1).is_err());
    assert!(g.max_pool2x2(x).is_err());
    let a = g.constant(Tensor::zeros(&[2]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.add(a, b).is_err());
}

#[test]
fn channel_offsets_vanish_under_instance_norm_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[1, 3, 4, 4]);
    let mut shifted = x.clone();
    for (i, v) in shifted.data_mut().iter_mut().enumerate() {
        *v += [0.5, -2.0, 1.0][i / 16];
    }
    let run = |t: &Tensor<f64>, layer: bool| {
        let mut g = Graph::<f64>::inference();
        let v = g.constant(t.clone());
        let y = if layer {
            g.layer_norm(v, 1e-5)
        } else {
            g.instance_norm(v, 1e-5)
        }
        .unwrap();
        g.value(y).clone()
    };
    let close = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-9);
    assert!(close(&run(&x, false), &run(&shifted, false)));
    assert!(!close(&run(&x, true), &run(&shifted, true)));
    let y = run(&x, true);
    let mean = y.data().iter().sum::<f64>() / 48.0;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
}
