use sdfa_autograd::{AdamW, AdamWConfig, ParamStore, Tensor};

/// One AdamW step computed by hand: with zero moments the bias-corrected
/// update is `lr * g / (|g| + eps)`, applied after decoupled decay.
#[test]
fn first_step_matches_closed_form() {
    let mut store = ParamStore::<f64>::new();
    store
        .add("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap())
        .unwrap();
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..Default::default()
    };
    let mut opt = AdamW::new(cfg);
    let g = Tensor::from_vec(&[2], vec![0.5, -4.0]).unwrap();
    opt.step(&mut store, &[Some(g)]);
    let w = store.get(store.id("w").unwrap()).data();
    let expect0 = 1.0 * (1.0 - 0.05) - 0.1 * 0.5 / (0.5 + 1e-8);
    let expect1 = -2.0 * (1.0 - 0.05) + 0.1 * 4.0 / (4.0 + 1e-8);
    assert!((w[0] - expect0).abs() < 1e-12);
    assert!((w[1] - expect1).abs() < 1e-12);
}

#[test]
fn params_without_gradient_are_untouched() {
    let mut store = ParamStore::<f32>::new();
    store.add("a", Tensor::full(&[3], 1.0)).unwrap();
    store.add("b", Tensor::full(&[1], 1.0)).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    opt.step(&mut store, &[None, Some(Tensor::full(&[1], 1.0))]);
    assert_eq!(store.get(store.id("a").unwrap()).data(), &[1.0, 1.0, 1.0]);
    assert!(store.get(store.id("b").unwrap()).data()[0] < 1.0);
}

#[test]
fn minimizes_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let id = store
        .add("x", Tensor::from_vec(&[2], vec![3.0, -1.5]).unwrap())
        .unwrap();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.05,
        weight_decay: 0.0,
        ..Default::default()
    });
    for _ in 0..2000 {
        let g = store.get(id).map(|v| 2.0 * v);
        opt.step(&mut store, &[Some(g)]);
    }
    assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-3));
}

#[test]
fn duplicate_names_rejected() {
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::zeros(&[1])).unwrap();
    assert!(store.add("w", Tensor::zeros(&[1])).is_err());
    assert!(store.set("w", Tensor::zeros(&[2])).is_err());
}
