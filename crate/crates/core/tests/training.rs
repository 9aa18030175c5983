use sdfa::backbone::BackboneConfig;
use sdfa::data::{Dataset, SegmentationSample, SyntheticDatasetSpec};
use sdfa::trainer::{evaluate, run_fold, run_lodo, sweep_lambda, SdfaModel, StepRecord, TrainConfig, Trainer};

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        base_width: 4,
        depth: 2,
        ..Default::default()
    }
}

fn tiny_data(domains: usize, n: usize) -> Dataset {
    let mut spec = SyntheticDatasetSpec::four_domains(16, n, 3);
    spec.domains.truncate(domains);
    spec.generate().unwrap()
}

fn short(cfg: TrainConfig, iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        eval_every: 2,
        cov_refresh: 3,
        min_warm: 2,
        batch_size: 2,
        ..cfg
    }
}

fn records(data: &Dataset, cfg: &TrainConfig, steps: usize) -> (Vec<StepRecord>, SdfaModel) {
    let model = SdfaModel::new(BackboneConfig {
        seed: cfg.seed,
        ..tiny_backbone()
    })
    .unwrap();
    let train: Vec<SegmentationSample> = data.samples.clone();
    let mut t = Trainer::new(model, train, cfg.clone()).unwrap();
    let recs = (0..steps).map(|_| t.step().unwrap()).collect();
    (recs, t.into_model())
}

#[test]
fn erm_skip_matches_computing_the_inert_branch() {
    let data = tiny_data(3, 4);
    let base = short(TrainConfig::default(), 6).erm();
    let skip = TrainConfig {
        skip_inert_branch: true,
        ..base.clone()
    };
    let full = TrainConfig {
        skip_inert_branch: false,
        ..base
    };
    let (ra, ma) = records(&data, &skip, 5);
    let (rb, mb) = records(&data, &full, 5);
    for (a, b) in ra.iter().zip(&rb) {
        assert!((a.loss_ori - b.loss_ori).abs() < 1e-6);
        assert!((a.total - b.total).abs() < 1e-6);
        assert!((a.grad_norm - b.grad_norm).abs() < 1e-6 * a.grad_norm.max(1.0));
        assert!(a.loss_aug.is_none() && b.loss_aug.is_some());
    }
    // the backbone trajectory is unaffected by the inert branch
    for (name, ta) in ma.store.iter() {
        if name.starts_with("augment.") {
            continue;
        }
        let tb = mb.store.get(mb.store.id(name).unwrap());
        let diff = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "{name}: {diff}");
    }
}

#[test]
fn training_streams_are_deterministic() {
    let data = tiny_data(3, 4);
    let cfg = short(TrainConfig::default(), 8);
    let (a, ma) = records(&data, &cfg, 8);
    let (b, mb) = records(&data, &cfg, 8);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for ((_, x), (_, y)) in ma.store.iter().zip(mb.store.iter()) {
        assert_eq!(x.data(), y.data());
    }
    assert!(a.iter().any(|r| r.covariance_noise), "bank never warmed up");
    let other = TrainConfig { seed: 1, ..cfg };
    let (c, _) = records(&data, &other, 8);
    assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
}

#[test]
fn ablation_records_report_the_branch() {
    let data = tiny_data(2, 4);
    let cfg = TrainConfig {
        enable_sds: false,
        enable_sis: false,
        enable_scl: false,
        ..short(TrainConfig::default(), 4)
    };
    let (recs, _) = records(&data, &cfg, 4);
    for r in &recs {
        assert!(r.loss_aug.is_some());
        assert_eq!(r.scl, 0.0);
        assert!(!r.covariance_noise);
        let (ori, aug) = (r.loss_ori, r.loss_aug.unwrap());
        assert!((r.total - (ori + aug)).abs() < 1e-5 * r.total.max(1.0));
    }
}

#[test]
fn evaluation_is_batch_invariant() {
    let data = tiny_data(2, 5);
    let model = SdfaModel::new(tiny_backbone()).unwrap();
    let a = evaluate(&model, &data.samples, 1).unwrap();
    let b = evaluate(&model, &data.samples, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_domain.len(), 2);
}

#[test]
fn fold_selects_the_best_validation_checkpoint() {
    let data = tiny_data(3, 5);
    let cfg = short(TrainConfig::default(), 6);
    let outcome = run_fold(&data, 1, &tiny_backbone(), &cfg, &mut |_| Ok(())).unwrap();
    let s = &outcome.summary;
    assert_eq!(s.val_history.iter().map(|p| p.step).collect::<Vec<_>>(), vec![2, 4, 6]);
    let best = s.val_history.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.val_dsc));
    assert_eq!(s.best_val_dsc, best);
    let first = s.val_history.iter().find(|p| p.val_dsc == best).unwrap();
    assert_eq!(s.best_step, first.step);
    assert_eq!(s.held_out_name, data.domain_names[1]);
    let test: Vec<_> = data.samples.iter().filter(|x| x.domain_id == 1).cloned().collect();
    assert_eq!(evaluate(&outcome.model, &test, 4).unwrap().overall, s.test);
}

#[test]
fn lodo_and_sweep_tables_cover_every_fold() {
    let data = tiny_data(2, 4);
    let cfg = short(TrainConfig::default(), 2);
    let mut steps = 0;
    let table = run_lodo(&data, &tiny_backbone(), &cfg, &mut |_, _| {
        steps += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, 4);
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.to_csv().unwrap().lines().count(), 3);

    let sweep = sweep_lambda(&data, &tiny_backbone(), &cfg, &[0.5, 1.0], &mut |_, _, _| Ok(())).unwrap();
    assert_eq!(sweep.rows.len(), 2);
    assert!(sweep.rows.iter().all(|r| r.per_domain_dsc.len() == 2));
    assert_eq!(
        sweep.rows[1].per_domain_dsc,
        table.rows.iter().map(|r| r.test.mean_dsc).collect::<Vec<_>>()
    );
    assert!(sweep_lambda(&data, &tiny_backbone(), &cfg, &[], &mut |_, _, _| Ok(())).is_err());
}
