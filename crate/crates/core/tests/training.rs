use csifb::channelgen::{generate, Dataset, GenConfig, Split};
use csifb::harness::{evaluate, loss, train, warmup_transform, CsiModel, ModelConfig, TrainConfig};

fn data(seed: u64, count: usize, split: Split) -> Dataset {
    generate(&GenConfig { seed, ..GenConfig::desk() }, count, split).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        t_unroll: 3,
        epochs: 2,
        batch_size: 16,
        seed: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let model = CsiModel::new(ModelConfig::desk(), 1).unwrap();
    let cfg = TrainConfig { lr: 0.0, epochs: 1, ..small_cfg() };
    let out = train(model.clone(), &cfg, &data(1, 32, Split::Train), &data(2, 8, Split::Val)).unwrap();
    assert_eq!(out.best.to_store().iter().count(), model.to_store().iter().count());
    for ((ka, a), (kb, b)) in out.best.to_store().iter().zip(model.to_store().iter()) {
        assert_eq!(ka, kb);
        assert_eq!(a.data(), b.data(), "{ka}");
    }
}

#[test]
fn seeded_training_is_reproducible() {
    let (tr, va) = (data(3, 48, Split::Train), data(4, 8, Split::Val));
    let run = || train(CsiModel::new(ModelConfig::desk(), 2).unwrap(), &small_cfg(), &tr, &va).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
}

#[test]
fn training_lowers_the_loss() {
    let (tr, va) = (data(5, 96, Split::Train), data(6, 16, Split::Val));
    let h: Vec<f64> = tr.samples.iter().flat_map(|s| s.h_vec.iter().copied()).collect();
    let model = CsiModel::new(ModelConfig::desk(), 3).unwrap();
    let before = loss(&model, &h, 3, 0.01, 0).unwrap().total;
    let cfg = TrainConfig { epochs: 4, ..small_cfg() };
    let out = train(model, &cfg, &tr, &va).unwrap();
    let after = loss(&out.best, &h, 3, 0.01, 0).unwrap().total;
    assert!(after < before, "{after} >= {before}");
    assert!(out.history.iter().all(|e| e.val_nmse_db.is_finite()));
}

#[test]
fn warmup_fits_the_transform_pair() {
    let tr = data(7, 64, Split::Train);
    let mut model = CsiModel::new(ModelConfig::desk(), 4).unwrap();
    let cfg = TrainConfig { warmup_epochs: 20, ..small_cfg() };
    let hist = warmup_transform(&mut model, &cfg, &tr).unwrap();
    assert_eq!(hist.len(), 20);
    assert!(hist[19] < 0.5 * hist[0], "{hist:?}");
    let encoder_before = CsiModel::new(ModelConfig::desk(), 4).unwrap().encoder;
    assert_eq!(model.encoder, encoder_before);

    let mut plain = CsiModel::new(ModelConfig { transform: None, ..ModelConfig::desk() }, 4).unwrap();
    assert!(warmup_transform(&mut plain, &cfg, &tr).unwrap().is_empty());
}

#[test]
fn batch_loss_matches_per_sample_sums() {
    let model = CsiModel::new(ModelConfig::desk(), 5).unwrap();
    let d = data(8, 2, Split::Train);
    let both: Vec<f64> = d.samples.iter().flat_map(|s| s.h_vec.iter().copied()).collect();
    let beta = 0.7;
    let got = loss(&model, &both, 3, beta, 0).unwrap();

    let codes = model.encode_batch(&both).unwrap();
    let est = model.decode_batch(&codes, 3, 0).unwrap().x;
    let t = model.transform.as_ref().unwrap();
    let (mut recon, mut trans) = (0.0, 0.0);
    for (i, s) in d.samples.iter().enumerate() {
        let x = &est[i * 128..(i + 1) * 128];
        recon += s.h_vec.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let planes = s.h_trunc();
        for r in 0..8 {
            let row: Vec<f64> = (0..2).flat_map(|p| (0..8).map(move |k| (p, k))).map(|(p, k)| planes[[p, r, k]]).collect();
            let back = t.apply_fi(&t.apply_ft(&row).unwrap()).unwrap();
            trans += row.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    let want = 0.5 * (recon + beta * trans);
    assert!((got.recon - 0.5 * recon).abs() < 1e-10 * recon, "{} vs {}", got.recon, 0.5 * recon);
    assert!((got.transform - 0.5 * trans).abs() < 1e-10 * trans);
    assert!((got.total - want).abs() < 1e-10 * want);
}

#[test]
fn untrained_model_evaluates_to_finite_nmse() {
    let model = CsiModel::new(ModelConfig::desk(), 6).unwrap();
    let r = evaluate(&model, &data(9, 10, Split::Test), 10, 0).unwrap();
    assert!(r.nmse_db.is_finite());
    assert_eq!(r.trace.len(), 10);
    assert_eq!(r.complexity.encoder_flops, 32 * 128);
}
