use flexmatch::dataset::{batch_order, generate_synthetic, Dataset, Split, SyntheticSpec};
use flexmatch::encoders::{EncoderConfig, ImageEncoderConfig, TextEncoderConfig};
use flexmatch::simkernel::Scorer;
use flexmatch::textaug::{fetch_descriptions, CaptionMode, Provider};
use flexmatch::trainpipe::{
    ablation_grid, train, AblationCell, AdamW, Checkpoint, CosineSchedule, Positives, TrainConfig, Trainer,
};
use ndarray::Array2;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        image: ImageEncoderConfig {
            image_size: 32,
            patch_size: 8,
            dim: 16,
            depth: 1,
            heads: 2,
        },
        text: TextEncoderConfig {
            vocab_size: 256,
            max_tokens: 64,
            dim: 16,
            depth: 1,
            heads: 2,
            causal_mask: true,
        },
        embed_dim: 16,
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr: 1e-3,
        epochs: 2,
        seed: 5,
        train_eval_samples: 16,
        encoder: tiny_encoder(),
        ..TrainConfig::default()
    }
}

fn dataset(n_classes: usize, train: usize, test: usize, rho: f64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_classes,
        shared_fraction: rho,
        train_per_class: train,
        test_per_class: test,
        image_size: 32,
        seed: 2,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn ce(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target]
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Plain CLIP training: every batch caption is encoded separately and the
/// symmetric one-hot cross-entropy is written out by hand.
fn reference_clip_losses(trainer: &Trainer<'_, f64>, ds: &Dataset, steps: u64) -> Vec<f64> {
    let cfg = &trainer.config;
    let mut model = trainer.model.clone();
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let schedule = CosineSchedule {
        lr_init: cfg.lr,
        total_steps: trainer.total_steps(),
    };
    let per_epoch = trainer.steps_per_epoch();
    let tokens = trainer.class_tokens().to_vec();
    let mut losses = Vec::new();
    for step in 0..steps {
        let order = batch_order(ds.train.len(), cfg.batch_size, cfg.seed, step / per_epoch, true).unwrap();
        let batch = &order[(step % per_epoch) as usize];
        let pixels: Vec<_> = batch.iter().map(|&i| ds.train[i].pixels()).collect();
        let views: Vec<_> = pixels.iter().map(|p| p.view()).collect();
        let texts: Vec<_> = batch.iter().map(|&i| &tokens[ds.train[i].label_id]).collect();
        let img = model.encode_images(&views).unwrap();
        let txt = model.encode_texts(&texts).unwrap();
        let b = batch.len();
        let s = Array2::from_shape_fn((b, b), |(k, j)| img.global(k).dot(&txt.global(j)).clamp(-1.0, 1.0));
        let tau = model.logit_scale();

        let mut loss = 0.0;
        let mut d_s = Array2::<f64>::zeros((b, b));
        let mut d_tau = 0.0;
        let w = 0.5 / b as f64;
        for k in 0..b {
            let row: Vec<f64> = (0..b).map(|j| tau * s[[k, j]]).collect();
            loss += w * ce(&row, k);
            for (j, p) in softmax(&row).into_iter().enumerate() {
                let g = w * (p - if j == k { 1.0 } else { 0.0 });
                d_s[[k, j]] += g * tau;
                d_tau += g * s[[k, j]];
            }
        }
        for j in 0..b {
            let col: Vec<f64> = (0..b).map(|k| tau * s[[k, j]]).collect();
            loss += w * ce(&col, j);
            for (k, p) in softmax(&col).into_iter().enumerate() {
                let g = w * (p - if j == k { 1.0 } else { 0.0 });
                d_s[[k, j]] += g * tau;
                d_tau += g * s[[k, j]];
            }
        }
        losses.push(loss);

        let mut d_img = Array2::<f64>::zeros(img.embeddings.dim());
        let mut d_txt = Array2::<f64>::zeros(txt.embeddings.dim());
        for k in 0..b {
            for j in 0..b {
                d_img.row_mut(img.segments[k].start).scaled_add(d_s[[k, j]], &txt.global(j));
                d_txt.row_mut(txt.segments[j].end() - 1).scaled_add(d_s[[k, j]], &img.global(k));
            }
        }
        let mut grads = model.params.zeros_like();
        model.image.backward(&model.params, &img, &d_img, &mut grads);
        model.text.backward(&model.params, &txt, &d_txt, &mut grads);
        grads.get_mut(model.logit_scale_id())[[0, 0]] = tau * d_tau;
        opt.step(&mut model.params, &grads, schedule.lr(step));
        model.clamp_logit_scale();
    }
    losses
}

#[test]
fn deduplicated_clip_objective_matches_plain_clip_training() {
    let ds = dataset(4, 6, 2, 0.6);
    let cfg = TrainConfig {
        scorer: Scorer::Clip,
        use_ic: false,
        m: 1.0,
        n: 0.0,
        positives: Positives::Diagonal,
        eval_every_epoch: false,
        ..tiny_config()
    };
    let mut trainer = Trainer::<f64>::new(cfg, &ds, None).unwrap();
    let steps = 6;
    let reference = reference_clip_losses(&trainer, &ds, steps);
    for (step, want) in reference.iter().enumerate() {
        let got = trainer.step().unwrap();
        assert_eq!(got.l_cat, None);
        assert!(
            (got.l_total - want).abs() <= 1e-10,
            "step {step}: trainer {} vs reference {want}",
            got.l_total
        );
    }
}

#[test]
fn identical_runs_write_identical_ledgers() {
    let ds = dataset(4, 6, 2, 0.6);
    let cfg = tiny_config();
    let a = train(&cfg, &ds, None).unwrap().ledger;
    let b = train(&cfg, &ds, None).unwrap().ledger;
    assert!(!a.steps.is_empty());
    assert_eq!(a.steps_csv().as_bytes(), b.steps_csv().as_bytes());
    assert_eq!(a.epochs_csv().as_bytes(), b.epochs_csv().as_bytes());
    assert_eq!(a.confusion.as_ref().unwrap().to_csv(), b.confusion.as_ref().unwrap().to_csv());

    let other = train(&TrainConfig { seed: 6, ..cfg }, &ds, None).unwrap().ledger;
    assert_ne!(a.steps_csv(), other.steps_csv());
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let ds = dataset(4, 6, 2, 0.6);
    let cfg = tiny_config();
    let mut whole = Trainer::<f32>::new(cfg.clone(), &ds, None).unwrap();
    whole.run(None).unwrap();

    let mut first = Trainer::<f32>::new(cfg, &ds, None).unwrap();
    first.run(Some(4)).unwrap();
    assert_eq!(first.step_index(), 4);
    assert!(first.ledger.confusion.is_none());
    let bytes = first.checkpoint().to_bytes();
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut second = Trainer::resume(&ckpt, &ds).unwrap();
    second.run(None).unwrap();

    assert_eq!(second.ledger.steps_csv(), whole.ledger.steps_csv());
    assert_eq!(second.ledger.epochs_csv(), whole.ledger.epochs_csv());
    assert_eq!(second.ledger.confusion, whole.ledger.confusion);
    assert_eq!(second.model.params, whole.model.params);
}

#[test]
fn checkpoints_round_trip_through_bytes_and_files() {
    let ds = dataset(4, 6, 2, 0.6);
    let out = train(&tiny_config(), &ds, None).unwrap();
    let bytes = out.checkpoint.to_bytes();
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.params, out.checkpoint.params);
    assert_eq!(back.header.classes, ds.classes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), bytes);

    let model = loaded.model().unwrap();
    let original = out.checkpoint.model().unwrap();
    let pixels = ds.test[0].pixels();
    assert_eq!(
        model.encode_image(pixels.view()).unwrap(),
        original.encode_image(pixels.view()).unwrap()
    );

    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
}

#[test]
fn schedule_runs_from_the_initial_rate_down_to_zero() {
    let s = CosineSchedule {
        lr_init: 3e-4,
        total_steps: 50,
    };
    assert_eq!(s.lr(0), 3e-4);
    assert!(s.lr(49).abs() < 1e-18);
    assert!((s.lr(49) - s.lr(80)).abs() < 1e-18);
    assert!((1..50).all(|t| s.lr(t) <= s.lr(t - 1)));
    let single = CosineSchedule {
        lr_init: 0.1,
        total_steps: 1,
    };
    assert_eq!(single.lr(0), 0.1);

    let ds = dataset(4, 6, 2, 0.6);
    let cfg = TrainConfig {
        eval_every_epoch: false,
        ..tiny_config()
    };
    let ledger = train(&cfg, &ds, None).unwrap().ledger;
    assert_eq!(ledger.steps.len() as u64, (24 / 8) * 2);
    assert_eq!(ledger.steps[0].lr, cfg.lr);
    assert!(ledger.steps.last().unwrap().lr.abs() < 1e-18);
}

#[test]
fn confusion_rows_add_up_to_test_counts() {
    let ds = dataset(4, 6, 3, 0.6);
    let ledger = train(&tiny_config(), &ds, None).unwrap().ledger;
    let confusion = ledger.confusion.unwrap();
    let counts: Vec<u64> = ds.class_counts(Split::Test).iter().map(|&c| c as u64).collect();
    assert_eq!(confusion.row_sums(), counts);
    assert_eq!(confusion.total(), ds.test.len() as u64);
    assert_eq!(ledger.epochs.len(), 2);
    assert!(ledger.epochs.iter().all(|e| e.test_accuracy.is_some()));
}

#[test]
fn categorical_logits_cover_every_class_even_when_few_are_batched() {
    let mut ds = dataset(8, 4, 1, 0.6);
    ds.train.retain(|s| s.label_id < 3);
    let mut trainer = Trainer::<f32>::new(tiny_config(), &ds, None).unwrap();
    let mut saw_three = false;
    while !trainer.is_finished() {
        let r = trainer.step().unwrap();
        assert_eq!(r.label_columns, 8);
        assert!(r.batch_classes <= 3);
        assert!(r.l_cat.is_some());
        saw_three |= r.batch_classes == 3;
    }
    assert!(saw_three);

    let cfg = TrainConfig {
        use_ic: false,
        ..tiny_config()
    };
    let mut plain = Trainer::<f32>::new(cfg, &ds, None).unwrap();
    let r = plain.step().unwrap();
    assert_eq!(r.label_columns, 0);
    assert_eq!(r.l_cat, None);
}

#[test]
fn a_single_class_is_always_predicted() {
    let mut ds = dataset(2, 8, 2, 0.6);
    ds.classes.truncate(1);
    ds.train.retain(|s| s.label_id == 0);
    ds.test.retain(|s| s.label_id == 0);
    let trainer = Trainer::<f32>::new(tiny_config(), &ds, None).unwrap();
    let classifier = trainer.classifier().unwrap();
    assert_eq!(classifier.n_classes(), 1);
    let (label, scores) = classifier.classify(ds.test[0].pixels().view()).unwrap();
    assert_eq!((label, scores.len()), (0, 1));
    assert_eq!(trainer.evaluate(Split::Test).unwrap().accuracy, 1.0);
}

#[test]
fn loss_falls_when_classes_share_nothing() {
    let ds = dataset(4, 40, 2, 0.0);
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 20,
        eval_every_epoch: false,
        ..tiny_config()
    };
    let ledger = train(&cfg, &ds, None).unwrap().ledger;
    assert_eq!(ledger.steps.len(), 200);
    let mean = |r: &[flexmatch::trainpipe::StepRecord]| r.iter().map(|s| s.l_total).sum::<f64>() / r.len() as f64;
    let early = mean(&ledger.steps[..20]);
    let late = mean(&ledger.steps[180..]);
    assert!(late < early, "loss went from {early} to {late}");
}

#[test]
fn ablation_grid_trains_every_cell_for_every_seed() {
    assert_eq!(AblationCell::grid().len(), 8);
    let ds = dataset(4, 4, 1, 0.6);
    let bank = fetch_descriptions(&ds.classes, &Provider::Synthetic(ds.manifest.clone())).unwrap();
    let base = TrainConfig {
        epochs: 1,
        eval_every_epoch: false,
        ..tiny_config()
    };
    let table = ablation_grid(&base, &ds, &bank, &[0, 1]).unwrap();
    assert_eq!(table.runs.len(), 16);
    for cell in AblationCell::grid() {
        for mode in [CaptionMode::Standard, CaptionMode::Augmented] {
            if cell.caption_mode == mode {
                assert!(table.median_accuracy(cell.method(), mode).is_some());
            }
        }
        let seeds: Vec<u64> = table
            .runs
            .iter()
            .filter(|r| r.fm == cell.fm && r.ic == cell.ic && r.caption_mode == cell.caption_mode)
            .map(|r| r.seed)
            .collect();
        assert_eq!(seeds, vec![0, 1]);
    }
    assert!(ablation_grid(&base, &ds, &bank, &[]).is_err());
}
