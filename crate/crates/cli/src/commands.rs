use std::fs;
use std::path::Path;

use flexmatch::dataset::{
    generate_synthetic, load_folder_dataset, load_image, write_dataset, Dataset, LoadOptions, Split, SyntheticSpec,
};
use flexmatch::simkernel::MatchingThresholds;
use flexmatch::textaug::{
    fetch_descriptions, CaptionMode, DescriptionBank, DescriptionCache, Provider, RemoteClient, RemoteConfig,
};
use flexmatch::trainpipe::{ablation_grid, evaluate, explain_match, Checkpoint, Classifier, Trainer};
use flexmatch::{Error, Result};

use crate::{
    AblateArgs, AugmentArgs, Command, DataArgs, EvalArgs, GenDataArgs, MatchVizArgs, SplitArg, TrainArgs,
};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::AugmentLabels(a) => augment_labels(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::MatchViz(a) => match_viz(a),
    }
}

/// Creates `out`, refusing a non-empty directory unless forced.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(Error::validation(format!("{} exists and is not a directory", out.display())));
        }
        let occupied = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if occupied && !force {
            return Err(Error::validation(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn put(dir: &Path, name: &str, body: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

fn load_data(data: &DataArgs, image_size: Option<usize>) -> Result<Dataset> {
    let opts = LoadOptions {
        image_size,
        split_seed: data.split_seed,
    };
    load_folder_dataset(&data.data, &opts)
}

/// Descriptions from a fixture, else from a synthetic manifest; required
/// only for augmented captions.
fn resolve_bank(descriptions: Option<&Path>, ds: &Dataset, mode: CaptionMode) -> Result<Option<DescriptionBank>> {
    let provider = match descriptions {
        Some(path) => Provider::Fixture(path.to_path_buf()),
        None if ds.manifest.spec.is_some() => Provider::Synthetic(ds.manifest.clone()),
        None if mode == CaptionMode::Augmented => {
            return Err(Error::validation("augmented captions need --descriptions"));
        }
        None => return Ok(None),
    };
    fetch_descriptions(&ds.classes, &provider).map(Some)
}

fn toml_text(table: toml::Table) -> String {
    toml::to_string(&table).expect("table serializes")
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        n_classes: a.classes.unwrap_or(d.n_classes),
        ingredients_per_class: a.ingredients.unwrap_or(d.ingredients_per_class),
        shared_fraction: a.rho.unwrap_or(d.shared_fraction),
        jitter: a.sigma.unwrap_or(d.jitter),
        train_per_class: a.train_per_class.unwrap_or(d.train_per_class),
        test_per_class: a.test_per_class.unwrap_or(d.test_per_class),
        image_size: a.image_size.unwrap_or(d.image_size),
        seed: a.seed.unwrap_or(d.seed),
    };
    spec.validate()?;
    prepare_out(&a.out.out, a.out.force)?;
    let ds = generate_synthetic(&spec)?;
    // A forced rewrite must not leave class folders from an earlier spec.
    for split in ["train", "test"] {
        let dir = a.out.out.join(split);
        if dir.is_dir() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    write_dataset(&ds, &a.out.out)?;
    put(&a.out.out, CONFIG_SNAPSHOT, toml::to_string(&spec).expect("spec serializes"))?;
    println!(
        "wrote {} classes, {} train and {} test images to {}",
        ds.n_classes(),
        ds.train.len(),
        ds.test.len(),
        a.out.out.display()
    );
    Ok(())
}

fn augment_labels(a: AugmentArgs) -> Result<()> {
    let ds = load_data(&a.data, None)?;
    let mut snapshot = toml::Table::new();
    snapshot.insert("data".into(), a.data.data.display().to_string().into());
    let (provider, model) = if let Some(path) = &a.provider.fixture {
        snapshot.insert("provider".into(), "fixture".into());
        snapshot.insert("fixture".into(), path.display().to_string().into());
        (Provider::Fixture(path.clone()), None)
    } else if a.provider.synthetic {
        snapshot.insert("provider".into(), "synthetic".into());
        (Provider::Synthetic(ds.manifest.clone()), None)
    } else {
        let endpoint = a.provider.endpoint.clone().expect("clap requires one provider");
        snapshot.insert("provider".into(), "remote".into());
        snapshot.insert("endpoint".into(), endpoint.clone().into());
        snapshot.insert("model".into(), a.model.clone().into());
        let mut config = RemoteConfig::new(endpoint, a.model.clone());
        if let Some(var) = &a.token_env {
            snapshot.insert("token_env".into(), var.clone().into());
            config.token_env = var.clone();
        }
        if let Some(path) = &a.fallback {
            snapshot.insert("fallback".into(), path.display().to_string().into());
        }
        let provider = Provider::Remote {
            client: RemoteClient::new(config),
            cache: a.cache.as_ref().map(DescriptionCache::new),
            fallback: a.fallback.clone(),
        };
        (provider, Some(a.model.clone()))
    };
    prepare_out(&a.out.out, a.out.force)?;
    let bank = fetch_descriptions(&ds.classes, &provider)?;
    bank.to_fixture(model).save(&a.out.out.join("descriptions.json"))?;
    let captions = bank.captions(&ds.classes, CaptionMode::Augmented)?;
    put(&a.out.out, "captions.txt", captions.join("\n") + "\n")?;
    put(&a.out.out, CONFIG_SNAPSHOT, toml_text(snapshot))?;
    for caption in &captions {
        println!("{caption}");
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let resumed = a.resume.as_deref().map(Checkpoint::<f32>::load).transpose()?;
    let cfg = match &resumed {
        Some(ckpt) => ckpt.header.config.clone(),
        None => a.config.resolve()?,
    };
    let ds = load_data(&a.data, Some(cfg.encoder.image.image_size))?;
    let bank = resolve_bank(a.descriptions.as_deref(), &ds, cfg.caption_mode)?;
    prepare_out(&a.out.out, a.out.force)?;
    put(&a.out.out, CONFIG_SNAPSHOT, cfg.to_toml())?;
    let mut trainer = match &resumed {
        Some(ckpt) => Trainer::resume(ckpt, &ds)?,
        None => Trainer::<f32>::new(cfg.clone(), &ds, bank.as_ref())?,
    };
    println!("training {cfg} for {} steps", trainer.total_steps() - trainer.step_index());
    trainer.run(None)?;
    for e in &trainer.ledger.epochs {
        if let Some(acc) = e.test_accuracy {
            println!("epoch {} test accuracy {acc:.4}", e.epoch);
        }
    }
    if let Some(c) = &trainer.ledger.confusion {
        println!("final test accuracy {:.4}", c.accuracy());
    }
    trainer.ledger.write(&a.out.out)?;
    trainer.checkpoint().save(&a.out.out.join(CHECKPOINT_FILE))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let ds = load_data(&a.data, Some(model.config.image.image_size))?;
    if ds.classes != ckpt.header.classes {
        return Err(Error::validation("dataset classes differ from the checkpoint classes"));
    }
    let tokens = ckpt
        .header
        .captions
        .iter()
        .map(|c| model.tokenize(c))
        .collect::<Result<Vec<_>>>()?;
    let classifier = Classifier::new(&model, ckpt.header.config.scorer_config()?, &tokens)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let samples: Vec<_> = ds.split(split).iter().collect();
    let result = evaluate(&classifier, &ds.classes, &samples)?;

    prepare_out(&a.out.out, a.out.force)?;
    put(&a.out.out, CONFIG_SNAPSHOT, ckpt.header.config.to_toml())?;
    put(&a.out.out, "confusion.csv", result.confusion.to_csv())?;
    let mut predictions = String::from("index,label,predicted\n");
    for (i, (s, p)) in samples.iter().zip(&result.predictions).enumerate() {
        predictions.push_str(&format!("{i},{},{}\n", s.label_id, p));
    }
    put(&a.out.out, "predictions.csv", predictions)?;
    let mut metrics = toml::Table::new();
    metrics.insert("split".into(), split.name().into());
    metrics.insert("samples".into(), (samples.len() as i64).into());
    metrics.insert("accuracy".into(), result.accuracy.into());
    put(&a.out.out, "metrics.toml", toml_text(metrics))?;
    println!("{} accuracy {:.4} over {} images", split.name(), result.accuracy, samples.len());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let ds = load_data(&a.data, Some(cfg.encoder.image.image_size))?;
    let bank = resolve_bank(a.descriptions.as_deref(), &ds, CaptionMode::Augmented)?
        .expect("augmented mode always resolves a bank");
    prepare_out(&a.out.out, a.out.force)?;
    put(&a.out.out, CONFIG_SNAPSHOT, cfg.to_toml())?;
    let table = ablation_grid(&cfg, &ds, &bank, &a.seeds)?;
    put(&a.out.out, "ablation.csv", table.to_csv())?;
    let markdown = table.to_markdown();
    put(&a.out.out, "ablation.md", &markdown)?;
    print!("{markdown}");
    Ok(())
}

fn match_viz(a: MatchVizArgs) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let cfg = &ckpt.header.config;
    let thresholds = MatchingThresholds::new(
        a.lower.unwrap_or(cfg.lower_threshold),
        a.upper.unwrap_or(cfg.upper_threshold),
    )?;
    let pixels = load_image(&a.image, model.config.image.image_size)?.mapv(|v| f32::from(v) / 255.0);
    let explained = explain_match(&model, pixels.view(), &a.caption, thresholds)?;
    let text = explained.report.to_text(&explained.token_labels);
    print!("{text}");
    println!("image-to-text score {:.6}", explained.score);
    if let Some(out) = &a.out {
        prepare_out(out, a.force)?;
        let mut snapshot = toml::Table::new();
        snapshot.insert("checkpoint".into(), display(&a.checkpoint).into());
        snapshot.insert("image".into(), display(&a.image).into());
        snapshot.insert("caption".into(), a.caption.clone().into());
        snapshot.insert("lower".into(), thresholds.lower.into());
        snapshot.insert("upper".into(), thresholds.upper.into());
        put(out, CONFIG_SNAPSHOT, toml_text(snapshot))?;
        put(out, "report.txt", &text)?;
        put(out, "report.jsonl", explained.report.to_json_lines(&explained.token_labels))?;
    }
    Ok(())
}

fn display(path: &Path) -> String {
    path.display().to_string()
}
