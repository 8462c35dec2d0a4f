use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{tensor_infos, Checkpoint, CheckpointHeader};
use super::config::{Positives, TrainConfig};
use super::eval::{evaluate, Classifier, Evaluation};
use super::ledger::{EpochRecord, RunLedger, StepRecord};
use super::optim::{AdamW, CosineSchedule};
use super::scoring::score_grid;
use crate::dataset::{batch_order, Dataset, SampleRecord, Split};
use crate::encoders::{DualEncoder, TokenizedText, Tokenizer};
use crate::error::{Error, Result};
use crate::losses::{objective, BatchScoreSet, LossWeights, PositivePairMask};
use crate::nn::{ParamSet, Scalar};
use crate::simkernel::ScorerConfig;
use crate::textaug::{standard_caption, CaptionMode, DescriptionBank};

/// Sampler stream reserved for picking the fixed train-accuracy subset.
const TRAIN_EVAL_STREAM: u64 = u64::MAX;

/// Per-class caption under `mode`.
pub fn class_captions(classes: &[String], bank: Option<&DescriptionBank>, mode: CaptionMode) -> Result<Vec<String>> {
    match bank {
        Some(b) => {
            b.check_covers(classes)?;
            b.captions(classes, mode)
        }
        None if mode == CaptionMode::Standard => Ok(classes.iter().map(|c| standard_caption(c)).collect()),
        None => Err(Error::validation("augmented captions need a description bank")),
    }
}

/// Owns the model and optimizer state of one run over a borrowed dataset.
pub struct Trainer<'d, F: Scalar> {
    pub config: TrainConfig,
    pub model: DualEncoder<F>,
    pub optimizer: AdamW<F>,
    pub ledger: RunLedger,
    dataset: &'d Dataset,
    captions: Vec<String>,
    class_tokens: Vec<TokenizedText>,
    scorer: ScorerConfig,
    weights: LossWeights,
    schedule: CosineSchedule,
    steps_per_epoch: u64,
    step: u64,
    grads: ParamSet<F>,
    epoch_cache: Option<(u64, Vec<Vec<usize>>)>,
}

impl<'d, F: Scalar> Trainer<'d, F> {
    pub fn new(config: TrainConfig, dataset: &'d Dataset, bank: Option<&DescriptionBank>) -> Result<Self> {
        config.validate()?;
        let captions = class_captions(&dataset.classes, bank, config.caption_mode)?;
        let mut corpus = captions.clone();
        if let Some(b) = bank {
            let other = match config.caption_mode {
                CaptionMode::Standard => CaptionMode::Augmented,
                CaptionMode::Augmented => CaptionMode::Standard,
            };
            corpus.extend(b.captions(&dataset.classes, other)?);
        }
        let tokenizer = Tokenizer::build(
            corpus.iter().map(String::as_str),
            config.encoder.text.vocab_size,
            config.encoder.text.max_tokens,
        )?;
        let model = DualEncoder::new(config.encoder.clone(), tokenizer, config.temperature, config.seed)?;
        let optimizer = AdamW::new(&model.params, config.weight_decay);
        let ledger = RunLedger::new(config.clone());
        Self::assemble(config, model, optimizer, ledger, dataset, captions, 0)
    }

    /// Continues a run from a checkpoint taken on the same dataset.
    pub fn resume(ckpt: &Checkpoint<F>, dataset: &'d Dataset) -> Result<Self> {
        let h = &ckpt.header;
        if h.classes != dataset.classes {
            return Err(Error::validation("checkpoint classes differ from the dataset classes"));
        }
        let model = ckpt.model()?;
        Self::assemble(
            h.config.clone(),
            model,
            ckpt.optimizer.clone(),
            h.ledger.clone(),
            dataset,
            h.captions.clone(),
            h.step,
        )
    }

    fn assemble(
        config: TrainConfig,
        model: DualEncoder<F>,
        optimizer: AdamW<F>,
        ledger: RunLedger,
        dataset: &'d Dataset,
        captions: Vec<String>,
        step: u64,
    ) -> Result<Self> {
        let n = dataset.train.len();
        if config.batch_size > n {
            return Err(Error::validation(format!(
                "batch_size {} exceeds the {n} training samples",
                config.batch_size
            )));
        }
        let class_tokens = captions
            .iter()
            .map(|c| model.tokenize(c))
            .collect::<Result<Vec<_>>>()?;
        for t in &class_tokens {
            if t.truncated {
                log::warn!("a label caption was truncated to {} tokens", t.ids.len());
            }
        }
        let steps_per_epoch = (n / config.batch_size) as u64;
        let total = steps_per_epoch * config.epochs as u64;
        Ok(Self {
            scorer: config.scorer_config()?,
            weights: config.weights()?,
            schedule: CosineSchedule {
                lr_init: config.lr,
                total_steps: total,
            },
            grads: model.params.zeros_like(),
            config,
            model,
            optimizer,
            ledger,
            dataset,
            captions,
            class_tokens,
            steps_per_epoch,
            step,
            epoch_cache: None,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }

    pub fn class_tokens(&self) -> &[TokenizedText] {
        &self.class_tokens
    }

    pub fn scorer(&self) -> ScorerConfig {
        self.scorer
    }

    fn batch_indices(&mut self, epoch: u64, pos: u64) -> Result<Vec<usize>> {
        if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let order = batch_order(self.dataset.train.len(), self.config.batch_size, self.config.seed, epoch, true)?;
            self.epoch_cache = Some((epoch, order));
        }
        Ok(self.epoch_cache.as_ref().expect("filled above").1[pos as usize].clone())
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_finished() {
            return Err(Error::validation("the run has already completed every step"));
        }
        let epoch = self.step / self.steps_per_epoch;
        let pos = self.step % self.steps_per_epoch;
        let indices = self.batch_indices(epoch, pos)?;
        let samples: Vec<&SampleRecord> = indices.iter().map(|&i| &self.dataset.train[i]).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label_id).collect();
        let n_classes = self.dataset.n_classes();

        // Each distinct caption is encoded once; batch captions of one class
        // are identical, so their score columns are shared.
        let present: BTreeSet<usize> = labels.iter().copied().collect();
        let cols: Vec<usize> = if self.config.use_ic {
            (0..n_classes).collect()
        } else {
            present.iter().copied().collect()
        };
        let mut col_of = vec![usize::MAX; n_classes];
        for (i, &c) in cols.iter().enumerate() {
            col_of[c] = i;
        }

        let pixels: Vec<_> = samples.iter().map(|s| s.pixels()).collect();
        let views: Vec<_> = pixels.iter().map(|p| p.view()).collect();
        let img = self.model.encode_images(&views)?;
        let texts: Vec<&TokenizedText> = cols.iter().map(|&c| &self.class_tokens[c]).collect();
        let txt = self.model.encode_texts(&texts)?;
        let (grid, _) = score_grid(&img, &txt, &self.scorer, None)?;

        let b = labels.len();
        let s_it = Array2::from_shape_fn((b, b), |(k, j)| grid[[k, col_of[labels[j]]]]);
        let s_label = if self.config.use_ic {
            assert_eq!(grid.ncols(), n_classes, "categorical logits must cover every class");
            Some(grid.clone())
        } else {
            None
        };
        let label_columns = s_label.as_ref().map_or(0, Array2::ncols);
        let tau = self.model.logit_scale();
        let scores = BatchScoreSet::symmetric(s_it, s_label, tau)?;
        let mask = match self.config.positives {
            Positives::SameLabel => PositivePairMask::from_labels(&labels),
            Positives::Diagonal => PositivePairMask::diagonal(&labels),
        }
        .with_normalization(self.config.q_normalization);
        let obj = objective(&scores, &mask, self.weights)?;
        if !obj.total.is_finite() {
            return Err(self.non_finite(epoch, pos, &indices, format!("loss {}", obj.total)));
        }

        let mut d_grid = obj.grads.s_label.clone().unwrap_or_else(|| Array2::zeros(grid.dim()));
        for k in 0..b {
            for j in 0..b {
                d_grid[[k, col_of[labels[j]]]] += obj.grads.s_it[[k, j]] + obj.grads.s_ti[[j, k]];
            }
        }
        let (_, g) = score_grid(&img, &txt, &self.scorer, Some(&d_grid))?;
        let g = g.expect("gradients requested");
        self.grads.fill_zero();
        self.model.image.backward(&self.model.params, &img, &g.images, &mut self.grads);
        self.model.text.backward(&self.model.params, &txt, &g.texts, &mut self.grads);
        let ls = self.model.logit_scale_id();
        self.grads.get_mut(ls)[[0, 0]] = F::of(tau * obj.grads.temperature);
        if !self.grads.all_finite() {
            return Err(self.non_finite(epoch, pos, &indices, "non-finite gradient".into()));
        }

        let lr = self.schedule.lr(self.step);
        self.optimizer.step(&mut self.model.params, &self.grads, lr);
        self.model.clamp_logit_scale();

        let record = StepRecord {
            step: self.step,
            epoch,
            batch: pos,
            l_con: obj.l_con,
            l_cat: obj.l_cat,
            l_total: obj.total,
            temperature: tau,
            lr,
            label_columns,
            batch_classes: present.len(),
        };
        self.ledger.steps.push(record.clone());
        self.step += 1;
        if self.step % self.steps_per_epoch == 0 && self.config.eval_every_epoch {
            self.record_epoch(epoch)?;
        }
        Ok(record)
    }

    fn non_finite(&self, epoch: u64, pos: u64, indices: &[usize], what: String) -> Error {
        Error::NonFinite {
            step: self.step,
            batch_id: epoch * self.steps_per_epoch + pos,
            detail: format!("{what}; epoch {epoch} batch {pos}, train samples {indices:?}"),
        }
    }

    fn record_epoch(&mut self, epoch: u64) -> Result<()> {
        let train = self.train_eval_subset();
        let train_accuracy = if train.is_empty() {
            None
        } else {
            Some(self.evaluate_samples(&train)?.accuracy)
        };
        let test: Vec<&SampleRecord> = self.dataset.test.iter().collect();
        let test_accuracy = if test.is_empty() {
            None
        } else {
            Some(self.evaluate_samples(&test)?.accuracy)
        };
        self.ledger.epochs.push(EpochRecord {
            epoch,
            train_accuracy,
            test_accuracy,
        });
        Ok(())
    }

    /// Fixed seeded subset of the train split, in dataset order.
    fn train_eval_subset(&self) -> Vec<&'d SampleRecord> {
        let n = self.dataset.train.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(TRAIN_EVAL_STREAM);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(self.config.train_eval_samples.min(n));
        idx.sort_unstable();
        let train = &self.dataset.train;
        idx.into_iter().map(|i| &train[i]).collect()
    }

    pub fn classifier(&self) -> Result<Classifier<'_, F>> {
        Classifier::new(&self.model, self.scorer, &self.class_tokens)
    }

    pub fn evaluate_samples(&self, samples: &[&SampleRecord]) -> Result<Evaluation> {
        evaluate(&self.classifier()?, &self.dataset.classes, samples)
    }

    pub fn evaluate(&self, split: Split) -> Result<Evaluation> {
        let samples: Vec<&SampleRecord> = self.dataset.split(split).iter().collect();
        self.evaluate_samples(&samples)
    }

    /// Steps until `total_steps` (or `max_steps` more), then records the
    /// final test confusion matrix if the run is complete.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<()> {
        let start = Instant::now();
        let mut done = 0;
        while !self.is_finished() && max_steps.is_none_or(|m| done < m) {
            let r = self.step()?;
            if r.batch == 0 || self.step % 50 == 0 {
                log::info!(
                    "step {}/{} epoch {} loss {:.4} tau {:.2}",
                    r.step + 1,
                    self.total_steps(),
                    r.epoch,
                    r.l_total,
                    r.temperature
                );
            }
            done += 1;
        }
        if self.is_finished() && !self.dataset.test.is_empty() && self.ledger.confusion.is_none() {
            self.ledger.confusion = Some(self.evaluate(Split::Test)?.confusion);
        }
        self.ledger.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            header: CheckpointHeader {
                dtype: F::DTYPE.to_string(),
                config: self.config.clone(),
                tokenizer: self.model.tokenizer.clone(),
                classes: self.dataset.classes.clone(),
                captions: self.captions.clone(),
                step: self.step,
                total_steps: self.total_steps(),
                adam_t: self.optimizer.t,
                tensors: tensor_infos(&self.model.params),
                ledger: self.ledger.clone(),
            },
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint<f32>,
    pub ledger: RunLedger,
}

/// Trains to completion in single precision.
pub fn train(config: &TrainConfig, dataset: &Dataset, bank: Option<&DescriptionBank>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::<f32>::new(config.clone(), dataset, bank)?;
    trainer.run(None)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        ledger: trainer.ledger,
    })
}
