use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::ConfusionMatrix;
use super::ledger::RunLedger;
use super::trainer::train;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::simkernel::Scorer;
use crate::textaug::{CaptionMode, DescriptionBank};

/// One cell of the grid: matching on/off, categorical branch on/off and the caption mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub fm: bool,
    pub ic: bool,
    pub caption_mode: CaptionMode,
}

impl AblationCell {
    /// All 8 cells, row-major over (fm, ic) then caption mode.
    pub fn grid() -> Vec<Self> {
        let mut cells = Vec::with_capacity(8);
        for fm in [false, true] {
            for ic in [false, true] {
                for caption_mode in [CaptionMode::Standard, CaptionMode::Augmented] {
                    cells.push(Self { fm, ic, caption_mode });
                }
            }
        }
        cells
    }

    /// Matching off means the mean-max baseline scorer.
    pub fn method(&self) -> &'static str {
        match (self.fm, self.ic) {
            (false, false) => "filip",
            (false, true) => "filip+ic",
            (true, false) => "flexible",
            (true, true) => "flexible+ic",
        }
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            scorer: if self.fm { Scorer::Flexible } else { Scorer::Filip },
            use_ic: self.ic,
            caption_mode: self.caption_mode,
            seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub method: String,
    pub fm: bool,
    pub ic: bool,
    pub caption_mode: CaptionMode,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

/// Median of a non-empty slice; even lengths average the middle pair.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub fn median_accuracy(&self, method: &str, mode: CaptionMode) -> Option<f64> {
        let accs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.method == method && r.caption_mode == mode)
            .map(|r| r.accuracy)
            .collect();
        (!accs.is_empty()).then(|| median(&accs))
    }

    /// One line per run.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.runs {
            w.serialize(r).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    /// Median table: one row per method, one column per caption mode.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| method | FM | IC | standard | augmented |\n|---|---|---|---|---|\n");
        let mut seen = Vec::new();
        for r in &self.runs {
            if seen.contains(&r.method) {
                continue;
            }
            seen.push(r.method.clone());
            let cell = |m| {
                self.median_accuracy(&r.method, m)
                    .map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a))
            };
            let tick = |b: bool| if b { "✓" } else { "" };
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.method,
                tick(r.fm),
                tick(r.ic),
                cell(CaptionMode::Standard),
                cell(CaptionMode::Augmented)
            ));
        }
        out
    }
}

/// Trains every config (in parallel) and returns the finished ledgers in input order.
pub fn run_configs(configs: &[TrainConfig], dataset: &Dataset, bank: Option<&DescriptionBank>) -> Result<Vec<RunLedger>> {
    if dataset.test.is_empty() {
        return Err(Error::validation("dataset has no test split to score"));
    }
    configs
        .par_iter()
        .map(|cfg| {
            let out = train(cfg, dataset, bank)?;
            log::info!("finished {cfg} in {:.1}s", out.ledger.wall_clock_secs);
            Ok(out.ledger)
        })
        .collect()
}

/// Final test accuracy of a completed run.
pub fn final_accuracy(ledger: &RunLedger) -> f64 {
    ledger.confusion.as_ref().map_or(f64::NAN, ConfusionMatrix::accuracy)
}

/// The full 2×2×2 grid, each cell trained once per seed.
pub fn ablation_grid(
    base: &TrainConfig,
    dataset: &Dataset,
    bank: &DescriptionBank,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let plan: Vec<(AblationCell, u64)> = AblationCell::grid()
        .into_iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let configs: Vec<TrainConfig> = plan.iter().map(|(c, s)| c.apply(base, *s)).collect();
    let ledgers = run_configs(&configs, dataset, Some(bank))?;
    let runs = plan
        .iter()
        .zip(&ledgers)
        .map(|((cell, seed), ledger)| AblationRun {
            method: cell.method().to_string(),
            fm: cell.fm,
            ic: cell.ic,
            caption_mode: cell.caption_mode,
            seed: *seed,
            accuracy: final_accuracy(ledger),
        })
        .collect();
    Ok(AblationTable { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let cells = AblationCell::grid();
        assert_eq!(cells.len(), 8);
        let base = TrainConfig::default();
        let filip = cells.iter().find(|c| !c.fm && !c.ic).unwrap().apply(&base, 1);
        assert_eq!(filip.scorer, Scorer::Filip);
        assert!(!filip.use_ic);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }

    #[test]
    fn csv_schema() {
        let t = AblationTable {
            runs: vec![AblationRun {
                method: "filip".into(),
                fm: false,
                ic: false,
                caption_mode: CaptionMode::Standard,
                seed: 0,
                accuracy: 0.5,
            }],
        };
        assert!(t.to_csv().starts_with("method,fm,ic,caption_mode,seed,accuracy\n"));
    }
}
