use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::scoring::score_grid;
use crate::dataset::SampleRecord;
use crate::encoders::{DualEncoder, TextForward, TokenizedText};
use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::simkernel::ScorerConfig;

const EVAL_CHUNK: usize = 64;

/// `counts[k][j]`: images of class `k` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(classes: &[String], truth: &[usize], predicted: &[usize]) -> Self {
        let c = classes.len();
        let mut counts = vec![vec![0; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            counts[t][p] += 1;
        }
        Self {
            classes: classes.to_vec(),
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|k| self.counts[k][k]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total().max(1) as f64
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Rows are true classes, columns predictions.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.classes.iter().cloned());
        w.write_record(&header).expect("in-memory csv write");
        for (name, row) in self.classes.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Label-bank classifier over a frozen model.
pub struct Classifier<'m, F: Scalar> {
    model: &'m DualEncoder<F>,
    scorer: ScorerConfig,
    labels: TextForward<F>,
}

impl<'m, F: Scalar> Classifier<'m, F> {
    /// Encodes the label captions once.
    pub fn new(model: &'m DualEncoder<F>, scorer: ScorerConfig, label_tokens: &[TokenizedText]) -> Result<Self> {
        if label_tokens.is_empty() {
            return Err(Error::validation("classifier needs at least one label caption"));
        }
        let refs: Vec<&TokenizedText> = label_tokens.iter().collect();
        let labels = model.encode_texts(&refs)?;
        Ok(Self {
            model,
            scorer,
            labels,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    /// `[images × classes]` scores.
    pub fn scores(&self, images: &[ArrayView3<'_, f32>]) -> Result<Array2<f64>> {
        let fwd = self.model.encode_images(images)?;
        Ok(score_grid(&fwd, &self.labels, &self.scorer, None)?.0)
    }

    pub fn classify(&self, image: ArrayView3<'_, f32>) -> Result<(usize, Vec<f64>)> {
        let scores = self.scores(&[image])?.row(0).to_vec();
        Ok((argmax_lowest(&scores), scores))
    }

    pub fn predict(&self, samples: &[&SampleRecord]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let pixels: Vec<_> = chunk.iter().map(|s| s.pixels()).collect();
            let views: Vec<_> = pixels.iter().map(|p| p.view()).collect();
            let scores = self.scores(&views)?;
            out.extend(scores.rows().into_iter().map(|r| argmax_lowest(r.as_slice().expect("row-major"))));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
}

pub fn evaluate<F: Scalar>(
    classifier: &Classifier<'_, F>,
    classes: &[String],
    samples: &[&SampleRecord],
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty split"));
    }
    let predictions = classifier.predict(samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label_id).collect();
    let confusion = ConfusionMatrix::from_predictions(classes, &truth, &predictions);
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = [0, 1, 2, 2];
        let perfect = ConfusionMatrix::from_predictions(&names(3), &truth, &truth);
        assert_eq!(perfect.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        assert_eq!(perfect.accuracy(), 1.0);
        let constant = ConfusionMatrix::from_predictions(&names(3), &truth, &[1, 1, 1, 1]);
        for row in &constant.counts {
            assert_eq!(row[0] + row[2], 0);
        }
        assert_eq!(constant.row_sums(), vec![1, 1, 2]);
        assert_eq!(constant.accuracy(), 0.25);
    }

    #[test]
    fn ties_pick_lowest() {
        assert_eq!(argmax_lowest(&[0.5, 0.7, 0.7]), 1);
        assert_eq!(argmax_lowest(&[0.1]), 0);
    }

    #[test]
    fn csv_layout() {
        let m = ConfusionMatrix::from_predictions(&names(2), &[0, 1], &[0, 0]);
        assert_eq!(m.to_csv(), "true\\predicted,c0,c1\nc0,1,0\nc1,1,0\n");
    }
}
