//! Fixed weak classifier used to check that the sharing knob makes classes
//! harder to tell apart: nearest class centroid of color histograms.

use ndarray::{Array1, Array2, Array3};

use super::{Dataset, SampleRecord};

const BINS: usize = 4;

/// Normalized `4×4×4` RGB histogram.
pub fn color_histogram(image: &Array3<u8>) -> Array1<f64> {
    let mut h = Array1::zeros(BINS * BINS * BINS);
    let mut n = 0.0;
    for px in image.rows() {
        let b = |v: u8| usize::from(v) * BINS / 256;
        h[(b(px[0]) * BINS + b(px[1])) * BINS + b(px[2])] += 1.0;
        n += 1.0;
    }
    h / n
}

pub struct NearestCentroid {
    centroids: Array2<f64>,
}

impl NearestCentroid {
    pub fn fit(samples: &[SampleRecord], n_classes: usize) -> Self {
        let mut centroids = Array2::zeros((n_classes, BINS * BINS * BINS));
        let mut counts = vec![0.0; n_classes];
        for s in samples {
            let mut row = centroids.row_mut(s.label_id);
            row += &color_histogram(&s.image);
            counts[s.label_id] += 1.0;
        }
        for (mut row, &c) in centroids.rows_mut().into_iter().zip(&counts) {
            if c > 0.0 {
                row /= c;
            }
        }
        Self { centroids }
    }

    /// Closest centroid; ties go to the lowest label.
    pub fn predict(&self, image: &Array3<u8>) -> usize {
        let h = color_histogram(image);
        let mut best = (f64::INFINITY, 0);
        for (k, c) in self.centroids.rows().into_iter().enumerate() {
            let d = (&c - &h).mapv(|v| v * v).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }
}

/// Test accuracy of a centroid model fitted on the train split.
pub fn centroid_baseline_accuracy(ds: &Dataset) -> f64 {
    let model = NearestCentroid::fit(&ds.train, ds.n_classes());
    let correct = ds.test.iter().filter(|s| model.predict(&s.image) == s.label_id).count();
    correct as f64 / ds.test.len() as f64
}
