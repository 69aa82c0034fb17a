//! Evaluation quantities: empirical robustness (mean minimum perturbation
//! fraction over attacked samples), adversarial-gradient amplitude
//! histograms, prediction confidence, and accuracy variation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::attack::CampaignRecord;
use crate::nn::Model;
use crate::train::{dataset_accuracy, LabeledDataset};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    /// Per covered sample: min over successful targets of
    /// features_changed / input_dimension.
    pub per_sample_min_perturbation: Vec<f64>,
    /// Mean of the minima over covered samples.
    pub robustness: f64,
    /// Samples where at least one target succeeded.
    pub coverage: usize,
    pub sample_count: usize,
}

/// Empirical robustness from a campaign's results. Distance is the fraction
/// of features altered; samples with no successful target are excluded from
/// the mean and reported via `coverage`.
pub fn robustness(records: &[CampaignRecord], input_dimension: usize) -> Result<RobustnessReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "robustness: empty campaign result set".into(),
        ));
    }
    // BTreeMap keeps the grouping independent of record order.
    let mut per_sample: BTreeMap<usize, Option<usize>> = BTreeMap::new();
    for r in records {
        let slot = per_sample.entry(r.sample_id).or_insert(None);
        if r.result.success {
            let c = r.result.features_changed;
            *slot = Some(slot.map_or(c, |prev| prev.min(c)));
        }
    }
    let sample_count = per_sample.len();
    let minima: Vec<f64> = per_sample
        .values()
        .filter_map(|v| v.map(|c| c as f64 / input_dimension as f64))
        .collect();
    let coverage = minima.len();
    let robustness = if coverage == 0 {
        0.0
    } else {
        minima.iter().sum::<f64>() / coverage as f64
    };
    Ok(RobustnessReport {
        per_sample_min_perturbation: minima,
        robustness,
        coverage,
        sample_count,
    })
}

/// Ascending lower edges of the 10 amplitude bins; bin 0 holds amplitudes
/// below 1e-40, bin 9 holds amplitudes of 1e-3 and above.
pub const GRADIENT_BIN_EDGES: [f64; 10] = [
    0.0, 1e-40, 1e-35, 1e-30, 1e-25, 1e-20, 1e-15, 1e-10, 1e-6, 1e-3,
];

#[derive(Debug, Clone, Serialize)]
pub struct GradientHistogram {
    pub bin_edges: [f64; 10],
    pub counts: [usize; 10],
    pub sample_count: usize,
}

impl GradientHistogram {
    pub fn bin_index(amplitude: f64) -> usize {
        let mut idx = 0;
        for (i, &edge) in GRADIENT_BIN_EDGES.iter().enumerate().skip(1) {
            if amplitude >= edge {
                idx = i;
            }
        }
        idx
    }

    /// Bin index of the median sample (lower median for even counts).
    pub fn median_bin_index(&self) -> usize {
        let half = self.sample_count.div_ceil(2);
        let mut seen = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= half {
                return i;
            }
        }
        self.counts.len() - 1
    }
}

/// Bins each sample by its mean |dF_i/dX_j| at temperature 1.
pub fn gradient_histogram(model: &Model, samples: &[Tensor]) -> Result<GradientHistogram> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "gradient_histogram: no samples".into(),
        ));
    }
    let mut counts = [0usize; 10];
    for x in samples {
        let amp = model.mean_abs_input_gradient(x)? as f64;
        counts[GradientHistogram::bin_index(amp)] += 1;
    }
    Ok(GradientHistogram {
        bin_edges: GRADIENT_BIN_EDGES,
        counts,
        sample_count: samples.len(),
    })
}

/// Mean |J| per sample at temperature 1, in sample order.
pub fn mean_gradient_amplitudes(model: &Model, samples: &[Tensor]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|x| model.mean_abs_input_gradient(x).map(|v| v as f64))
        .collect()
}

/// Lower median of a value list.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[(v.len() - 1) / 2]
}

/// Mean prediction confidence C(X): 0 when misclassified, otherwise the max
/// predicted probability at temperature 1.
pub fn confidence(model: &Model, samples: &LabeledDataset) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("confidence: no samples".into()));
    }
    let truth = samples.hard_label_indices();
    let mut acc = 0.0f64;
    for (x, &t) in samples.inputs.iter().zip(&truth) {
        let p = model.predict(x, Some(1.0))?;
        let arg = p.argmax();
        if arg == t {
            acc += p.data()[arg] as f64;
        }
    }
    Ok(acc / samples.len() as f64)
}

/// Argmax match rate at temperature 1.
pub fn accuracy(model: &Model, samples: &LabeledDataset) -> Result<f64> {
    dataset_accuracy(model, samples)
}

/// Signed difference: distilled minus baseline.
pub fn accuracy_variation(baseline: f64, distilled: f64) -> f64 {
    distilled - baseline
}
