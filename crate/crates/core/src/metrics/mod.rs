//! Segmentation scoring, the delay-mismatch matrix, and jitter expectation.

pub mod sweep;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::scene::LabelMap;

/// Pixel counts indexed `[truth * classes + predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    pub class_count: usize,
    pub matrix: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            matrix: vec![0; class_count * class_count],
        }
    }

    pub fn record(&mut self, truth: u8, predicted: u8) {
        self.matrix[truth as usize * self.class_count + predicted as usize] += 1;
    }

    /// Score a full prediction against its labels.
    pub fn add(&mut self, predicted: &LabelMap, truth: &LabelMap) -> Result<()> {
        if predicted.width != truth.width || predicted.height != truth.height {
            return Err(Error::Metric(format!(
                "prediction is {}x{}, labels are {}x{}",
                predicted.width, predicted.height, truth.width, truth.height
            )));
        }
        for (&p, &t) in predicted.labels.iter().zip(&truth.labels) {
            if p as usize >= self.class_count || t as usize >= self.class_count {
                return Err(Error::Metric(format!("label {} outside {} classes", p.max(t), self.class_count)));
            }
            self.record(t, p);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().sum()
    }

    /// Per-class IoU; `None` for classes absent from both truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let n = self.class_count;
        (0..n)
            .map(|c| {
                let tp = self.matrix[c * n + c];
                let row: u64 = self.matrix[c * n..(c + 1) * n].iter().sum();
                let col: u64 = (0..n).map(|r| self.matrix[r * n + c]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes present in truth or prediction.
pub fn miou(acc: &ConfusionAccumulator) -> Result<f64> {
    if acc.total() == 0 {
        return Err(Error::Metric("no scored pixels".into()));
    }
    let ious: Vec<f64> = acc.class_iou().into_iter().flatten().collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// mIoU of a sequence of (prediction, truth) pairs.
pub fn score_pairs<'a>(
    class_count: usize,
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
) -> Result<f64> {
    let mut acc = ConfusionAccumulator::new(class_count);
    for (p, t) in pairs {
        acc.add(p, t)?;
    }
    miou(&acc)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// mIoU by observed delay (rows) and delay input (columns), both in frames.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMatrix {
    pub observed: Vec<usize>,
    pub input: Vec<usize>,
    /// Row-major `[observed][input]`.
    pub values: Vec<f64>,
}

impl DelayMatrix {
    pub fn new(observed: Vec<usize>, input: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if values.len() != observed.len() * input.len() || observed.is_empty() || input.is_empty() {
            return Err(Error::Metric("delay matrix dimensions do not match".into()));
        }
        Ok(Self {
            observed,
            input,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.input.len() + col]
    }

    pub fn rows(&self) -> usize {
        self.observed.len()
    }

    pub fn cols(&self) -> usize {
        self.input.len()
    }

    /// Column index holding the best value in `row` (first on ties).
    pub fn row_argmax(&self, row: usize) -> usize {
        (0..self.cols()).fold(0, |best, c| if self.get(row, c) > self.get(row, best) { c } else { best })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("obs\\in");
        for c in &self.input {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for (r, o) in self.observed.iter().enumerate() {
            s.push_str(&o.to_string());
            for c in 0..self.cols() {
                s.push_str(&format!(",{:.6}", self.get(r, c)));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterSpec {
    /// Delay input, in frames; also the mean observed delay.
    pub tau_in: usize,
    pub sigma_ms: f64,
    pub frame_period_ms: f64,
}

/// Probability of each observed-delay row under `N(tau_in * T, sigma^2)`,
/// binned at `(d +/- 0.5) * T` with tails folded into the first and last rows.
pub fn binned_pmf(rows: usize, spec: &JitterSpec) -> Vec<f64> {
    let mut p = vec![0.0; rows];
    if rows == 0 {
        return p;
    }
    let mu = spec.tau_in as f64 * spec.frame_period_ms;
    if spec.sigma_ms == 0.0 {
        p[spec.tau_in.min(rows - 1)] = 1.0;
        return p;
    }
    let cdf = |edge: f64| normal_cdf((edge - mu) / spec.sigma_ms);
    let edges: Vec<f64> = (1..rows).map(|d| cdf((d as f64 - 0.5) * spec.frame_period_ms)).collect();
    for d in 0..rows {
        let lo = if d == 0 { 0.0 } else { edges[d - 1] };
        let hi = if d == rows - 1 { 1.0 } else { edges[d] };
        p[d] = hi - lo;
    }
    p
}

/// Expected mIoU at delay input `tau_in` when the observed delay jitters.
pub fn jitter_expectation(m: &DelayMatrix, spec: &JitterSpec) -> Result<f64> {
    let col = m
        .input
        .iter()
        .position(|&d| d == spec.tau_in)
        .ok_or_else(|| Error::Metric(format!("delay input {} not in matrix", spec.tau_in)))?;
    check_rows(m)?;
    let pmf = binned_pmf(m.rows(), spec);
    Ok(pmf.iter().enumerate().map(|(r, p)| p * m.get(r, col)).sum())
}

/// The same expectation estimated from `samples` normal delays, each rounded
/// to the nearest frame and clamped to the matrix rows.
pub fn jitter_monte_carlo(m: &DelayMatrix, spec: &JitterSpec, samples: usize, seed: u64) -> Result<f64> {
    let col = m
        .input
        .iter()
        .position(|&d| d == spec.tau_in)
        .ok_or_else(|| Error::Metric(format!("delay input {} not in matrix", spec.tau_in)))?;
    check_rows(m)?;
    let mu = spec.tau_in as f64 * spec.frame_period_ms;
    let normal = Normal::new(mu, spec.sigma_ms).map_err(|e| Error::Metric(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = (m.rows() - 1) as f64;
    let mut counts = vec![0u64; m.rows()];
    for _ in 0..samples {
        let d = (normal.sample(&mut rng) / spec.frame_period_ms).round().clamp(0.0, last);
        counts[d as usize] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(r, &c)| c as f64 * m.get(r, col))
        .sum::<f64>()
        / samples as f64)
}

fn check_rows(m: &DelayMatrix) -> Result<()> {
    if m.observed.iter().enumerate().any(|(i, &d)| d != i) {
        return Err(Error::Metric("observed rows must be 0..R".into()));
    }
    Ok(())
}
