use super::{shape_err, FeatureGrid, NnError, Real};
use crate::scene::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub scalar: f64,
    pub valid_pixel_count: usize,
}

/// Per-cell label counts `[cell * classes + class]` for labels that are
/// `upsample` times larger than the grid.
pub fn cell_histograms(
    target: &LabelMap,
    grid_h: usize,
    grid_w: usize,
    upsample: usize,
    classes: usize,
) -> Result<Vec<u32>, NnError> {
    if target.height != grid_h * upsample || target.width != grid_w * upsample {
        return Err(shape_err(
            "softmax_xent",
            format!("{}x{} labels", grid_h * upsample, grid_w * upsample),
            format!("{}x{}", target.height, target.width),
        ));
    }
    let mut hist = vec![0u32; grid_h * grid_w * classes];
    for y in 0..target.height {
        let row = &target.labels[y * target.width..(y + 1) * target.width];
        let cy = y / upsample;
        for (x, &l) in row.iter().enumerate() {
            if l as usize >= classes {
                return Err(NnError::LabelRange { label: l, classes });
            }
            hist[(cy * grid_w + x / upsample) * classes + l as usize] += 1;
        }
    }
    Ok(hist)
}

/// Mean per-pixel cross-entropy of nearest-neighbor upsampled logits.
///
/// Returns the loss and its gradient with respect to `logits`.
pub fn softmax_xent<T: Real>(
    logits: &FeatureGrid<T>,
    target: &LabelMap,
    upsample: usize,
) -> Result<(LossValue, FeatureGrid<T>), NnError> {
    let classes = logits.channels;
    let hist = cell_histograms(target, logits.height, logits.width, upsample, classes)?;
    let n = logits.cells();
    let pixels = target.labels.len();
    let inv_n = T::of(1.0 / pixels as f64);
    let mut grad = FeatureGrid::zeros(classes, logits.height, logits.width);
    let mut total = T::zero();
    let mut probs = vec![T::zero(); classes];
    for cell in 0..n {
        let counts = &hist[cell * classes..(cell + 1) * classes];
        let mut max = logits.data[cell];
        for c in 1..classes {
            max = max.max(logits.data[c * n + cell]);
        }
        let mut z = T::zero();
        for (c, p) in probs.iter_mut().enumerate() {
            *p = (logits.data[c * n + cell] - max).exp();
            z = z + *p;
        }
        let lse = max + z.ln();
        let cell_count = T::of(counts.iter().sum::<u32>() as f64);
        for c in 0..classes {
            let k = T::of(counts[c] as f64);
            if counts[c] > 0 {
                total = total + k * (lse - logits.data[c * n + cell]);
            }
            grad.data[c * n + cell] = (cell_count * probs[c] / z - k) * inv_n;
        }
    }
    let scalar = (total * inv_n).f64();
    Ok((
        LossValue {
            scalar: scalar.max(0.0),
            valid_pixel_count: pixels,
        },
        grad,
    ))
}

/// Winning class per cell, ties to the lower index.
pub fn argmax_cells<T: Real>(logits: &FeatureGrid<T>) -> Vec<u8> {
    let n = logits.cells();
    (0..n)
        .map(|cell| {
            let mut best = 0;
            for c in 1..logits.channels {
                if logits.data[c * n + cell] > logits.data[best * n + cell] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
