//! The local segmenter, the delay-conditioned remote predictor, and their
//! early-fusion composition, plus staged training loops.

mod fused;
mod local;
pub mod probes;
mod remote;
pub mod train;

pub use fused::{fused_forward, FusedModel};
pub use local::{local_forward, LocalModel, LocalPass, LocalSpec};
pub use remote::{remote_forward, remote_head, RemoteModel, RemotePass, RemoteScope, RemoteSpec};

use crate::nnkit::{argmax_cells, FeatureGrid, Real};
use crate::scene::{Frame, LabelMap};

/// Pixel patch edge for both encoders.
pub const PATCH: usize = 8;

/// Delay-conditioned remote output, shaped exactly like local stage-1 features.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteFeatures {
    pub grid: FeatureGrid<f32>,
    /// Index of the newest frame the remote model saw.
    pub basis_index: u64,
    pub delay_frames_used: u8,
    pub produced_ts_us: u64,
}

/// The `K` most recent frames ending at `basis_index`, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    pub frames: Vec<Frame>,
    pub basis_index: u64,
}

impl FrameWindow {
    /// Collect frames `basis - k + 1 ..= basis`, zero-filling indices that are
    /// negative or unavailable.
    pub fn gather(
        basis_index: u64,
        k: usize,
        width: usize,
        height: usize,
        mut fetch: impl FnMut(u64) -> Option<Frame>,
    ) -> Self {
        let frames = (0..k)
            .map(|i| {
                let back = (k - 1 - i) as u64;
                basis_index
                    .checked_sub(back)
                    .and_then(&mut fetch)
                    .unwrap_or_else(|| {
                        let mut f = Frame::blank(width, height);
                        f.capture_index = basis_index.saturating_sub(back);
                        f
                    })
            })
            .collect();
        Self { frames, basis_index }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Argmax per cell, upsampled by nearest neighbor to a full label map.
pub fn predict_labels<T: Real>(logits: &FeatureGrid<T>, upsample: usize, capture_index: u64) -> LabelMap {
    let cells = argmax_cells(logits);
    let (w, h) = (logits.width * upsample, logits.height * upsample);
    let mut labels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = cells[(y / upsample) * logits.width + x / upsample];
        }
    }
    LabelMap {
        capture_index,
        width: w,
        height: h,
        labels,
    }
}

/// Clamp a requested delay to the embedding table.
pub fn clamp_delay(delay: usize, max_delay: usize) -> usize {
    delay.min(max_delay)
}

/// Local-model input: the frame downsampled on the device.
pub fn local_input(frame: &Frame, downsample: usize) -> crate::error::Result<Frame> {
    Ok(crate::scene::degrade_uplink(frame, downsample, 8)?)
}

/// Remote-model input: the frame as received over the quantizing uplink.
pub fn remote_input(frame: &Frame, quant_bits: u8) -> crate::error::Result<Frame> {
    Ok(crate::scene::degrade_uplink(frame, 1, quant_bits)?)
}
