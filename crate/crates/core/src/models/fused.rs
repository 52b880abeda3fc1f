use super::{LocalModel, RemoteFeatures, RemoteModel};
use crate::error::Result;
use crate::nnkit::{Checkpoint, FeatureGrid};

/// A local model together with the remote model whose features it fuses.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedModel {
    pub local: LocalModel<f32>,
    pub remote: RemoteModel<f32>,
}

impl FusedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        self.local.write_into(&mut ckpt);
        self.remote.write_into(&mut ckpt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            local: LocalModel::read_from(ckpt)?,
            remote: RemoteModel::read_from(ckpt)?,
        })
    }
}

/// Local logits with `h' = h + z` when remote features are present and
/// `h' = h` otherwise.
pub fn fused_forward(
    local: &LocalModel<f32>,
    frame: &crate::scene::Frame,
    z: Option<&RemoteFeatures>,
) -> Result<FeatureGrid<f32>> {
    Ok(local.forward(frame, z.map(|f| &f.grid))?.logits)
}
