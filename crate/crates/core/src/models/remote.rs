use rand::Rng;

use super::local::load_params;
use super::{clamp_delay, FrameWindow, RemoteFeatures, PATCH};
use crate::error::{Error, Result};
use crate::nnkit::{
    avg_pool, avg_pool_backward, concat_channels, patchify, relu, relu_backward, relu_signature, split_channels,
    Checkpoint, Conv3x3, FeatureGrid, Linear, ParamTensor, Real,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemoteSpec {
    /// Full-resolution input.
    pub input_width: usize,
    pub input_height: usize,
    /// Frames of temporal context, `K`.
    pub context: usize,
    pub encoder_features: usize,
    pub mid_features: usize,
    /// Output channels; equal to the local stage-1 width.
    pub features: usize,
    /// Largest trained delay; the embedding has `max_delay + 1` rows.
    pub max_delay: usize,
    /// Remote grid cells per local grid cell along each axis.
    pub pool_factor: usize,
    pub class_count: usize,
    pub label_upsample: usize,
}

impl RemoteSpec {
    pub fn grid(&self) -> (usize, usize) {
        (self.input_height / PATCH, self.input_width / PATCH)
    }

    pub fn output_grid(&self) -> (usize, usize) {
        let (h, w) = self.grid();
        (h / self.pool_factor, w / self.pool_factor)
    }
}

/// Which parameters a backward pass reaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteScope {
    All,
    /// Per-frame encoder frozen.
    FrozenEncoder,
    /// Only the pre-pool and post-pool projections.
    PoolOnly,
}

/// Per-frame patch encoder, temporal merge of `K` encodings, additive delay
/// embedding, two residual 3x3 mixing blocks, then per-cell MLP, average
/// pool to the local grid, and a second per-cell MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteModel<T = f32> {
    pub spec: RemoteSpec,
    pub encoder: Linear<T>,
    pub merge: Linear<T>,
    /// `[max_delay + 1, mid_features]`
    pub delay_embedding: ParamTensor<T>,
    pub mix1: Conv3x3<T>,
    pub mix2: Conv3x3<T>,
    pub pre_pool: Linear<T>,
    pub post_pool: Linear<T>,
    pub head: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct RemotePass<T = f32> {
    pub patches: Vec<FeatureGrid<T>>,
    pub encoded: Vec<FeatureGrid<T>>,
    pub merged_in: FeatureGrid<T>,
    pub delay_row: usize,
    pub conditioned: FeatureGrid<T>,
    pub r1: FeatureGrid<T>,
    pub a1: FeatureGrid<T>,
    pub r2: FeatureGrid<T>,
    pub a2: FeatureGrid<T>,
    pub q: FeatureGrid<T>,
    pub pooled: FeatureGrid<T>,
    pub z: FeatureGrid<T>,
}

impl<T: Real> RemotePass<T> {
    pub fn kinks(&self) -> u64 {
        let mut refs: Vec<&FeatureGrid<T>> = self.encoded.iter().collect();
        refs.extend([&self.r1, &self.r2, &self.q]);
        relu_signature(&refs)
    }
}

impl<T: Real> RemoteModel<T> {
    pub fn new(spec: RemoteSpec, rng: &mut impl Rng) -> Self {
        let (fe, fm, f) = (spec.encoder_features, spec.mid_features, spec.features);
        let rows = spec.max_delay + 1;
        let embedding = (0..rows * fm).map(|_| T::of(rng.random_range(-0.1..0.1))).collect();
        Self {
            spec,
            encoder: Linear::new("remote.encoder", PATCH * PATCH, fe, rng),
            merge: Linear::new("remote.merge", spec.context * fe, fm, rng),
            delay_embedding: ParamTensor::new("remote.delay_embedding", vec![rows, fm], embedding),
            mix1: Conv3x3::new("remote.mix1", fm, fm, 1, rng),
            mix2: Conv3x3::new("remote.mix2", fm, fm, 1, rng),
            pre_pool: Linear::new("remote.pre_pool", fm, f, rng),
            post_pool: Linear::new("remote.post_pool", f, f, rng),
            head: Linear::new("remote.head", f, spec.class_count, rng),
        }
    }

    pub fn forward(&self, window: &FrameWindow, delay_frames: usize) -> Result<RemotePass<T>> {
        let spec = &self.spec;
        if window.len() != spec.context {
            return Err(Error::Config(format!(
                "remote model needs a window of {} frames, got {}",
                spec.context,
                window.len()
            )));
        }
        let mut patches = Vec::with_capacity(spec.context);
        let mut encoded = Vec::with_capacity(spec.context);
        for f in &window.frames {
            if f.width != spec.input_width || f.height != spec.input_height {
                return Err(Error::Config(format!(
                    "remote model expects {}x{} frames, got {}x{}",
                    spec.input_width, spec.input_height, f.width, f.height
                )));
            }
            let p = patchify(&f.pixels, f.width, f.height, PATCH)?;
            encoded.push(relu(&self.encoder.forward(&p)?));
            patches.push(p);
        }
        let merged_in = concat_channels(&encoded)?;
        let mut conditioned = self.merge.forward(&merged_in)?;
        let delay_row = clamp_delay(delay_frames, spec.max_delay);
        let fm = spec.mid_features;
        for c in 0..fm {
            let e = self.delay_embedding.values[delay_row * fm + c];
            conditioned.channel_mut(c).iter_mut().for_each(|v| *v = *v + e);
        }
        let r1 = relu(&self.mix1.forward(&conditioned)?);
        let a1 = conditioned.add(&r1)?;
        let r2 = relu(&self.mix2.forward(&a1)?);
        let a2 = a1.add(&r2)?;
        let q = relu(&self.pre_pool.forward(&a2)?);
        let pooled = avg_pool(&q, spec.pool_factor)?;
        let z = self.post_pool.forward(&pooled)?;
        Ok(RemotePass {
            patches,
            encoded,
            merged_in,
            delay_row,
            conditioned,
            r1,
            a1,
            r2,
            a2,
            q,
            pooled,
            z,
        })
    }

    pub fn head_logits(&self, z: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
        Ok(self.head.forward(z)?)
    }

    /// Backward from a gradient on `z`, stopping at `scope`.
    pub fn backward(&mut self, pass: &RemotePass<T>, gz: &FeatureGrid<T>, scope: RemoteScope) {
        let gpooled = self.post_pool.backward(&pass.pooled, gz);
        let gq = relu_backward(&pass.q, &avg_pool_backward(&gpooled, self.spec.pool_factor));
        if scope == RemoteScope::PoolOnly {
            self.pre_pool.accumulate(&pass.a2, &gq);
            return;
        }
        let ga2 = self.pre_pool.backward(&pass.a2, &gq);
        let mut ga1 = self.mix2.backward(&pass.a1, &relu_backward(&pass.r2, &ga2));
        ga1.add_assign(&ga2);
        let mut gc = self.mix1.backward(&pass.conditioned, &relu_backward(&pass.r1, &ga1));
        gc.add_assign(&ga1);
        let fm = self.spec.mid_features;
        for c in 0..fm {
            let idx = pass.delay_row * fm + c;
            self.delay_embedding.grad[idx] = self.delay_embedding.grad[idx] + gc.channel(c).iter().copied().sum::<T>();
        }
        if scope == RemoteScope::FrozenEncoder {
            self.merge.accumulate(&pass.merged_in, &gc);
            return;
        }
        let gin = self.merge.backward(&pass.merged_in, &gc);
        for ((p, e), g) in pass.patches.iter().zip(&pass.encoded).zip(split_channels(&gin, self.spec.context)) {
            self.encoder.accumulate(p, &relu_backward(e, &g));
        }
    }

    /// Head backward; returns the gradient on `z`.
    pub fn head_backward(&mut self, z: &FeatureGrid<T>, glogits: &FeatureGrid<T>) -> FeatureGrid<T> {
        self.head.backward(z, glogits)
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut v = Vec::new();
        v.extend(self.encoder.params());
        v.extend(self.merge.params());
        v.push(&self.delay_embedding);
        v.extend(self.mix1.params());
        v.extend(self.mix2.params());
        v.extend(self.pre_pool.params());
        v.extend(self.post_pool.params());
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut v = Vec::new();
        v.extend(self.encoder.params_mut());
        v.extend(self.merge.params_mut());
        v.push(&mut self.delay_embedding);
        v.extend(self.mix1.params_mut());
        v.extend(self.mix2.params_mut());
        v.extend(self.pre_pool.params_mut());
        v.extend(self.post_pool.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    /// Parameters updated under a given backward scope (head included).
    pub fn trainable_mut(&mut self, scope: RemoteScope) -> Vec<&mut ParamTensor<T>> {
        let mut v = Vec::new();
        match scope {
            RemoteScope::All => return self.params_mut(),
            RemoteScope::FrozenEncoder => {
                v.extend(self.merge.params_mut());
                v.push(&mut self.delay_embedding);
                v.extend(self.mix1.params_mut());
                v.extend(self.mix2.params_mut());
                v.extend(self.pre_pool.params_mut());
                v.extend(self.post_pool.params_mut());
                v.extend(self.head.params_mut());
            }
            RemoteScope::PoolOnly => {
                v.extend(self.pre_pool.params_mut());
                v.extend(self.post_pool.params_mut());
            }
        }
        v
    }

    pub fn cast<U: Real>(&self) -> RemoteModel<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let conv = |c: &Conv3x3<T>| Conv3x3 {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            groups: c.groups,
        };
        RemoteModel {
            spec: self.spec,
            encoder: lin(&self.encoder),
            merge: lin(&self.merge),
            delay_embedding: self.delay_embedding.cast(),
            mix1: conv(&self.mix1),
            mix2: conv(&self.mix2),
            pre_pool: lin(&self.pre_pool),
            post_pool: lin(&self.post_pool),
            head: lin(&self.head),
        }
    }
}

const META: &str = "remote.meta";

impl RemoteModel<f32> {
    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        let s = &self.spec;
        ckpt.push(
            META,
            &[4],
            vec![
                s.input_width as f32,
                s.input_height as f32,
                s.pool_factor as f32,
                s.label_upsample as f32,
            ],
        );
        for p in self.params() {
            ckpt.push(p.name.clone(), &p.shape, p.values.clone());
        }
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ckpt.get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))
        };
        let meta = get(META)?;
        if meta.values.len() != 4 {
            return Err(Error::Config("malformed remote.meta".into()));
        }
        let enc = get("remote.encoder.weight")?;
        let merge = get("remote.merge.weight")?;
        let emb = get("remote.delay_embedding")?;
        let pre = get("remote.pre_pool.weight")?;
        let head = get("remote.head.weight")?;
        let fe = enc.dims[0] as usize;
        let spec = RemoteSpec {
            input_width: meta.values[0] as usize,
            input_height: meta.values[1] as usize,
            pool_factor: meta.values[2] as usize,
            label_upsample: meta.values[3] as usize,
            encoder_features: fe,
            context: merge.dims[1] as usize / fe.max(1),
            mid_features: merge.dims[0] as usize,
            features: pre.dims[0] as usize,
            max_delay: (emb.dims[0] as usize).saturating_sub(1),
            class_count: head.dims[0] as usize,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = RemoteModel::<f32>::new(spec, &mut rng);
        load_params(ckpt, model.params_mut())?;
        Ok(model)
    }
}

/// Delay-conditioned features `z` for the window ending at its basis frame.
pub fn remote_forward(model: &RemoteModel<f32>, window: &FrameWindow, delay_frames: usize) -> Result<RemoteFeatures> {
    let pass = model.forward(window, delay_frames)?;
    let basis_ts = window.frames.last().map(|f| f.capture_ts_us).unwrap_or(0);
    Ok(RemoteFeatures {
        grid: pass.z,
        basis_index: window.basis_index,
        delay_frames_used: pass.delay_row as u8,
        produced_ts_us: basis_ts,
    })
}

/// Remote-only segmentation logits on the local grid.
pub fn remote_head(model: &RemoteModel<f32>, z: &RemoteFeatures) -> Result<FeatureGrid<f32>> {
    model.head_logits(&z.grid)
}
