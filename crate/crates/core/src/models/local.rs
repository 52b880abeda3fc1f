use rand::Rng;

use super::PATCH;
use crate::error::{Error, Result};
use crate::nnkit::{
    patchify, relu, relu_backward, relu_signature, Checkpoint, Conv3x3, FeatureGrid, Linear, NnError, ParamTensor,
    Real,
};
use crate::scene::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalSpec {
    /// Local input resolution (already downsampled on device).
    pub input_width: usize,
    pub input_height: usize,
    pub features: usize,
    pub class_count: usize,
    /// Label pixels per output cell along each axis.
    pub label_upsample: usize,
}

impl LocalSpec {
    pub fn grid(&self) -> (usize, usize) {
        (self.input_height / PATCH, self.input_width / PATCH)
    }
}

/// Patch encoder `h = T1(x)`, two post-fusion blocks with side projections,
/// and a per-cell segmentation head.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel<T = f32> {
    pub spec: LocalSpec,
    pub encoder: Linear<T>,
    pub t2: Conv3x3<T>,
    pub p2: Linear<T>,
    pub t3: Conv3x3<T>,
    pub p3: Linear<T>,
    pub head: Linear<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LocalPass<T = f32> {
    pub patches: FeatureGrid<T>,
    pub h: FeatureGrid<T>,
    pub fused: FeatureGrid<T>,
    pub a2: FeatureGrid<T>,
    pub a3: FeatureGrid<T>,
    pub y: FeatureGrid<T>,
    pub logits: FeatureGrid<T>,
}

impl<T: Real> LocalPass<T> {
    pub fn kinks(&self) -> u64 {
        relu_signature(&[&self.h, &self.a2, &self.a3])
    }
}

impl<T: Real> LocalModel<T> {
    pub fn new(spec: LocalSpec, rng: &mut impl Rng) -> Self {
        let f = spec.features;
        Self {
            spec,
            encoder: Linear::new("local.encoder", PATCH * PATCH, f, rng),
            t2: Conv3x3::new("local.t2", f, f, 1, rng),
            p2: Linear::new("local.p2", f, f, rng),
            t3: Conv3x3::new("local.t3", f, f, 1, rng),
            p3: Linear::new("local.p3", f, f, rng),
            head: Linear::new("local.head", f, spec.class_count, rng),
        }
    }

    pub fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.width != self.spec.input_width || frame.height != self.spec.input_height {
            return Err(Error::Config(format!(
                "local model expects {}x{} input, got {}x{}",
                self.spec.input_width, self.spec.input_height, frame.width, frame.height
            )));
        }
        Ok(())
    }

    /// First-stage features `h` for a local-resolution frame.
    pub fn stage1(&self, frame: &Frame) -> Result<(FeatureGrid<T>, FeatureGrid<T>)> {
        self.check_frame(frame)?;
        let patches = patchify(&frame.pixels, frame.width, frame.height, PATCH)?;
        let h = relu(&self.encoder.forward(&patches)?);
        Ok((patches, h))
    }

    /// Remaining blocks on `h'`; `h'` is `h` itself when nothing is fused.
    pub fn forward(&self, frame: &Frame, z: Option<&FeatureGrid<T>>) -> Result<LocalPass<T>> {
        let (patches, h) = self.stage1(frame)?;
        let fused = match z {
            Some(z) => {
                if !z.same_shape(&h) {
                    return Err(NnError::Shape {
                        op: "fusion",
                        expected: format!("{:?}", h.shape()),
                        got: format!("{:?}", z.shape()),
                    }
                    .into());
                }
                h.add(z)?
            }
            None => h.clone(),
        };
        let a2 = relu(&self.t2.forward(&fused)?);
        let a3 = relu(&self.t3.forward(&a2)?);
        let mut y = fused.clone();
        y.add_assign(&self.p2.forward(&a2)?);
        y.add_assign(&self.p3.forward(&a3)?);
        let logits = self.head.forward(&y)?;
        Ok(LocalPass {
            patches,
            h,
            fused,
            a2,
            a3,
            y,
            logits,
        })
    }

    /// Accumulate gradients for every local parameter; returns the gradient
    /// with respect to the fused features (and therefore any fused-in `z`).
    pub fn backward(&mut self, pass: &LocalPass<T>, glogits: &FeatureGrid<T>) -> FeatureGrid<T> {
        let gy = self.head.backward(&pass.y, glogits);
        let ga3 = self.p3.backward(&pass.a3, &gy);
        let mut ga2 = self.t3.backward(&pass.a2, &relu_backward(&pass.a3, &ga3));
        ga2.add_assign(&self.p2.backward(&pass.a2, &gy));
        let mut gfused = self.t2.backward(&pass.fused, &relu_backward(&pass.a2, &ga2));
        gfused.add_assign(&gy);
        let gh = relu_backward(&pass.h, &gfused);
        self.encoder.accumulate(&pass.patches, &gh);
        gfused
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut v = Vec::new();
        v.extend(self.encoder.params());
        v.extend(self.t2.params());
        v.extend(self.p2.params());
        v.extend(self.t3.params());
        v.extend(self.p3.params());
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut v = Vec::new();
        v.extend(self.encoder.params_mut());
        v.extend(self.t2.params_mut());
        v.extend(self.p2.params_mut());
        v.extend(self.t3.params_mut());
        v.extend(self.p3.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    pub fn cast<U: Real>(&self) -> LocalModel<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let conv = |c: &Conv3x3<T>| Conv3x3 {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            groups: c.groups,
        };
        LocalModel {
            spec: self.spec,
            encoder: lin(&self.encoder),
            t2: conv(&self.t2),
            p2: lin(&self.p2),
            t3: conv(&self.t3),
            p3: lin(&self.p3),
            head: lin(&self.head),
        }
    }
}

const META: &str = "local.meta";

impl LocalModel<f32> {
    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        let s = &self.spec;
        ckpt.push(
            META,
            &[3],
            vec![s.input_width as f32, s.input_height as f32, s.label_upsample as f32],
        );
        for p in self.params() {
            ckpt.push(p.name.clone(), &p.shape, p.values.clone());
        }
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt
            .get(META)
            .ok_or_else(|| Error::Config("checkpoint has no local model".into()))?;
        if meta.values.len() != 3 {
            return Err(Error::Config("malformed local.meta".into()));
        }
        let enc = ckpt
            .get("local.encoder.weight")
            .ok_or_else(|| Error::Config("checkpoint lacks local.encoder.weight".into()))?;
        let head = ckpt
            .get("local.head.weight")
            .ok_or_else(|| Error::Config("checkpoint lacks local.head.weight".into()))?;
        let spec = LocalSpec {
            input_width: meta.values[0] as usize,
            input_height: meta.values[1] as usize,
            label_upsample: meta.values[2] as usize,
            features: enc.dims[0] as usize,
            class_count: head.dims[0] as usize,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = LocalModel::<f32>::new(spec, &mut rng);
        load_params(ckpt, model.params_mut())?;
        Ok(model)
    }
}

pub(crate) fn load_params(ckpt: &Checkpoint, params: Vec<&mut ParamTensor<f32>>) -> Result<()> {
    for p in params {
        let t = ckpt
            .get(&p.name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {}", p.name)))?;
        let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
        if dims != p.shape {
            return Err(Error::Config(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name, dims, p.shape
            )));
        }
        p.values.clone_from(&t.values);
    }
    Ok(())
}

/// Stage-1 features and local-only logits for a local-resolution frame.
pub fn local_forward<T: Real>(model: &LocalModel<T>, frame: &Frame) -> Result<(FeatureGrid<T>, FeatureGrid<T>)> {
    let pass = model.forward(frame, None)?;
    Ok((pass.h, pass.logits))
}
