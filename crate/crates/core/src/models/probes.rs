//! Small `f64` model instances with fixed random inputs, for gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FrameWindow, LocalModel, LocalSpec, RemoteModel, RemoteScope, RemoteSpec, PATCH};
use crate::nnkit::{
    avg_pool, avg_pool_backward, relu, relu_backward, relu_signature, softmax_xent, Conv3x3, Differentiable,
    Evaluation, FeatureGrid, Linear, NnError, ParamTensor,
};
use crate::scene::{Frame, LabelMap};

fn random_grid(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> FeatureGrid<f64> {
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureGrid::from_vec(c, h, w, data).expect("sized")
}

fn random_labels(rng: &mut impl Rng, classes: usize, h: usize, w: usize) -> LabelMap {
    LabelMap {
        capture_index: 0,
        width: w,
        height: h,
        labels: (0..w * h).map(|_| rng.random_range(0..classes) as u8).collect(),
    }
}

fn random_frame(rng: &mut impl Rng, w: usize, h: usize, index: u64) -> Frame {
    let mut f = Frame::blank(w, h);
    f.capture_index = index;
    f.pixels.iter_mut().for_each(|p| *p = rng.random());
    f
}

fn randomize_biases(params: Vec<&mut ParamTensor<f64>>, rng: &mut impl Rng) {
    for p in params {
        if p.name.ends_with(".bias") {
            p.values.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

/// Single per-cell linear layer under cross-entropy.
pub struct LinearProbe {
    pub layer: Linear<f64>,
    pub input: FeatureGrid<f64>,
    pub target: LabelMap,
}

impl LinearProbe {
    pub fn new(seed: u64, grid: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = Linear::new("probe.linear", 5, 3, &mut rng);
        randomize_biases(layer.params_mut().into_iter().collect(), &mut rng);
        Self {
            input: random_grid(&mut rng, 5, grid, grid),
            target: random_labels(&mut rng, 3, grid, grid),
            layer,
        }
    }
}

impl Differentiable for LinearProbe {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        self.layer.params_mut().into_iter().collect()
    }

    fn evaluate(&mut self) -> Result<Evaluation, NnError> {
        let y = self.layer.forward(&self.input)?;
        let (loss, _) = softmax_xent(&y, &self.target, 1)?;
        Ok(Evaluation {
            loss: loss.scalar,
            kinks: 0,
        })
    }

    fn backprop(&mut self) -> Result<Evaluation, NnError> {
        let y = self.layer.forward(&self.input)?;
        let (loss, g) = softmax_xent(&y, &self.target, 1)?;
        self.layer.accumulate(&self.input, &g);
        Ok(Evaluation {
            loss: loss.scalar,
            kinks: 0,
        })
    }
}

/// Grouped 3x3 convolution followed by ReLU and a linear head.
pub struct ConvProbe {
    pub conv: Conv3x3<f64>,
    pub head: Linear<f64>,
    pub input: FeatureGrid<f64>,
    pub target: LabelMap,
}

impl ConvProbe {
    pub fn new(seed: u64, grid: usize, groups: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Conv3x3::new("probe.conv", 4, 4, groups, &mut rng);
        let mut head = Linear::new("probe.head", 4, 3, &mut rng);
        randomize_biases(conv.params_mut().into_iter().collect(), &mut rng);
        randomize_biases(head.params_mut().into_iter().collect(), &mut rng);
        Self {
            input: random_grid(&mut rng, 4, grid, grid),
            target: random_labels(&mut rng, 3, grid, grid),
            conv,
            head,
        }
    }

    fn run(&mut self, backward: bool) -> Result<Evaluation, NnError> {
        let a = relu(&self.conv.forward(&self.input)?);
        let y = self.head.forward(&a)?;
        let (loss, g) = softmax_xent(&y, &self.target, 1)?;
        if backward {
            let ga = self.head.backward(&a, &g);
            self.conv.accumulate(&self.input, &relu_backward(&a, &ga));
        }
        Ok(Evaluation {
            loss: loss.scalar,
            kinks: relu_signature(&[&a]),
        })
    }
}

impl Differentiable for ConvProbe {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        let mut v: Vec<_> = self.conv.params_mut().into_iter().collect();
        v.extend(self.head.params_mut());
        v
    }

    fn evaluate(&mut self) -> Result<Evaluation, NnError> {
        self.run(false)
    }

    fn backprop(&mut self) -> Result<Evaluation, NnError> {
        self.run(true)
    }
}

/// Linear, ReLU, 2x average pool, linear: the pooled projection path.
pub struct PoolProbe {
    pub pre: Linear<f64>,
    pub post: Linear<f64>,
    pub input: FeatureGrid<f64>,
    pub target: LabelMap,
}

impl PoolProbe {
    pub fn new(seed: u64, grid: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pre = Linear::new("probe.pre", 4, 6, &mut rng);
        let mut post = Linear::new("probe.post", 6, 3, &mut rng);
        randomize_biases(pre.params_mut().into_iter().collect(), &mut rng);
        randomize_biases(post.params_mut().into_iter().collect(), &mut rng);
        Self {
            input: random_grid(&mut rng, 4, grid, grid),
            target: random_labels(&mut rng, 3, grid, grid),
            pre,
            post,
        }
    }

    fn run(&mut self, backward: bool) -> Result<Evaluation, NnError> {
        let q = relu(&self.pre.forward(&self.input)?);
        let p = avg_pool(&q, 2)?;
        let y = self.post.forward(&p)?;
        let (loss, g) = softmax_xent(&y, &self.target, 2)?;
        if backward {
            let gp = self.post.backward(&p, &g);
            self.pre.accumulate(&self.input, &relu_backward(&q, &avg_pool_backward(&gp, 2)));
        }
        Ok(Evaluation {
            loss: loss.scalar,
            kinks: relu_signature(&[&q]),
        })
    }
}

impl Differentiable for PoolProbe {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        let mut v: Vec<_> = self.pre.params_mut().into_iter().collect();
        v.extend(self.post.params_mut());
        v
    }

    fn evaluate(&mut self) -> Result<Evaluation, NnError> {
        self.run(false)
    }

    fn backprop(&mut self) -> Result<Evaluation, NnError> {
        self.run(true)
    }
}

/// Label upsample used by the model probes.
const PROBE_UPSAMPLE: usize = 2;

fn probe_local_spec(grid: usize, features: usize) -> LocalSpec {
    LocalSpec {
        input_width: grid * PATCH,
        input_height: grid * PATCH,
        features,
        class_count: 3,
        label_upsample: PROBE_UPSAMPLE,
    }
}

fn probe_remote_spec(grid: usize, features: usize) -> RemoteSpec {
    RemoteSpec {
        input_width: grid * PATCH * 2,
        input_height: grid * PATCH * 2,
        context: 2,
        encoder_features: 3,
        mid_features: 4,
        features,
        max_delay: 3,
        pool_factor: 2,
        class_count: 3,
        label_upsample: PROBE_UPSAMPLE,
    }
}

/// The local model alone, with `h' = h`.
pub struct LocalProbe {
    pub model: LocalModel<f64>,
    pub frame: Frame,
    pub target: LabelMap,
}

impl LocalProbe {
    pub fn new(seed: u64, grid: usize, features: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = LocalModel::new(probe_local_spec(grid, features), &mut rng);
        randomize_biases(model.params_mut(), &mut rng);
        Self {
            frame: random_frame(&mut rng, grid * PATCH, grid * PATCH, 0),
            target: random_labels(&mut rng, 3, grid * PROBE_UPSAMPLE, grid * PROBE_UPSAMPLE),
            model,
        }
    }

    fn run(&mut self, backward: bool) -> Result<Evaluation, NnError> {
        let pass = self.model.forward(&self.frame, None).map_err(into_nn)?;
        let (loss, g) = softmax_xent(&pass.logits, &self.target, PROBE_UPSAMPLE)?;
        if backward {
            self.model.backward(&pass, &g);
        }
        Ok(Evaluation {
            loss: loss.scalar,
            kinks: pass.kinks(),
        })
    }
}

impl Differentiable for LocalProbe {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        self.model.params_mut()
    }

    fn evaluate(&mut self) -> Result<Evaluation, NnError> {
        self.run(false)
    }

    fn backprop(&mut self) -> Result<Evaluation, NnError> {
        self.run(true)
    }
}

/// The remote model through its own head.
pub struct RemoteProbe {
    pub model: RemoteModel<f64>,
    pub window: FrameWindow,
    pub delay: usize,
    pub target: LabelMap,
}

impl RemoteProbe {
    pub fn new(seed: u64, grid: usize, features: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = probe_remote_spec(grid, features);
        let mut model = RemoteModel::new(spec, &mut rng);
        randomize_biases(model.params_mut(), &mut rng);
        let window = random_window(&mut rng, &spec);
        Self {
            delay: rng.random_range(0..=spec.max_delay),
            target: random_labels(&mut rng, 3, grid * PROBE_UPSAMPLE, grid * PROBE_UPSAMPLE),
            window,
            model,
        }
    }

    fn run(&mut self, backward: bool) -> Result<Evaluation, NnError> {
        let pass = self.model.forward(&self.window, self.delay).map_err(into_nn)?;
        let logits = self.model.head_logits(&pass.z).map_err(into_nn)?;
        let (loss, g) = softmax_xent(&logits, &self.target, PROBE_UPSAMPLE)?;
        if backward {
            let gz = self.model.head_backward(&pass.z, &g);
            self.model.backward(&pass, &gz, RemoteScope::All);
        }
        Ok(Evaluation {
            loss: loss.scalar,
            kinks: pass.kinks(),
        })
    }
}

impl Differentiable for RemoteProbe {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        self.model.params_mut()
    }

    fn evaluate(&mut self) -> Result<Evaluation, NnError> {
        self.run(false)
    }

    fn backprop(&mut self) -> Result<Evaluation, NnError> {
        self.run(true)
    }
}

fn random_window(rng: &mut impl Rng, spec: &RemoteSpec) -> FrameWindow {
    let frames = (0..spec.context)
        .map(|i| random_frame(rng, spec.input_width, spec.input_height, i as u64))
        .collect();
    FrameWindow {
        frames,
        basis_index: spec.context as u64 - 1,
    }
}

/// Remote features fused into the local model: every parameter on the path
/// from both inputs to the local head.
pub struct FusedProbe {
    pub local: LocalModel<f64>,
    pub remote: RemoteModel<f64>,
    pub frame: Frame,
    pub window: FrameWindow,
    pub delay: usize,
    pub target: LabelMap,
}

impl FusedProbe {
    /// `grid` is the local feature grid edge (8 gives an 8x8 instance).
    pub fn new(seed: u64, grid: usize, features: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut local = LocalModel::new(probe_local_spec(grid, features), &mut rng);
        let spec = probe_remote_spec(grid, features);
        let mut remote = RemoteModel::new(spec, &mut rng);
        randomize_biases(local.params_mut(), &mut rng);
        randomize_biases(remote.params_mut(), &mut rng);
        let window = random_window(&mut rng, &spec);
        Self {
            frame: random_frame(&mut rng, grid * PATCH, grid * PATCH, 0),
            delay: rng.random_range(0..=spec.max_delay),
            target: random_labels(&mut rng, 3, grid * PROBE_UPSAMPLE, grid * PROBE_UPSAMPLE),
            window,
            local,
            remote,
        }
    }

    fn run(&mut self, backward: bool) -> Result<Evaluation, NnError> {
        let rpass = self.remote.forward(&self.window, self.delay).map_err(into_nn)?;
        let lpass = self.local.forward(&self.frame, Some(&rpass.z)).map_err(into_nn)?;
        let (loss, g) = softmax_xent(&lpass.logits, &self.target, PROBE_UPSAMPLE)?;
        if backward {
            let gz = self.local.backward(&lpass, &g);
            self.remote.backward(&rpass, &gz, RemoteScope::All);
        }
        Ok(Evaluation {
            loss: loss.scalar,
            kinks: rpass.kinks() ^ lpass.kinks().rotate_left(1),
        })
    }
}

impl Differentiable for FusedProbe {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        let mut v = self.local.params_mut();
        let remote = self.remote.params_mut();
        let head = remote.len() - 2;
        v.extend(remote.into_iter().take(head));
        v
    }

    fn evaluate(&mut self) -> Result<Evaluation, NnError> {
        self.run(false)
    }

    fn backprop(&mut self) -> Result<Evaluation, NnError> {
        self.run(true)
    }
}

fn into_nn(e: crate::error::Error) -> NnError {
    match e {
        crate::error::Error::Nn(n) => n,
        other => NnError::Invalid(other.to_string()),
    }
}
