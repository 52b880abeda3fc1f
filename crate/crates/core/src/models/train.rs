//! Staged, deterministic training of the local, remote and fused models.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    local_input, predict_labels, remote_input, FrameWindow, FusedModel, LocalModel, RemoteModel, RemoteScope,
};
use crate::config::{ExperimentConfig, Optimizer};
use crate::error::{Error, Result};
use crate::metrics::{miou, ConfusionAccumulator};
use crate::nnkit::{clip_grad_norm, sgd_step, Adam, softmax_xent, FeatureGrid, LossValue, ParamTensor};
use crate::scene::{generate_scene, Frame, LabelMap, SceneConfig};

/// Scene seeds never collide between splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Eval,
}

pub fn scene_seed(base: u64, split: Split, index: u64) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Val => 0x7661_6c00_0000_0000,
        Split::Eval => 0x6576_616c_0000_0000,
    };
    splitmix(base ^ tag ^ splitmix(index))
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// One rendered scene, pre-degraded for both models.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub local: Vec<Frame>,
    pub remote: Vec<Frame>,
    pub labels: Vec<LabelMap>,
}

impl SceneData {
    pub fn render(scene: &SceneConfig, frames: usize, downsample: usize, quant_bits: u8) -> Result<Self> {
        let seq = generate_scene(scene)?;
        let mut data = SceneData {
            local: Vec::with_capacity(frames),
            remote: Vec::with_capacity(frames),
            labels: Vec::with_capacity(frames),
        };
        for (frame, labels) in seq.iter().take(frames) {
            data.local.push(local_input(&frame, downsample)?);
            data.remote.push(remote_input(&frame, quant_bits)?);
            data.labels.push(labels);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn window(&self, basis: usize, k: usize) -> FrameWindow {
        let f = &self.remote[0];
        FrameWindow::gather(basis as u64, k, f.width, f.height, |i| self.remote.get(i as usize).cloned())
    }
}

pub fn build_scenes(cfg: &ExperimentConfig, split: Split, count: usize) -> Result<Vec<SceneData>> {
    (0..count)
        .map(|i| {
            let scene = SceneConfig {
                seed: scene_seed(cfg.seed, split, i as u64),
                ..cfg.scene.clone()
            };
            SceneData::render(
                &scene,
                cfg.training.frames_per_scene,
                cfg.model.local_downsample,
                cfg.model.uplink_quant_bits,
            )
        })
        .collect()
}

/// Training and validation scenes for a config.
pub struct TrainingData {
    pub train: Vec<SceneData>,
    pub val: Vec<SceneData>,
}

impl TrainingData {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            train: build_scenes(cfg, Split::Train, cfg.training.train_scenes)?,
            val: build_scenes(cfg, Split::Val, cfg.training.val_scenes)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub stage: String,
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub miou: f64,
}

pub fn log_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from("stage,epoch,split,loss,miou\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.stage, r.epoch, r.split, r.loss, r.miou));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Delays {
    Zero,
    /// One `D ~ Uniform{0..=max}` per batch.
    PerBatch(usize),
}

/// What one training example needs: its scene, target frame, and delay.
struct Item<'a> {
    scene: &'a SceneData,
    t: usize,
    delay: usize,
}

struct Stage<'a> {
    name: &'a str,
    epochs: usize,
    delays: Delays,
    min_t: usize,
    class_count: usize,
    upsample: usize,
}

fn stage_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x1000_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ h))
}

/// Run one stage. `step` does a forward pass (and backward when asked) and
/// returns the loss and logits; `params` lists what the optimizer updates.
fn run_stage<M>(
    cfg: &ExperimentConfig,
    data: &TrainingData,
    stage: Stage<'_>,
    model: &mut M,
    mut step: impl FnMut(&mut M, &Item<'_>, bool) -> Result<(LossValue, FeatureGrid<f32>)>,
    mut params: impl FnMut(&mut M) -> Vec<&mut ParamTensor<f32>>,
) -> Result<Vec<TrainLogRow>> {
    let tc = &cfg.training;
    let mut rng = stage_rng(cfg.seed, stage.name);
    let mut rows = Vec::new();
    for p in params(model) {
        p.velocity.iter_mut().for_each(|v| *v = 0.0);
        p.zero_grad();
    }
    let mut order: Vec<(usize, usize)> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| (stage.min_t..sc.len()).map(move |t| (s, t)))
        .collect();
    let mut adam = Adam::new(tc.lr);
    let max_delay = match stage.delays {
        Delays::Zero => 0,
        Delays::PerBatch(m) => m,
    };
    for epoch in 0..stage.epochs {
        order.shuffle(&mut rng);
        let mut acc = ConfusionAccumulator::new(stage.class_count);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let delay = rng.random_range(0..=max_delay);
            for &(s, t) in batch {
                let item = Item {
                    scene: &data.train[s],
                    t,
                    delay,
                };
                let (loss, logits) = step(model, &item, true)?;
                if !loss.scalar.is_finite() {
                    return Err(divergence(stage.name, epoch, format!("non-finite loss at scene {s} frame {t}")));
                }
                loss_sum += loss.scalar;
                acc.add(&predict_labels(&logits, stage.upsample, t as u64), &item.scene.labels[t])?;
            }
            let mut ps = params(model);
            let inv = 1.0 / batch.len() as f32;
            for p in ps.iter_mut() {
                p.grad.iter_mut().for_each(|g| *g *= inv);
            }
            clip_grad_norm(&mut ps, tc.clip_norm);
            match tc.optimizer {
                Optimizer::Sgd => sgd_step(&mut ps, tc.lr as f32, tc.momentum as f32),
                Optimizer::Adam => adam.step(&mut ps),
            }
            .map_err(|e| divergence(stage.name, epoch, e.to_string()))?;
        }
        rows.push(TrainLogRow {
            stage: stage.name.to_string(),
            epoch,
            split: "train",
            loss: loss_sum / order.len() as f64,
            miou: miou(&acc)?,
        });
        let (vl, vm) = validate(data, &stage, model, &mut step, max_delay)?;
        rows.push(TrainLogRow {
            stage: stage.name.to_string(),
            epoch,
            split: "val",
            loss: vl,
            miou: vm,
        });
    }
    Ok(rows)
}

fn validate<M>(
    data: &TrainingData,
    stage: &Stage<'_>,
    model: &mut M,
    step: &mut impl FnMut(&mut M, &Item<'_>, bool) -> Result<(LossValue, FeatureGrid<f32>)>,
    max_delay: usize,
) -> Result<(f64, f64)> {
    let mut acc = ConfusionAccumulator::new(stage.class_count);
    let (mut loss, mut n) = (0.0, 0usize);
    for scene in &data.val {
        for t in stage.min_t..scene.len() {
            let item = Item {
                scene,
                t,
                delay: n % (max_delay + 1),
            };
            let (l, logits) = step(model, &item, false)?;
            loss += l.scalar;
            n += 1;
            acc.add(&predict_labels(&logits, stage.upsample, t as u64), &scene.labels[t])?;
        }
    }
    Ok((loss / n.max(1) as f64, miou(&acc)?))
}

fn divergence(stage: &str, epoch: usize, detail: String) -> Error {
    Error::Divergence {
        stage: stage.to_string(),
        epoch,
        detail,
    }
}

pub fn train_local(cfg: &ExperimentConfig, data: &TrainingData) -> Result<(LocalModel, Vec<TrainLogRow>)> {
    let spec = cfg.model.local_spec(&cfg.scene);
    let mut model = LocalModel::<f32>::new(spec, &mut stage_rng(cfg.seed, "local.init"));
    let stage = Stage {
        name: "local",
        epochs: cfg.training.local_epochs,
        delays: Delays::Zero,
        min_t: 0,
        class_count: spec.class_count,
        upsample: spec.label_upsample,
    };
    let rows = run_stage(
        cfg,
        data,
        stage,
        &mut model,
        |m, item, backward| {
            let pass = m.forward(&item.scene.local[item.t], None)?;
            let (loss, g) = softmax_xent(&pass.logits, &item.scene.labels[item.t], spec.label_upsample)?;
            if backward {
                m.backward(&pass, &g);
            }
            Ok((loss, pass.logits))
        },
        |m| m.params_mut(),
    )?;
    Ok((model, rows))
}

/// Remote step: window ending at `t - D`, delay input `D` (or 0 when
/// delay-unaware), supervised against labels at `t`.
fn remote_step(
    m: &mut RemoteModel,
    item: &Item<'_>,
    backward: bool,
    aware: bool,
    scope: RemoteScope,
) -> Result<(LossValue, FeatureGrid<f32>)> {
    let basis = item.t - item.delay;
    let window = item.scene.window(basis, m.spec.context);
    let pass = m.forward(&window, if aware { item.delay } else { 0 })?;
    let logits = m.head_logits(&pass.z)?;
    let (loss, g) = softmax_xent(&logits, &item.scene.labels[item.t], m.spec.label_upsample)?;
    if backward {
        let gz = m.head_backward(&pass.z, &g);
        m.backward(&pass, &gz, scope);
    }
    Ok((loss, logits))
}

/// The three remote checkpoints the baselines and the fused model use.
#[derive(Debug, Clone)]
pub struct RemoteModels {
    /// Single frame, delay-unaware.
    pub image: RemoteModel,
    /// `K` frames, delay-unaware.
    pub video: RemoteModel,
    /// `K` frames, delay-aware.
    pub predictive: RemoteModel,
}

pub fn train_remote(cfg: &ExperimentConfig, data: &TrainingData) -> Result<(RemoteModels, Vec<TrainLogRow>)> {
    let tc = &cfg.training;
    let max_delay = cfg.model.max_delay;
    let video_spec = cfg.model.remote_spec(&cfg.scene, cfg.model.context);
    let image_spec = cfg.model.remote_spec(&cfg.scene, 1);
    let base = |name, epochs, delays| Stage {
        name,
        epochs,
        delays,
        min_t: max_delay,
        class_count: video_spec.class_count,
        upsample: video_spec.label_upsample,
    };
    let mut rows = Vec::new();

    let mut image = RemoteModel::<f32>::new(image_spec, &mut stage_rng(cfg.seed, "remote.image.init"));
    rows.extend(run_stage(
        cfg,
        data,
        base("remote-image", tc.image_epochs, Delays::Zero),
        &mut image,
        |m, item, b| remote_step(m, item, b, false, RemoteScope::All),
        |m| m.params_mut(),
    )?);

    let mut video = RemoteModel::<f32>::new(video_spec, &mut stage_rng(cfg.seed, "remote.init"));
    rows.extend(run_stage(
        cfg,
        data,
        base("remote-warmup", tc.remote_warmup_epochs, Delays::Zero),
        &mut video,
        |m, item, b| remote_step(m, item, b, false, RemoteScope::All),
        |m| m.params_mut(),
    )?);

    let mut predictive = video.clone();
    rows.extend(run_stage(
        cfg,
        data,
        base("remote-stage1", tc.remote_stage1_epochs, Delays::PerBatch(max_delay)),
        &mut predictive,
        |m, item, b| remote_step(m, item, b, true, RemoteScope::FrozenEncoder),
        |m| m.trainable_mut(RemoteScope::FrozenEncoder),
    )?);
    rows.extend(run_stage(
        cfg,
        data,
        base("remote-stage2", tc.remote_stage2_epochs, Delays::PerBatch(max_delay)),
        &mut predictive,
        |m, item, b| remote_step(m, item, b, true, RemoteScope::All),
        |m| m.params_mut(),
    )?);
    Ok((
        RemoteModels {
            image,
            video,
            predictive,
        },
        rows,
    ))
}

/// Fine-tune the local model on `h + z` with per-batch delays; only the
/// remote pooling projections move on the remote side.
pub fn train_fused(
    cfg: &ExperimentConfig,
    data: &TrainingData,
    local: &LocalModel,
    remote: &RemoteModel,
) -> Result<(FusedModel, Vec<TrainLogRow>)> {
    if local.spec.grid() != remote.spec.output_grid() || local.spec.features != remote.spec.features {
        return Err(Error::Config(format!(
            "local features {:?}x{} do not match remote output {:?}x{}",
            local.spec.grid(),
            local.spec.features,
            remote.spec.output_grid(),
            remote.spec.features
        )));
    }
    let mut model = FusedModel {
        local: local.clone(),
        remote: remote.clone(),
    };
    let stage = Stage {
        name: "fused",
        epochs: cfg.training.fused_epochs,
        delays: Delays::PerBatch(cfg.model.max_delay),
        min_t: cfg.model.max_delay,
        class_count: local.spec.class_count,
        upsample: local.spec.label_upsample,
    };
    let rows = run_stage(
        cfg,
        data,
        stage,
        &mut model,
        |m, item, backward| {
            let window = item.scene.window(item.t - item.delay, m.remote.spec.context);
            let rpass = m.remote.forward(&window, item.delay)?;
            let lpass = m.local.forward(&item.scene.local[item.t], Some(&rpass.z))?;
            let (loss, g) = softmax_xent(&lpass.logits, &item.scene.labels[item.t], m.local.spec.label_upsample)?;
            if backward {
                let gz = m.local.backward(&lpass, &g);
                m.remote.backward(&rpass, &gz, RemoteScope::PoolOnly);
            }
            Ok((loss, lpass.logits))
        },
        |m| {
            let mut v = m.local.params_mut();
            v.extend(m.remote.trainable_mut(RemoteScope::PoolOnly));
            v
        },
    )?;
    Ok((model, rows))
}
