//! Latency sweeps over the runtime and force-fed delay evaluations.

use super::{jitter_expectation, jitter_monte_carlo, miou, ConfusionAccumulator, DelayMatrix, JitterSpec};
use crate::channel::DelaySpec;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::models::train::{scene_seed, SceneData, Split};
use crate::models::{predict_labels, FusedModel};
use crate::runtime::{run_episode, EpisodeSpec, ModelSet, Scenario};
use crate::scene::SceneConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scenario: Scenario,
    pub delay_frames: usize,
    pub delay_ms: f64,
    pub miou_mean: f64,
    pub miou_std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-episode mIoU of one scenario at a constant round trip of `delay_frames`.
pub fn episode_mious(
    cfg: &ExperimentConfig,
    models: &ModelSet,
    scenario: Scenario,
    delay_frames: usize,
    local_compute_ms: f64,
) -> Result<Vec<f64>> {
    (0..cfg.eval.episodes as u64)
        .map(|e| {
            let mut spec = EpisodeSpec::from_config(cfg, scenario, e);
            spec.delay = DelaySpec {
                split: cfg.channel.delay.split,
                ..DelaySpec::frames(delay_frames as u32, cfg.scene.fps)
            };
            spec.drop_prob = 0.0;
            spec.server_compute_ms = 0.0;
            spec.local_compute_ms = local_compute_ms;
            Ok(run_episode(models, &spec)?.miou)
        })
        .collect()
}

/// mIoU against round-trip delay for each scenario.
pub fn latency_sweep(
    cfg: &ExperimentConfig,
    models: &ModelSet,
    scenarios: &[Scenario],
    delays: &[usize],
) -> Result<Vec<SweepRow>> {
    let period = cfg.frame_period_ms();
    let mut rows = Vec::new();
    for &scenario in scenarios {
        for &d in delays {
            let (miou_mean, miou_std) = mean_std(&episode_mious(cfg, models, scenario, d, 0.0)?);
            rows.push(SweepRow {
                scenario,
                delay_frames: d,
                delay_ms: d as f64 * period,
                miou_mean,
                miou_std,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("scenario,delay_frames,delay_ms,miou_mean,miou_std\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.3},{:.6},{:.6}\n",
            r.scenario.name(),
            r.delay_frames,
            r.delay_ms,
            r.miou_mean,
            r.miou_std
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLatencyRow {
    pub scenario: Scenario,
    pub local_delay_ms: f64,
    pub rtt_frames: usize,
    pub total_latency_ms: f64,
    pub miou_mean: f64,
    pub interpolated: bool,
}

/// mIoU against total latency for the configured local compute delays.
/// Local compute shifts the scoring labels by whole frames; delays between
/// frames are linearly interpolated from the neighbouring frame-aligned runs.
pub fn total_latency_sweep(
    cfg: &ExperimentConfig,
    models: &ModelSet,
    delays: &[usize],
    local_delays_ms: &[f64],
) -> Result<Vec<TotalLatencyRow>> {
    let period = cfg.frame_period_ms();
    let mut rows = Vec::new();
    let mut at_shift = std::collections::HashMap::new();
    let mut eval = |scenario: Scenario, d: usize, shift: usize| -> Result<f64> {
        if let Some(&v) = at_shift.get(&(scenario, d, shift)) {
            return Ok(v);
        }
        let ms = shift as f64 * period;
        let (m, _) = mean_std(&episode_mious(cfg, models, scenario, d, ms)?);
        at_shift.insert((scenario, d, shift), m);
        Ok(m)
    };
    for &local_ms in local_delays_ms {
        let frames = local_ms / period;
        let lo = frames.floor();
        let aligned = ms_aligned(local_ms, cfg.scene.fps);
        for scenario in [Scenario::Local, Scenario::Fused] {
            for &d in delays {
                let miou_mean = if aligned {
                    eval(scenario, d, crate::channel::ms_to_frames(local_ms, cfg.scene.fps))?
                } else {
                    let a = eval(scenario, d, lo as usize)?;
                    let b = eval(scenario, d, lo as usize + 1)?;
                    a + (b - a) * (frames - lo)
                };
                rows.push(TotalLatencyRow {
                    scenario,
                    local_delay_ms: local_ms,
                    rtt_frames: d,
                    total_latency_ms: local_ms,
                    miou_mean,
                    interpolated: !aligned,
                });
                if scenario == Scenario::Local {
                    break;
                }
            }
        }
    }
    for scenario in [Scenario::RemoteImage, Scenario::RemoteVideo, Scenario::RemotePredictive] {
        for &d in delays {
            rows.push(TotalLatencyRow {
                scenario,
                local_delay_ms: 0.0,
                rtt_frames: d,
                total_latency_ms: d as f64 * period,
                miou_mean: eval(scenario, d, 0)?,
                interpolated: false,
            });
        }
    }
    Ok(rows)
}

/// True when `ms` is a whole number of frame periods (33 ms counts as one
/// frame at 30 fps, as in the figure's labels).
fn ms_aligned(ms: f64, fps: u32) -> bool {
    let frames = ms * fps as f64 / 1000.0;
    (frames - frames.round()).abs() < 0.02
}

pub fn total_latency_csv(rows: &[TotalLatencyRow]) -> String {
    let mut s = String::from("scenario,local_delay_ms,rtt_frames,total_latency_ms,miou_mean,interpolated\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.3},{},{:.3},{:.6},{}\n",
            r.scenario.name(),
            r.local_delay_ms,
            r.rtt_frames,
            r.total_latency_ms,
            r.miou_mean,
            r.interpolated as u8
        ));
    }
    s
}

/// Pre-rendered evaluation scenes, one per episode.
pub fn eval_scenes(cfg: &ExperimentConfig) -> Result<Vec<SceneData>> {
    (0..cfg.eval.episodes as u64)
        .map(|e| {
            let scene = SceneConfig {
                seed: scene_seed(cfg.seed, Split::Eval, e),
                ..cfg.scene.clone()
            };
            SceneData::render(&scene, cfg.eval.frames, cfg.model.local_downsample, cfg.model.uplink_quant_bits)
        })
        .collect()
}

/// Fused mIoU for every (observed, input) delay pair, with the remote delay
/// input force-fed and the features exactly `observed` frames stale.
pub fn delay_matrix(
    cfg: &ExperimentConfig,
    fused: &FusedModel,
    scenes: &[SceneData],
    observed: &[usize],
    input: &[usize],
) -> Result<DelayMatrix> {
    let max_obs = observed.iter().copied().max().unwrap_or(0);
    if cfg.eval.warmup_frames < max_obs {
        return Err(Error::Config("warmup_frames must cover the largest observed delay".into()));
    }
    let classes = cfg.scene.class_count as usize;
    let mut values = Vec::with_capacity(observed.len() * input.len());
    for &obs in observed {
        for &inp in input {
            let mut acc = ConfusionAccumulator::new(classes);
            for scene in scenes {
                for t in cfg.eval.warmup_frames..scene.len() {
                    let window = scene.window(t - obs, fused.remote.spec.context);
                    let rpass = fused.remote.forward(&window, inp)?;
                    let logits = fused.local.forward(&scene.local[t], Some(&rpass.z))?.logits;
                    acc.add(
                        &predict_labels(&logits, fused.local.spec.label_upsample, t as u64),
                        &scene.labels[t],
                    )?;
                }
            }
            values.push(miou(&acc)?);
        }
    }
    DelayMatrix::new(observed.to_vec(), input.to_vec(), values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JitterRow {
    pub scenario: Scenario,
    pub sigma_ms: f64,
    pub delay_frames: usize,
    pub delay_ms: f64,
    pub miou_expected: f64,
    /// Monte-Carlo cross-check; absent for rows without jitter.
    pub miou_monte_carlo: Option<f64>,
}

/// Expected fused mIoU under normal jitter for each `sigma` and delay input,
/// plus jitter-free baseline rows taken from a latency sweep.
pub fn jitter_table(
    cfg: &ExperimentConfig,
    matrix: &DelayMatrix,
    baselines: &[SweepRow],
    sigmas: &[f64],
) -> Result<Vec<JitterRow>> {
    let period = cfg.frame_period_ms();
    let mut rows = Vec::new();
    for &sigma in sigmas {
        for &tau in &matrix.input {
            let spec = JitterSpec {
                tau_in: tau,
                sigma_ms: sigma,
                frame_period_ms: period,
            };
            let mc = if sigma > 0.0 {
                let seed = crate::models::train::splitmix(cfg.seed ^ (tau as u64) ^ sigma.to_bits());
                Some(jitter_monte_carlo(matrix, &spec, cfg.eval.monte_carlo_samples, seed)?)
            } else {
                None
            };
            rows.push(JitterRow {
                scenario: Scenario::Fused,
                sigma_ms: sigma,
                delay_frames: tau,
                delay_ms: tau as f64 * period,
                miou_expected: jitter_expectation(matrix, &spec)?,
                miou_monte_carlo: mc,
            });
        }
    }
    for b in baselines.iter().filter(|b| b.scenario != Scenario::Fused) {
        rows.push(JitterRow {
            scenario: b.scenario,
            sigma_ms: 0.0,
            delay_frames: b.delay_frames,
            delay_ms: b.delay_ms,
            miou_expected: b.miou_mean,
            miou_monte_carlo: None,
        });
    }
    Ok(rows)
}

pub fn jitter_csv(rows: &[JitterRow]) -> String {
    let mut s = String::from("scenario,sigma_ms,delay_frames,delay_ms,miou_expected,miou_monte_carlo\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.3},{},{:.3},{:.6},{}\n",
            r.scenario.name(),
            r.sigma_ms,
            r.delay_frames,
            r.delay_ms,
            r.miou_expected,
            r.miou_monte_carlo.map(|v| format!("{v:.6}")).unwrap_or_default()
        ));
    }
    s
}

/// Forced-delay curves: one curve per delay input over observed delay.
pub fn forced_delay_csv(m: &DelayMatrix, fps: u32) -> String {
    let mut s = String::from("delay_input_frames,observed_frames,observed_ms,miou\n");
    for (c, inp) in m.input.iter().enumerate() {
        for (r, obs) in m.observed.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{:.3},{:.6}\n",
                inp,
                obs,
                *obs as f64 * 1000.0 / fps as f64,
                m.get(r, c)
            ));
        }
    }
    s
}
