//! Client and server state machines, driven either by a virtual clock over
//! [`SimChannel`]s or by wall time over sockets.

pub mod net;

use std::collections::{BTreeMap, HashMap};

use crate::channel::{ms_to_frames, ms_to_us, DelaySpec, MsgType, SimChannel, WireMessage};
use crate::error::{Error, Result};
use crate::metrics::{miou, ConfusionAccumulator};
use crate::models::train::{scene_seed, splitmix, Split};
use crate::models::{
    fused_forward, local_input, predict_labels, remote_forward, remote_head, remote_input, FrameWindow, FusedModel,
    LocalModel, RemoteFeatures, RemoteModel,
};
use crate::nnkit::FeatureGrid;
use crate::scene::{capture_ts_us, generate_scene, Frame, FrameSource, LabelMap, SceneConfig};

/// The five systems compared in the latency sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    Local,
    RemoteImage,
    RemoteVideo,
    RemotePredictive,
    Fused,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Local,
        Scenario::RemoteImage,
        Scenario::RemoteVideo,
        Scenario::RemotePredictive,
        Scenario::Fused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Local => "local",
            Scenario::RemoteImage => "remote-image",
            Scenario::RemoteVideo => "remote-video",
            Scenario::RemotePredictive => "remote-predictive",
            Scenario::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Remote-only scenarios predict from the server's logits.
    pub fn remote_only(self) -> bool {
        matches!(self, Scenario::RemoteImage | Scenario::RemoteVideo | Scenario::RemotePredictive)
    }

    pub fn uses_remote(self) -> bool {
        self != Scenario::Local
    }

    pub fn delay_aware(self) -> bool {
        matches!(self, Scenario::RemotePredictive | Scenario::Fused)
    }
}

/// Whatever checkpoints have been loaded.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub local: Option<LocalModel>,
    pub remote_image: Option<RemoteModel>,
    pub remote_video: Option<RemoteModel>,
    pub remote_predictive: Option<RemoteModel>,
    pub fused: Option<FusedModel>,
}

impl ModelSet {
    fn missing(what: &str) -> Error {
        Error::MissingCheckpoint(format!("{what} checkpoint required"))
    }

    /// The local model that runs on the client, if the scenario has one.
    pub fn client_local(&self, scenario: Scenario) -> Result<Option<&LocalModel>> {
        match scenario {
            Scenario::Local => self.local.as_ref().map(Some).ok_or_else(|| Self::missing("local")),
            Scenario::Fused => Ok(Some(&self.fused.as_ref().ok_or_else(|| Self::missing("fused"))?.local)),
            _ => Ok(None),
        }
    }

    /// The model the server runs, if any.
    pub fn server_remote(&self, scenario: Scenario) -> Result<Option<&RemoteModel>> {
        fn pick<'a>(m: &'a Option<RemoteModel>, what: &str) -> Result<Option<&'a RemoteModel>> {
            m.as_ref().map(Some).ok_or_else(|| ModelSet::missing(what))
        }
        match scenario {
            Scenario::Local => Ok(None),
            Scenario::RemoteImage => pick(&self.remote_image, "remote-image"),
            Scenario::RemoteVideo => pick(&self.remote_video, "remote-video"),
            Scenario::RemotePredictive => pick(&self.remote_predictive, "remote"),
            Scenario::Fused => Ok(Some(&self.fused.as_ref().ok_or_else(|| Self::missing("fused"))?.remote)),
        }
    }
}

/// Round-trip estimate: EWMA with weight 0.1 on each new sample, seeded by
/// the first sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DelayEstimator {
    pub estimate_ms: Option<f64>,
}

impl DelayEstimator {
    pub const ALPHA: f64 = 0.1;

    pub fn update(&mut self, sample_ms: f64) -> f64 {
        let sample = sample_ms.max(0.0);
        let next = match self.estimate_ms {
            None => sample,
            Some(e) => (1.0 - Self::ALPHA) * e + Self::ALPHA * sample,
        };
        self.estimate_ms = Some(next);
        next
    }

    pub fn value_ms(&self) -> f64 {
        self.estimate_ms.unwrap_or(0.0)
    }
}

/// One remote result held by the client.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteResult {
    pub grid: FeatureGrid<f32>,
    pub basis_index: u64,
    pub basis_ts_us: u64,
    pub delay_input_frames: u8,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub scenario: Scenario,
    pub latest: Option<RemoteResult>,
    pub delay: DelayEstimator,
    pub next_seq: u32,
    pub compute_delay_ms: f64,
    pub max_feature_age_frames: u64,
    pub local_downsample: usize,
    pub uplink_quant_bits: u8,
    pub fps: u32,
    pub class_count: usize,
    pub stale_ignored: u64,
    sent: HashMap<u64, u64>,
}

/// What the client emits for one captured frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub t: u64,
    pub prediction: LabelMap,
    pub delay_obs_frames: Option<u64>,
    pub delay_input_frames: Option<u8>,
    pub had_remote: bool,
    pub total_latency_ms: Option<f64>,
}

impl ClientState {
    pub fn new(scenario: Scenario, cfg: &ClientConfig) -> Self {
        Self {
            scenario,
            latest: None,
            delay: DelayEstimator::default(),
            next_seq: 0,
            compute_delay_ms: cfg.compute_delay_ms,
            max_feature_age_frames: cfg.max_feature_age_frames,
            local_downsample: cfg.local_downsample,
            uplink_quant_bits: cfg.uplink_quant_bits,
            fps: cfg.fps,
            class_count: cfg.class_count,
            stale_ignored: 0,
            sent: HashMap::new(),
        }
    }

    /// The uplink FRAME for captured frame `frame`, stamped at `ts_us`.
    pub fn frame_message(&mut self, frame: &Frame, ts_us: u64) -> Result<WireMessage> {
        let up = remote_input(frame, self.uplink_quant_bits)?;
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        self.sent.insert(ts_us, frame.capture_index);
        let est = self.delay.value_ms().round().clamp(0.0, u16::MAX as f64) as u16;
        Ok(WireMessage::frame(
            seq,
            ts_us,
            est,
            up.width as u16,
            up.height as u16,
            up.pixels,
        ))
    }

    /// Absorb a downlink FEAT received at `now_us`. Returns false when it is
    /// not fresher than what the client already holds.
    pub fn on_feat(&mut self, msg: &WireMessage, now_us: u64) -> bool {
        if msg.msg_type != MsgType::Feat {
            return false;
        }
        let Some(&basis_index) = self.sent.get(&msg.capture_ts_us) else {
            return false;
        };
        self.delay.update(now_us.saturating_sub(msg.capture_ts_us) as f64 / 1000.0);
        if self.latest.as_ref().is_some_and(|l| l.basis_index >= basis_index) {
            self.stale_ignored += 1;
            return false;
        }
        let Some(grid) = msg.to_grid() else {
            return false;
        };
        self.latest = Some(RemoteResult {
            grid,
            basis_index,
            basis_ts_us: msg.capture_ts_us,
            delay_input_frames: msg.delay_used_frames(),
        });
        self.sent.retain(|_, &mut i| i + 64 > basis_index);
        true
    }

    /// Drop remote state, e.g. after the connection is lost.
    pub fn clear_remote(&mut self) {
        self.latest = None;
    }

    /// Predict for captured frame `frame` at `now_us`.
    pub fn predict(&mut self, local: Option<&LocalModel>, frame: &Frame, now_us: u64) -> Result<FrameRecord> {
        let t = frame.capture_index;
        if self
            .latest
            .as_ref()
            .is_some_and(|l| t.saturating_sub(l.basis_index) > self.max_feature_age_frames)
        {
            self.latest = None;
        }
        let remote = self.latest.as_ref().filter(|l| l.basis_index <= t);
        let prediction = if self.scenario.remote_only() {
            match remote {
                Some(r) => predict_labels(&r.grid, frame.width / r.grid.width, t),
                None => LabelMap {
                    capture_index: t,
                    width: frame.width,
                    height: frame.height,
                    labels: vec![0; frame.width * frame.height],
                },
            }
        } else {
            let local = local.ok_or_else(|| Error::MissingCheckpoint("local checkpoint required".into()))?;
            let input = local_input(frame, self.local_downsample)?;
            let z = remote.filter(|_| self.scenario == Scenario::Fused).map(|r| RemoteFeatures {
                grid: r.grid.clone(),
                basis_index: r.basis_index,
                delay_frames_used: r.delay_input_frames,
                produced_ts_us: r.basis_ts_us,
            });
            let logits = fused_forward(local, &input, z.as_ref())?;
            predict_labels(&logits, local.spec.label_upsample, t)
        };
        let used = remote.filter(|_| self.scenario.uses_remote());
        let total_latency_ms = if self.scenario.remote_only() {
            used.map(|r| now_us.saturating_sub(r.basis_ts_us) as f64 / 1000.0)
        } else {
            Some(self.compute_delay_ms)
        };
        Ok(FrameRecord {
            t,
            prediction,
            delay_obs_frames: used.map(|r| t - r.basis_index),
            delay_input_frames: used.map(|r| r.delay_input_frames),
            had_remote: used.is_some(),
            total_latency_ms,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub compute_delay_ms: f64,
    pub max_feature_age_frames: u64,
    pub local_downsample: usize,
    pub uplink_quant_bits: u8,
    pub fps: u32,
    pub class_count: usize,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub remote: RemoteModel,
    pub compute_delay_ms: f64,
    pub fps: u32,
    /// Delay-aware servers condition on the client's estimate.
    pub delay_aware: bool,
    /// Remote-only scenarios ship logits instead of features.
    pub send_logits: bool,
    /// Forces the delay input regardless of the estimate.
    pub forced_delay: Option<usize>,
    pub decode_failures: u64,
    ring: BTreeMap<u64, (Frame, u64)>,
    newest: Option<u64>,
    next_seq: u32,
}

impl ServerState {
    pub fn new(remote: RemoteModel, scenario: Scenario, compute_delay_ms: f64, fps: u32) -> Self {
        Self {
            remote,
            compute_delay_ms,
            fps,
            delay_aware: scenario.delay_aware(),
            send_logits: scenario.remote_only(),
            forced_delay: None,
            decode_failures: 0,
            ring: BTreeMap::new(),
            newest: None,
            next_seq: 0,
        }
    }

    pub fn context(&self) -> usize {
        self.remote.spec.context
    }

    /// Delay input for an estimate in ms, clamped to the embedding table.
    pub fn delay_input(&self, delay_est_ms: f64) -> usize {
        if let Some(d) = self.forced_delay {
            return d;
        }
        if !self.delay_aware {
            return 0;
        }
        ms_to_frames(delay_est_ms, self.fps).min(self.remote.spec.max_delay)
    }

    /// Handle one uplink FRAME; returns the FEAT reply when this frame is the
    /// newest seen. Older frames only fill in context.
    pub fn on_frame(&mut self, msg: &WireMessage) -> Result<Option<WireMessage>> {
        let (w, h, c) = msg.dims;
        if msg.msg_type != MsgType::Frame || c != 1 || msg.payload.len() != w as usize * h as usize {
            self.decode_failures += 1;
            return Ok(None);
        }
        let index = msg.seq as u64;
        let frame = Frame {
            capture_index: index,
            capture_ts_us: msg.capture_ts_us,
            width: w as usize,
            height: h as usize,
            pixels: msg.payload.clone(),
        };
        let k = self.context() as u64;
        let newest = self.newest.map_or(index, |n| n.max(index));
        if newest >= k && index <= newest - k {
            return Ok(None);
        }
        self.ring.insert(index, (frame, msg.capture_ts_us));
        self.ring.retain(|&i, _| i + k > newest);
        if self.newest.is_some_and(|n| index <= n) {
            return Ok(None);
        }
        self.newest = Some(index);
        let spec = self.remote.spec;
        let window = FrameWindow::gather(index, spec.context, spec.input_width, spec.input_height, |i| {
            self.ring.get(&i).map(|(f, _)| f.clone())
        });
        let d = self.delay_input(msg.delay_est_ms() as f64);
        let z = remote_forward(&self.remote, &window, d)?;
        let grid = if self.send_logits { remote_head(&self.remote, &z)? } else { z.grid };
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        Ok(Some(WireMessage::feat(seq, msg.capture_ts_us, d as u8, &grid)))
    }
}

/// Everything that shapes one simulated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub scenario: Scenario,
    pub scene: SceneConfig,
    pub frames: usize,
    pub warmup_frames: usize,
    /// Round-trip delay.
    pub delay: DelaySpec,
    pub drop_prob: f64,
    pub sever_downlink: bool,
    pub server_compute_ms: f64,
    pub local_compute_ms: f64,
    pub max_feature_age_frames: u64,
    pub local_downsample: usize,
    pub uplink_quant_bits: u8,
    pub seed: u64,
}

impl EpisodeSpec {
    /// Episode `episode` of an experiment, with its own scene and channel seeds.
    pub fn from_config(cfg: &crate::config::ExperimentConfig, scenario: Scenario, episode: u64) -> Self {
        Self {
            scenario,
            scene: SceneConfig {
                seed: scene_seed(cfg.seed, Split::Eval, episode),
                ..cfg.scene.clone()
            },
            frames: cfg.eval.frames,
            warmup_frames: cfg.eval.warmup_frames,
            delay: cfg.channel.delay,
            drop_prob: cfg.channel.drop_prob,
            sever_downlink: false,
            server_compute_ms: cfg.channel.server_compute_ms,
            local_compute_ms: cfg.channel.local_compute_ms,
            max_feature_age_frames: cfg.net.max_feature_age_frames,
            local_downsample: cfg.model.local_downsample,
            uplink_quant_bits: cfg.model.uplink_quant_bits,
            seed: splitmix(cfg.seed ^ episode.rotate_left(17)),
        }
    }

    fn client_config(&self) -> ClientConfig {
        ClientConfig {
            compute_delay_ms: self.local_compute_ms,
            max_feature_age_frames: self.max_feature_age_frames,
            local_downsample: self.local_downsample,
            uplink_quant_bits: self.uplink_quant_bits,
            fps: self.scene.fps,
            class_count: self.scene.class_count as usize,
        }
    }

    /// Frames of label shift caused by local compute time.
    pub fn label_shift(&self) -> u64 {
        ms_to_frames(self.local_compute_ms, self.scene.fps) as u64
    }
}

/// Per-frame records of one episode and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub scenario: Scenario,
    pub records: Vec<FrameRecord>,
    /// Running mIoU after each frame, `None` during warmup.
    pub miou_running: Vec<Option<f64>>,
    pub miou: f64,
}

impl EpisodeLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let mut s = String::from("t,delay_obs_frames,delay_input_frames,had_remote,miou_running,total_latency_ms\n");
        for (r, m) in self.records.iter().zip(&self.miou_running) {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.t,
                opt(r.delay_obs_frames.map(|v| v.to_string())),
                opt(r.delay_input_frames.map(|v| v.to_string())),
                r.had_remote as u8,
                opt(m.map(|v| format!("{v:.6}"))),
                opt(r.total_latency_ms.map(|v| format!("{v:.3}"))),
            ));
        }
        s
    }
}

/// Score records against labels from `labels_at`, shifted by `shift` frames
/// and skipping the first `warmup` frames.
pub fn score_records(
    records: &[FrameRecord],
    class_count: usize,
    warmup: usize,
    shift: u64,
    mut labels_at: impl FnMut(u64) -> Option<LabelMap>,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut acc = ConfusionAccumulator::new(class_count);
    let mut running = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if i < warmup {
            running.push(None);
            continue;
        }
        let truth = labels_at(r.t + shift)
            .ok_or_else(|| Error::Metric(format!("no labels for frame {}", r.t + shift)))?;
        acc.add(&r.prediction, &truth)?;
        running.push(Some(miou(&acc)?));
    }
    Ok((running, miou(&acc)?))
}

/// Drive one episode on the virtual clock.
pub fn run_episode(models: &ModelSet, spec: &EpisodeSpec) -> Result<EpisodeLog> {
    run_episode_with(models, spec, None)
}

/// As [`run_episode`], optionally forcing the server's delay input.
pub fn run_episode_with(models: &ModelSet, spec: &EpisodeSpec, forced_delay: Option<usize>) -> Result<EpisodeLog> {
    let scene = generate_scene(&spec.scene)?;
    let local = models.client_local(spec.scenario)?;
    let mut server = models
        .server_remote(spec.scenario)?
        .map(|r| ServerState::new(r.clone(), spec.scenario, spec.server_compute_ms, spec.scene.fps));
    if let Some(s) = server.as_mut() {
        s.forced_delay = forced_delay;
    }
    let (up_spec, down_spec) = spec.delay.legs();
    let down_drop = if spec.sever_downlink { 1.0 } else { spec.drop_prob };
    let mut uplink = SimChannel::new(up_spec, spec.drop_prob, splitmix(spec.seed ^ 0x7570));
    let mut downlink = SimChannel::new(down_spec, down_drop, splitmix(spec.seed ^ 0x646f776e));
    let mut client = ClientState::new(spec.scenario, &spec.client_config());
    let mut records = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames as u64 {
        let now = capture_ts_us(t, spec.scene.fps);
        let frame = scene.frame_at(t);
        if let Some(server) = server.as_mut() {
            uplink.send(client.frame_message(&frame, now)?, now);
            for flight in uplink.poll(now) {
                if let Some(reply) = server.on_frame(&flight.message)? {
                    let ready = flight.deliver_at_us + ms_to_us(server.compute_delay_ms);
                    downlink.send(reply, ready);
                }
            }
            for flight in downlink.poll(now) {
                client.on_feat(&flight.message, now);
            }
        }
        records.push(client.predict(local, &frame, now)?);
    }
    let shift = spec.label_shift();
    let (miou_running, miou) = score_records(
        &records,
        spec.scene.class_count as usize,
        spec.warmup_frames,
        shift,
        |t| scene.labels(t),
    )?;
    Ok(EpisodeLog {
        scenario: spec.scenario,
        records,
        miou_running,
        miou,
    })
}
