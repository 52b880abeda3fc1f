//! The `delayfuse` command line: training, simulated and live runs, sweeps
//! and figure emission.

pub mod manifest;
pub mod svg;

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use delayfuse::config::ExperimentConfig;
use delayfuse::metrics::sweep::{
    delay_matrix, eval_scenes, forced_delay_csv, jitter_csv, jitter_table, latency_sweep, sweep_csv,
    total_latency_csv, total_latency_sweep, JitterRow, SweepRow, TotalLatencyRow,
};
use delayfuse::metrics::DelayMatrix;
use delayfuse::models::train::{log_csv, train_fused, train_local, train_remote, TrainLogRow, TrainingData};
use delayfuse::models::{FusedModel, LocalModel, RemoteModel};
use delayfuse::nnkit::Checkpoint;
use delayfuse::runtime::net::{bind, run_client, spawn_server, ClientOptions, ServeOptions};
use delayfuse::runtime::{run_episode, ClientConfig, EpisodeSpec, ModelSet, Scenario};
use delayfuse::scene::{generate_scene, write_dump, FrameSource};
use thiserror::Error;

use manifest::{write_atomic, RunManifest};
use svg::{Heatmap, LineChart, Series};

pub const LOCAL_CKPT: &str = "local.ddnn";
pub const REMOTE_IMAGE_CKPT: &str = "remote_image.ddnn";
pub const REMOTE_VIDEO_CKPT: &str = "remote_video.ddnn";
pub const REMOTE_CKPT: &str = "remote.ddnn";
pub const FUSED_CKPT: &str = "fused.ddnn";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] delayfuse::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use delayfuse::Error as E;
        match self {
            CliError::Core(E::Config(_) | E::Scene(_)) => 2,
            CliError::Core(E::MissingCheckpoint(_)) => 3,
            CliError::Core(E::Network(_)) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "delayfuse", version, about = "Delay-aware split inference on synthetic video")]
pub struct Cli {
    /// Experiment config (TOML). Without it, the high-motion quickstart
    /// defaults are used and --seed is required.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output and checkpoint directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub port: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainTarget {
    Local,
    Remote,
    Fused,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one evaluation scene to a raw dump plus a PGM preview.
    GenScene {
        #[arg(long, default_value_t = 90)]
        frames: u32,
    },
    /// Train one stage and write its checkpoints.
    Train { target: TrainTarget },
    /// Latency sweep (fig5) and total-latency sweep (fig6).
    Sweep,
    /// Forced-delay curves, the delay matrix and jitter expectations (fig7-9).
    Jitter,
    /// Only the delay matrix (fig8).
    DelayMatrix,
    /// Serve remote features over TCP.
    Serve {
        #[arg(long, default_value = "fused", value_parser = parse_scenario)]
        scenario: Scenario,
        /// Exit after this many client sessions.
        #[arg(long)]
        sessions: Option<usize>,
    },
    /// Run a live client against a server and write its episode log.
    Client {
        #[arg(long, default_value = "fused", value_parser = parse_scenario)]
        scenario: Scenario,
    },
    /// Run one episode on the virtual clock with the configured channel.
    Replay {
        #[arg(long, default_value = "fused", value_parser = parse_scenario)]
        scenario: Scenario,
        #[arg(long, default_value_t = 0)]
        episode: u64,
    },
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    Scenario::parse(s).ok_or_else(|| {
        let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
        format!("unknown scenario {s:?}; expected one of {}", names.join(", "))
    })
}

/// Resolve the effective config from files and flags.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(seed)) => ExperimentConfig::quickstart(seed),
        (None, None) => {
            return Err(delayfuse::Error::Config("a seed is required: pass --config or --seed".into()).into());
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(port) = cli.port {
        cfg.net.port = port;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory plus the manifest being filled in.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
    written: Vec<PathBuf>,
}

impl Run {
    fn start(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self {
            manifest: RunManifest::new(command, &cfg.to_toml(), cfg.seed),
            dir,
            started: Instant::now(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes).map_err(io_err(&path))?;
        self.manifest.record(name, bytes);
        self.written.push(path);
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<PathBuf>> {
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        self.manifest.write(&self.dir).map_err(io_err(&self.dir))?;
        Ok(self.written)
    }
}

fn read_ckpt(dir: &Path, name: &str, hint: &str) -> Result<Checkpoint> {
    let path = dir.join(name);
    match fs::read(&path) {
        Ok(bytes) => Ok(Checkpoint::from_bytes(&bytes).map_err(delayfuse::Error::from)?),
        Err(e) if e.kind() == ErrorKind::NotFound => Err(delayfuse::Error::MissingCheckpoint(format!(
            "{} not found; {hint}",
            path.display()
        ))
        .into()),
        Err(e) => Err(io_err(&path)(e)),
    }
}

fn load_local(dir: &Path) -> Result<LocalModel> {
    Ok(LocalModel::read_from(&read_ckpt(dir, LOCAL_CKPT, "run `train local` first")?)?)
}

fn load_remote(dir: &Path, name: &str) -> Result<RemoteModel> {
    Ok(RemoteModel::read_from(&read_ckpt(dir, name, "run `train remote` first")?)?)
}

fn load_fused(dir: &Path) -> Result<FusedModel> {
    Ok(FusedModel::from_checkpoint(&read_ckpt(dir, FUSED_CKPT, "run `train fused` first")?)?)
}

/// Load exactly the checkpoints `scenarios` need.
pub fn load_models(dir: &Path, scenarios: &[Scenario]) -> Result<ModelSet> {
    let mut set = ModelSet::default();
    for s in scenarios {
        match s {
            Scenario::Local if set.local.is_none() => set.local = Some(load_local(dir)?),
            Scenario::RemoteImage if set.remote_image.is_none() => {
                set.remote_image = Some(load_remote(dir, REMOTE_IMAGE_CKPT)?)
            }
            Scenario::RemoteVideo if set.remote_video.is_none() => {
                set.remote_video = Some(load_remote(dir, REMOTE_VIDEO_CKPT)?)
            }
            Scenario::RemotePredictive if set.remote_predictive.is_none() => {
                set.remote_predictive = Some(load_remote(dir, REMOTE_CKPT)?)
            }
            Scenario::Fused if set.fused.is_none() => set.fused = Some(load_fused(dir)?),
            _ => {}
        }
    }
    Ok(set)
}

fn local_bytes(m: &LocalModel) -> Vec<u8> {
    let mut c = Checkpoint::default();
    m.write_into(&mut c);
    c.to_bytes()
}

fn remote_bytes(m: &RemoteModel) -> Vec<u8> {
    let mut c = Checkpoint::default();
    m.write_into(&mut c);
    c.to_bytes()
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenScene { frames } => cmd_gen_scene(&cfg, *frames),
        Command::Train { target } => cmd_train(&cfg, *target),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Jitter => cmd_jitter(&cfg, true),
        Command::DelayMatrix => cmd_jitter(&cfg, false),
        Command::Serve { scenario, sessions } => cmd_serve(&cfg, *scenario, *sessions),
        Command::Client { scenario } => cmd_client(&cfg, *scenario),
        Command::Replay { scenario, episode } => cmd_replay(&cfg, *scenario, *episode),
    }
}

fn pgm(width: usize, height: usize, max: u8, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{max}\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn cmd_gen_scene(cfg: &ExperimentConfig, frames: u32) -> Result<Vec<PathBuf>> {
    let mut run = Run::start(cfg, "gen-scene")?;
    let scene_cfg = EpisodeSpec::from_config(cfg, Scenario::Local, 0).scene;
    let scene = generate_scene(&scene_cfg).map_err(delayfuse::Error::from)?;
    let path = run.dir.join("scene.ddsc");
    write_dump(&path, &scene, frames).map_err(delayfuse::Error::from)?;
    let dump = fs::read(&path).map_err(io_err(&path))?;
    run.write("scene.ddsc", &dump)?;
    let (frame, labels) = scene.pair(0);
    run.write("frame_0000.pgm", &pgm(frame.width, frame.height, 255, &frame.pixels))?;
    let max_class = scene.class_count().saturating_sub(1).max(1);
    run.write("labels_0000.pgm", &pgm(labels.width, labels.height, max_class, &labels.labels))?;
    run.finish()
}

pub fn cmd_train(cfg: &ExperimentConfig, target: TrainTarget) -> Result<Vec<PathBuf>> {
    let dir = cfg.out_dir.clone();
    let prerequisites = match target {
        TrainTarget::Fused => {
            let remote = read_ckpt(&dir, REMOTE_CKPT, "train fused requires remote checkpoint");
            let remote = match remote {
                Ok(c) => RemoteModel::read_from(&c)?,
                Err(CliError::Core(delayfuse::Error::MissingCheckpoint(_))) => {
                    return Err(delayfuse::Error::MissingCheckpoint(format!(
                        "train fused requires remote checkpoint {} (run `train remote`)",
                        dir.join(REMOTE_CKPT).display()
                    ))
                    .into())
                }
                Err(e) => return Err(e),
            };
            let local = match load_local(&dir) {
                Ok(l) => l,
                Err(CliError::Core(delayfuse::Error::MissingCheckpoint(_))) => {
                    return Err(delayfuse::Error::MissingCheckpoint(format!(
                        "train fused requires local checkpoint {} (run `train local`)",
                        dir.join(LOCAL_CKPT).display()
                    ))
                    .into())
                }
                Err(e) => return Err(e),
            };
            Some((local, remote))
        }
        _ => None,
    };
    let command = match target {
        TrainTarget::Local => "train-local",
        TrainTarget::Remote => "train-remote",
        TrainTarget::Fused => "train-fused",
    };
    let mut run = Run::start(cfg, command)?;
    let data = TrainingData::build(cfg)?;
    let rows: Vec<TrainLogRow> = match (target, prerequisites) {
        (TrainTarget::Local, _) => {
            let (model, rows) = train_local(cfg, &data)?;
            run.write(LOCAL_CKPT, &local_bytes(&model))?;
            rows
        }
        (TrainTarget::Remote, _) => {
            let (models, rows) = train_remote(cfg, &data)?;
            run.write(REMOTE_IMAGE_CKPT, &remote_bytes(&models.image))?;
            run.write(REMOTE_VIDEO_CKPT, &remote_bytes(&models.video))?;
            run.write(REMOTE_CKPT, &remote_bytes(&models.predictive))?;
            rows
        }
        (TrainTarget::Fused, Some((local, remote))) => {
            let (model, rows) = train_fused(cfg, &data, &local, &remote)?;
            run.write(FUSED_CKPT, &model.to_checkpoint().to_bytes())?;
            rows
        }
        (TrainTarget::Fused, None) => unreachable!("prerequisites loaded above"),
    };
    run.write(&format!("{}.csv", command.replace('-', "_")), log_csv(&rows).as_bytes())?;
    run.finish()
}

fn fig5_chart(rows: &[SweepRow], fps: u32) -> LineChart {
    let series = Scenario::ALL
        .iter()
        .map(|&s| Series {
            name: s.name().to_string(),
            points: rows
                .iter()
                .filter(|r| r.scenario == s)
                .map(|r| (r.delay_ms, r.miou_mean))
                .collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    LineChart {
        title: "Segmentation accuracy vs round-trip latency".into(),
        x_label: "round-trip latency (ms)".into(),
        x2: Some(("round-trip latency (frames)".into(), fps as f64 / 1000.0)),
        y_label: "mIoU".into(),
        series,
    }
}

fn fig6_chart(rows: &[TotalLatencyRow], delays: &[usize], period_ms: f64, fps: u32) -> LineChart {
    let mut series = Vec::new();
    let mut keys: Vec<(Scenario, u64)> = Vec::new();
    for r in rows {
        let key = (r.scenario, r.local_delay_ms.to_bits());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for (scenario, bits) in keys {
        let local_ms = f64::from_bits(bits);
        let picked: Vec<_> = rows
            .iter()
            .filter(|r| r.scenario == scenario && r.local_delay_ms.to_bits() == bits)
            .collect();
        let points = if scenario == Scenario::Local {
            let m = picked[0].miou_mean;
            delays.iter().map(|&d| (d as f64 * period_ms + local_ms, m)).collect()
        } else {
            picked
                .iter()
                .map(|r| (r.rtt_frames as f64 * period_ms + local_ms, r.miou_mean))
                .collect()
        };
        let name = if scenario.remote_only() {
            scenario.name().to_string()
        } else {
            format!("{} (local {local_ms:.0} ms)", scenario.name())
        };
        series.push(Series { name, points });
    }
    LineChart {
        title: "Segmentation accuracy vs total latency".into(),
        x_label: "total latency (ms)".into(),
        x2: Some(("total latency (frames)".into(), fps as f64 / 1000.0)),
        y_label: "mIoU".into(),
        series,
    }
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let models = load_models(&cfg.out_dir, &Scenario::ALL)?;
    let mut run = Run::start(cfg, "sweep")?;
    let rows = latency_sweep(cfg, &models, &Scenario::ALL, &cfg.eval.delays)?;
    run.write("fig5.csv", sweep_csv(&rows).as_bytes())?;
    run.write("fig5.svg", fig5_chart(&rows, cfg.scene.fps).render().as_bytes())?;
    let total = total_latency_sweep(cfg, &models, &cfg.eval.delays, &cfg.eval.local_delays_ms)?;
    run.write("fig6.csv", total_latency_csv(&total).as_bytes())?;
    let chart = fig6_chart(&total, &cfg.eval.delays, cfg.frame_period_ms(), cfg.scene.fps);
    run.write("fig6.svg", chart.render().as_bytes())?;
    run.finish()
}

fn fig7_chart(m: &DelayMatrix, period_ms: f64, fps: u32) -> LineChart {
    LineChart {
        title: "Accuracy vs observed delay for forced delay inputs".into(),
        x_label: "observed delay (ms)".into(),
        x2: Some(("observed delay (frames)".into(), fps as f64 / 1000.0)),
        y_label: "mIoU".into(),
        series: m
            .input
            .iter()
            .enumerate()
            .map(|(c, inp)| Series {
                name: format!("delay input {inp}"),
                points: m
                    .observed
                    .iter()
                    .enumerate()
                    .map(|(r, obs)| (*obs as f64 * period_ms, m.get(r, c)))
                    .collect(),
            })
            .collect(),
    }
}

fn fig8_heatmap(m: &DelayMatrix) -> Heatmap {
    Heatmap {
        title: "mIoU by observed delay and delay input".into(),
        row_label: "observed delay (frames)".into(),
        col_label: "delay input (frames)".into(),
        rows: m.observed.iter().map(|v| v.to_string()).collect(),
        cols: m.input.iter().map(|v| v.to_string()).collect(),
        values: m.values.clone(),
    }
}

fn fig9_chart(rows: &[JitterRow], fps: u32) -> LineChart {
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let name = if r.scenario == Scenario::Fused {
            format!("{} (sigma {:.0} ms)", r.scenario.name(), r.sigma_ms)
        } else {
            format!("{} (no jitter)", r.scenario.name())
        };
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((r.delay_ms, r.miou_expected)),
            None => series.push(Series {
                name,
                points: vec![(r.delay_ms, r.miou_expected)],
            }),
        }
    }
    LineChart {
        title: "Expected accuracy under delay jitter".into(),
        x_label: "mean round-trip latency (ms)".into(),
        x2: Some(("mean round-trip latency (frames)".into(), fps as f64 / 1000.0)),
        y_label: "expected mIoU".into(),
        series,
    }
}

/// fig7-9, or only fig8 when `full` is false.
pub fn cmd_jitter(cfg: &ExperimentConfig, full: bool) -> Result<Vec<PathBuf>> {
    let scenarios: &[Scenario] = if full {
        &[Scenario::Fused, Scenario::Local, Scenario::RemotePredictive]
    } else {
        &[Scenario::Fused]
    };
    let models = load_models(&cfg.out_dir, scenarios)?;
    let fused = models.fused.as_ref().expect("loaded above");
    let mut run = Run::start(cfg, if full { "jitter" } else { "delay-matrix" })?;
    let scenes = eval_scenes(cfg)?;
    let m = delay_matrix(cfg, fused, &scenes, &cfg.eval.matrix_observed, &cfg.eval.matrix_input)?;
    run.write("fig8.csv", m.to_csv().as_bytes())?;
    run.write("fig8.svg", fig8_heatmap(&m).render().as_bytes())?;
    if full {
        let fps = cfg.scene.fps;
        run.write("fig7.csv", forced_delay_csv(&m, fps).as_bytes())?;
        run.write("fig7.svg", fig7_chart(&m, cfg.frame_period_ms(), fps).render().as_bytes())?;
        let baselines = latency_sweep(cfg, &models, &[Scenario::Local, Scenario::RemotePredictive], &m.input)?;
        let rows = jitter_table(cfg, &m, &baselines, &cfg.eval.sigmas_ms)?;
        run.write("fig9.csv", jitter_csv(&rows).as_bytes())?;
        run.write("fig9.svg", fig9_chart(&rows, fps).render().as_bytes())?;
    }
    run.finish()
}

fn client_config(cfg: &ExperimentConfig) -> ClientConfig {
    ClientConfig {
        compute_delay_ms: cfg.channel.local_compute_ms,
        max_feature_age_frames: cfg.net.max_feature_age_frames,
        local_downsample: cfg.model.local_downsample,
        uplink_quant_bits: cfg.model.uplink_quant_bits,
        fps: cfg.scene.fps,
        class_count: cfg.scene.class_count as usize,
    }
}

pub fn cmd_serve(cfg: &ExperimentConfig, scenario: Scenario, sessions: Option<usize>) -> Result<Vec<PathBuf>> {
    if !scenario.uses_remote() {
        return Err(delayfuse::Error::Config("the local scenario has no server side".into()).into());
    }
    let models = load_models(&cfg.out_dir, &[scenario])?;
    let listener = bind(&cfg.net.host, cfg.net.port)?;
    let run = Run::start(cfg, "serve")?;
    let opts = ServeOptions {
        scenario,
        compute_delay_ms: cfg.channel.server_compute_ms,
        fps: cfg.scene.fps,
        max_sessions: sessions,
    };
    let server = spawn_server(listener, &models, opts)?;
    println!("serving {} on {}:{}", scenario.name(), cfg.net.host, server.port);
    let sent = server.join()?;
    println!("sent {sent} feature messages");
    run.finish()
}

pub fn cmd_client(cfg: &ExperimentConfig, scenario: Scenario) -> Result<Vec<PathBuf>> {
    let models = load_models(&cfg.out_dir, &[scenario])?;
    let local = models.client_local(scenario)?;
    let mut run = Run::start(cfg, "client")?;
    let spec = EpisodeSpec::from_config(cfg, scenario, 0);
    let scene = generate_scene(&spec.scene).map_err(delayfuse::Error::from)?;
    let opts = ClientOptions {
        scenario,
        frames: cfg.eval.frames,
        warmup_frames: cfg.eval.warmup_frames,
        fuse_deadline_ms: cfg.net.fuse_deadline_ms,
        client: client_config(cfg),
    };
    let result = run_client((cfg.net.host.as_str(), cfg.net.port), &scene, local, &opts)?;
    run.write(&format!("client_{}.csv", scenario.name()), result.log.to_csv().as_bytes())?;
    println!("client {} mIoU {:.4}", scenario.name(), result.log.miou);
    let written = run.finish()?;
    match result.connect_error {
        Some(e) => Err(delayfuse::Error::Network(e).into()),
        None => Ok(written),
    }
}

pub fn cmd_replay(cfg: &ExperimentConfig, scenario: Scenario, episode: u64) -> Result<Vec<PathBuf>> {
    let models = load_models(&cfg.out_dir, &[scenario])?;
    let mut run = Run::start(cfg, "replay")?;
    let log = run_episode(&models, &EpisodeSpec::from_config(cfg, scenario, episode))?;
    run.write(&format!("replay_{}.csv", scenario.name()), log.to_csv().as_bytes())?;
    println!("replay {} episode {episode} mIoU {:.4}", scenario.name(), log.miou);
    run.finish()
}
