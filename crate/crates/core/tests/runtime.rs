use std::sync::Arc;
use std::time::Duration;

use delayfuse::channel::{DelaySpec, WireMessage};
use delayfuse::config::ExperimentConfig;
use delayfuse::models::{FusedModel, LocalModel, RemoteModel};
use delayfuse::runtime::net::{bind, run_client, spawn_server, ClientOptions, Freshest, ServeOptions};
use delayfuse::runtime::{
    run_episode, ClientConfig, ClientState, DelayEstimator, EpisodeSpec, ModelSet, Scenario, ServerState,
};
use delayfuse::scene::{generate_scene, Frame};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> ExperimentConfig {
    let mut c = ExperimentConfig::quickstart(4);
    c.eval.frames = 30;
    c.eval.warmup_frames = 6;
    c
}

fn models(c: &ExperimentConfig) -> ModelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let local = LocalModel::<f32>::new(c.model.local_spec(&c.scene), &mut rng);
    let video = RemoteModel::<f32>::new(c.model.remote_spec(&c.scene, c.model.context), &mut rng);
    let image = RemoteModel::<f32>::new(c.model.remote_spec(&c.scene, 1), &mut rng);
    ModelSet {
        local: Some(local.clone()),
        remote_image: Some(image),
        remote_video: Some(video.clone()),
        remote_predictive: Some(video.clone()),
        fused: Some(FusedModel { local, remote: video }),
    }
}

fn spec(c: &ExperimentConfig, scenario: Scenario, delay: DelaySpec) -> EpisodeSpec {
    EpisodeSpec {
        delay,
        ..EpisodeSpec::from_config(c, scenario, 0)
    }
}

#[test]
fn ewma_examples() {
    let mut e = DelayEstimator::default();
    assert_eq!(e.update(100.0), 100.0);
    assert!((e.update(200.0) - 110.0).abs() < 1e-12);
    let mut e = DelayEstimator::default();
    for _ in 0..500 {
        e.update(42.0);
    }
    assert!((e.value_ms() - 42.0).abs() < 1e-9);
}

#[test]
fn server_delay_input_mapping() {
    let c = cfg();
    let m = models(&c);
    let s = ServerState::new(m.remote_predictive.unwrap(), Scenario::RemotePredictive, 0.0, 30);
    assert_eq!(s.delay_input(100.0), 3);
    assert_eq!(s.delay_input(165.0), 5);
    assert_eq!(s.delay_input(1000.0), 5);
    let du = ServerState::new(m.remote_video.unwrap(), Scenario::RemoteVideo, 0.0, 30);
    assert_eq!(du.delay_input(165.0), 0);
}

#[test]
fn cold_start_produces_features() {
    let c = cfg();
    let m = models(&c);
    let mut s = ServerState::new(m.remote_predictive.unwrap(), Scenario::Fused, 0.0, 30);
    let f = generate_scene(&c.scene).unwrap().frame_at(0);
    let msg = WireMessage::frame(0, 0, 0, 64, 64, f.pixels);
    let reply = s.on_frame(&msg).unwrap().expect("features on first frame");
    let grid = reply.to_grid().unwrap();
    assert_eq!(grid.shape(), (16, 4, 4));
}

#[test]
fn late_frame_only_adds_context() {
    let c = cfg();
    let m = models(&c);
    let mut s = ServerState::new(m.remote_predictive.unwrap(), Scenario::Fused, 0.0, 30);
    let px = vec![100u8; 64 * 64];
    assert!(s.on_frame(&WireMessage::frame(5, 5, 0, 64, 64, px.clone())).unwrap().is_some());
    assert!(s.on_frame(&WireMessage::frame(4, 4, 0, 64, 64, px.clone())).unwrap().is_none());
    assert!(s.on_frame(&WireMessage::frame(6, 6, 0, 64, 64, px)).unwrap().is_some());
}

#[test]
fn stale_feat_ignored() {
    let c = cfg();
    let m = models(&c);
    let cc = ClientConfig {
        compute_delay_ms: 0.0,
        max_feature_age_frames: 10,
        local_downsample: 2,
        uplink_quant_bits: 6,
        fps: 30,
        class_count: 4,
    };
    let mut client = ClientState::new(Scenario::Fused, &cc);
    let mut server = ServerState::new(m.remote_predictive.unwrap(), Scenario::Fused, 0.0, 30);
    let scene = generate_scene(&c.scene).unwrap();
    let mut replies = Vec::new();
    for t in 0..3u64 {
        let mut f: Frame = scene.frame_at(t);
        f.capture_index = t;
        let msg = client.frame_message(&f, t * 33_333).unwrap();
        replies.push(server.on_frame(&msg).unwrap().unwrap());
    }
    assert!(client.on_feat(&replies[2], 100_000));
    assert!(!client.on_feat(&replies[1], 110_000));
    assert_eq!(client.latest.as_ref().unwrap().basis_index, 2);
    assert_eq!(client.stale_ignored, 1);
}

#[test]
fn severed_downlink_equals_local() {
    let c = cfg();
    let m = models(&c);
    let mut fused = spec(&c, Scenario::Fused, DelaySpec::frames(2, 30));
    fused.sever_downlink = true;
    let fused_log = run_episode(&m, &fused).unwrap();
    assert!(fused_log.records.iter().all(|r| !r.had_remote));
    let local_log = run_episode(&m, &spec(&c, Scenario::Local, DelaySpec::frames(2, 30))).unwrap();
    let a: Vec<_> = fused_log.records.iter().map(|r| &r.prediction).collect();
    let b: Vec<_> = local_log.records.iter().map(|r| &r.prediction).collect();
    assert_eq!(a, b);
    assert_eq!(fused_log.miou, local_log.miou);
}

#[test]
fn local_scenario_ignores_channel() {
    let c = cfg();
    let m = models(&c);
    let a = run_episode(&m, &spec(&c, Scenario::Local, DelaySpec::frames(0, 30))).unwrap();
    let b = run_episode(&m, &spec(&c, Scenario::Local, DelaySpec::normal(120.0, 30.0))).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn staleness_matches_constant_delay() {
    let c = cfg();
    let m = models(&c);
    for d in 0..=5u32 {
        let log = run_episode(&m, &spec(&c, Scenario::Fused, DelaySpec::frames(d, 30))).unwrap();
        for r in &log.records[d as usize..] {
            assert_eq!(r.delay_obs_frames, Some(d as u64), "t={}", r.t);
        }
        // the first estimate rides on a frame sent after one full round trip
        for r in &log.records[2 * d as usize + 1..] {
            assert_eq!(r.delay_input_frames, Some(d as u8));
        }
    }
}

#[test]
fn zero_delay_staleness_follows_server_compute() {
    let c = cfg();
    let m = models(&c);
    let mut s = spec(&c, Scenario::Fused, DelaySpec::constant(0.0));
    s.server_compute_ms = 70.0;
    let log = run_episode(&m, &s).unwrap();
    let tail: Vec<_> = log.records[10..].iter().map(|r| r.delay_obs_frames).collect();
    assert!(tail.iter().all(|&d| d == Some(3)), "{tail:?}");
}

#[test]
fn invariants_under_jitter() {
    let c = cfg();
    let m = models(&c);
    let mut s = spec(&c, Scenario::Fused, DelaySpec::normal(80.0, 40.0));
    s.drop_prob = 0.2;
    let log = run_episode(&m, &s).unwrap();
    assert_eq!(log.records.len(), c.eval.frames);
    let mut last = 0;
    for r in &log.records {
        if let Some(d) = r.delay_obs_frames {
            let basis = r.t - d;
            assert!(basis <= r.t);
            assert!(basis >= last);
            last = basis;
        }
    }
}

#[test]
fn episodes_are_deterministic() {
    let c = cfg();
    let m = models(&c);
    let s = spec(&c, Scenario::Fused, DelaySpec::normal(60.0, 20.0));
    assert_eq!(run_episode(&m, &s).unwrap(), run_episode(&m, &s).unwrap());
}

#[test]
fn remote_only_uses_background_until_first_result() {
    let c = cfg();
    let m = models(&c);
    let log = run_episode(&m, &spec(&c, Scenario::RemoteVideo, DelaySpec::frames(3, 30))).unwrap();
    for r in &log.records[..3] {
        assert!(!r.had_remote);
        assert!(r.prediction.labels.iter().all(|&l| l == 0));
        assert_eq!(r.total_latency_ms, None);
    }
    let r = &log.records[10];
    assert!((r.total_latency_ms.unwrap() - 100.0).abs() < 0.01);
}

#[test]
fn missing_checkpoint_is_reported() {
    let c = cfg();
    let m = ModelSet::default();
    let err = run_episode(&m, &spec(&c, Scenario::Fused, DelaySpec::frames(1, 30))).unwrap_err();
    assert!(matches!(err, delayfuse::Error::MissingCheckpoint(_)));
}

#[test]
fn freshest_slot_keeps_newest() {
    let slot = Freshest::<u32>::default();
    slot.offer(3, |a, b| a > b);
    slot.offer(1, |a, b| a > b);
    assert_eq!(slot.take(), Some(3));
    assert_eq!(slot.wait_take(Duration::from_millis(5)), None);
    slot.close();
    assert!(slot.is_closed());
}

fn client_opts(c: &ExperimentConfig, scenario: Scenario) -> ClientOptions {
    ClientOptions {
        scenario,
        frames: c.eval.frames,
        warmup_frames: c.eval.warmup_frames,
        fuse_deadline_ms: 15.0,
        client: ClientConfig {
            compute_delay_ms: 0.0,
            max_feature_age_frames: 10,
            local_downsample: 2,
            uplink_quant_bits: 6,
            fps: 30,
            class_count: 4,
        },
    }
}

#[test]
fn loopback_socket_run_emits_every_frame() {
    let c = cfg();
    let m = models(&c);
    let listener = bind("127.0.0.1", 0).unwrap();
    let opts = ServeOptions {
        scenario: Scenario::Fused,
        compute_delay_ms: 0.0,
        fps: 30,
        max_sessions: Some(1),
    };
    let server = spawn_server(listener, &m, opts).unwrap();
    let scene = generate_scene(&c.scene).unwrap();
    let local = m.fused.as_ref().map(|f| &f.local);
    let run = run_client(("127.0.0.1", server.port), &scene, local, &client_opts(&c, Scenario::Fused)).unwrap();
    assert_eq!(run.log.records.len(), c.eval.frames);
    assert!(run.log.records[c.eval.warmup_frames..].iter().all(|r| r.had_remote));
    assert!(server.join().unwrap() > 0);
}

#[test]
fn port_conflict_is_an_error() {
    let a = bind("127.0.0.1", 0).unwrap();
    let port = a.local_addr().unwrap().port();
    assert!(matches!(bind("127.0.0.1", port), Err(delayfuse::Error::Network(_))));
}

#[test]
fn server_kill_falls_back_without_dropping_frames() {
    let c = cfg();
    let m = models(&c);
    let listener = bind("127.0.0.1", 0).unwrap();
    let opts = ServeOptions {
        scenario: Scenario::Fused,
        compute_delay_ms: 0.0,
        fps: 30,
        max_sessions: None,
    };
    let server = Arc::new(std::sync::Mutex::new(spawn_server(listener, &m, opts).unwrap()));
    let port = server.lock().unwrap().port;
    let killer = {
        let server = server.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(400));
            server.lock().unwrap().kill();
        })
    };
    let scene = generate_scene(&c.scene).unwrap();
    let local = m.fused.as_ref().map(|f| &f.local);
    let run = run_client(("127.0.0.1", port), &scene, local, &client_opts(&c, Scenario::Fused)).unwrap();
    killer.join().unwrap();
    assert_eq!(run.log.records.len(), c.eval.frames);
    let cut = run.disconnected_at.expect("disconnect observed") as usize;
    assert!(run.log.records[..cut].iter().any(|r| r.had_remote));
    assert!(run.log.records[cut..].iter().all(|r| !r.had_remote));
}

#[test]
fn unreachable_server_runs_on_fallback() {
    let c = cfg();
    let m = models(&c);
    let port = {
        let l = bind("127.0.0.1", 0).unwrap();
        l.local_addr().unwrap().port()
    };
    let scene = generate_scene(&c.scene).unwrap();
    let mut opts = client_opts(&c, Scenario::Fused);
    opts.frames = 8;
    opts.warmup_frames = 0;
    let local = m.fused.as_ref().map(|f| &f.local);
    let run = run_client(("127.0.0.1", port), &scene, local, &opts).unwrap();
    assert!(run.connect_error.is_some());
    assert_eq!(run.log.records.len(), 8);
    assert!(run.log.records.iter().all(|r| !r.had_remote));
}
