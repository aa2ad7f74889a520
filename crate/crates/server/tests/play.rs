use std::net::SocketAddr;
use std::time::{Duration, Instant};

use condsynth_client::{Client, Incoming, PlaySession};
use condsynth_core::codec::{mulaw_decode, silence_code};
use condsynth_core::corpus::ParamPoint;
use condsynth_core::network::NetworkDims;
use condsynth_core::protocol::{AudioFrame, ParamMessage, SynthRequest, FRAME_SAMPLES};
use condsynth_core::synthesis::{Generator, ScheduleSpec};
use condsynth_core::training::{AdamConfig, Checkpoint};
use condsynth_core::wav::{decode_wav, to_pcm16};
use condsynth_server::{spawn, AppState, SessionConfig};

fn small_checkpoint() -> Checkpoint {
    let dims = NetworkDims {
        hidden_size: 8,
        num_layers: 2,
        ..Default::default()
    };
    let mut ckpt = Checkpoint::fresh(dims, AdamConfig::default(), 7).unwrap();
    // Larger weights make the output depend visibly on the parameters.
    for t in ckpt.weights.tensors_mut() {
        for (i, x) in t.iter_mut().enumerate() {
            *x = *x * 6.0 + if i % 3 == 0 { 0.3 } else { -0.2 };
        }
    }
    ckpt
}

async fn start(pace: bool) -> (Client, Checkpoint, SocketAddr) {
    let ckpt = small_checkpoint();
    let session = SessionConfig {
        pace,
        ..Default::default()
    };
    let state = AppState::new(&ckpt, session).unwrap();
    let (addr, _) = spawn("127.0.0.1:0".parse().unwrap(), state).await.unwrap();
    (Client::new(&format!("http://{addr}")).unwrap(), ckpt, addr)
}

/// PCM the server should emit for a parameter trajectory.
fn oracle(ckpt: &Checkpoint, n: usize, param_at: impl Fn(usize) -> ParamPoint) -> Vec<i16> {
    let mut gen = Generator::new(&ckpt.weights, silence_code()).unwrap();
    (0..n).map(|i| to_pcm16(mulaw_decode(gen.step(param_at(i))))).collect()
}

async fn frames(session: &mut PlaySession, count: usize) -> Vec<AudioFrame> {
    let mut out = Vec::new();
    while out.len() < count {
        match session.next().await.expect("stream open").expect("valid message") {
            Incoming::Frame(f) => out.push(f),
            Incoming::Status(s) => assert!(s.realtime_factor > 0.0),
            Incoming::Error(e) => panic!("unexpected error reply: {e}"),
        }
    }
    out
}

fn pcm(frames: &[AudioFrame]) -> Vec<i16> {
    frames.iter().flat_map(|f| f.pcm.iter().copied()).collect()
}

fn initial() -> ParamPoint {
    SessionConfig::default().initial
}

#[tokio::test]
async fn health_reports_checkpoint() {
    let (client, ckpt, _) = start(false).await;
    let h = client.health().await.unwrap();
    assert_eq!(h.sample_rate, 16_000);
    assert_eq!(h.checkpoint_id.len(), 16);
    assert_eq!(h.checkpoint_id, condsynth_server::checkpoint_id(&ckpt.to_bytes().unwrap()));
}

#[tokio::test]
async fn synth_returns_wav() {
    let (client, ckpt, _) = start(false).await;
    let point = ParamPoint::new(0.5, 1.0, 0.0).unwrap();
    let req = SynthRequest {
        schedule: ScheduleSpec::Constant { point, duration: 0.25 },
        warmup: 0,
    };
    let wav = client.synth(&req).await.unwrap();
    let samples = decode_wav(&wav).unwrap();
    assert_eq!(samples.len(), 4_000);
    let expected = oracle(&ckpt, 4_000, |_| point);
    assert_eq!(samples.iter().map(|&s| to_pcm16(s)).collect::<Vec<_>>(), expected);

    let too_long = SynthRequest {
        schedule: ScheduleSpec::Constant { point, duration: 600.0 },
        warmup: 0,
    };
    assert!(matches!(
        client.synth(&too_long).await,
        Err(condsynth_client::ClientError::Status { status: 400, .. })
    ));
}

#[tokio::test]
async fn synth_rejects_malformed_body() {
    let (_, _, addr) = start(false).await;
    let resp = raw_post(addr, r#"{"schedule": {"kind": "nope"}}"#).await;
    assert!(resp.starts_with("HTTP/1.1 400"), "{resp}");
    assert!(resp.contains("\"error\""));
}

/// Minimal raw HTTP POST, so the test does not depend on the client's
/// request encoding.
async fn raw_post(addr: SocketAddr, body: &str) -> String {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    let req = format!(
        "POST /synth HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).await.unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    out
}

#[tokio::test]
async fn stream_matches_offline_generation() {
    let (client, ckpt, _) = start(false).await;
    let mut session = client.play().await.unwrap();
    let got = frames(&mut session, 20).await;
    for (i, f) in got.iter().enumerate() {
        assert_eq!(f.seq as usize, i);
        assert_eq!(f.pcm.len(), FRAME_SAMPLES);
    }
    assert_eq!(pcm(&got), oracle(&ckpt, 20 * FRAME_SAMPLES, |_| initial()));
    session.close().await.unwrap();
}

#[tokio::test]
async fn parameter_change_lands_on_a_sample_boundary() {
    let (client, ckpt, _) = start(false).await;
    let mut session = client.play().await.unwrap();
    let before = frames(&mut session, 4).await;
    session.send_params(&ParamMessage::pitch(1.0)).await.unwrap();
    let mut all = before;
    all.extend(frames(&mut session, 40).await);
    let got = pcm(&all);
    let n = got.len();
    let constant = oracle(&ckpt, n, |_| initial());
    let first_diff = got.iter().zip(&constant).position(|(a, b)| a != b).expect("pitch change audible");
    let high = ParamPoint::new(1.0, 1.0, 0.0).unwrap();
    // The switch happened at some sample at or before the first difference.
    let earliest = first_diff.saturating_sub(64);
    let mut gen = Generator::new(&ckpt.weights, silence_code()).unwrap();
    for _ in 0..earliest {
        gen.step(initial());
    }
    let mut matches = false;
    for k in earliest..=first_diff {
        let mut switched = gen.clone();
        let tail: Vec<i16> = (k..n).map(|_| to_pcm16(mulaw_decode(switched.step(high)))).collect();
        if tail == got[k..] {
            matches = true;
            break;
        }
        gen.step(initial());
    }
    assert!(matches, "stream is not a single clean switch (first difference at {first_diff})");
}

#[tokio::test]
async fn malformed_messages_get_error_replies() {
    let (client, _, _) = start(false).await;
    let mut session = client.play().await.unwrap();
    session.send_raw("{\"pitch\": \"loud\"}".into()).await.unwrap();
    session.send_raw("{}".into()).await.unwrap();
    let mut errors = 0;
    let mut last_seq = None;
    while errors < 2 {
        match session.next().await.unwrap().unwrap() {
            Incoming::Error(_) => errors += 1,
            Incoming::Frame(f) => {
                if let Some(s) = last_seq {
                    assert_eq!(f.seq, s + 1);
                }
                last_seq = Some(f.seq);
            }
            Incoming::Status(_) => {}
        }
    }
    let more = frames(&mut session, 3).await;
    assert!(more.windows(2).all(|w| w[1].seq == w[0].seq + 1));
}

#[tokio::test]
async fn sessions_are_isolated() {
    let (client, ckpt, _) = start(false).await;
    let mut a = client.play().await.unwrap();
    let mut b = client.play().await.unwrap();
    a.send_params(&ParamMessage::pitch(1.0)).await.unwrap();
    a.send_params(&ParamMessage { volume: Some(0.2), ..Default::default() }).await.unwrap();
    let _ = frames(&mut a, 10).await;
    let got_b = frames(&mut b, 10).await;
    assert_eq!(pcm(&got_b), oracle(&ckpt, 10 * FRAME_SAMPLES, |_| initial()));
    drop(a);
    let more_b = frames(&mut b, 10).await;
    assert_eq!(more_b[0].seq, 10);
    let mut all = got_b;
    all.extend(more_b);
    assert_eq!(pcm(&all), oracle(&ckpt, 20 * FRAME_SAMPLES, |_| initial()));
}

#[tokio::test]
async fn status_messages_have_the_documented_shape() {
    let (client, _, _) = start(false).await;
    let mut session = client.play().await.unwrap();
    let mut frames_seen = 0u64;
    loop {
        match session.next().await.unwrap().unwrap() {
            Incoming::Frame(_) => frames_seen += 1,
            Incoming::Status(s) => {
                assert!(s.realtime_factor > 0.0);
                assert_eq!(s.frames_sent, frames_seen);
                break;
            }
            Incoming::Error(e) => panic!("{e}"),
        }
    }
}

#[tokio::test]
async fn frames_are_paced_to_real_time() {
    let (client, _, _) = start(true).await;
    let mut session = client.play().await.unwrap();
    let t0 = Instant::now();
    let window = Duration::from_secs(10);
    let mut count = 0u64;
    let mut rtf = None;
    loop {
        let left = window.saturating_sub(t0.elapsed());
        if left.is_zero() {
            break;
        }
        match tokio::time::timeout(left, session.next()).await {
            Err(_) => break,
            Ok(msg) => match msg.unwrap().unwrap() {
                Incoming::Frame(_) => count += 1,
                Incoming::Status(s) => rtf = Some(s.realtime_factor),
                Incoming::Error(e) => panic!("{e}"),
            },
        }
    }
    let rtf = rtf.expect("status received");
    assert!(rtf >= 1.0, "generator slower than real time ({rtf}); pacing bound does not apply");
    let expected = 10.0 * 16_000.0 / 512.0;
    assert!((count as f64 - expected).abs() <= 1.0, "{count} frames in 10 s");
}

#[test]
fn unloadable_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(AppState::from_path(&path, SessionConfig::default()).is_err());
    assert!(AppState::from_path(&dir.path().join("missing"), SessionConfig::default()).is_err());
}
