use condsynth_client::{Client, ClientError, Incoming};
use condsynth_core::corpus::ParamPoint;
use condsynth_core::network::NetworkDims;
use condsynth_core::protocol::{ParamMessage, SynthRequest, FRAME_SAMPLES};
use condsynth_core::synthesis::ScheduleSpec;
use condsynth_core::training::{AdamConfig, Checkpoint};
use condsynth_core::wav::decode_wav;
use condsynth_server::{spawn, AppState, SessionConfig};

async fn server() -> Client {
    let dims = NetworkDims {
        hidden_size: 4,
        num_layers: 1,
        ..Default::default()
    };
    let ckpt = Checkpoint::fresh(dims, AdamConfig::default(), 3).unwrap();
    let session = SessionConfig {
        pace: false,
        ..Default::default()
    };
    let state = AppState::new(&ckpt, session).unwrap();
    let (addr, _) = spawn("127.0.0.1:0".parse().unwrap(), state).await.unwrap();
    Client::new(&format!("http://{addr}/")).unwrap()
}

#[test]
fn rejects_non_http_base() {
    for base in ["ws://localhost:1", "localhost:8080", ""] {
        assert!(matches!(Client::new(base), Err(ClientError::BadUrl(_))), "{base}");
    }
}

#[tokio::test]
async fn health_and_synth_round_trip() {
    let client = server().await;
    let health = client.health().await.unwrap();
    assert_eq!(health.sample_rate, 16_000);
    assert_eq!(health.checkpoint_id.len(), 16);

    let point = ParamPoint::new(0.5, 1.0, 0.0).unwrap();
    let req = SynthRequest {
        schedule: ScheduleSpec::Constant { point, duration: 0.1 },
        warmup: 0,
    };
    assert_eq!(decode_wav(&client.synth(&req).await.unwrap()).unwrap().len(), 1_600);
}

#[tokio::test]
async fn server_rejection_surfaces_status_and_body() {
    let client = server().await;
    let point = ParamPoint::new(0.0, 1.0, 0.0).unwrap();
    let req = SynthRequest {
        schedule: ScheduleSpec::Constant { point, duration: 1e4 },
        warmup: 0,
    };
    match client.synth(&req).await {
        Err(ClientError::Status { status, body }) => {
            assert_eq!(status, 400);
            assert!(body.contains("error"), "{body}");
        }
        other => panic!("expected status error, got {other:?}"),
    }
}

#[tokio::test]
async fn unreachable_server_is_an_http_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = Client::new(&format!("http://{addr}")).unwrap();
    assert!(matches!(client.health().await, Err(ClientError::Http(_))));
    assert!(client.play().await.is_err());
}

#[tokio::test]
async fn play_session_decodes_frames_and_errors() {
    let client = server().await;
    let mut session = client.play().await.unwrap();
    session.send_raw("{\"pitch\": \"high\"}".into()).await.unwrap();
    session.send_params(&ParamMessage::pitch(0.25)).await.unwrap();
    let (mut frames, mut errors) = (0u32, 0);
    while frames < 3 || errors == 0 {
        match session.next().await.expect("open").expect("valid") {
            Incoming::Frame(f) => {
                assert_eq!(f.seq, frames);
                assert_eq!(f.samples().len(), FRAME_SAMPLES);
                frames += 1;
            }
            Incoming::Error(_) => errors += 1,
            Incoming::Status(_) => {}
        }
    }
    assert_eq!(errors, 1);
    session.close().await.unwrap();
}
