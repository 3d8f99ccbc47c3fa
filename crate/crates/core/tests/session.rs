//! Guided sessions end to end: engine, autopilot, replay and the WebSocket front end.

use std::net::SocketAddr;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use tokio_tungstenite::tungstenite::Message;
use vical::config::SessionConfig;
use vical::guidance::{SessionMode, Stage};
use vical::session::driver::SimSession;
use vical::session::server::{spawn, ServeOptions};
use vical::session::{replay, run_simulated, Command, DriverOptions, Event, SessionPlan, SessionRecord, Suggestion};
use vical::sim::{Dataset, RigSpec};

fn camera_session(seed: u64) -> (vical::session::SessionOutcome, Vec<Event>) {
    let mut events = Vec::new();
    let opts = DriverOptions { seed, ..Default::default() };
    let out = run_simulated(
        SessionConfig::default(),
        RigSpec::default_stereo(),
        SessionPlan::CameraOnly,
        opts,
        |e| events.push(e.clone()),
    )
    .expect("session runs");
    (out, events)
}

#[test]
fn camera_session_finishes_and_replays_from_disk() {
    let (out, events) = camera_session(3);
    assert_eq!(out.aborted, None);
    let result = out.camera.as_ref().expect("camera result");
    assert!(out.imu.is_none());
    assert!(out.sim_time < 600.0);

    let nbv_scores: Vec<&Vec<f64>> = events
        .iter()
        .filter_map(|e| match e {
            Event::Suggestion { suggestion: Suggestion::Nbv { scores, .. }, .. } => Some(scores),
            _ => None,
        })
        .collect();
    assert!(!nbv_scores.is_empty());
    assert!(nbv_scores.iter().all(|s| s.len() == 135 && s.iter().all(|mi| *mi >= -1e-9)));
    assert!(matches!(
        events.last(),
        Some(Event::State { mode: SessionMode::Done, .. })
    ));
    for e in &events {
        let line = e.to_line();
        assert!(!line.contains('\n'));
        assert_eq!(&Event::from_line(&line).unwrap(), e);
    }

    let dir = tempfile::tempdir().unwrap();
    out.record.write(dir.path()).unwrap();
    out.dataset.write(dir.path()).unwrap();
    let record = SessionRecord::read(dir.path()).unwrap();
    let data = Dataset::read(dir.path()).unwrap();
    assert_eq!(record, out.record);
    let again = replay(&record, &data, |_| {}).expect("replay runs");
    assert_eq!(again.camera.unwrap().to_json(), result.to_json());
}

async fn next_event<S>(ws: &mut S) -> Event
where
    S: StreamExt<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(60), ws.next())
            .await
            .expect("server answers in time")
            .expect("stream open")
            .expect("valid frame");
        if let Message::Text(text) = msg {
            return Event::from_line(text.as_str()).expect("valid event line");
        }
    }
}

fn serve(plan: SessionPlan) -> vical::session::server::ServerHandle {
    let session = SimSession::new(
        SessionConfig::default(),
        RigSpec::default_stereo(),
        plan,
        DriverOptions { seed: 5, ..Default::default() },
        true,
    )
    .unwrap();
    let opts = ServeOptions {
        addr: SocketAddr::from(([127, 0, 0, 1], 0)),
        realtime: false,
        linger: Duration::from_millis(50),
    };
    spawn(session, opts).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn server_idles_until_start_then_aborts_on_request() {
    let server = serve(SessionPlan::CameraOnly);
    let url = format!("ws://{}/ws", server.local_addr);
    tokio::time::sleep(Duration::from_millis(200)).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let greeting = next_event(&mut ws).await;
    assert_eq!(
        greeting,
        Event::State { t_ns: 0, stage: Stage::Camera, mode: SessionMode::Initializing }
    );

    // a second, read-only subscriber sees the same stream
    let (mut watcher, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    assert!(matches!(next_event(&mut watcher).await, Event::State { .. }));

    ws.send(Message::Text(Command::Start.to_line().into())).await.unwrap();
    loop {
        if matches!(next_event(&mut ws).await, Event::Detections { .. }) {
            break;
        }
    }
    ws.send(Message::Text(Command::Abort.to_line().into())).await.unwrap();
    let mut aborted = false;
    while !aborted {
        aborted = matches!(next_event(&mut watcher).await, Event::Abort { .. });
    }
    let out = tokio::task::spawn_blocking(move || server.join()).await.unwrap().unwrap();
    assert_eq!(out.aborted.as_deref(), Some("aborted by client"));
}

#[tokio::test(flavor = "multi_thread")]
async fn served_session_delivers_its_result() {
    let server = serve(SessionPlan::CameraOnly);
    let url = format!("ws://{}/ws", server.local_addr);
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    next_event(&mut ws).await;
    ws.send(Message::Text(Command::Start.to_line().into())).await.unwrap();
    let result = loop {
        if let Event::Result { stage, result } = next_event(&mut ws).await {
            assert_eq!(stage, Stage::Camera);
            break result;
        }
    };
    let out = tokio::task::spawn_blocking(move || server.join()).await.unwrap().unwrap();
    assert_eq!(out.camera.as_ref(), Some(&*result));
}
