use fedcox_federation::error::{ErrorCategory, FederationError, TransportError};
use fedcox_federation::hexfloat;
use fedcox_federation::message::*;
use fedcox_federation::transport::*;
use std::sync::Arc;
use std::time::{Duration, Instant};

fn response(sender: &str, round: u64, loglik: f64) -> Message {
    let r = EvalResult {
        model: 0,
        bootstrap: 0,
        loglik,
        gradient: vec![0.5, -0.25],
        hessian: vec![vec![-2.0, 0.1], vec![0.1, -3.0]],
        cv_loglik: Some(-1.5),
        n_oob: 37,
        error: None,
    };
    let payload = EvaluateResponse::Stratified { n_local: 100, results: vec![r] };
    Message::new(MessageKind::EvaluateResponse, sender, COORDINATOR, round, &payload).unwrap()
}

fn senders(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn loglik_of(m: &Message) -> f64 {
    match m.decode::<EvaluateResponse>().unwrap() {
        EvaluateResponse::Stratified { results, .. } => results[0].loglik,
        _ => unreachable!(),
    }
}

fn channels() -> Vec<(Arc<dyn Channel>, Option<tempfile::TempDir>)> {
    let dir = tempfile::tempdir().unwrap();
    let file = FileChannel::new(dir.path().join("queue")).unwrap().with_poll(Duration::from_millis(10));
    vec![(Arc::new(InProcessChannel::new()), None), (Arc::new(file), Some(dir))]
}

#[test]
fn round_trip_preserves_floats_bit_for_bit() {
    for (ch, _dir) in channels() {
        let x = 0.1 + 0.2;
        ch.push(&response("n1", 1, x)).unwrap();
        let got = ch.fetch(COORDINATOR, Duration::from_millis(200)).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(loglik_of(&got[0]).to_bits(), x.to_bits());
    }
}

#[test]
fn fifo_per_sender() {
    for (ch, _dir) in channels() {
        for r in 1..=3 {
            ch.push(&response("n1", r, r as f64)).unwrap();
        }
        let got = ch.fetch(COORDINATOR, Duration::from_millis(200)).unwrap();
        let rounds: Vec<u64> = got.iter().map(|m| m.round).collect();
        assert_eq!(rounds, vec![1, 2, 3]);
    }
}

#[test]
fn older_round_is_rejected() {
    for (ch, _dir) in channels() {
        ch.push(&response("n1", 5, 0.0)).unwrap();
        let err = ch.push(&response("n1", 4, 0.0)).unwrap_err();
        assert!(matches!(err, TransportError::RoundRegression { last: 5, got: 4, .. }));
        // other senders keep their own counters
        ch.push(&response("n2", 1, 0.0)).unwrap();
    }
}

#[test]
fn schema_violations_are_rejected_on_push() {
    let ch = InProcessChannel::new();
    let mut m = response("n1", 1, 0.0);
    m.kind = MessageKind::PrepareRequest;
    assert!(matches!(ch.push(&m), Err(TransportError::Schema { .. })));
    let mut m = response("n1", 1, 0.0);
    m.schema_version = 99;
    assert!(matches!(ch.push(&m), Err(TransportError::Version(99))));
    let mut m = response("n1", 1, 0.0);
    m.recipient = "../etc".into();
    assert!(matches!(ch.push(&m), Err(TransportError::BadName(_))));
}

#[test]
fn await_all_collects_every_sender_in_order() {
    for (ch, _dir) in channels() {
        let mut mb = Mailbox::new(ch.clone(), COORDINATOR).unwrap();
        for name in ["n3", "n1", "n2"] {
            ch.push(&response(name, 1, 0.0)).unwrap();
        }
        let got = mb
            .await_all(&senders(&["n1", "n2", "n3"]), MessageKind::EvaluateResponse, 1, Duration::from_secs(2))
            .unwrap();
        let order: Vec<&str> = got.iter().map(|m| m.sender.as_str()).collect();
        assert_eq!(order, ["n1", "n2", "n3"]);
    }
}

#[test]
fn await_all_timeout_names_the_missing_sender() {
    for (ch, _dir) in channels() {
        let mut mb = Mailbox::new(ch.clone(), COORDINATOR).unwrap();
        ch.push(&response("n1", 1, 0.0)).unwrap();
        ch.push(&response("n2", 1, 0.0)).unwrap();
        let start = Instant::now();
        let err = mb
            .await_all(&senders(&["n1", "n2", "n3"]), MessageKind::EvaluateResponse, 1, Duration::from_millis(300))
            .unwrap_err();
        assert!(start.elapsed() >= Duration::from_millis(300));
        match err {
            FederationError::Transport(TransportError::Timeout { missing, round: 1, .. }) => {
                assert_eq!(missing, ["n3"])
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn duplicate_delivery_keeps_latest() {
    let ch: Arc<dyn Channel> = Arc::new(InProcessChannel::new());
    let mut mb = Mailbox::new(ch.clone(), COORDINATOR).unwrap();
    ch.push(&response("n1", 1, 1.0)).unwrap();
    ch.push(&response("n1", 1, 2.0)).unwrap();
    let got = mb.await_all(&senders(&["n1"]), MessageKind::EvaluateResponse, 1, Duration::from_secs(1)).unwrap();
    assert_eq!(loglik_of(&got[0]), 2.0);
    assert_eq!(mb.duplicates(), 1);
}

#[test]
fn stale_rounds_are_dropped_and_later_rounds_kept() {
    let ch: Arc<dyn Channel> = Arc::new(InProcessChannel::new());
    let mut mb = Mailbox::new(ch.clone(), COORDINATOR).unwrap();
    ch.push(&response("n1", 1, 1.0)).unwrap();
    ch.push(&response("n2", 2, 2.0)).unwrap();
    ch.push(&response("n1", 2, 3.0)).unwrap();
    ch.push(&response("n2", 3, 4.0)).unwrap();
    let got = mb.await_all(&senders(&["n1", "n2"]), MessageKind::EvaluateResponse, 2, Duration::from_secs(1)).unwrap();
    assert_eq!(got.iter().map(loglik_of).collect::<Vec<_>>(), [3.0, 2.0]);
    let next = mb.await_all(&senders(&["n2"]), MessageKind::EvaluateResponse, 3, Duration::from_secs(1)).unwrap();
    assert_eq!(loglik_of(&next[0]), 4.0);
}

#[test]
fn error_report_aborts_the_wait() {
    let ch: Arc<dyn Channel> = Arc::new(InProcessChannel::new());
    let mut mb = Mailbox::new(ch.clone(), COORDINATOR).unwrap();
    ch.push(&response("n1", 1, 0.0)).unwrap();
    let report = ErrorReport { category: ErrorCategory::Numerical, message: "singular".into() };
    ch.push(&Message::new(MessageKind::ErrorReport, "n2", COORDINATOR, 1, &report).unwrap()).unwrap();
    let err =
        mb.await_all(&senders(&["n1", "n2"]), MessageKind::EvaluateResponse, 1, Duration::from_secs(1)).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Numerical);
    assert!(matches!(err, FederationError::Centre { ref centre, .. } if centre == "n2"));
}

#[test]
fn closed_channel_drains_then_fails() {
    for (ch, _dir) in channels() {
        ch.push(&response("n1", 1, 0.0)).unwrap();
        ch.close();
        assert!(ch.is_closed());
        assert!(matches!(ch.push(&response("n1", 2, 0.0)), Err(TransportError::Closed)));
        assert_eq!(ch.fetch(COORDINATOR, Duration::ZERO).unwrap().len(), 1);
        assert!(matches!(ch.fetch(COORDINATOR, Duration::ZERO), Err(TransportError::Closed)));
    }
}

#[test]
fn file_layout_is_human_readable() {
    let dir = tempfile::tempdir().unwrap();
    let ch = FileChannel::new(dir.path()).unwrap();
    ch.push(&response("n1", 7, 0.0)).unwrap();
    let inbox = dir.path().join(format!("to_{COORDINATOR}")).join("n1").join("EvaluateResponse");
    let files: Vec<_> = std::fs::read_dir(&inbox).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 1);
    let name = files[0].to_string_lossy().to_string();
    assert!(name.starts_with("000000000007_") && name.ends_with(".json"), "{name}");
    let text = std::fs::read_to_string(inbox.join(&name)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let loglik = v["payload"]["results"][0]["loglik"].as_str().unwrap();
    assert_eq!(hexfloat::decode(loglik), Some(0.0));
}

#[test]
fn privacy_validator_accepts_aggregates() {
    assert!(validate_privacy(&response("n1", 1, 0.0), 100, 10).is_empty());
}

#[test]
fn privacy_validator_flags_patient_level_content() {
    let mut m = response("n1", 1, 0.0);
    m.payload["results"][0]["gradient"] = serde_json::json!(vec![1.0; 100]);
    let v = validate_privacy(&m, 100, 10);
    assert!(v.iter().any(|s| s.contains("one per local patient")), "{v:?}");
    assert!(v.iter().any(|s| s.contains("hessian")), "{v:?}");

    let mut m = response("n1", 1, 0.0);
    m.payload["risk_set_sums"] = serde_json::json!([1.0, 2.0]);
    m.payload["tied_counts"] = serde_json::json!([1, 1]);
    let v = validate_privacy(&m, 100, 10);
    assert_eq!(v.len(), 2, "{v:?}");

    let mut m = response("n1", 1, 0.0);
    m.payload["curve"] = serde_json::json!({ "n_patients": [12, 9, 15] });
    let v = validate_privacy(&m, 100, 10);
    assert!(v.iter().any(|s| s.contains("covers 9 patients")), "{v:?}");
}

#[test]
fn requests_are_not_scanned() {
    let req = PrepareRequest {
        phase: Phase::Selection,
        n_boot: 2,
        global_seed: 0,
        features: vec!["times".into()],
        n_allowed_missing: 0,
    };
    let m = Message::new(MessageKind::PrepareRequest, COORDINATOR, "n1", 1, &req).unwrap();
    assert!(validate_privacy(&m, 1, 10).is_empty());
}
