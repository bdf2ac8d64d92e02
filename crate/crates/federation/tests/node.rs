use fedcox_core::simulation::{simulate_cohort, SimConfig};
use fedcox_core::survival::{build_risk_index, efron_loglik};
use fedcox_core::Beta;
use fedcox_federation::config::LocalConfig;
use fedcox_federation::message::*;
use fedcox_federation::node::LocalNode;
use fedcox_federation::transport::{validate_privacy, COORDINATOR};
use fedcox_federation::FederationError;

const FEATURES: [&str; 4] = ["Age", "hemoglobin", "T3", "genderMale"];

fn node(n: usize, missing: f64, seed: u64) -> LocalNode {
    let raw = simulate_cohort(&SimConfig { n_per_centre: n, missing_fraction: missing, seed, ..SimConfig::default() })
        .unwrap()
        .remove(0);
    let cfg = LocalConfig { data_paths: vec![], local_seed: 11, nr_pt_per_bin: 5, n_allowed_missing: None };
    LocalNode::new("centre1", raw, &cfg).unwrap()
}

fn prepare(node: &mut LocalNode, n_boot: usize, phase: Phase) {
    let req = PrepareRequest {
        phase,
        n_boot,
        global_seed: 3,
        features: FEATURES.iter().map(|s| s.to_string()).collect(),
        n_allowed_missing: 1,
    };
    node.prepare(&req).unwrap();
}

fn stratified(node: &LocalNode, beta: &[f64], n_boot: u32) -> (usize, Vec<EvalResult>) {
    let req = EvaluateRequest::Stratified {
        models: vec![ModelColumns { id: 0, columns: (0..beta.len()).collect() }],
        items: (0..n_boot).map(|b| EvalItem { model: 0, bootstrap: b, beta: beta.to_vec() }).collect(),
    };
    match node.evaluate(&req).unwrap() {
        EvaluateResponse::Stratified { n_local, results } => (n_local, results),
        _ => unreachable!(),
    }
}

#[test]
fn replicates_are_reproducible() {
    let mut a = node(200, 0.2, 5);
    let mut b = node(200, 0.2, 5);
    prepare(&mut a, 4, Phase::Selection);
    prepare(&mut b, 4, Phase::Selection);
    for (ra, rb) in a.replicates().iter().zip(b.replicates()) {
        assert_eq!(ra.in_bag(), rb.in_bag());
        assert_eq!(ra.completed(), rb.completed());
    }
    let beta = [0.02, -0.3, 0.5, 0.6];
    let (_, x) = stratified(&a, &beta, 4);
    let (_, y) = stratified(&b, &beta, 4);
    assert_eq!(x, y);
}

#[test]
fn performance_phase_draws_fresh_replicates() {
    let mut a = node(150, 0.2, 5);
    prepare(&mut a, 2, Phase::Selection);
    let sel: Vec<Vec<usize>> = a.replicates().iter().map(|r| r.in_bag().to_vec()).collect();
    prepare(&mut a, 2, Phase::Performance);
    let perf: Vec<Vec<usize>> = a.replicates().iter().map(|r| r.in_bag().to_vec()).collect();
    assert_ne!(sel, perf);
}

#[test]
fn out_of_bag_is_the_complement_of_the_draw() {
    let mut a = node(300, 0.0, 2);
    prepare(&mut a, 20, Phase::Selection);
    let n = a.n_local().unwrap();
    let mut fractions = Vec::new();
    for r in a.replicates() {
        assert_eq!(r.in_bag().len(), n);
        for i in 0..n {
            assert_ne!(r.in_bag().contains(&i), r.out_of_bag().contains(&i));
        }
        fractions.push(r.out_of_bag().len() as f64 / n as f64);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!((mean - 0.368).abs() < 0.03, "{mean}");
}

#[test]
fn loglik_at_zero_counts_duplicates() {
    // At beta = 0 every theta is 1, so the Efron term for l-th of m tied events
    // in a risk set of r rows is log(r - l), duplicates counted.
    let mut a = node(120, 0.0, 9);
    prepare(&mut a, 3, Phase::Selection);
    let (_, results) = stratified(&a, &[0.0; 4], 3);
    for (rep, res) in a.replicates().iter().zip(&results) {
        let data = rep.completed();
        let rows = rep.in_bag();
        let mut expected = 0.0;
        let mut times: Vec<f64> = rows.iter().filter(|&&i| data.events()[i]).map(|&i| data.times()[i]).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        for t in times {
            let r = rows.iter().filter(|&&i| data.times()[i] >= t).count();
            let m = rows.iter().filter(|&&i| data.events()[i] && data.times()[i] == t).count();
            for l in 0..m {
                expected -= ((r - l) as f64).ln();
            }
        }
        assert!((res.loglik - expected).abs() < 1e-9 * expected.abs(), "{} vs {expected}", res.loglik);
    }
}

#[test]
fn cross_validated_loglik_is_scaled_to_cohort_size() {
    let mut a = node(200, 0.2, 4);
    prepare(&mut a, 2, Phase::Selection);
    let beta = [0.03, -0.2, 0.4, 0.7];
    let (n_local, results) = stratified(&a, &beta, 2);
    for (rep, res) in a.replicates().iter().zip(&results) {
        let oob = rep.completed().subset_rows(rep.out_of_bag()).unwrap();
        let idx = build_risk_index(&oob).unwrap();
        let direct = efron_loglik(&oob, &idx, &Beta::from_vec(beta.to_vec())).unwrap().loglik;
        assert_eq!(res.n_oob, rep.out_of_bag().len());
        let expected = direct * n_local as f64 / res.n_oob as f64;
        assert!((res.cv_loglik.unwrap() - expected).abs() < 1e-10 * expected.abs());
    }
}

#[test]
fn bad_items_are_reported_in_band() {
    let mut a = node(100, 0.0, 1);
    prepare(&mut a, 1, Phase::Selection);
    let req = EvaluateRequest::Stratified {
        models: vec![ModelColumns { id: 0, columns: vec![0, 1] }],
        items: vec![
            EvalItem { model: 0, bootstrap: 0, beta: vec![0.0, 0.0] },
            EvalItem { model: 0, bootstrap: 7, beta: vec![0.0, 0.0] },
            EvalItem { model: 3, bootstrap: 0, beta: vec![0.0, 0.0] },
            EvalItem { model: 0, bootstrap: 0, beta: vec![0.0] },
        ],
    };
    let EvaluateResponse::Stratified { results, .. } = a.evaluate(&req).unwrap() else { unreachable!() };
    let errors: Vec<bool> = results.iter().map(|r| r.error.is_some()).collect();
    assert_eq!(errors, [false, true, true, true]);
}

#[test]
fn evaluation_before_preparation_fails() {
    let a = node(50, 0.0, 1);
    let req = EvaluateRequest::Stratified { models: vec![], items: vec![] };
    assert!(matches!(a.evaluate(&req), Err(FederationError::Protocol(_))));
}

#[test]
fn unstratified_requests_are_refused_under_privacy() {
    let a = node(50, 0.0, 1);
    let req = EvaluateRequest::Naive(NaiveRequest::EventTimes { features: vec!["Age".into()] });
    assert!(a.evaluate(&req).is_err());
    let open = node(50, 0.0, 1).with_privacy(false);
    assert!(open.evaluate(&req).is_ok());
}

#[test]
fn replies_pass_the_privacy_scan() {
    let mut a = node(150, 0.2, 6);
    let prep = PrepareRequest {
        phase: Phase::Selection,
        n_boot: 3,
        global_seed: 1,
        features: FEATURES.iter().map(|s| s.to_string()).collect(),
        n_allowed_missing: 1,
    };
    let msg = Message::new(MessageKind::PrepareRequest, COORDINATOR, "centre1", 1, &prep).unwrap();
    assert!(a.handle(&msg).unwrap().is_none());
    let req = EvaluateRequest::Stratified {
        models: vec![ModelColumns { id: 0, columns: vec![0, 1, 2, 3] }],
        items: (0..3).map(|b| EvalItem { model: 0, bootstrap: b, beta: vec![0.01; 4] }).collect(),
    };
    let msg = Message::new(MessageKind::EvaluateRequest, COORDINATOR, "centre1", 2, &req).unwrap();
    let reply = a.handle(&msg).unwrap().unwrap();
    assert_eq!((reply.kind, reply.round, reply.recipient.as_str()), (MessageKind::EvaluateResponse, 2, COORDINATOR));
    assert!(reply.validate_schema().is_ok());
    assert!(validate_privacy(&reply, a.n_local().unwrap(), 5).is_empty());
}
