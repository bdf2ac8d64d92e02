use fedcox_core::imputation::{chained_impute, ImputationConfig};
use fedcox_core::simulation::{filter_missing, simulate_cohort, SimConfig, NOISE_BINARY, NOISE_NUMERIC};
use fedcox_core::survival::{fit_stratified, NewtonOptions};
use fedcox_core::SurvivalData;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn one_missing_allowed_keeps_about_half() {
    let cohorts = simulate_cohort(&SimConfig { seed: 12, ..SimConfig::default() }).unwrap();
    for raw in &cohorts {
        let kept = filter_missing(raw, 1).unwrap();
        let frac = kept.n() as f64 / raw.n() as f64;
        assert!((0.50..=0.65).contains(&frac), "retained {frac}");
        assert!(kept.missing_per_patient().iter().all(|m| *m <= 1));
    }
}

#[test]
fn events_occur_only_before_follow_up_ends() {
    let cohorts = simulate_cohort(&SimConfig { seed: 13, ..SimConfig::default() }).unwrap();
    for raw in &cohorts {
        let events = raw.events.iter().filter(|e| **e).count();
        assert!(events > raw.n() / 10, "only {events} events");
        for (t, e) in raw.times.iter().zip(&raw.events) {
            if *e {
                assert!(*t < 60.0);
            }
        }
        assert!(raw.times.iter().any(|t| *t == 60.0));
    }
    // centres with larger baseline hazards see more events
    let counts: Vec<usize> = cohorts.iter().map(|c| c.events.iter().filter(|e| **e).count()).collect();
    assert!(counts[0] < counts[2], "{counts:?}");
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[test]
fn noise_columns_unrelated_to_outcome() {
    let cohorts = simulate_cohort(&SimConfig { seed: 14, missing_fraction: 0.0, ..SimConfig::default() }).unwrap();
    // Martingale-free check: correlate each noise column with log time and with the event flag.
    for name in NOISE_NUMERIC.iter().chain(&NOISE_BINARY) {
        let mut x = Vec::new();
        let mut logt = Vec::new();
        let mut ev = Vec::new();
        for raw in &cohorts {
            x.extend(raw.column(name).unwrap().values.iter().map(|v| v.unwrap()));
            logt.extend(raw.times.iter().map(|t| t.ln()));
            ev.extend(raw.events.iter().map(|e| f64::from(u8::from(*e))));
        }
        assert_eq!(x.len(), 3000);
        assert!(pearson(&x, &logt).abs() < 0.1, "{name}");
        assert!(pearson(&x, &ev).abs() < 0.1, "{name}");
    }
}

fn strata(n: usize, seed: u64) -> Vec<SurvivalData> {
    let cfg = SimConfig { n_per_centre: n, seed, ..SimConfig::default() };
    simulate_cohort(&cfg)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(c, raw)| {
            let raw = filter_missing(raw, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + c as u64);
            let (table, _) = chained_impute(&raw, &ImputationConfig::default(), &mut rng).unwrap();
            table.survival_data(&table.design_names()).unwrap()
        })
        .collect()
}

#[test]
fn full_model_converges_quickly_on_small_centres() {
    for seed in 0..5 {
        let fit = fit_stratified(&strata(200, 100 + seed), NewtonOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 20, "{} iterations", fit.iterations);
    }
}

#[test]
fn large_cohort_fit_points_the_right_way() {
    let s = strata(1000, 7);
    let names = s[0].feature_names().to_vec();
    let fit = fit_stratified(&s, NewtonOptions::default()).unwrap();
    let coef = |n: &str| fit.beta[names.iter().position(|x| x == n).unwrap()];
    assert!(coef("Age") > 0.0);
    assert!(coef("hemoglobin") < 0.0);
    assert!(coef("T4") > coef("T2"));
    assert!(coef("genderMale") > 0.0);
}
