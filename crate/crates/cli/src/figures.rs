//! Plot-ready CSV tables derived from a study report. Numbers are written in
//! shortest round-trip form and rows in a fixed order, so identical reports
//! give identical bytes.

use crate::error::Result;
use fedcox_federation::coordinator::StudyReport;
use fedcox_federation::message::{CurveReport, PerformanceSet, Summary};

type Table = csv::Writer<Vec<u8>>;

fn table(header: &[&str]) -> Result<Table> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    Ok(w)
}

fn finish(w: Table) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| crate::error::CliError::Data(e.to_string()))
}

fn csv_err(e: csv::Error) -> crate::error::CliError {
    crate::error::CliError::Data(e.to_string())
}

pub fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn sets(perf: &fedcox_federation::message::PerformanceResponse) -> [(&'static str, &PerformanceSet); 2] {
    [("median_beta", &perf.median_beta), ("bootstrap_beta", &perf.bootstrap_beta)]
}

/// File name and contents of every table, in a fixed order.
pub fn figure_tables(report: &StudyReport) -> Result<Vec<(&'static str, Vec<u8>)>> {
    Ok(vec![
        ("selection.csv", selection(report)?),
        ("coefficients.csv", coefficients(report)?),
        ("betas.csv", betas(report)?),
        ("baseline.csv", curves(report, |s| s.baseline.as_ref(), "time")?),
        ("lp_cdf.csv", curves(report, |s| s.lp_cdf.as_ref(), "lp")?),
        ("c_harrell.csv", c_harrell(report)?),
        ("subgroups.csv", subgroups(report)?),
        ("calibration.csv", calibration(report)?),
    ])
}

/// One row per candidate; `mean_cv_nll` is the negated mean out-of-bag
/// log-likelihood, so lower is better.
pub fn selection(report: &StudyReport) -> Result<Vec<u8>> {
    let sel = &report.selection;
    let mut w =
        table(&["mask", "n_params", "mean_cv_nll", "sd_cv_nll", "chosen_flag", "best_flag", "n_cv", "features"])?;
    for (i, (fit, s)) in sel.fits.iter().zip(&sel.summaries).enumerate() {
        w.write_record([
            fit.spec.mask.to_string(),
            s.n_params.to_string(),
            num(-s.mean_cv),
            num(s.sd_cv),
            u8::from(i == sel.chosen).to_string(),
            u8::from(i == sel.best).to_string(),
            s.n_cv.to_string(),
            fit.spec.names(&sel.features).join("+"),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn coefficients(report: &StudyReport) -> Result<Vec<u8>> {
    let fm = &report.final_model;
    let mut w = table(&["feature", "median", "lower", "upper"])?;
    for (k, name) in fm.names.iter().enumerate() {
        let at = |v: &[f64]| v.get(k).copied().map(num).unwrap_or_default();
        w.write_record([name.clone(), at(&fm.fit.median), at(&fm.fit.lower), at(&fm.fit.upper)]).map_err(csv_err)?;
    }
    finish(w)
}

/// Long format: one row per converged bootstrap and coefficient.
pub fn betas(report: &StudyReport) -> Result<Vec<u8>> {
    let fm = &report.final_model;
    let mut w = table(&["bootstrap", "feature", "beta"])?;
    for (b, beta) in fm.fit.converged_betas() {
        for (name, v) in fm.names.iter().zip(&beta) {
            w.write_record([b.to_string(), name.clone(), num(*v)]).map_err(csv_err)?;
        }
    }
    finish(w)
}

fn curve_rows(w: &mut Table, prefix: &[String], c: &CurveReport) -> Result<()> {
    for k in 0..c.knots.len() {
        let mut row = prefix.to_vec();
        row.extend([num(c.knots[k]), c.n_patients[k].to_string(), num(c.median[k]), num(c.lower[k]), num(c.upper[k])]);
        w.write_record(&row).map_err(csv_err)?;
    }
    Ok(())
}

fn curves(report: &StudyReport, pick: impl Fn(&PerformanceSet) -> Option<&CurveReport>, x: &str) -> Result<Vec<u8>> {
    let mut w = table(&["centre", "beta_set", x, "n_patients", "median", "lower", "upper"])?;
    for (centre, perf) in &report.final_model.performance {
        for (name, set) in sets(perf) {
            if let Some(c) = pick(set) {
                curve_rows(&mut w, &[centre.clone(), name.into()], c)?;
            }
        }
    }
    finish(w)
}

pub fn c_harrell(report: &StudyReport) -> Result<Vec<u8>> {
    let mut w = table(&["centre", "beta_set", "sample", "median", "lower", "upper", "n"])?;
    for (centre, perf) in &report.final_model.performance {
        for (name, set) in sets(perf) {
            for (sample, s) in [("in_bag", &set.c_harrell_in_bag), ("out_of_bag", &set.c_harrell_oob)] {
                if let Some(Summary { median, lower, upper, n }) = s {
                    w.write_record([
                        centre.clone(),
                        name.into(),
                        sample.into(),
                        num(*median),
                        num(*lower),
                        num(*upper),
                        n.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    finish(w)
}

pub fn subgroups(report: &StudyReport) -> Result<Vec<u8>> {
    let mut w = table(&[
        "centre",
        "beta_set",
        "subgroup",
        "lower_threshold",
        "upper_threshold",
        "curve",
        "time",
        "n_patients",
        "median",
        "lower",
        "upper",
    ])?;
    for (centre, perf) in &report.final_model.performance {
        for (name, set) in sets(perf) {
            for g in &set.subgroups {
                for (kind, c) in [("km", &g.km), ("cox", &g.cox)] {
                    if let Some(c) = c {
                        let prefix = [
                            centre.clone(),
                            name.into(),
                            g.index.to_string(),
                            opt(g.lower_threshold),
                            opt(g.upper_threshold),
                            kind.into(),
                        ];
                        curve_rows(&mut w, &prefix, c)?;
                    }
                }
            }
        }
    }
    finish(w)
}

pub fn calibration(report: &StudyReport) -> Result<Vec<u8>> {
    let mut w = table(&[
        "centre",
        "beta_set",
        "time",
        "beyond_follow_up",
        "degenerate",
        "group",
        "predicted",
        "observed",
        "lower",
        "upper",
        "n_patients",
    ])?;
    for (centre, perf) in &report.final_model.performance {
        for (name, set) in sets(perf) {
            for cal in &set.calibration {
                for (g, p) in cal.points.iter().enumerate() {
                    w.write_record([
                        centre.clone(),
                        name.into(),
                        num(cal.time),
                        u8::from(cal.beyond_follow_up).to_string(),
                        u8::from(cal.degenerate).to_string(),
                        g.to_string(),
                        num(p.predicted),
                        num(p.observed),
                        num(p.lower),
                        num(p.upper),
                        p.n_patients.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1 + 0.2, 1.0, -3.5e-12, 1e300, f64::MIN_POSITIVE] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(opt(None), "");
    }
}
