use crate::error::{io_at, CliError, Result};
use crate::figures::{figure_tables, num};
use crate::manifest::{OutputDir, RunManifest};
use crate::svg::figure_charts;
use clap::{Args, ValueEnum};
use fedcox_core::dataset::RawDataset;
use fedcox_core::simulation::{simulate_cohort_with, Marginals, SimConfig};
use fedcox_core::survival::NewtonOptions;
use fedcox_core::SurvivalData;
use fedcox_federation::config::{LocalConfig, OptimizerConfig, Weighting};
use fedcox_federation::coordinator::{Coordinator, ModelSpec, StudyReport};
use fedcox_federation::harness::with_nodes;
use fedcox_federation::leakage::{naive_federated_fit, recursive_peel, LeakTranscript, PeelReport};
use fedcox_federation::message::Phase;
use fedcox_federation::node::LocalNode;
use fedcox_federation::transport::{validate_privacy, Channel, FileChannel, InProcessChannel};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub const LOCAL_CONFIG_FILE: &str = "local.cfg";
pub const REPORT_FILE: &str = "report.json";
pub const FULL_RECOVERY: &str = "FULL RECOVERY";
pub const NO_TRANSCRIPT: &str = "NO TRANSCRIPT — stratified protocol shares no denominators";

/// Recovered rows closer than this to the truth count as recovered.
pub const RECOVERY_TOLERANCE: f64 = 1e-5;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_at(path))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

// ---------------------------------------------------------------- simulate

/// Simulation settings file. Every key is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub n_per_centre: Option<usize>,
    pub baseline_hazards: Option<Vec<f64>>,
    /// Defaults to 0.6 times each baseline hazard.
    pub ltfu_hazards: Option<Vec<f64>>,
    pub admin_censor: Option<f64>,
    pub missing_fraction: Option<f64>,
    pub seed: Option<u64>,
    /// Covariate marginals TOML, relative to the settings file.
    pub marginals: Option<PathBuf>,
    /// Written to each centre's local config.
    pub nr_pt_per_bin: Option<usize>,
    /// Centre `k` (from 1) gets `local_seed + k`.
    pub local_seed: Option<u64>,
}

impl SimulateFile {
    pub fn sim_config(&self) -> SimConfig {
        let d = SimConfig::default();
        let baseline_hazards = self.baseline_hazards.clone().unwrap_or(d.baseline_hazards);
        let ltfu_hazards = match (&self.ltfu_hazards, &self.baseline_hazards) {
            (Some(h), _) => h.clone(),
            (None, Some(b)) => b.iter().map(|h| 0.6 * h).collect(),
            (None, None) => d.ltfu_hazards,
        };
        SimConfig {
            n_per_centre: self.n_per_centre.unwrap_or(d.n_per_centre),
            baseline_hazards,
            ltfu_hazards,
            admin_censor: self.admin_censor.unwrap_or(d.admin_censor),
            missing_fraction: self.missing_fraction.unwrap_or(d.missing_fraction),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Simulation settings (TOML); built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; one subdirectory per centre.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the settings file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn simulate(args: &SimulateArgs) -> Result<RunManifest> {
    let (mut file, base) = match &args.config {
        Some(path) => {
            let file: SimulateFile =
                toml::from_str(&read_text(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            (file, path.parent().unwrap_or(Path::new(".")).to_path_buf())
        }
        None => (SimulateFile::default(), PathBuf::from(".")),
    };
    if args.seed.is_some() {
        file.seed = args.seed;
    }
    let marginals = match &file.marginals {
        Some(p) => Marginals::from_toml_str(&read_text(&base.join(p))?)?,
        None => Marginals::bundled(),
    };
    let cfg = file.sim_config();
    let nr_pt_per_bin = file.nr_pt_per_bin.unwrap_or(10);
    if nr_pt_per_bin == 0 {
        return Err(CliError::Config("nr_pt_per_bin must be at least 1".into()));
    }
    let local_seed = file.local_seed.unwrap_or(100);

    let start = Instant::now();
    let cohorts = simulate_cohort_with(&cfg, &marginals)?;
    let mut snapshot = serde_json::to_value(&cfg)?;
    snapshot["marginals"] = serde_json::json!(file.marginals.as_ref().map(|p| p.display().to_string()));
    snapshot["nr_pt_per_bin"] = serde_json::json!(nr_pt_per_bin);
    let mut out = OutputDir::create(&args.out, RunManifest::new("simulate", snapshot))?;
    out.manifest.seeds.insert("seed".into(), cfg.seed);
    for (k, raw) in cohorts.iter().enumerate() {
        let name = format!("centre{}", k + 1);
        let mut csv = Vec::new();
        raw.write_csv(&mut csv)?;
        out.write(&format!("{name}/data.csv"), &csv)?;
        let local = LocalConfig {
            data_paths: vec![PathBuf::from("data.csv")],
            local_seed: local_seed + k as u64 + 1,
            nr_pt_per_bin,
            n_allowed_missing: None,
        };
        out.write(&format!("{name}/{LOCAL_CONFIG_FILE}"), local.to_text().as_bytes())?;
        out.manifest.seeds.insert(format!("{name}.LocalSeed"), local.local_seed);
        let events = raw.events.iter().filter(|e| **e).count();
        println!("{name}: {} patients, {events} events, {} missing cells", raw.n(), raw.n_missing());
    }
    out.manifest.timings.push(("simulate".into(), start.elapsed().as_secs_f64()));
    let manifest = out.finish()?;
    println!("wrote {} files to {}", manifest.files.len(), args.out.display());
    Ok(manifest)
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    /// Queues in memory.
    Memory,
    /// One JSON file per message under `<out>/messages`.
    Files,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Coordinator settings (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Centre directory holding local.cfg, or a local config file. The
    /// centre is named after the directory.
    #[arg(long = "centre", required = true)]
    pub centres: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "memory")]
    pub transport: TransportKind,
    /// Also render SVG charts.
    #[arg(long)]
    pub svg: bool,
    /// Overrides GlobalSeed.
    #[arg(long, env = "FEDCOX_SEED")]
    pub seed: Option<u64>,
    /// Seconds to wait for any one round of replies.
    #[arg(long, default_value_t = 3600)]
    pub timeout: u64,
}

/// Centre name and local config path for a `--centre` argument.
pub fn resolve_centre(path: &Path) -> Result<(String, PathBuf)> {
    let (dir, cfg) = if path.is_dir() {
        (path.to_path_buf(), path.join(LOCAL_CONFIG_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let dir = std::fs::canonicalize(&dir).unwrap_or(dir);
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::Config(format!("cannot name centre from {}", path.display())))?
        .to_string();
    Ok((name, cfg))
}

struct Centre {
    name: String,
    local: LocalConfig,
}

fn load_centres(paths: &[PathBuf]) -> Result<Vec<Centre>> {
    let mut centres: Vec<Centre> = Vec::new();
    for p in paths {
        let (name, cfg) = resolve_centre(p)?;
        if centres.iter().any(|c| c.name == name) {
            return Err(CliError::Config(format!("two centres named {name}")));
        }
        centres.push(Centre { name, local: LocalConfig::load(&cfg)? });
    }
    if centres.is_empty() {
        return Err(CliError::Config("no centres given".into()));
    }
    Ok(centres)
}

fn open_nodes(centres: &[Centre]) -> Result<Vec<LocalNode>> {
    Ok(centres.iter().map(|c| LocalNode::from_config(&c.name, &c.local)).collect::<Result<_, _>>()?)
}

pub fn fit(args: &FitArgs) -> Result<StudyReport> {
    let mut cfg = OptimizerConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.global_seed = seed;
    }
    cfg.validate()?;
    let centres = load_centres(&args.centres)?;
    let start = Instant::now();
    let mut nodes = open_nodes(&centres)?;
    let load_time = start.elapsed().as_secs_f64();

    let snapshot = serde_json::json!({
        "optimizer": serde_json::to_value(&cfg)?,
        "centres": centres.iter().map(|c| (c.name.clone(), c.local.to_text())).collect::<std::collections::BTreeMap<_, _>>(),
        "transport": format!("{:?}", args.transport).to_lowercase(),
    });
    let mut out = OutputDir::create(&args.out, RunManifest::new("fit", snapshot))?;
    out.manifest.seeds.insert("GlobalSeed".into(), cfg.global_seed);
    for c in &centres {
        out.manifest.seeds.insert(format!("{}.LocalSeed", c.name), c.local.local_seed);
    }

    let queue = args.out.join("messages");
    let channel: Arc<dyn Channel> = match args.transport {
        TransportKind::Memory => Arc::new(InProcessChannel::new()),
        TransportKind::Files => {
            if queue.exists() {
                std::fs::remove_dir_all(&queue).map_err(io_at(&queue))?;
            }
            Arc::new(FileChannel::new(&queue).map_err(fedcox_federation::FederationError::from)?)
        }
    };
    log::info!("fitting over {} centres", nodes.len());
    let report = with_nodes(channel, &mut nodes, cfg, Duration::from_secs(args.timeout), Coordinator::run)?;
    if args.transport == TransportKind::Files {
        std::fs::remove_dir_all(&queue).map_err(io_at(&queue))?;
    }

    out.manifest.timings.push(("load".into(), load_time));
    out.manifest.timings.extend(report.timings.iter().cloned());
    emit(&mut out, &report, args.svg)?;
    out.manifest.timings.push(("total".into(), start.elapsed().as_secs_f64()));
    out.finish()?;
    print_summary(&report);
    println!("results in {}", args.out.display());
    Ok(report)
}

fn emit(out: &mut OutputDir, report: &StudyReport, svg: bool) -> Result<()> {
    out.write(REPORT_FILE, &to_json(report)?)?;
    for (name, bytes) in figure_tables(report)? {
        out.write(name, &bytes)?;
    }
    if svg {
        for (name, text) in figure_charts(report) {
            out.write(name, text.as_bytes())?;
        }
    }
    Ok(())
}

fn print_summary(report: &StudyReport) {
    let sel = &report.selection;
    let chosen = &sel.summaries[sel.chosen];
    let best = &sel.summaries[sel.best];
    println!(
        "centres: {}",
        report.centres.iter().zip(&report.n_local).map(|(c, n)| format!("{c} ({n})")).collect::<Vec<_>>().join(", ")
    );
    println!("candidates: {}", sel.fits.len());
    println!(
        "best: {} (cv nll {:.3} +/- {:.3})",
        sel.fits[sel.best].spec.names(&sel.features).join(", "),
        -best.mean_cv,
        best.sd_cv
    );
    println!("chosen: {} (cv nll {:.3})", sel.chosen_names().join(", "), -chosen.mean_cv);
    let fm = &report.final_model;
    for (k, name) in fm.names.iter().enumerate() {
        if let (Some(m), Some(l), Some(u)) = (fm.fit.median.get(k), fm.fit.lower.get(k), fm.fit.upper.get(k)) {
            println!("  {name:>12} {m:>9.4} [{l:.4}, {u:.4}]");
        }
    }
    for (centre, perf) in &fm.performance {
        if let Some(c) = perf.median_beta.c_harrell_oob {
            println!("{centre}: out-of-bag C-Harrell {:.3} [{:.3}, {:.3}]", c.median, c.lower, c.upper);
        }
    }
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Directory of a previous `fit`.
    #[arg(long)]
    pub run: PathBuf,
    /// Where to write the figures; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub svg: bool,
}

pub fn report(args: &ReportArgs) -> Result<StudyReport> {
    let path = args.run.join(REPORT_FILE);
    let report: StudyReport =
        serde_json::from_str(&read_text(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let dir = args.out.clone().unwrap_or_else(|| args.run.clone());
    let manifest = match RunManifest::load(&dir) {
        Ok(m) => m,
        Err(_) => RunManifest::new("report", serde_json::json!({ "run": args.run.display().to_string() })),
    };
    let mut out = OutputDir::create(&dir, manifest)?;
    emit(&mut out, &report, args.svg)?;
    out.finish()?;
    print_summary(&report);
    Ok(report)
}

// ---------------------------------------------------------------- attack

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    /// Coordinator settings; supplies the features and tolerance.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "centre")]
    pub centres: Vec<PathBuf>,
    /// Comma-separated features, overriding the settings file.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Run the centre-stratified protocol instead and inspect what leaks.
    #[arg(long, conflicts_with = "transcript")]
    pub stratified: bool,
    /// Attack a saved transcript instead of running a fit.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Where to write transcript.json and recovered.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentreOutcome {
    pub centre: String,
    pub peel: PeelReport,
    /// Patients in the centre, when its data were available.
    pub n_patients: Option<usize>,
    /// Largest absolute error against the true rows, when available.
    pub max_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub verdict: String,
    pub centres: Vec<CentreOutcome>,
}

pub fn attack(args: &AttackArgs) -> Result<AttackOutcome> {
    let cfg = args.config.as_deref().map(OptimizerConfig::load).transpose()?;
    let centres = if args.centres.is_empty() { Vec::new() } else { load_centres(&args.centres)? };
    let features = match (&args.features, &cfg) {
        (Some(f), _) => f.clone(),
        (None, Some(c)) => c.features.clone(),
        (None, None) => Vec::new(),
    };
    let mut out = match &args.out {
        Some(dir) => {
            Some(OutputDir::create(dir, RunManifest::new("attack", serde_json::json!({ "features": features })))?)
        }
        None => None,
    };

    let transcript = match &args.transcript {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("transcript {}: {e}", path.display())))?;
            serde_json::from_str::<LeakTranscript>(&text)
                .map_err(|e| CliError::Data(format!("transcript {}: {e}", path.display())))?
        }
        None => {
            if centres.is_empty() {
                return Err(CliError::Config("give --centre directories or --transcript".into()));
            }
            if features.is_empty() {
                return Err(CliError::Config("give --features or --config".into()));
            }
            let transcript = if args.stratified {
                stratified_transcript(&centres, &features, cfg.clone())?
            } else {
                naive_transcript(&centres, &features, cfg.as_ref())?
            };
            if let Some(out) = &mut out {
                out.write("transcript.json", &to_json(&transcript)?)?;
            }
            transcript
        }
    };

    if transcript.is_empty() {
        if let Some(out) = out {
            out.finish()?;
        }
        println!("{NO_TRANSCRIPT}");
        return Ok(AttackOutcome { verdict: NO_TRANSCRIPT.into(), centres: Vec::new() });
    }

    let p = transcript.steps[0].beta.len();
    let mut outcomes = Vec::new();
    for name in transcript.centres() {
        let peel = recursive_peel(&transcript.series(&name)?, p)?;
        let truth = match centres.iter().find(|c| c.name == name) {
            Some(c) if features.len() == p => true_rows(c, &features)?,
            _ => None,
        };
        let max_error = truth.as_ref().map(|t| {
            peel.rows
                .iter()
                .map(|r| match match_row(t, r.time) {
                    Some(i) => inf_norm(&r.row, t.row(i)),
                    None => f64::INFINITY,
                })
                .fold(0.0, f64::max)
        });
        outcomes.push(CentreOutcome { centre: name, n_patients: truth.as_ref().map(|t| t.n()), max_error, peel });
    }
    if let Some(mut out) = out {
        let truth = centres
            .iter()
            .map(|c| Ok((c.name.clone(), if features.len() == p { true_rows(c, &features)? } else { None })))
            .collect::<Result<Vec<_>>>()?;
        out.write("recovered.csv", &recovered_csv(&outcomes, &truth, &features, p)?)?;
        out.finish()?;
    }

    let mut total = 0;
    let mut recovered = 0;
    let mut full = true;
    for o in &outcomes {
        let n = o.n_patients.unwrap_or(o.peel.rows.len() + usize::from(!o.peel.complete));
        let ok = o.max_error.is_none_or(|e| e < RECOVERY_TOLERANCE);
        let good = if ok { o.peel.rows.len() } else { 0 };
        total += n;
        recovered += good;
        full &= o.peel.complete && ok && good == n;
        let err = o.max_error.map(|e| format!(", max abs error {e:.2e}")).unwrap_or_default();
        println!("{}: recovered {} of {n} patients{err}", o.centre, o.peel.rows.len());
        if let Some(why) = &o.peel.stopped {
            println!("  stopped: {why}");
        }
    }
    let verdict =
        if full { FULL_RECOVERY.to_string() } else { format!("PARTIAL RECOVERY: {recovered} of {total} patients") };
    println!("{verdict}");
    Ok(AttackOutcome { verdict, centres: outcomes })
}

fn naive_transcript(centres: &[Centre], features: &[String], cfg: Option<&OptimizerConfig>) -> Result<LeakTranscript> {
    let mut nodes: Vec<LocalNode> = open_nodes(centres)?.into_iter().map(|n| n.with_privacy(false)).collect();
    let coord_cfg = cfg.cloned().unwrap_or_else(|| attack_config(features));
    let options = NewtonOptions {
        tolerance: cfg.map_or(1e-9, |c| c.tolerance),
        max_iterations: cfg.map_or(50, |c| c.max_iterations),
        ..NewtonOptions::default()
    };
    let channel = Arc::new(InProcessChannel::with_log());
    let fit = with_nodes(channel.clone(), &mut nodes, coord_cfg, Duration::from_secs(600), |c| {
        naive_federated_fit(c, features, options)
    })?;
    println!("unstratified fit: {} iterations, converged {}", fit.iterations, fit.converged);
    Ok(LeakTranscript::from_messages(&channel.log())?)
}

/// Fits the full model once through the stratified protocol and returns
/// whatever the coordinator could reuse for the attack.
fn stratified_transcript(
    centres: &[Centre],
    features: &[String],
    cfg: Option<OptimizerConfig>,
) -> Result<LeakTranscript> {
    let mut cfg = cfg.unwrap_or_else(|| attack_config(features));
    cfg.features = features.to_vec();
    cfg.level_sets.retain(|set| set.iter().all(|f| features.contains(f)));
    let spec = ModelSpec::from_names(&cfg, features)?;
    let n_boot = cfg.n_boot_cv;
    let mut nodes = open_nodes(centres)?;
    let channel = Arc::new(InProcessChannel::with_log());
    let fits = with_nodes(channel.clone(), &mut nodes, cfg, Duration::from_secs(600), |c| {
        c.prepare(Phase::Selection, n_boot)?;
        c.fit_models(std::slice::from_ref(&spec), n_boot)
    })?;
    let log = channel.log();
    let mut violations = 0;
    for (c, node) in centres.iter().zip(&nodes) {
        let n_local = node.n_local().unwrap_or(0);
        for msg in log.iter().filter(|m| m.sender == c.name) {
            violations += validate_privacy(msg, n_local, c.local.nr_pt_per_bin).len();
        }
    }
    println!(
        "stratified fit: {} of {} bootstraps converged, {} messages, {violations} privacy violations",
        fits[0].n_boot() - fits[0].failures,
        fits[0].n_boot(),
        log.len()
    );
    Ok(LeakTranscript::from_messages(&log)?)
}

fn attack_config(features: &[String]) -> OptimizerConfig {
    OptimizerConfig {
        features: features.to_vec(),
        level_sets: Vec::new(),
        global_seed: 1,
        n_boot_cv: 2,
        n_boot_model_info: 2,
        tolerance: 1e-9,
        alpha: 0.05,
        pi_thresholds: None,
        cal_time_points: Vec::new(),
        cal_groups: 4,
        n_allowed_missing: 0,
        weighting: Weighting::Pooled,
        max_iterations: 50,
    }
}

/// The centre's own rows, or `None` when values are missing.
fn true_rows(c: &Centre, features: &[String]) -> Result<Option<SurvivalData>> {
    let mut parts = Vec::new();
    for path in &c.local.data_paths {
        let file = std::fs::File::open(path).map_err(io_at(path))?;
        let raw = RawDataset::read_csv(file)?;
        if raw.n_missing() > 0 {
            return Ok(None);
        }
        parts.push(raw.complete_with(&[])?.survival_data(features)?);
    }
    Ok(Some(SurvivalData::concat(&parts)?))
}

fn match_row(truth: &SurvivalData, time: f64) -> Option<usize> {
    (0..truth.n()).find(|&i| truth.events()[i] && truth.times()[i] == time)
}

fn inf_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn recovered_csv(
    outcomes: &[CentreOutcome],
    truth: &[(String, Option<SurvivalData>)],
    features: &[String],
    p: usize,
) -> Result<Vec<u8>> {
    let names: Vec<String> =
        if features.len() == p { features.to_vec() } else { (1..=p).map(|k| format!("x{k}")).collect() };
    let mut header = vec!["centre".to_string(), "rank".into(), "time".into(), "residual".into()];
    header.extend(names.iter().map(|n| format!("recovered_{n}")));
    header.extend(names.iter().map(|n| format!("true_{n}")));
    header.push("abs_error".into());
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(&header).map_err(err)?;
    for o in outcomes {
        let t = truth.iter().find(|(n, _)| *n == o.centre).and_then(|(_, t)| t.as_ref());
        for (rank, r) in o.peel.rows.iter().enumerate() {
            let mut row = vec![o.centre.clone(), rank.to_string(), num(r.time), num(r.residual)];
            row.extend(r.row.iter().map(|v| num(*v)));
            match t.and_then(|t| match_row(t, r.time).map(|i| t.row(i))) {
                Some(x) => {
                    row.extend(x.iter().map(|v| num(*v)));
                    row.push(num(inf_norm(&r.row, x)));
                }
                None => row.extend(std::iter::repeat_n(String::new(), p + 1)),
            }
            w.write_record(&row).map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}
