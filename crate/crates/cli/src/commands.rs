//! Subcommand implementations.

use std::path::{Path, PathBuf};

use ppct_core::io;
use ppct_core::seeding::{self, tag};
use ppct_core::{
    aggregate_group_labels, apply_count_noise, apply_suppression, assign_optin, assign_tokens,
    emit_callbacks, generate_logs, optin_sweep, run_setting_full, Error, ExperimentSetting,
    GroupingPolicy, MetricsReport, RunConfig, SettingKind,
};

use crate::{CommonArgs, EXIT_CONFIG, EXIT_RUNTIME};

pub(crate) struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME },
            message: format!("{e:#}", e = ErrorChain(&e)),
        }
    }
}

/// Renders an error with its source chain.
struct ErrorChain<'a>(&'a Error);

impl std::fmt::Display for ErrorChain<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)?;
        let mut source = std::error::Error::source(self.0);
        while let Some(s) = source {
            write!(f, ": {s}")?;
            source = s.source();
        }
        Ok(())
    }
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

/// Effective config plus its stable hash (over the serialized form, so a
/// config file and the equivalent defaults hash identically).
struct Loaded {
    config: RunConfig,
    hash: String,
    out_dir: PathBuf,
}

fn load(common: &CommonArgs) -> Result<Loaded, Failure> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.gen.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    let hash = config.stable_hash()?;
    let out_dir = config.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", out_dir.display()),
    })?;
    Ok(Loaded {
        config,
        hash,
        out_dir,
    })
}

/// Refuse to overwrite existing outputs unless --force is given.
fn ensure_writable(paths: &[PathBuf], force: bool) -> CmdResult {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(config_failure(format!(
                "{} exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

fn manifest_entries(hash: &str, seed: u64, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut entries = vec![
        ("config_hash".to_string(), hash.to_string()),
        ("seed".to_string(), seed.to_string()),
    ];
    entries.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    entries
}

pub(crate) fn generate(common: &CommonArgs) -> CmdResult {
    let loaded = load(common)?;
    let log_path = loaded.out_dir.join("log.csv");
    let manifest_path = loaded.out_dir.join("manifest.txt");
    ensure_writable(&[log_path.clone(), manifest_path.clone()], common.force)?;

    let records = generate_logs(&loaded.config.gen)?;
    let n_clicked = records.iter().filter(|r| r.y).count();
    let n_converted = records.iter().filter(|r| r.ground_truth_label()).count();
    io::write_log_csv(&log_path, &records, None)?;
    io::write_manifest(
        &manifest_path,
        &manifest_entries(
            &loaded.hash,
            loaded.config.gen.seed,
            &[
                ("command", "generate".to_string()),
                ("n_records", records.len().to_string()),
                ("n_clicked", n_clicked.to_string()),
                ("n_converted", n_converted.to_string()),
            ],
        ),
    )?;
    println!(
        "wrote {} ({} records, {n_clicked} clicked, {n_converted} converted)",
        log_path.display(),
        records.len()
    );
    Ok(())
}

pub(crate) struct ProtocolOverrides {
    pub bits: Option<u8>,
    pub delay_min: Option<f64>,
    pub delay_max: Option<f64>,
    pub window: Option<f64>,
    pub k: Option<u64>,
    pub grouping: Option<String>,
}

pub(crate) fn simulate(common: &CommonArgs, overrides: ProtocolOverrides) -> CmdResult {
    let loaded = load(common)?;
    let mut protocol = loaded.config.protocol.clone();
    if let Some(bits) = overrides.bits {
        protocol.bits = bits;
    }
    if let Some(v) = overrides.delay_min {
        protocol.delay_min_h = v;
    }
    if let Some(v) = overrides.delay_max {
        protocol.delay_max_h = v;
    }
    if let Some(v) = overrides.window {
        protocol.window_h = v;
    }
    if let Some(v) = overrides.k {
        protocol.suppression_k = v;
    }
    if let Some(name) = &overrides.grouping {
        protocol.grouping_policy = name.parse::<GroupingPolicy>()?;
    }
    protocol.validate()?;

    let log_path = loaded.out_dir.join("log.csv");
    let callbacks_path = loaded.out_dir.join("callbacks.csv");
    let groups_path = loaded.out_dir.join("groups.csv");
    let manifest_path = loaded.out_dir.join("simulate.manifest.txt");
    ensure_writable(
        &[
            callbacks_path.clone(),
            groups_path.clone(),
            manifest_path.clone(),
        ],
        common.force,
    )?;

    let records = io::read_log_csv(&log_path)?;
    let seed = loaded.config.gen.seed;
    let tokens = assign_tokens(&records, protocol.grouping_policy, protocol.bits)?;
    let callbacks = emit_callbacks(&records, &tokens, &protocol, seed)?;
    let groups = aggregate_group_labels(&records, &tokens, &callbacks, &protocol)?;
    let mut groups = apply_suppression(groups, protocol.suppression_k);
    if protocol.count_noise_magnitude > 0 {
        groups = apply_count_noise(groups, protocol.count_noise_magnitude, seed);
    }
    io::write_callbacks_csv(&callbacks_path, &callbacks)?;
    io::write_groups_csv(&groups_path, &groups)?;
    let n_suppressed = groups.iter().filter(|g| g.suppressed).count();
    io::write_manifest(
        &manifest_path,
        &manifest_entries(
            &loaded.hash,
            seed,
            &[
                ("command", "simulate".to_string()),
                ("n_callbacks", callbacks.len().to_string()),
                ("n_groups", groups.len().to_string()),
                ("n_suppressed", n_suppressed.to_string()),
            ],
        ),
    )?;
    println!(
        "wrote {} ({} callbacks) and {} ({} groups, {n_suppressed} suppressed)",
        callbacks_path.display(),
        callbacks.len(),
        groups_path.display(),
        groups.len()
    );
    Ok(())
}

fn build_setting(config: &RunConfig, slug: &str, rate: f64) -> Result<ExperimentSetting, Failure> {
    let kind: SettingKind = slug.parse()?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(config_failure(format!("rate {rate} not in [0, 1]")));
    }
    Ok(ExperimentSetting {
        kind,
        optin_rate: rate,
        stopping_override: (kind == SettingKind::AndroidPlusIosLe13)
            .then_some(config.sweep.le13_fixed_epochs)
            .flatten(),
    })
}

pub(crate) fn train(common: &CommonArgs, setting_slug: &str, rate: f64) -> CmdResult {
    let loaded = load(common)?;
    let setting = build_setting(&loaded.config, setting_slug, rate)?;
    let model_path = loaded.out_dir.join("model.txt");
    let trace_path = loaded.out_dir.join("trace.csv");
    let manifest_path = loaded.out_dir.join("train.manifest.txt");
    ensure_writable(
        &[
            model_path.clone(),
            trace_path.clone(),
            manifest_path.clone(),
        ],
        common.force,
    )?;

    let records = generate_logs(&loaded.config.gen)?;
    let seed = loaded.config.gen.seed;
    let records = assign_optin(&records, rate, seeding::derive(seed, tag::OPTIN))?;
    let pipeline = loaded.config.pipeline()?;
    let run = run_setting_full(&setting, &records, &pipeline, seed)?;

    io::save_model(&model_path, &run.model)?;
    io::write_trace_csv(&trace_path, &run.trace)?;
    if let Some(lr) = &run.imputer {
        io::save_lr_params(&loaded.out_dir.join("imputer.txt"), lr)?;
        io::write_soft_labels_csv(&loaded.out_dir.join("soft_labels.csv"), &run.soft_labels)?;
    }
    io::write_manifest(
        &manifest_path,
        &manifest_entries(
            &loaded.hash,
            seed,
            &[
                ("command", "train".to_string()),
                ("setting", setting.kind.slug().to_string()),
                ("optin_rate", rate.to_string()),
                ("n_hard", run.report.n_hard.to_string()),
                ("n_soft", run.report.n_soft.to_string()),
                ("epochs", run.trace.epochs.len().to_string()),
            ],
        ),
    )?;
    println!(
        "trained {} @ rate {rate}: test PR-AUC {:.4}, calibration error {:.4} ({} epochs)",
        setting.kind.slug(),
        run.report.pr_auc,
        run.report.calibration_error,
        run.trace.epochs.len()
    );
    println!("wrote {} and {}", model_path.display(), trace_path.display());
    Ok(())
}

pub(crate) fn evaluate(common: &CommonArgs, model_path: &Path, rate: f64) -> CmdResult {
    let loaded = load(common)?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(config_failure(format!("rate {rate} not in [0, 1]")));
    }
    let report_path = loaded.out_dir.join("evaluate.csv");
    let manifest_path = loaded.out_dir.join("evaluate.manifest.txt");
    ensure_writable(&[report_path.clone(), manifest_path.clone()], common.force)?;

    let params = io::load_model(model_path)?;
    let records = generate_logs(&loaded.config.gen)?;
    let seed = loaded.config.gen.seed;
    let records = assign_optin(&records, rate, seeding::derive(seed, tag::OPTIN))?;
    let (_, test) = ppct_core::split_train_test(&records, loaded.config.test_fraction);
    let clicked: Vec<&ppct_core::LogRecord> = test.iter().filter(|r| r.y).collect();
    let scores: Vec<f64> = clicked
        .iter()
        .map(|r| ppct_core::forward(&params, &r.x))
        .collect::<ppct_core::Result<_>>()?;
    let labels: Vec<bool> = clicked.iter().map(|r| r.ground_truth_label()).collect();
    let pr = ppct_core::pr_auc(&scores, &labels)?;
    let cal = ppct_core::calibration_error(&scores, &labels, loaded.config.calibration_bins)?;

    let mut w = String::from("pr_auc,calibration_error,n_test_clicked\n");
    w.push_str(&format!("{pr},{cal},{}\n", clicked.len()));
    io::atomic_write(&report_path, w.as_bytes())?;
    io::write_manifest(
        &manifest_path,
        &manifest_entries(
            &loaded.hash,
            seed,
            &[
                ("command", "evaluate".to_string()),
                ("model", model_path.display().to_string()),
                ("optin_rate", rate.to_string()),
                ("n_test_clicked", clicked.len().to_string()),
            ],
        ),
    )?;
    println!("test PR-AUC {pr:.4}, calibration error {cal:.4} ({} clicked rows)", clicked.len());
    println!("wrote {}", report_path.display());
    Ok(())
}

fn summary_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>8} {:>9} {:>9} {:>9} {:>7}\n",
        "setting", "rate", "pr_auc", "se", "relative", "seeds"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<22} {:>8} {:>9.4} {:>9.4} {:>9.4} {:>7}\n",
            r.setting.display_name(),
            r.optin_rate,
            r.pr_auc,
            r.pr_auc_se,
            r.relative_pr_auc,
            r.n_seeds
        ));
    }
    out
}

pub(crate) fn sweep(common: &CommonArgs, threads: Option<usize>) -> CmdResult {
    let loaded = load(common)?;
    let n_threads = threads.unwrap_or(loaded.config.threads);
    if n_threads > 0 {
        // Ignore the error if a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n_threads)
            .build_global();
    }

    let cells_path = loaded.out_dir.join("cells.csv");
    let aggregated_path = loaded.out_dir.join("aggregated.csv");
    let summary_path = loaded.out_dir.join("summary.txt");
    let manifest_path = loaded.out_dir.join("sweep.manifest.txt");
    ensure_writable(
        &[
            cells_path.clone(),
            aggregated_path.clone(),
            summary_path.clone(),
            manifest_path.clone(),
        ],
        common.force,
    )?;

    let pipeline = loaded.config.pipeline()?;
    let specs = loaded.config.setting_specs();
    let result = optin_sweep(
        &loaded.config.sweep.rates,
        &specs,
        loaded.config.sweep.n_seeds,
        &loaded.config.gen,
        &pipeline,
    );
    let output = match result {
        Ok(output) => output,
        Err(Error::SweepFailed {
            stage,
            source,
            completed,
        }) => {
            let partial = loaded.out_dir.join("cells.csv.partial");
            io::write_cells_csv(&partial, &completed)?;
            return Err(Failure {
                code: if source.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME },
                message: format!(
                    "sweep failed in stage {stage}: {} ({} completed cells flushed to {})",
                    ErrorChain(&source),
                    completed.len(),
                    partial.display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };

    io::write_cells_csv(&cells_path, &output.cells)?;
    io::write_aggregated_csv(&aggregated_path, &output.aggregated)?;
    let table = summary_table(&output.aggregated);
    io::atomic_write(&summary_path, table.as_bytes())?;
    io::write_manifest(
        &manifest_path,
        &manifest_entries(
            &loaded.hash,
            loaded.config.gen.seed,
            &[
                ("command", "sweep".to_string()),
                ("n_cells", output.cells.len().to_string()),
                ("n_seeds", loaded.config.sweep.n_seeds.to_string()),
                (
                    "rates",
                    loaded
                        .config
                        .sweep
                        .rates
                        .iter()
                        .map(|r| r.to_string())
                        .collect::<Vec<_>>()
                        .join(" "),
                ),
            ],
        ),
    )?;
    print!("{table}");
    println!(
        "wrote {}, {}, {}",
        cells_path.display(),
        aggregated_path.display(),
        summary_path.display()
    );
    Ok(())
}
