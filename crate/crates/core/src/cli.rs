//! Command-line front end. Each subcommand resolves a [`CliConfig`] from an
//! optional TOML file plus flags, then calls straight into the library.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cohort::{ingest_metadata, normalize_records, ColumnMap, ManifestKind, Manifests};
use crate::error::{Error, Result};
use crate::experiments::{
    hypothesis_status, ExperimentSpec, Harness, MatrixKind, MatrixSettings, Regime, Variant,
};
use crate::reporting::{
    audit, export_table, load_summaries, regenerate_reports, write_hypotheses, TableFormat,
};
use crate::splits::fixed_split;
use crate::synthetic::{generate_cohort, SynthConfig};
use crate::trainer::TrainConfig;

// Stdout writes that tolerate a closed pipe (`report | head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

/// Dataset location and column names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub csv: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub columns: ColumnMap,
}

/// Structured run configuration; flags override file values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub experiment: MatrixSettings,
    pub synth: SynthConfig,
    /// Spec trained by `train`.
    pub variant: Option<Variant>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "crossmodal-kd",
    version,
    about = "Training-only CT supervision for X-ray classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Structured TOML config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for the subcommand (cohort, split, resample or training seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Metadata CSV; when absent, manifests are read from <out>/manifests.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Image directory that metadata file names are relative to.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct ParallelArgs {
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegimeArg {
    Fixed,
    Resampled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Delimited,
    Markdown,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    Grid,
    Modules,
    Progressive,
    Sampler,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired cohort.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Build the three manifests and print cohort statistics.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write the fixed patient-level splits.
    Split {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write the Monte Carlo resampling plan.
    Resample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train and evaluate one spec on the fixed split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Variant to train (default: student_only).
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
    /// Run the fixed-split or resampled matrix.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        parallel: ParallelArgs,
        #[arg(long, value_enum, default_value = "fixed")]
        regime: RegimeArg,
    },
    /// Run an ablation study.
    Ablate {
        #[arg(value_enum)]
        study: AblationArg,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        parallel: ParallelArgs,
    },
    /// Regenerate tables, figures and the hypothesis ledger from summaries.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
    },
    /// Verify every digest and summary under an output root.
    Audit {
        /// Output root to verify.
        root: PathBuf,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown variant '{s}'"))
}

fn resolve(common: &Common, data: Option<&DataArgs>) -> Result<(CliConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(d) = data {
        if d.csv.is_some() {
            cfg.data.csv = d.csv.clone();
        }
        if d.images.is_some() {
            cfg.data.images = d.images.clone();
        }
    }
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    let out = cfg.out.clone().ok_or_else(|| {
        Error::Config("no output root: pass --out or set `out` in the config".into())
    })?;
    fs::create_dir_all(&out).map_err(|e| Error::io(format!("create {}", out.display()), e))?;
    Ok((cfg, out))
}

fn persist_effective(out: &Path, command: &str, cfg: &CliConfig) -> Result<()> {
    let p = out.join(format!("effective_config.{command}.toml"));
    fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(format!("write {}", p.display()), e))
}

/// Ingests the metadata CSV when one is configured (writing manifests under
/// `<out>/manifests`), otherwise reads previously written manifests.
fn manifests(cfg: &CliConfig, out: &Path) -> Result<Manifests> {
    let dir = out.join("manifests");
    match &cfg.data.csv {
        Some(csv) => {
            let images = cfg
                .data
                .images
                .clone()
                .unwrap_or_else(|| csv.parent().map(|p| p.join("images")).unwrap_or_default());
            let raw = ingest_metadata(csv, &cfg.data.columns)?;
            let (records, tally) = normalize_records(&raw, &images);
            log::info!(
                "dropped {} todo, {} missing-file, {} unknown-modality rows",
                tally.todo,
                tally.missing_file,
                tally.unknown_modality
            );
            let m = Manifests::build(&records)?;
            m.write_dir(&dir)?;
            Ok(m)
        }
        None => Manifests::read_dir(&dir),
    }
}

fn print_stats(m: &Manifests) -> Result<()> {
    for man in m.iter() {
        let s = man.stats()?;
        outln!(
            "{}: images={} patients={} positive_images={} negative_images={} positive_patients={} negative_patients={}",
            man.kind.file_stem(),
            s.n_images,
            s.n_patients,
            s.n_positive_images,
            s.n_negative_images,
            s.n_positive_patients,
            s.n_negative_patients
        );
    }
    Ok(())
}

fn print_matrix(result: &crate::experiments::MatrixResult) -> Result<()> {
    out!("{}", export_table(result, TableFormat::Markdown)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let (mut cfg, out) = resolve(&common, None)?;
            if let Some(s) = common.seed {
                cfg.synth.seed = s;
            }
            persist_effective(&out, "synth", &cfg)?;
            let c = generate_cohort(&cfg.synth, &out)?;
            outln!(
                "metadata={} images={} n_images={} positive_patients={}",
                c.metadata_csv.display(),
                c.image_root.display(),
                c.n_images,
                c.n_positive_patients
            );
        }
        Command::Ingest { common, data } => {
            let (cfg, out) = resolve(&common, Some(&data))?;
            if cfg.data.csv.is_none() {
                return Err(Error::Config("ingest needs --csv".into()));
            }
            let m = manifests(&cfg, &out)?;
            persist_effective(&out, "ingest", &cfg)?;
            print_stats(&m)?;
        }
        Command::Split { common, data } => {
            let (mut cfg, out) = resolve(&common, Some(&data))?;
            if let Some(s) = common.seed {
                cfg.experiment.split_seed = s;
            }
            let m = manifests(&cfg, &out)?;
            persist_effective(&out, "split", &cfg)?;
            let dir = out.join("splits");
            fs::create_dir_all(&dir)
                .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
            for kind in [
                ManifestKind::AllXray,
                ManifestKind::AllCt,
                ManifestKind::PairedXrayTarget,
            ] {
                let man = match kind {
                    ManifestKind::AllXray => &m.all_xray,
                    ManifestKind::AllCt => &m.all_ct,
                    ManifestKind::PairedXrayTarget => &m.paired,
                };
                match fixed_split(man, cfg.experiment.val_fraction, cfg.experiment.split_seed) {
                    Ok(s) => {
                        let p = dir.join(format!("{}_{}.json", kind.file_stem(), s.id));
                        s.write(&p)?;
                        outln!(
                            "{}: train_patients={} val_patients={} val_images={} digest={}",
                            kind.file_stem(),
                            s.train_patients.len(),
                            s.val_patients.len(),
                            s.val_indices.len(),
                            s.digest()
                        );
                    }
                    Err(e) => log::warn!("{}: {e}", kind.file_stem()),
                }
            }
        }
        Command::Resample { common, data } => {
            let (mut cfg, out) = resolve(&common, Some(&data))?;
            if let Some(s) = common.seed {
                cfg.experiment.resample_seed = s;
            }
            let m = manifests(&cfg, &out)?;
            persist_effective(&out, "resample", &cfg)?;
            let plan =
                Harness::new(&m, cfg.train.clone(), cfg.experiment.clone()).resample_plan()?;
            let dir = out.join("splits");
            fs::create_dir_all(&dir)
                .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
            plan.write(&dir.join("resample_plan.json"))?;
            for s in &plan.splits {
                outln!(
                    "{}: seed={} val_images={} digest={}",
                    s.id,
                    s.seed,
                    s.val_indices.len(),
                    s.digest()
                );
            }
        }
        Command::Train {
            common,
            data,
            variant,
        } => {
            let (mut cfg, out) = resolve(&common, Some(&data))?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if variant.is_some() {
                cfg.variant = variant;
            }
            let m = manifests(&cfg, &out)?;
            persist_effective(&out, "train", &cfg)?;
            let spec = train_spec(&cfg);
            let harness =
                Harness::new(&m, cfg.train.clone(), cfg.experiment.clone()).with_output(&out);
            print_matrix(&harness.run_single(spec)?)?;
        }
        Command::Matrix {
            common,
            data,
            parallel,
            regime,
        } => {
            let (mut cfg, out) = resolve(&common, Some(&data))?;
            if let Some(s) = common.seed {
                cfg.experiment.split_seed = s;
                cfg.experiment.resample_seed = s;
            }
            let m = manifests(&cfg, &out)?;
            persist_effective(&out, "matrix", &cfg)?;
            let harness = Harness::new(&m, cfg.train.clone(), cfg.experiment.clone())
                .with_output(&out)
                .with_jobs(parallel.jobs);
            let result = match regime {
                RegimeArg::Fixed => harness.run_fixed_matrix()?,
                RegimeArg::Resampled => harness.run_resampled_matrix()?,
            };
            print_matrix(&result)?;
        }
        Command::Ablate {
            study,
            common,
            data,
            parallel,
        } => {
            let (mut cfg, out) = resolve(&common, Some(&data))?;
            let grid_seed = common.seed.unwrap_or(cfg.train.seed);
            if let (Some(s), false) = (common.seed, matches!(study, AblationArg::Grid)) {
                cfg.experiment.split_seed = s;
            }
            let m = manifests(&cfg, &out)?;
            persist_effective(&out, "ablate", &cfg)?;
            let harness = Harness::new(&m, cfg.train.clone(), cfg.experiment.clone())
                .with_output(&out)
                .with_jobs(parallel.jobs);
            let result = match study {
                AblationArg::Grid => harness.run_grid_ablation(grid_seed)?,
                AblationArg::Modules => harness.run_module_ablation()?,
                AblationArg::Progressive => harness.run_progressive()?,
                AblationArg::Sampler => harness.run_sampler_control()?,
            };
            print_matrix(&result)?;
        }
        Command::Report { common, format } => {
            let (_, out) = resolve(&common, None)?;
            let written = regenerate_reports(&out)?;
            let summaries = load_summaries(&out)?;
            let find = |k: MatrixKind| summaries.iter().find(|s| s.kind == k);
            if let (Some(f), Some(r)) = (find(MatrixKind::Fixed), find(MatrixKind::Resampled)) {
                let h = hypothesis_status(f, r, find(MatrixKind::SamplerControl))?;
                write_hypotheses(&out, &h)?;
                for s in &h {
                    outln!("{}: {:?}", s.id, s.status);
                }
            }
            let fmt = match format {
                FormatArg::Delimited => TableFormat::Delimited,
                FormatArg::Markdown => TableFormat::Markdown,
            };
            for s in &summaries {
                out!("{}", export_table(s, fmt)?);
                outln!();
            }
            log::info!("regenerated {} files", written.len());
        }
        Command::Audit { root } => {
            let r = audit(&root)?;
            if !r.passed() {
                for f in &r.failures {
                    eprintln!("{f}");
                }
                return Err(Error::Audit(format!(
                    "{} problem(s); first: {}",
                    r.failures.len(),
                    r.failures[0]
                )));
            }
            outln!(
                "audit passed: {} runs, {} summaries",
                r.runs_checked,
                r.summaries_checked
            );
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 on success, 2 on usage errors, 1 on
/// any other failure, reported as a single `error kind=... message=...` line.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={:?}", e.kind(), msg);
            1
        }
    }
}

/// The spec `train` would run for a given config.
pub fn train_spec(cfg: &CliConfig) -> ExperimentSpec {
    let mut spec = cfg.experiment.preset(
        cfg.variant.unwrap_or(Variant::StudentOnly),
        Regime::FixedSplit,
    );
    spec.seeds = vec![cfg.train.seed];
    spec
}
