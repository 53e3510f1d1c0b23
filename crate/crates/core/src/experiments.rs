//! Experiment specs, matrix orchestration and the hypothesis ledger.
//!
//! A matrix is a list of specs, each run over a set of seeds and splits.
//! Runs are independent and may execute on several worker threads; frozen
//! teachers are trained once per (modality, split, seed, teacher modules)
//! before any student starts, and results are collected in job order so the
//! aggregate does not depend on scheduling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{render_manifest, Manifest, ManifestKind, Manifests, Modality};
use crate::error::{Error, Result};
use crate::losses::{
    DistillParams, Mechanism, DEFAULT_ALPHA, DEFAULT_MECHANISM_WEIGHT, DEFAULT_TEMPERATURE,
};
use crate::metrics::{default_grid, evaluate, summarize, threshold_sweep, MetricsReport, Summary};
use crate::model::ModuleFlags;
use crate::nn::Parameterized;
use crate::reporting::{self, RunManifestEntry, WeightsSource};
use crate::splits::{fixed_split, resample_plan, ResamplePlan, SplitSpec};
use crate::trainer::{
    predict_fusion_scores, predict_scores, teacher_signals, train_late_fusion, train_student,
    train_teacher, Dataset, ImageStore, LossTrajectory, RunResult, SamplerMode, Stopwatch,
    TeacherSignal, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TeacherOnlyXray,
    /// Reference only: never part of a headline matrix.
    TeacherOnlyCt,
    StudentOnly,
    LateFusion,
    SameModalityKd,
    PlainCrossModalKd,
    AttentionTransfer,
    FeatureHint,
    FullJdcnet,
    Custom,
}

impl Variant {
    pub const FIXED_MATRIX: [Variant; 6] = [
        Variant::TeacherOnlyXray,
        Variant::StudentOnly,
        Variant::LateFusion,
        Variant::SameModalityKd,
        Variant::PlainCrossModalKd,
        Variant::FullJdcnet,
    ];

    pub const RESAMPLED_MATRIX: [Variant; 7] = [
        Variant::StudentOnly,
        Variant::LateFusion,
        Variant::SameModalityKd,
        Variant::PlainCrossModalKd,
        Variant::AttentionTransfer,
        Variant::FeatureHint,
        Variant::FullJdcnet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TeacherOnlyXray => "teacher_only_xray",
            Variant::TeacherOnlyCt => "teacher_only_ct",
            Variant::StudentOnly => "student_only",
            Variant::LateFusion => "late_fusion",
            Variant::SameModalityKd => "same_modality_kd",
            Variant::PlainCrossModalKd => "plain_cross_modal_kd",
            Variant::AttentionTransfer => "attention_transfer",
            Variant::FeatureHint => "feature_hint",
            Variant::FullJdcnet => "full_jdcnet",
            Variant::Custom => "custom",
        }
    }

    pub fn role(self) -> &'static str {
        match self {
            Variant::TeacherOnlyXray => "Reference only",
            Variant::TeacherOnlyCt => "Reference only (no comparator)",
            Variant::StudentOnly => "Paired baseline",
            Variant::LateFusion => "Fusion control",
            Variant::SameModalityKd => "Same-modality control",
            Variant::PlainCrossModalKd => "Stripped-down transfer test",
            Variant::AttentionTransfer | Variant::FeatureHint => "Mechanism control",
            Variant::FullJdcnet => "Proposed-module test",
            Variant::Custom => "Ablation",
        }
    }

    /// Module flags and mechanism a named variant is pinned to.
    pub fn definition(self) -> Option<(ModuleFlags, Mechanism)> {
        Some(match self {
            Variant::TeacherOnlyXray
            | Variant::TeacherOnlyCt
            | Variant::StudentOnly
            | Variant::LateFusion => (ModuleFlags::NONE, Mechanism::None),
            Variant::SameModalityKd | Variant::PlainCrossModalKd => {
                (ModuleFlags::NONE, Mechanism::LogitKd)
            }
            Variant::AttentionTransfer => (ModuleFlags::NONE, Mechanism::AttentionTransfer),
            Variant::FeatureHint => (ModuleFlags::NONE, Mechanism::FeatureHint),
            Variant::FullJdcnet => (ModuleFlags::ALL, Mechanism::LogitKd),
            Variant::Custom => return None,
        })
    }

    /// Cohort the variant is trained and evaluated on.
    pub fn cohort(self) -> ManifestKind {
        match self {
            Variant::TeacherOnlyXray => ManifestKind::AllXray,
            Variant::TeacherOnlyCt => ManifestKind::AllCt,
            _ => ManifestKind::PairedXrayTarget,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FixedSplit,
    Resampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub variant: Variant,
    pub module_flags: ModuleFlags,
    pub distill: DistillParams,
    pub sampler: SamplerMode,
    pub seeds: Vec<u64>,
    pub regime: Regime,
}

impl ExperimentSpec {
    /// The canonical spec of a named variant with default distillation
    /// settings and the shuffled sampler.
    pub fn preset(variant: Variant, regime: Regime, seeds: &[u64]) -> Self {
        let (flags, mechanism) = variant
            .definition()
            .unwrap_or((ModuleFlags::NONE, Mechanism::None));
        let distill = if mechanism == Mechanism::None {
            DistillParams::default()
        } else {
            DistillParams::with_mechanism(mechanism)
        };
        Self {
            name: variant.as_str().to_string(),
            variant,
            module_flags: flags,
            distill,
            sampler: SamplerMode::Shuffled,
            seeds: seeds.to_vec(),
            regime,
        }
    }

    /// A cross-modal logit-KD spec with arbitrary module flags.
    pub fn custom(name: &str, flags: ModuleFlags, regime: Regime, seeds: &[u64]) -> Self {
        Self {
            name: name.to_string(),
            variant: Variant::Custom,
            module_flags: flags,
            ..Self::preset(Variant::PlainCrossModalKd, regime, seeds)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.contains("__") {
            return Err(Error::Config(format!(
                "spec name '{}' must be non-empty without '/' or '__'",
                self.name
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config(format!("spec '{}' has no seeds", self.name)));
        }
        match self.variant.definition() {
            Some((flags, mech)) => {
                if self.module_flags != flags || self.distill.mechanism != mech {
                    return Err(Error::Config(format!(
                        "spec '{}': variant {} requires flags {flags:?} and mechanism {mech:?}",
                        self.name, self.variant
                    )));
                }
            }
            None => {
                if self.module_flags.teacher_side().any() && !self.distill.mechanism.needs_teacher()
                {
                    return Err(Error::Config(format!(
                        "spec '{}': teacher-side modules require a distillation mechanism",
                        self.name
                    )));
                }
            }
        }
        if self.regime == Regime::Resampled
            && self.variant.cohort() != ManifestKind::PairedXrayTarget
        {
            return Err(Error::Config(format!(
                "spec '{}': {} is not a paired-cohort variant",
                self.name, self.variant
            )));
        }
        Ok(())
    }

    /// Modality of the frozen teacher, if the spec distills.
    pub fn teacher_modality(&self) -> Option<Modality> {
        if !self.distill.mechanism.needs_teacher() {
            None
        } else if self.variant == Variant::SameModalityKd {
            Some(Modality::Xray)
        } else {
            Some(Modality::Ct)
        }
    }
}

/// Split, resampling and distillation defaults shared by every matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSettings {
    pub seeds: Vec<u64>,
    pub split_seed: u64,
    pub val_fraction: f64,
    pub n_resamples: usize,
    pub n_val_patients: usize,
    pub n_val_negative: usize,
    pub resample_seed: u64,
    /// Training seed of every resampled run.
    pub resample_train_seed: u64,
    pub grid_temperatures: Vec<f64>,
    pub grid_alphas: Vec<f64>,
    pub temperature: f64,
    pub alpha: f64,
    pub mechanism_weight: f64,
}

impl Default for MatrixSettings {
    fn default() -> Self {
        Self {
            seeds: vec![42, 43, 44, 45],
            split_seed: 42,
            val_fraction: 0.2,
            n_resamples: 8,
            n_val_patients: 5,
            n_val_negative: 1,
            resample_seed: 42,
            resample_train_seed: 42,
            grid_temperatures: vec![2.0, 4.0, 6.0],
            grid_alphas: vec![0.3, 0.6, 0.9],
            temperature: DEFAULT_TEMPERATURE,
            alpha: DEFAULT_ALPHA,
            mechanism_weight: DEFAULT_MECHANISM_WEIGHT,
        }
    }
}

impl MatrixSettings {
    fn apply_distill(&self, mut spec: ExperimentSpec) -> ExperimentSpec {
        if spec.distill.mechanism != Mechanism::None {
            spec.distill.temperature = self.temperature;
            spec.distill.alpha = self.alpha;
            spec.distill.mechanism_weight = self.mechanism_weight;
        }
        spec
    }

    pub fn preset(&self, variant: Variant, regime: Regime) -> ExperimentSpec {
        let seeds = match regime {
            Regime::FixedSplit => self.seeds.clone(),
            Regime::Resampled => vec![self.resample_train_seed],
        };
        self.apply_distill(ExperimentSpec::preset(variant, regime, &seeds))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Fixed,
    Resampled,
    Grid,
    ModuleAblation,
    Progressive,
    SamplerControl,
    Single,
}

impl MatrixKind {
    pub fn default_name(self) -> &'static str {
        match self {
            MatrixKind::Fixed => "fixed_matrix",
            MatrixKind::Resampled => "resampled_matrix",
            MatrixKind::Grid => "grid_ablation",
            MatrixKind::ModuleAblation => "module_ablation",
            MatrixKind::Progressive => "progressive",
            MatrixKind::SamplerControl => "sampler_control",
            MatrixKind::Single => "single",
        }
    }
}

/// Outcome of one run as referenced by a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub split_id: String,
    pub seed: u64,
    pub val_image_ids: Vec<String>,
    pub metrics: MetricsReport,
    /// Positive-prediction rate at each threshold of the default sweep grid.
    pub positive_rates: Vec<f64>,
}

impl RunSummary {
    /// Metrics and sweep recomputed from per-image predictions.
    pub fn from_predictions(
        run_id: &str,
        split_id: &str,
        seed: u64,
        result: &RunResult,
    ) -> Result<Self> {
        let (scores, labels) = (result.scores(), result.labels());
        Ok(Self {
            run_id: run_id.to_string(),
            split_id: split_id.to_string(),
            seed,
            val_image_ids: result.rows.iter().map(|r| r.image_id.clone()).collect(),
            metrics: evaluate(&scores, &labels, 0.5)?,
            positive_rates: threshold_sweep(&scores, &labels, &default_grid())?.positive_rates(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecResult {
    pub spec: ExperimentSpec,
    pub role: String,
    pub runs: Vec<RunSummary>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub name: String,
    pub kind: MatrixKind,
    /// Evaluation support shared by the rows, shown above the table.
    pub support: String,
    pub specs: Vec<SpecResult>,
}

impl MatrixResult {
    pub fn spec(&self, name: &str) -> Option<&SpecResult> {
        self.specs.iter().find(|s| s.spec.name == name)
    }

    pub fn by_variant(&self, v: Variant) -> Result<&SpecResult> {
        self.specs
            .iter()
            .find(|s| s.spec.variant == v)
            .ok_or_else(|| Error::MissingSpec(format!("{} in {}", v.as_str(), self.name)))
    }

    pub fn run_count(&self) -> usize {
        self.specs.iter().map(|s| s.runs.len()).sum()
    }

    /// Validation image ids per split, checked to agree across specs.
    pub fn check_same_case(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, (&str, BTreeSet<&str>)> = BTreeMap::new();
        for s in self
            .specs
            .iter()
            .filter(|s| s.spec.variant.cohort() == ManifestKind::PairedXrayTarget)
        {
            for r in &s.runs {
                let ids: BTreeSet<&str> = r.val_image_ids.iter().map(String::as_str).collect();
                match seen.get(r.split_id.as_str()) {
                    Some((first, want)) if *want != ids => {
                        return Err(Error::Audit(format!(
                            "split {}: validation images of '{}' differ from '{first}'",
                            r.split_id, s.spec.name
                        )))
                    }
                    Some(_) => {}
                    None => {
                        seen.insert(&r.split_id, (&s.spec.name, ids));
                    }
                }
            }
        }
        Ok(())
    }

    /// Macro-F1 laid out on the (temperature, alpha) axes of a grid matrix.
    pub fn grid_cells(&self) -> Result<GridCells> {
        if self.kind != MatrixKind::Grid {
            return Err(Error::InvalidInput(format!(
                "{} is not a grid ablation",
                self.name
            )));
        }
        let mut temperatures: Vec<f64> = Vec::new();
        let mut alphas: Vec<f64> = Vec::new();
        for s in &self.specs {
            if !temperatures.contains(&s.spec.distill.temperature) {
                temperatures.push(s.spec.distill.temperature);
            }
            if !alphas.contains(&s.spec.distill.alpha) {
                alphas.push(s.spec.distill.alpha);
            }
        }
        temperatures.sort_by(f64::total_cmp);
        alphas.sort_by(f64::total_cmp);
        let mut macro_f1 = vec![vec![f64::NAN; alphas.len()]; temperatures.len()];
        for s in &self.specs {
            let i = temperatures
                .iter()
                .position(|&t| t == s.spec.distill.temperature)
                .expect("collected");
            let j = alphas
                .iter()
                .position(|&a| a == s.spec.distill.alpha)
                .expect("collected");
            macro_f1[i][j] = s.summary.mean.macro_f1;
        }
        Ok(GridCells {
            temperatures,
            alphas,
            macro_f1,
        })
    }
}

/// Mean macro-F1 per (temperature row, alpha column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCells {
    pub temperatures: Vec<f64>,
    pub alphas: Vec<f64>,
    pub macro_f1: Vec<Vec<f64>>,
}

impl GridCells {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("temperature\\alpha");
        for a in &self.alphas {
            out.push_str(&format!(",{a}"));
        }
        out.push('\n');
        for (t, row) in self.temperatures.iter().zip(&self.macro_f1) {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v:.3}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Effective configuration of one run, persisted as its config snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub matrix: String,
    pub spec: ExperimentSpec,
    pub train: TrainConfig,
    pub cohort: ManifestKind,
    pub split_id: String,
    pub split_digest: String,
    pub data_digest: String,
    pub teacher: Option<TeacherRef>,
}

impl RunConfig {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("serializable config"),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherRef {
    pub id: String,
    pub weights_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct TeacherKey {
    modality: Modality,
    dpe: bool,
    mhra: bool,
    split_digest: String,
    split_id: String,
    seed: u64,
}

impl TeacherKey {
    fn id(&self) -> String {
        format!(
            "{}-dpe{}-mhra{}-{}-{}-s{}",
            self.modality.as_str(),
            self.dpe as u8,
            self.mhra as u8,
            self.split_id,
            &self.split_digest[..12],
            self.seed
        )
    }
}

struct Teacher {
    reference: TeacherRef,
    signals: Vec<TeacherSignal>,
}

struct Job {
    spec: usize,
    split: Arc<SplitSpec>,
    seed: u64,
}

/// Everything needed to run matrices over one set of manifests.
pub struct Harness<'a> {
    manifests: &'a Manifests,
    pub train: TrainConfig,
    pub settings: MatrixSettings,
    store: ImageStore,
    out: Option<PathBuf>,
    jobs: usize,
}

impl<'a> Harness<'a> {
    pub fn new(manifests: &'a Manifests, train: TrainConfig, settings: MatrixSettings) -> Self {
        let store = ImageStore::new(train.input_size);
        Self {
            manifests,
            train,
            settings,
            store,
            out: None,
            jobs: 1,
        }
    }

    /// Persist run directories, summaries and the manifest under `root`.
    pub fn with_output(mut self, root: &Path) -> Self {
        self.out = Some(root.to_path_buf());
        self
    }

    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs.max(1);
        self
    }

    pub fn manifest(&self, kind: ManifestKind) -> &Manifest {
        match kind {
            ManifestKind::AllXray => &self.manifests.all_xray,
            ManifestKind::AllCt => &self.manifests.all_ct,
            ManifestKind::PairedXrayTarget => &self.manifests.paired,
        }
    }

    pub fn fixed_split(&self, kind: ManifestKind) -> Result<SplitSpec> {
        fixed_split(
            self.manifest(kind),
            self.settings.val_fraction,
            self.settings.split_seed,
        )
    }

    pub fn resample_plan(&self) -> Result<ResamplePlan> {
        let s = &self.settings;
        resample_plan(
            &self.manifests.paired,
            s.n_resamples,
            s.n_val_patients,
            s.n_val_negative,
            s.resample_seed,
        )
    }

    /// Six-spec fixed-split matrix over the configured seeds.
    pub fn run_fixed_matrix(&self) -> Result<MatrixResult> {
        let specs = Variant::FIXED_MATRIX
            .iter()
            .map(|&v| self.settings.preset(v, Regime::FixedSplit))
            .collect();
        self.run_fixed_specs(MatrixKind::Fixed, specs)
    }

    /// Seven-spec matrix over every resample of the plan, same-case checked.
    pub fn run_resampled_matrix(&self) -> Result<MatrixResult> {
        let plan = self.resample_plan()?;
        let specs: Vec<ExperimentSpec> = Variant::RESAMPLED_MATRIX
            .iter()
            .map(|&v| self.settings.preset(v, Regime::Resampled))
            .collect();
        self.run_resampled_specs(specs, &plan)
    }

    pub fn run_resampled_specs(
        &self,
        specs: Vec<ExperimentSpec>,
        plan: &ResamplePlan,
    ) -> Result<MatrixResult> {
        if let Some(root) = &self.out {
            let dir = root.join("splits");
            std::fs::create_dir_all(&dir)
                .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
            plan.write(&dir.join("resample_plan.json"))?;
        }
        let splits: Vec<Arc<SplitSpec>> = plan.splits.iter().cloned().map(Arc::new).collect();
        let sizes: Vec<usize> = plan.splits.iter().map(|s| s.val_indices.len()).collect();
        let support = format!(
            "Common support for all rows: {} same-case resamples; each split has {} validation patients ({} negative) and {}-{} images (mean {:.1}).",
            plan.splits.len(),
            plan.n_val_patients,
            plan.n_val_negative,
            sizes.iter().min().copied().unwrap_or(0),
            sizes.iter().max().copied().unwrap_or(0),
            sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64,
        );
        let mut jobs = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            for split in &splits {
                for &seed in &spec.seeds {
                    jobs.push(Job {
                        spec: i,
                        split: split.clone(),
                        seed,
                    });
                }
            }
        }
        let result = self.run_jobs(
            MatrixKind::Resampled.default_name(),
            MatrixKind::Resampled,
            support,
            specs,
            jobs,
        )?;
        result.check_same_case()?;
        Ok(result)
    }

    /// 3×3 temperature × alpha grid of the full module stack, single seed.
    pub fn run_grid_ablation(&self, seed: u64) -> Result<MatrixResult> {
        let mut specs = Vec::new();
        for &t in &self.settings.grid_temperatures {
            for &a in &self.settings.grid_alphas {
                let mut s =
                    ExperimentSpec::preset(Variant::FullJdcnet, Regime::FixedSplit, &[seed]);
                s.name = format!("full_jdcnet_t{t}_a{a}");
                s.distill.temperature = t;
                s.distill.alpha = a;
                s.distill.mechanism_weight = self.settings.mechanism_weight;
                specs.push(s);
            }
        }
        self.run_fixed_specs(MatrixKind::Grid, specs)
    }

    /// Full stack plus the three leave-one-out variants.
    pub fn run_module_ablation(&self) -> Result<MatrixResult> {
        let seeds = &self.settings.seeds;
        let f = Regime::FixedSplit;
        let mut specs = vec![self.settings.preset(Variant::FullJdcnet, f)];
        for (name, flags) in [
            (
                "without_dpe",
                ModuleFlags {
                    dpe: false,
                    ..ModuleFlags::ALL
                },
            ),
            (
                "without_mhra",
                ModuleFlags {
                    mhra: false,
                    ..ModuleFlags::ALL
                },
            ),
            (
                "without_dfpn",
                ModuleFlags {
                    dfpn: false,
                    ..ModuleFlags::ALL
                },
            ),
        ] {
            specs.push(
                self.settings
                    .apply_distill(ExperimentSpec::custom(name, flags, f, seeds)),
            );
        }
        self.run_fixed_specs(MatrixKind::ModuleAblation, specs)
    }

    /// Plain logit KD with modules added one at a time.
    pub fn run_progressive(&self) -> Result<MatrixResult> {
        let seeds = &self.settings.seeds;
        let f = Regime::FixedSplit;
        let flags = |dpe, mhra, dfpn| ModuleFlags { dpe, mhra, dfpn };
        let specs = vec![
            self.settings.preset(Variant::PlainCrossModalKd, f),
            self.settings.apply_distill(ExperimentSpec::custom(
                "plus_dpe",
                flags(true, false, false),
                f,
                seeds,
            )),
            self.settings.apply_distill(ExperimentSpec::custom(
                "plus_dpe_dfpn",
                flags(true, false, true),
                f,
                seeds,
            )),
            self.settings.apply_distill(ExperimentSpec::custom(
                "plus_dpe_mhra",
                flags(true, true, false),
                f,
                seeds,
            )),
            self.settings.preset(Variant::FullJdcnet, f),
        ];
        self.run_fixed_specs(MatrixKind::Progressive, specs)
    }

    /// Three models under both sampler modes.
    pub fn run_sampler_control(&self) -> Result<MatrixResult> {
        let mut specs = Vec::new();
        for v in [
            Variant::StudentOnly,
            Variant::PlainCrossModalKd,
            Variant::FullJdcnet,
        ] {
            for mode in [SamplerMode::Shuffled, SamplerMode::ClassBalanced] {
                let mut s = self.settings.preset(v, Regime::FixedSplit);
                s.sampler = mode;
                s.name = format!("{}_{}", v.as_str(), sampler_name(mode));
                specs.push(s);
            }
        }
        self.run_fixed_specs(MatrixKind::SamplerControl, specs)
    }

    /// One spec on its fixed split, for every seed of the spec.
    pub fn run_single(&self, spec: ExperimentSpec) -> Result<MatrixResult> {
        self.run_fixed_specs(MatrixKind::Single, vec![spec])
    }

    pub fn run_fixed_specs(
        &self,
        kind: MatrixKind,
        specs: Vec<ExperimentSpec>,
    ) -> Result<MatrixResult> {
        let mut splits: HashMap<ManifestKind, Arc<SplitSpec>> = HashMap::new();
        let mut jobs = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            if spec.regime != Regime::FixedSplit {
                return Err(Error::Config(format!(
                    "spec '{}' is not a fixed-split spec",
                    spec.name
                )));
            }
            let cohort = spec.variant.cohort();
            let split = match splits.get(&cohort) {
                Some(s) => s.clone(),
                None => {
                    let s = Arc::new(
                        self.fixed_split(cohort)
                            .map_err(|e| e.in_spec(&spec.name))?,
                    );
                    if let Some(root) = &self.out {
                        let dir = root.join("splits");
                        std::fs::create_dir_all(&dir)
                            .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
                        s.write(&dir.join(format!("{}_{}.json", cohort.file_stem(), s.id)))?;
                    }
                    splits.insert(cohort, s.clone());
                    s
                }
            };
            for &seed in &spec.seeds {
                jobs.push(Job {
                    spec: i,
                    split: split.clone(),
                    seed,
                });
            }
        }
        let mut support = Vec::new();
        for kind in [
            ManifestKind::PairedXrayTarget,
            ManifestKind::AllXray,
            ManifestKind::AllCt,
        ] {
            if let Some(s) = splits.get(&kind) {
                support.push(self.describe_split(kind, s));
            }
        }
        self.run_jobs(kind.default_name(), kind, support.join(" "), specs, jobs)
    }

    fn describe_split(&self, kind: ManifestKind, split: &SplitSpec) -> String {
        let m = self.manifest(kind);
        let pos = split
            .val_indices
            .iter()
            .filter(|&&i| m.records[i].label.is_positive())
            .count();
        let what = match kind {
            ManifestKind::PairedXrayTarget => "Paired fixed split shared by all paired rows",
            ManifestKind::AllXray => "All-X-ray reference split",
            ManifestKind::AllCt => "All-CT reference split",
        };
        format!(
            "{what}: {} validation patients / {} images ({pos} positive, {} negative).",
            split.val_patients.len(),
            split.val_indices.len(),
            split.val_indices.len() - pos
        )
    }

    fn run_jobs(
        &self,
        name: &str,
        kind: MatrixKind,
        support: String,
        specs: Vec<ExperimentSpec>,
        jobs: Vec<Job>,
    ) -> Result<MatrixResult> {
        for s in &specs {
            s.validate()?;
        }
        let mut names = BTreeSet::new();
        if let Some(dup) = specs.iter().find(|s| !names.insert(&s.name)) {
            return Err(Error::Config(format!("duplicate spec name '{}'", dup.name)));
        }
        let data_digests: HashMap<ManifestKind, String> = [
            ManifestKind::AllXray,
            ManifestKind::AllCt,
            ManifestKind::PairedXrayTarget,
        ]
        .into_iter()
        .map(|k| {
            (
                k,
                hex::encode(Sha256::digest(render_manifest(self.manifest(k)).as_bytes())),
            )
        })
        .collect();

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

        let mut keys: BTreeMap<TeacherKey, Arc<SplitSpec>> = BTreeMap::new();
        for j in &jobs {
            if let Some(k) = self.teacher_key(&specs[j.spec], j) {
                keys.entry(k).or_insert_with(|| j.split.clone());
            }
        }
        let keys: Vec<(TeacherKey, Arc<SplitSpec>)> = keys.into_iter().collect();
        let trained: Vec<Teacher> = pool.install(|| {
            keys.par_iter()
                .map(|(k, split)| self.build_teacher(k, split))
                .collect::<Result<Vec<_>>>()
        })?;
        let keys = keys.into_iter().map(|(k, _)| k);
        let teachers: HashMap<TeacherKey, Teacher> = keys.into_iter().zip(trained).collect();

        let completed: Vec<(RunSummary, Option<RunManifestEntry>)> = pool.install(|| {
            jobs.par_iter()
                .map(|j| {
                    let spec = &specs[j.spec];
                    self.execute(name, spec, j, &teachers, &data_digests)
                        .map_err(|e| e.in_spec(&spec.name))
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut per_spec: Vec<Vec<RunSummary>> = vec![Vec::new(); specs.len()];
        let mut entries = Vec::new();
        for (j, (summary, entry)) in jobs.iter().zip(completed) {
            per_spec[j.spec].push(summary);
            entries.extend(entry);
        }
        let specs = specs
            .into_iter()
            .zip(per_spec)
            .map(|(spec, runs)| {
                let reports: Vec<MetricsReport> = runs.iter().map(|r| r.metrics).collect();
                Ok(SpecResult {
                    role: spec.variant.role().to_string(),
                    summary: summarize(&reports).map_err(|e| e.in_spec(&spec.name))?,
                    spec,
                    runs,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let result = MatrixResult {
            name: name.to_string(),
            kind,
            support,
            specs,
        };
        if let Some(root) = &self.out {
            reporting::persist_matrix(root, &result, &entries)?;
        }
        Ok(result)
    }

    fn teacher_key(&self, spec: &ExperimentSpec, job: &Job) -> Option<TeacherKey> {
        let flags = spec.module_flags.teacher_side();
        spec.teacher_modality().map(|modality| TeacherKey {
            modality,
            dpe: flags.dpe,
            mhra: flags.mhra,
            split_digest: job.split.digest(),
            split_id: job.split.id.clone(),
            seed: job.seed,
        })
    }

    fn run_config(&self, seed: u64, sampler: SamplerMode) -> TrainConfig {
        TrainConfig {
            seed,
            sampler,
            ..self.train.clone()
        }
    }

    /// Trains a teacher on every record of its modality outside the split's
    /// validation patients, then scores the paired student training set.
    fn build_teacher(&self, key: &TeacherKey, split: &SplitSpec) -> Result<Teacher> {
        let source = match key.modality {
            Modality::Xray => &self.manifests.all_xray,
            Modality::Ct => &self.manifests.all_ct,
        };
        let train_idx: Vec<usize> = (0..source.len())
            .filter(|&i| !split.val_patients.contains(&source.records[i].patient_id))
            .collect();
        let data = Dataset::from_manifest(source, &train_idx, &self.store)?;
        let config = self.run_config(key.seed, SamplerMode::Shuffled);
        let flags = ModuleFlags {
            dpe: key.dpe,
            mhra: key.mhra,
            dfpn: false,
        };
        let mut trained = train_teacher(&data, &config, flags)?;
        let paired = &self.manifests.paired;
        let inputs = match key.modality {
            Modality::Ct => Dataset::paired_ct(paired, &split.train_indices, &self.store)?,
            Modality::Xray => Dataset::from_manifest(paired, &split.train_indices, &self.store)?,
        };
        let before = trained.model.digest();
        let signals = teacher_signals(&mut trained.model, &inputs, config.batch_size)?;
        let id = key.id();
        if let Some(root) = &self.out {
            reporting::write_teacher(root, &id, &trained.model, &trained.losses)?;
        }
        debug_assert_eq!(before, trained.model.digest());
        Ok(Teacher {
            reference: TeacherRef {
                id,
                weights_digest: before,
            },
            signals,
        })
    }

    fn execute(
        &self,
        matrix: &str,
        spec: &ExperimentSpec,
        job: &Job,
        teachers: &HashMap<TeacherKey, Teacher>,
        data_digests: &HashMap<ManifestKind, String>,
    ) -> Result<(RunSummary, Option<RunManifestEntry>)> {
        let clock = Stopwatch::start();
        let split = job.split.as_ref();
        let cohort = spec.variant.cohort();
        let manifest = self.manifest(cohort);
        let run_id = format!("{matrix}__{}__{}__s{}", spec.name, split.id, job.seed);
        let config = self.run_config(job.seed, spec.sampler);
        let teacher = self.teacher_key(spec, job).map(|k| &teachers[&k]);
        let run_config = RunConfig {
            run_id: run_id.clone(),
            matrix: matrix.to_string(),
            spec: spec.clone(),
            train: config.clone(),
            cohort,
            split_id: split.id.clone(),
            split_digest: split.digest(),
            data_digest: data_digests[&cohort].clone(),
            teacher: teacher.map(|t| t.reference.clone()),
        };
        let train = Dataset::from_manifest(manifest, &split.train_indices, &self.store)?;
        let val = Dataset::from_manifest(manifest, &split.val_indices, &self.store)?;

        let (scores, losses, weights): (Vec<f64>, LossTrajectory, WeightsSource) =
            match spec.variant {
                Variant::TeacherOnlyXray | Variant::TeacherOnlyCt => {
                    let mut t = train_teacher(&train, &config, ModuleFlags::NONE)?;
                    let s = predict_scores(&mut t.model, &val, config.batch_size)?;
                    (
                        s,
                        t.losses,
                        WeightsSource::Classifier(Box::new(t.model), None),
                    )
                }
                Variant::LateFusion => {
                    let train_ct = Dataset::paired_ct(manifest, &split.train_indices, &self.store)?;
                    let val_ct = Dataset::paired_ct(manifest, &split.val_indices, &self.store)?;
                    let mut f = train_late_fusion(&train, &train_ct, &config)?;
                    let s = predict_fusion_scores(&mut f.model, &val, &val_ct, config.batch_size)?;
                    (s, f.losses, WeightsSource::Fusion(f.model))
                }
                _ => {
                    let signals = teacher.map(|t| t.signals.as_slice());
                    let mut s = train_student(
                        &train,
                        &config,
                        &spec.distill,
                        spec.module_flags.student_side(),
                        signals,
                    )?;
                    let scores = predict_scores(&mut s.model, &val, config.batch_size)?;
                    (
                        scores,
                        s.losses,
                        WeightsSource::Classifier(Box::new(s.model), s.adapter),
                    )
                }
            };
        let mut result = RunResult::new(
            &run_id,
            &run_config.digest(),
            job.seed,
            &split.id,
            &val,
            &scores,
        )?;
        result.wall_time_s = clock.seconds();
        let summary = RunSummary::from_predictions(&run_id, &split.id, job.seed, &result)?;
        let entry = match &self.out {
            Some(root) => Some(reporting::write_run(
                root,
                &run_config,
                &result,
                &losses,
                &weights,
            )?),
            None => None,
        };
        log::info!(
            "{run_id}: accuracy {:.3} balanced accuracy {:.3} ({:.1}s)",
            summary.metrics.accuracy,
            summary.metrics.balanced_accuracy,
            result.wall_time_s
        );
        Ok((summary, entry))
    }
}

pub fn sampler_name(mode: SamplerMode) -> &'static str {
    match mode {
        SamplerMode::Shuffled => "shuffled",
        SamplerMode::ClassBalanced => "class_balanced",
    }
}

/// Change from the shuffled to the class-balanced sampler for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerDelta {
    pub model: Variant,
    pub shuffled: MetricsReport,
    pub balanced: MetricsReport,
}

impl SamplerDelta {
    pub fn balanced_accuracy_delta(&self) -> f64 {
        self.balanced.balanced_accuracy - self.shuffled.balanced_accuracy
    }

    pub fn specificity_delta(&self) -> f64 {
        self.balanced.specificity - self.shuffled.specificity
    }

    pub fn positive_rate_delta(&self) -> f64 {
        self.balanced.positive_rate - self.shuffled.positive_rate
    }
}

pub fn sampler_deltas(result: &MatrixResult) -> Result<Vec<SamplerDelta>> {
    let mut models: Vec<Variant> = Vec::new();
    for s in &result.specs {
        if !models.contains(&s.spec.variant) {
            models.push(s.spec.variant);
        }
    }
    models
        .into_iter()
        .map(|v| {
            let find = |mode| {
                result
                    .specs
                    .iter()
                    .find(|s| s.spec.variant == v && s.spec.sampler == mode)
                    .map(|s| s.summary.mean)
                    .ok_or_else(|| {
                        Error::MissingSpec(format!("{}_{}", v.as_str(), sampler_name(mode)))
                    })
            };
            Ok(SamplerDelta {
                model: v,
                shuffled: find(SamplerMode::Shuffled)?,
                balanced: find(SamplerMode::ClassBalanced)?,
            })
        })
        .collect()
}

pub fn sampler_deltas_csv(deltas: &[SamplerDelta]) -> String {
    let mut out = String::from(
        "model,shuffled_balanced_accuracy,balanced_balanced_accuracy,delta_balanced_accuracy,shuffled_specificity,balanced_specificity,delta_specificity,shuffled_positive_rate,balanced_positive_rate,delta_positive_rate\n",
    );
    for d in deltas {
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
            d.model,
            d.shuffled.balanced_accuracy,
            d.balanced.balanced_accuracy,
            d.balanced_accuracy_delta(),
            d.shuffled.specificity,
            d.balanced.specificity,
            d.specificity_delta(),
            d.shuffled.positive_rate,
            d.balanced.positive_rate,
            d.positive_rate_delta()
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisState {
    TentativeFixedSplitOnly,
    NotSupported,
    Supported,
}

/// One numeric comparison used by a decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub description: String,
    pub left: f64,
    pub right: f64,
    pub holds: bool,
}

impl Comparison {
    fn greater(description: String, left: f64, right: f64) -> Self {
        Self {
            description,
            left,
            right,
            holds: left > right,
        }
    }

    fn at_least(description: String, left: f64, right: f64) -> Self {
        Self {
            description,
            left,
            right,
            holds: left >= right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisStatus {
    pub id: String,
    pub question: String,
    pub status: HypothesisState,
    pub evidence: Vec<Comparison>,
}

/// Means the decision rules read, extracted from completed matrices or
/// supplied directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub fixed: BTreeMap<Variant, MetricsReport>,
    pub resampled: BTreeMap<Variant, MetricsReport>,
    /// Plain-KD mean balanced accuracy under (shuffled, class-balanced) sampling.
    pub plain_sampler_balanced_accuracy: Option<(f64, f64)>,
    /// (threshold, mean positive rate) of the plain-KD fixed-split runs.
    pub plain_sweep: Vec<(f64, f64)>,
}

impl Evidence {
    pub fn from_matrices(
        fixed: &MatrixResult,
        resampled: &MatrixResult,
        sampler: Option<&MatrixResult>,
    ) -> Result<Self> {
        let means =
            |m: &MatrixResult, vs: &[Variant]| -> Result<BTreeMap<Variant, MetricsReport>> {
                vs.iter()
                    .map(|&v| Ok((v, m.by_variant(v)?.summary.mean)))
                    .collect()
            };
        let plain = fixed.by_variant(Variant::PlainCrossModalKd)?;
        let grid = default_grid();
        let plain_sweep = grid
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let rates: Vec<f64> = plain
                    .runs
                    .iter()
                    .filter_map(|r| r.positive_rates.get(k).copied())
                    .collect();
                (t, rates.iter().sum::<f64>() / rates.len().max(1) as f64)
            })
            .collect();
        let plain_sampler_balanced_accuracy = match sampler {
            Some(s) => {
                let d = sampler_deltas(s)?;
                let p = d
                    .iter()
                    .find(|d| d.model == Variant::PlainCrossModalKd)
                    .ok_or_else(|| {
                        Error::MissingSpec("plain_cross_modal_kd in sampler control".into())
                    })?;
                Some((p.shuffled.balanced_accuracy, p.balanced.balanced_accuracy))
            }
            None => None,
        };
        Ok(Self {
            fixed: means(
                fixed,
                &[
                    Variant::StudentOnly,
                    Variant::PlainCrossModalKd,
                    Variant::FullJdcnet,
                ],
            )?,
            resampled: means(resampled, &Variant::RESAMPLED_MATRIX)?,
            plain_sampler_balanced_accuracy,
            plain_sweep,
        })
    }

    fn get(&self, resampled: bool, v: Variant) -> Result<&MetricsReport> {
        let (map, which) = if resampled {
            (&self.resampled, "resampled")
        } else {
            (&self.fixed, "fixed")
        };
        map.get(&v)
            .ok_or_else(|| Error::MissingSpec(format!("{} in {which} evidence", v.as_str())))
    }
}

pub const SWEEP_COLLAPSE_WINDOW: (f64, f64) = (0.45, 0.65);

/// Applies the five decision rules. Every comparison is on means and a tie
/// never counts as support.
pub fn evaluate_hypotheses(ev: &Evidence) -> Result<Vec<HypothesisStatus>> {
    use HypothesisState::*;
    use Variant::*;
    let fx = |v| ev.get(false, v);
    let rs = |v| ev.get(true, v);
    let mut out = Vec::new();

    let h1_fixed = Comparison::greater(
        "fixed accuracy: plain KD > student-only".into(),
        fx(PlainCrossModalKd)?.accuracy,
        fx(StudentOnly)?.accuracy,
    );
    let h1_res = Comparison::greater(
        "resampled balanced accuracy: plain KD > student-only".into(),
        rs(PlainCrossModalKd)?.balanced_accuracy,
        rs(StudentOnly)?.balanced_accuracy,
    );
    let status = match (h1_fixed.holds, h1_res.holds) {
        (_, true) => Supported,
        (true, false) => TentativeFixedSplitOnly,
        (false, false) => NotSupported,
    };
    out.push(HypothesisStatus {
        id: "H1".into(),
        question: "Plain cross-modal logit KD beats student-only X-ray training".into(),
        status,
        evidence: vec![h1_fixed, h1_res],
    });

    let h2 = vec![
        Comparison::at_least(
            "resampled macro-F1: same-modality KD >= plain KD".into(),
            rs(SameModalityKd)?.macro_f1,
            rs(PlainCrossModalKd)?.macro_f1,
        ),
        Comparison::at_least(
            "resampled balanced accuracy: same-modality KD >= plain KD".into(),
            rs(SameModalityKd)?.balanced_accuracy,
            rs(PlainCrossModalKd)?.balanced_accuracy,
        ),
    ];
    out.push(HypothesisStatus {
        id: "H2".into(),
        question: "Any gain is not reducible to same-modality KD".into(),
        status: if h2.iter().all(|c| c.holds) {
            NotSupported
        } else {
            Supported
        },
        evidence: h2,
    });

    let fusion = rs(LateFusion)?.accuracy;
    let best_other = ev
        .resampled
        .iter()
        .filter(|(v, _)| **v != LateFusion)
        .map(|(_, r)| r.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let h3 = Comparison::at_least(
        "resampled accuracy: late fusion >= best other spec".into(),
        fusion,
        best_other,
    );
    out.push(HypothesisStatus {
        id: "H3".into(),
        question: "Any gain is not reducible to late fusion".into(),
        status: if h3.holds { NotSupported } else { Supported },
        evidence: vec![h3],
    });

    let h4_fixed = Comparison::greater(
        "fixed accuracy: full stack > plain KD".into(),
        fx(FullJdcnet)?.accuracy,
        fx(PlainCrossModalKd)?.accuracy,
    );
    let h4_f1 = Comparison::greater(
        "resampled macro-F1: full stack > plain KD".into(),
        rs(FullJdcnet)?.macro_f1,
        rs(PlainCrossModalKd)?.macro_f1,
    );
    let h4_ba = Comparison::greater(
        "resampled balanced accuracy: full stack > plain KD".into(),
        rs(FullJdcnet)?.balanced_accuracy,
        rs(PlainCrossModalKd)?.balanced_accuracy,
    );
    let resampled_advantage = h4_f1.holds && h4_ba.holds;
    let status = match (h4_fixed.holds, resampled_advantage) {
        (_, true) => Supported,
        (true, false) => TentativeFixedSplitOnly,
        (false, false) => NotSupported,
    };
    out.push(HypothesisStatus {
        id: "H4".into(),
        question: "DPE/MHRA/DFPN improve over the plain control".into(),
        status,
        evidence: vec![h4_fixed, h4_f1, h4_ba],
    });

    let mut h5 = Vec::new();
    if let Some((shuffled, balanced)) = ev.plain_sampler_balanced_accuracy {
        h5.push(Comparison::greater(
            "plain KD balanced accuracy: shuffled > class-balanced sampler".into(),
            shuffled,
            balanced,
        ));
    }
    let (lo, hi) = SWEEP_COLLAPSE_WINDOW;
    let in_window: Vec<&(f64, f64)> = ev
        .plain_sweep
        .iter()
        .filter(|(t, _)| *t >= lo - 1e-12 && *t <= hi + 1e-12)
        .collect();
    if let (Some(first), Some(last)) = (in_window.first(), in_window.last()) {
        let collapse = first.1 >= 1.0 && last.1 <= 0.0;
        h5.push(Comparison {
            description: format!(
                "plain KD mean positive rate falls from all-positive at {} to all-negative at {}",
                first.0, last.0
            ),
            left: first.1,
            right: last.1,
            holds: collapse,
        });
    }
    out.push(HypothesisStatus {
        id: "H5".into(),
        question: "Any gain survives imbalance and threshold checks".into(),
        status: if h5.iter().any(|c| c.holds) {
            NotSupported
        } else {
            Supported
        },
        evidence: h5,
    });
    Ok(out)
}

pub fn hypothesis_status(
    fixed: &MatrixResult,
    resampled: &MatrixResult,
    sampler: Option<&MatrixResult>,
) -> Result<Vec<HypothesisStatus>> {
    evaluate_hypotheses(&Evidence::from_matrices(fixed, resampled, sampler)?)
}
