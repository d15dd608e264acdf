//! Experiment specs and the commands built on them: dataset generation,
//! training, evaluation, the alpha/beta grid search, the CSL/SSL ablation,
//! the labeled-fraction study and the cross-title report.
//!
//! Every training run is a cell keyed by a hash of everything that
//! determines its outcome. A finished cell is a directory holding
//! `result.json`; reruns skip it, so interrupted sweeps resume where they
//! stopped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{generate_title, read_dataset, read_manifest, write_dataset, DatagenError, GenConfig, Split, TitleStyle};
use crate::eval::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::fsutil;
use crate::model::{CftModel, ModelError, TargetEncoder};
use crate::stats::{significance_lines, MetricTable, StatsError};
use crate::trainer::{pretrain_target, save_outcome, train, PreparedTitle, PretrainConfig, TrainConfig, TrainData, TrainError};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "POPCFT_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("no report for title {title}, condition {condition} (expected {path})")]
    MissingReport { title: String, condition: String, path: String },
    #[error("run stopped after {completed} new cells")]
    Interrupted { completed: usize },
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl ExperimentError {
    /// 1 for usage and spec errors, 3 for numeric divergence, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Spec(_) | ExperimentError::Toml(_) => 1,
            ExperimentError::Train(TrainError::Config(_)) => 1,
            ExperimentError::Train(TrainError::Divergence { .. }) => 3,
            _ => 2,
        }
    }
}

/// Generated benchmark: every title shares the generator config, the split
/// sizes and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub gen: GenConfig,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_unlabeled: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            n_train: 300,
            n_validation: 50,
            n_test: 50,
            n_unlabeled: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        let values: Vec<f64> = (0..=6).map(|i| i as f64 / 10.0).collect();
        Self {
            alpha: values.clone(),
            beta: values,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub csl: bool,
    pub ssl: bool,
}

impl AblationCell {
    pub fn label(self) -> &'static str {
        match (self.csl, self.ssl) {
            (true, true) => "csl+ssl",
            (true, false) => "csl",
            (false, true) => "ssl",
            (false, false) => "supervised",
        }
    }

    /// The four rows of the CSL/SSL matrix.
    pub fn matrix() -> Vec<AblationCell> {
        [(true, true), (false, true), (true, false), (false, false)]
            .into_iter()
            .map(|(csl, ssl)| AblationCell { csl, ssl })
            .collect()
    }
}

/// Target encoder: pretrained on the unlabeled pool, or frozen at random
/// initialisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetSpec {
    pub pretrain: bool,
    pub config: PretrainConfig,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            pretrain: true,
            config: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSpec {
    /// Titles forming the rows; every one needs a summary per condition.
    pub titles: Vec<String>,
    pub conditions: Vec<String>,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self {
            titles: TitleStyle::PRESETS.iter().map(|s| s.to_string()).collect(),
            conditions: vec!["csl+ssl".into(), "supervised".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub downstream_title: String,
    pub co_titles: Vec<String>,
    pub data: DataSpec,
    pub train_config: TrainConfig,
    pub eval_config: EvalConfig,
    pub target: TargetSpec,
    pub grid: Option<GridSpec>,
    pub ablation: Option<Vec<AblationCell>>,
    pub data_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub report: ReportSpec,
    /// Keep the best checkpoint of every cell.
    pub keep_checkpoints: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            downstream_title: "parkland".into(),
            co_titles: vec!["tower".into(), "canyon".into()],
            data: DataSpec::default(),
            train_config: TrainConfig::default(),
            eval_config: EvalConfig::default(),
            target: TargetSpec::default(),
            grid: None,
            ablation: None,
            data_fractions: vec![1.0],
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            report: ReportSpec::default(),
            keep_checkpoints: true,
        }
    }
}

impl ExperimentSpec {
    /// Parses a TOML spec and applies the output-directory environment
    /// override.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        let mut spec: Self = toml::from_str(&text)?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            spec.output_dir = PathBuf::from(dir);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Spec(m));
        for t in std::iter::once(&self.downstream_title).chain(&self.co_titles) {
            if TitleStyle::preset(t).is_none() {
                return bad(format!("unknown title {t:?}; known titles are {:?}", TitleStyle::PRESETS));
            }
        }
        if self.co_titles.contains(&self.downstream_title) {
            return bad(format!("downstream title {} is also a co-title", self.downstream_title));
        }
        let mut seen = self.co_titles.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.co_titles.len() {
            return bad("co_titles contains duplicates".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if let Some(g) = &self.grid {
            if g.alpha.is_empty() || g.beta.is_empty() {
                return bad("grid needs at least one alpha and one beta".into());
            }
            if g.alpha.iter().chain(&g.beta).any(|v| !(0.0..=1.0).contains(v)) {
                return bad("grid values must lie in [0, 1]".into());
            }
        }
        if self.ablation.as_ref().is_some_and(Vec::is_empty) {
            return bad("ablation list is empty".into());
        }
        if self.data_fractions.is_empty() || self.data_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("data_fractions must be nonempty and lie in (0, 1]".into());
        }
        let v = &self.train_config.model.student;
        if (self.data.gen.width, self.data.gen.height) != (v.input_width, v.input_height) {
            return bad(format!(
                "generated images are {}x{} but the model expects {}x{}",
                self.data.gen.width, self.data.gen.height, v.input_width, v.input_height
            ));
        }
        self.data.gen.validate()?;
        self.eval_config.validate()?;
        self.train_config.validate()?;
        Ok(())
    }

    /// Training config with the spec's evaluation settings.
    pub fn base_config(&self) -> TrainConfig {
        TrainConfig {
            eval: self.eval_config.clone(),
            ..self.train_config.clone()
        }
    }

    pub fn titles(&self) -> Vec<String> {
        std::iter::once(self.downstream_title.clone()).chain(self.co_titles.iter().cloned()).collect()
    }

    pub fn data_dir(&self, title: &str) -> PathBuf {
        self.output_dir.join("data").join(title)
    }

    pub fn cells_dir(&self) -> PathBuf {
        self.output_dir.join("cells")
    }

    pub fn summary_path(&self, title: &str, condition: &str) -> PathBuf {
        self.output_dir.join("summaries").join(title).join(format!("{condition}.json"))
    }
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    pub downstream_title: String,
    pub alpha: f64,
    pub beta: f64,
    pub csl: bool,
    pub ssl: bool,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub best_epoch: usize,
    pub validation_map: f64,
    pub test: EvalReport,
    pub target_checksum_before: Option<String>,
    pub target_checksum_after: Option<String>,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: f64,
    pub beta: f64,
    /// Validation mAP averaged over seeds.
    pub validation_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub alpha_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    pub cells: Vec<GridCell>,
    pub best: GridCell,
}

impl GridTable {
    pub fn get(&self, alpha: f64, beta: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.alpha == alpha && c.beta == beta)
    }

    /// Rows are alpha, columns beta.
    pub fn render(&self) -> String {
        let mut out = String::from("validation mAP@0.5 (rows: alpha, columns: beta)\n");
        let _ = write!(out, "{:>7}", "a\\b");
        for b in &self.beta_values {
            let _ = write!(out, " {b:>7.2}");
        }
        out.push('\n');
        for a in &self.alpha_values {
            let _ = write!(out, "{a:>7.2}");
            for b in &self.beta_values {
                let v = self.get(*a, *b).map_or(f64::NAN, |c| c.validation_map);
                let _ = write!(out, " {v:>7.4}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "best: alpha = {:.2}, beta = {:.2}, validation mAP = {:.4}",
            self.best.alpha, self.best.beta, self.best.validation_map
        );
        out
    }
}

/// Highest validation mAP; ties go to lower beta, then lower alpha.
pub fn select_best(cells: &[GridCell]) -> Option<GridCell> {
    cells
        .iter()
        .min_by(|x, y| {
            y.validation_map
                .total_cmp(&x.validation_map)
                .then(x.beta.total_cmp(&y.beta))
                .then(x.alpha.total_cmp(&y.alpha))
        })
        .cloned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub test_map: f64,
    pub test_f1: f64,
    pub validation_map: f64,
}

/// Seed-level scores of one condition and their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub title: String,
    pub condition: String,
    pub per_seed: Vec<SeedScore>,
    pub mean_map: f64,
    pub mean_f1: f64,
}

impl ConditionSummary {
    fn new(title: &str, condition: &str, results: &[CellResult]) -> Self {
        let per_seed: Vec<SeedScore> = results
            .iter()
            .map(|r| SeedScore {
                seed: r.seed,
                test_map: r.test.map,
                test_f1: r.test.f1,
                validation_map: r.validation_map,
            })
            .collect();
        let n = per_seed.len() as f64;
        Self {
            title: title.into(),
            condition: condition.into(),
            mean_map: per_seed.iter().map(|s| s.test_map).sum::<f64>() / n,
            mean_f1: per_seed.iter().map(|s| s.test_f1).sum::<f64>() / n,
            per_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub csl: bool,
    pub ssl: bool,
    pub summary: ConditionSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub downstream_title: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, csl: bool, ssl: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.csl == csl && r.ssl == ssl)
    }

    pub fn render(&self) -> String {
        let mut out = format!("CSL/SSL ablation, downstream title {}\n", self.downstream_title);
        let _ = writeln!(out, "{:<6} {:<6} {:>9} {:>9}  per-seed test mAP", "SSL", "CSL", "mAP", "F1");
        for r in &self.rows {
            let seeds: Vec<String> = r.summary.per_seed.iter().map(|s| format!("{}:{:.4}", s.seed, s.test_map)).collect();
            let _ = writeln!(
                out,
                "{:<6} {:<6} {:>9.4} {:>9.4}  {}",
                r.ssl,
                r.csl,
                r.summary.mean_map,
                r.summary.mean_f1,
                seeds.join(" ")
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    pub summary: ConditionSummary,
    /// Mean mAP relative to the full-data row, when present.
    pub retention: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionTable {
    pub downstream_title: String,
    pub rows: Vec<FractionRow>,
}

impl FractionTable {
    pub fn render(&self) -> String {
        let mut out = format!("labeled-fraction study, downstream title {}\n", self.downstream_title);
        let _ = writeln!(out, "{:<9} {:>9} {:>9} {:>10}  per-seed test mAP", "fraction", "mAP", "F1", "retention");
        for r in &self.rows {
            let seeds: Vec<String> = r.summary.per_seed.iter().map(|s| format!("{}:{:.4}", s.seed, s.test_map)).collect();
            let ret = r.retention.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:<9.2} {:>9.4} {:>9.4} {:>10}  {}",
                r.fraction,
                r.summary.mean_map,
                r.summary.mean_f1,
                ret,
                seeds.join(" ")
            );
        }
        out
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fsutil::write_atomic(path, text)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    fsutil::write_atomic(path, text)?;
    Ok(())
}

/// Runs the commands of one spec, caching loaded data and the target
/// encoder between cells.
pub struct Experiment {
    pub spec: ExperimentSpec,
    pub quiet: bool,
    titles: BTreeMap<String, PreparedTitle>,
    target: Option<(String, TargetEncoder)>,
    new_cells: usize,
    cell_budget: Option<usize>,
    touched: Vec<CellResult>,
}

impl Experiment {
    pub fn new(spec: ExperimentSpec) -> Result<Self, ExperimentError> {
        spec.validate()?;
        Ok(Self {
            spec,
            quiet: false,
            titles: BTreeMap::new(),
            target: None,
            new_cells: 0,
            cell_budget: None,
            touched: Vec::new(),
        })
    }

    /// Stops with [`ExperimentError::Interrupted`] once this many new cells
    /// have been trained; finished cells stay on disk.
    pub fn with_cell_budget(mut self, budget: Option<usize>) -> Self {
        self.cell_budget = budget;
        self
    }

    /// Cells trained (not loaded from disk) by this instance.
    pub fn new_cells(&self) -> usize {
        self.new_cells
    }

    /// Results of every cell this instance trained or loaded, in order.
    pub fn results(&self) -> &[CellResult] {
        &self.touched
    }

    fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[{}] {msg}", self.spec.name);
        }
    }

    fn generate(&self, title: &str) -> Result<crate::datagen::TitleDataset, ExperimentError> {
        let mut style = TitleStyle::preset(title).expect("validated title");
        style.title_id = title.to_string();
        let d = &self.spec.data;
        Ok(generate_title(&style, &d.gen, d.n_train, d.n_validation, d.n_test, d.n_unlabeled, self.title_seed(title))?)
    }

    /// Each title draws from its own seed so titles never share a stream.
    fn title_seed(&self, title: &str) -> u64 {
        let pos = TitleStyle::PRESETS.iter().position(|p| *p == title).expect("validated title");
        self.spec.data.seed.wrapping_add(1000 * pos as u64)
    }

    /// True when the dataset on disk was generated from the current spec.
    fn is_current(&self, title: &str) -> bool {
        let d = &self.spec.data;
        read_manifest(&self.spec.data_dir(title)).is_ok_and(|m| {
            let c = m.counts;
            m.config == d.gen
                && m.seed == self.title_seed(title)
                && (c.train.images, c.validation.images, c.test.images, c.unlabeled.images)
                    == (d.n_train, d.n_validation, d.n_test, d.n_unlabeled)
        })
    }

    /// Writes one dataset directory per title. Titles already generated
    /// from the same settings are left untouched.
    pub fn gen(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let mut out = Vec::new();
        for title in self.spec.titles() {
            let dir = self.spec.data_dir(&title);
            if !self.is_current(&title) {
                self.note(&format!("generating {title}"));
                write_dataset(&self.generate(&title)?, &dir)?;
            }
            out.push(dir);
        }
        Ok(out)
    }

    fn load_titles(&mut self) -> Result<(), ExperimentError> {
        if self.titles.len() == self.spec.titles().len() {
            return Ok(());
        }
        self.gen()?;
        for title in self.spec.titles() {
            let ds = read_dataset(&self.spec.data_dir(&title))?;
            self.titles.insert(title, PreparedTitle::new(&ds)?);
        }
        Ok(())
    }

    /// Test split of the downstream title.
    pub fn downstream(&mut self) -> Result<&PreparedTitle, ExperimentError> {
        self.load_titles()?;
        Ok(&self.titles[&self.spec.downstream_title])
    }

    fn target_key(&self) -> String {
        let key = serde_json::json!({
            "titles": self.spec.titles(),
            "data": self.spec.data,
            "target": self.spec.target,
            "vit": self.spec.train_config.model.target,
        });
        sha256_hex(key.to_string().as_bytes())[..16].to_string()
    }

    /// Frozen target encoder, pretrained once per spec and cached on disk.
    pub fn target_encoder(&mut self) -> Result<TargetEncoder, ExperimentError> {
        let key = self.target_key();
        if let Some((k, t)) = &self.target {
            if *k == key {
                return Ok(t.clone());
            }
        }
        let dir = self.spec.output_dir.join("targets").join(&key);
        let enc = if dir.join(crate::model::checkpoint::MANIFEST_FILE).exists() {
            TargetEncoder::load(&dir)?
        } else {
            let vit = self.spec.train_config.model.target.clone();
            let t = self.spec.target.clone();
            let enc = if t.pretrain {
                self.load_titles()?;
                let pool: Vec<_> = self.titles.values().flat_map(|p| p.unlabeled.iter().cloned()).collect();
                self.note(&format!("pretraining target encoder on {} unlabeled images", pool.len()));
                let (enc, log) = pretrain_target(&vit, &t.config, &pool)?;
                write_json(&dir.with_extension("log.json"), &log)?;
                enc
            } else {
                TargetEncoder::random(&vit, t.config.init_std, t.config.seed)?
            };
            enc.save(&dir)?;
            enc
        };
        self.target = Some((key, enc.clone()));
        Ok(enc)
    }

    fn cell_key(&self, cfg: &TrainConfig) -> String {
        let key = serde_json::json!({
            "downstream": self.spec.downstream_title,
            "co_titles": self.spec.co_titles,
            "data": self.spec.data,
            "train": cfg,
            "target": cfg.ssl_enabled.then(|| self.target_key()),
        });
        sha256_hex(key.to_string().as_bytes())[..24].to_string()
    }

    pub fn cell_dir(&self, cfg: &TrainConfig) -> PathBuf {
        self.spec.cells_dir().join(self.cell_key(cfg))
    }

    /// Trains `cfg` unless its cell already finished, then returns the
    /// stored result.
    pub fn run_cell(&mut self, cfg: &TrainConfig) -> Result<CellResult, ExperimentError> {
        let key = self.cell_key(cfg);
        let dir = self.spec.cells_dir().join(&key);
        let result_path = dir.join("result.json");
        if result_path.exists() {
            let result: CellResult = serde_json::from_slice(&std::fs::read(&result_path)?)?;
            self.touched.push(result.clone());
            return Ok(result);
        }
        if self.cell_budget.is_some_and(|b| self.new_cells >= b) {
            return Err(ExperimentError::Interrupted { completed: self.new_cells });
        }
        let target = if cfg.ssl_enabled { Some(self.target_encoder()?) } else { None };
        self.load_titles()?;
        let down = &self.titles[&self.spec.downstream_title];
        let co: Vec<PreparedTitle> = self.spec.co_titles.iter().map(|t| self.titles[t].clone()).collect();
        let data = TrainData::from_prepared(down, &co, cfg)?;
        self.note(&format!(
            "training cell {key}: alpha={} beta={} csl={} ssl={} seed={} fraction={}",
            cfg.alpha, cfg.beta, cfg.csl_enabled, cfg.ssl_enabled, cfg.seed, cfg.labeled_fraction
        ));
        let started = Instant::now();
        let outcome = train(cfg, &data, target.as_ref())?;
        let test: Vec<_> = down.test.iter().map(|s| s.sample()).collect();
        let report = evaluate(&outcome.best, &test, &cfg.eval)?;
        let summary = &outcome.log.summary;
        let result = CellResult {
            key: key.clone(),
            downstream_title: self.spec.downstream_title.clone(),
            alpha: cfg.alpha,
            beta: cfg.beta,
            csl: cfg.csl_enabled,
            ssl: cfg.ssl_enabled,
            seed: cfg.seed,
            labeled_fraction: cfg.labeled_fraction,
            best_epoch: summary.best_epoch,
            validation_map: summary.best_validation_map,
            test: report,
            target_checksum_before: summary.target_checksum_before.clone(),
            target_checksum_after: summary.target_checksum_after.clone(),
            train_seconds: started.elapsed().as_secs_f64(),
        };

        let staging = fsutil::staging_path(&dir);
        if staging.exists() {
            std::fs::remove_dir_all(&staging)?;
        }
        std::fs::create_dir_all(&staging)?;
        if self.spec.keep_checkpoints {
            save_outcome(&outcome, &staging)?;
        } else {
            outcome.log.write_jsonl(&staging.join("train_log.jsonl"))?;
        }
        write_json(&staging.join("config.json"), cfg)?;
        write_json(&staging.join("result.json"), &result)?;
        fsutil::replace_dir(&staging, &dir)?;
        self.new_cells += 1;
        self.touched.push(result.clone());
        self.note(&format!(
            "cell {key} done in {:.0}s: validation mAP {:.4}, test mAP {:.4}",
            result.train_seconds, result.validation_map, result.test.map
        ));
        Ok(result)
    }

    fn seeded(&self, cfg: &TrainConfig) -> Vec<TrainConfig> {
        self.spec.seeds.iter().map(|&seed| TrainConfig { seed, ..cfg.clone() }).collect()
    }

    /// One run per seed of the spec's training config.
    pub fn train(&mut self) -> Result<Vec<CellResult>, ExperimentError> {
        let cfg = self.spec.base_config();
        self.seeded(&cfg).iter().map(|c| self.run_cell(c)).collect()
    }

    /// Evaluates a checkpoint on one split of the downstream title.
    pub fn eval(&mut self, checkpoint: &Path, split: Split) -> Result<EvalReport, ExperimentError> {
        let (model, _) = CftModel::load(checkpoint)?;
        let samples: Vec<_> = self.downstream()?.split(split).iter().map(|s| s.sample()).collect();
        Ok(evaluate(&model, &samples, &self.spec.eval_config)?)
    }

    /// Trains every (alpha, beta) cell for every seed and selects the best
    /// mean validation mAP. Writes `grid.json` and `grid.txt`.
    pub fn gridsearch(&mut self) -> Result<GridTable, ExperimentError> {
        let grid = self
            .spec
            .grid
            .clone()
            .ok_or_else(|| ExperimentError::Spec("gridsearch needs a [grid] section".into()))?;
        let base = self.spec.base_config();
        let mut cells = Vec::new();
        for &alpha in &grid.alpha {
            for &beta in &grid.beta {
                let cfg = TrainConfig { alpha, beta, ..base.clone() };
                let mut sum = 0.0;
                for c in self.seeded(&cfg) {
                    sum += self.run_cell(&c)?.validation_map;
                }
                cells.push(GridCell {
                    alpha,
                    beta,
                    validation_map: sum / self.spec.seeds.len() as f64,
                });
            }
        }
        let best = select_best(&cells).expect("grid is nonempty");
        let table = GridTable {
            alpha_values: grid.alpha,
            beta_values: grid.beta,
            cells,
            best,
        };
        write_json(&self.spec.output_dir.join("grid.json"), &table)?;
        write_text(&self.spec.output_dir.join("grid.txt"), &table.render())?;
        Ok(table)
    }

    fn condition(&mut self, label: &str, cfg: &TrainConfig) -> Result<ConditionSummary, ExperimentError> {
        let results = self.seeded(cfg).iter().map(|c| self.run_cell(c)).collect::<Result<Vec<_>, _>>()?;
        Ok(ConditionSummary::new(&self.spec.downstream_title, label, &results))
    }

    /// One run per (csl, ssl) pair and seed. Writes `ablation.json`,
    /// `ablation.txt` and one summary per condition for the report.
    pub fn ablate(&mut self) -> Result<AblationTable, ExperimentError> {
        let cells = self.spec.ablation.clone().unwrap_or_else(AblationCell::matrix);
        let base = self.spec.base_config();
        let mut rows = Vec::new();
        for cell in cells {
            let cfg = TrainConfig {
                csl_enabled: cell.csl,
                ssl_enabled: cell.ssl,
                ..base.clone()
            };
            let summary = self.condition(cell.label(), &cfg)?;
            write_json(&self.spec.summary_path(&self.spec.downstream_title, cell.label()), &summary)?;
            rows.push(AblationRow {
                csl: cell.csl,
                ssl: cell.ssl,
                summary,
            });
        }
        let table = AblationTable {
            downstream_title: self.spec.downstream_title.clone(),
            rows,
        };
        write_json(&self.spec.output_dir.join("ablation.json"), &table)?;
        write_text(&self.spec.output_dir.join("ablation.txt"), &table.render())?;
        Ok(table)
    }

    /// One run per labeled fraction and seed with the spec's toggles.
    /// Writes `fractions.json` and `fractions.txt`.
    pub fn fractions(&mut self) -> Result<FractionTable, ExperimentError> {
        let base = self.spec.base_config();
        let mut rows = Vec::new();
        for &fraction in &self.spec.data_fractions.clone() {
            let cfg = TrainConfig {
                labeled_fraction: fraction,
                ..base.clone()
            };
            let label = format!("fraction-{fraction}");
            let summary = self.condition(&label, &cfg)?;
            write_json(&self.spec.summary_path(&self.spec.downstream_title, &label), &summary)?;
            rows.push(FractionRow {
                fraction,
                summary,
                retention: None,
            });
        }
        let full = rows.iter().find(|r| r.fraction == 1.0).map(|r| r.summary.mean_map);
        if let Some(full) = full.filter(|m| *m > 0.0) {
            rows.iter_mut().for_each(|r| r.retention = Some(r.summary.mean_map / full));
        }
        let table = FractionTable {
            downstream_title: self.spec.downstream_title.clone(),
            rows,
        };
        write_json(&self.spec.output_dir.join("fractions.json"), &table)?;
        write_text(&self.spec.output_dir.join("fractions.txt"), &table.render())?;
        Ok(table)
    }

    /// Normalized per-title tables and both t-test variants for the first
    /// two report conditions, from the stored condition summaries.
    pub fn report(&self) -> Result<String, ExperimentError> {
        let r = &self.spec.report;
        if r.conditions.len() != 2 || r.titles.is_empty() {
            return Err(ExperimentError::Spec("report needs titles and exactly two conditions".into()));
        }
        let mut map = MetricTable::new("mAP@0.5");
        let mut f1 = MetricTable::new("F1@0.25");
        for title in &r.titles {
            for cond in &r.conditions {
                let path = self.spec.summary_path(title, cond);
                let bytes = std::fs::read(&path).map_err(|_| ExperimentError::MissingReport {
                    title: title.clone(),
                    condition: cond.clone(),
                    path: path.display().to_string(),
                })?;
                let s: ConditionSummary = serde_json::from_slice(&bytes)?;
                map.insert(title, cond, s.mean_map);
                f1.insert(title, cond, s.mean_f1);
            }
        }
        let conds: Vec<&str> = r.conditions.iter().map(String::as_str).collect();
        let mut out = String::new();
        for table in [&map, &f1] {
            let _ = writeln!(out, "{}", table.metric_name);
            let _ = writeln!(out, "{:<12} {}", "title", conds.iter().map(|c| format!("{c:>12} {:>12}", "normalized")).collect::<Vec<_>>().join(" "));
            let norm = table.normalized(&conds)?;
            for (title, row) in &table.rows {
                let cells: Vec<String> = conds.iter().map(|c| format!("{:>12.4} {:>12.4}", row[*c], norm.rows[title][*c])).collect();
                let _ = writeln!(out, "{title:<12} {}", cells.join(" "));
            }
            for line in significance_lines(&norm, conds[0], conds[1])? {
                let _ = writeln!(out, "{line}");
            }
            out.push('\n');
        }
        write_text(&self.spec.output_dir.join("report.txt"), &out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(alpha: f64, beta: f64, m: f64) -> GridCell {
        GridCell {
            alpha,
            beta,
            validation_map: m,
        }
    }

    #[test]
    fn default_grid_has_49_cells() {
        let g = GridSpec::default();
        assert_eq!(g.alpha.len() * g.beta.len(), 49);
        assert_eq!(g.alpha[6], 0.6);
    }

    #[test]
    fn best_cell_breaks_ties_by_beta_then_alpha() {
        let cells = [cell(0.1, 0.3, 0.5), cell(0.4, 0.2, 0.5), cell(0.2, 0.2, 0.5), cell(0.0, 0.0, 0.4)];
        assert_eq!(select_best(&cells).unwrap(), cell(0.2, 0.2, 0.5));
        assert_eq!(select_best(&[cell(0.3, 0.2, 0.1)]).unwrap(), cell(0.3, 0.2, 0.1));
        assert!(select_best(&[]).is_none());
    }

    #[test]
    fn spec_validation() {
        let ok = ExperimentSpec::default();
        ok.validate().unwrap();
        let mut s = ok.clone();
        s.data.gen.width = 32;
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.co_titles.push("parkland".into());
        assert!(matches!(s.validate(), Err(ExperimentError::Spec(_))));
        let mut s = ok.clone();
        s.seeds.clear();
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.grid = Some(GridSpec {
            alpha: vec![0.1, 1.5],
            beta: vec![0.0],
        });
        assert!(s.validate().is_err());
        let mut s = ok;
        s.downstream_title = "moon".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn ablation_labels() {
        let labels: Vec<_> = AblationCell::matrix().into_iter().map(AblationCell::label).collect();
        assert_eq!(labels, ["csl+ssl", "ssl", "csl", "supervised"]);
    }
}
