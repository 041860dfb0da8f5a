//! Experiment configuration, on-disk layout and the end-to-end pipeline.
//!
//! Every stage is a public function so the CLI subcommands and `run-all`
//! execute the same code on the same files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{self, AuditSpec, FractionScan};
use crate::checkpoint;
use crate::corpus::{self, Corpus, CorpusSpec, SequenceRecord};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, TokenSequence};
use crate::pruning::{self, PruneOutcome, PruneSpec, PruneStrategy};
use crate::report::{
    AuditReport, LevelInfo, MemorizationCell, MonotonicityCell, PerplexityCell, PopulationInfo, ReferencePoint,
    BASELINE,
};
use crate::trainer::{self, LossHistory, TrainConfig};

const REFERENCE_CONFIG: &str = include_str!("../configs/reference.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in the report tables.
    pub name: String,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Pruning fractions, Level 1 then Level 2.
    pub levels: Vec<f64>,
    pub strategies: Vec<PruneStrategy>,
    pub audit: AuditSpec,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// The desk-scale reference experiment shipped with the crate.
    pub fn reference() -> Self {
        serde_json::from_str(REFERENCE_CONFIG).expect("bundled reference config parses")
    }

    pub fn reference_json() -> &'static str {
        REFERENCE_CONFIG
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format {
                path: path.to_path_buf(),
                reason: j.to_string(),
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.audit.validate(self.corpus.seq_len)?;
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::config(format!(
                "model vocab {} differs from corpus vocab {}",
                self.model.vocab_size, self.corpus.vocab_size
            )));
        }
        if self.model.max_seq_len < self.corpus.seq_len {
            return Err(Error::config(format!(
                "model context {} is shorter than corpus sequences ({})",
                self.model.max_seq_len, self.corpus.seq_len
            )));
        }
        if self.levels.len() != 2 {
            return Err(Error::config("exactly two pruning levels are required"));
        }
        if !self.levels.iter().all(|&f| f > 0.0 && f < 1.0) {
            return Err(Error::config("pruning levels must lie in (0, 1)"));
        }
        if self.levels[0] >= self.levels[1] {
            return Err(Error::config("pruning levels must be strictly increasing"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("at least one pruning strategy is required"));
        }
        let mut seen = HashSet::new();
        if !self.strategies.iter().all(|s| seen.insert(*s)) {
            return Err(Error::config("strategies must not repeat"));
        }
        Ok(())
    }

    /// SHA-256 over every field that affects results; `output_dir` is excluded.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&semantic).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn level_infos(&self) -> Vec<LevelInfo> {
        LevelInfo::for_fractions(&self.levels)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.output_dir)
    }
}

/// `output_dir/{checkpoints,masks,reports,logs,data}/` plus `manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create_dirs(&self) -> Result<()> {
        for d in [self.checkpoints(), self.masks(), self.reports(), self.logs(), self.data()] {
            fs::create_dir_all(d)?;
        }
        Ok(())
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn masks(&self) -> PathBuf {
        self.root.join("masks")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn train_records(&self) -> PathBuf {
        self.data().join("train.jsonl")
    }
    pub fn heldout(&self) -> PathBuf {
        self.data().join("heldout.jsonl")
    }
    pub fn baseline_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("baseline.ckpt")
    }
    pub fn variant_checkpoint(&self, strategy: PruneStrategy, level: &LevelInfo) -> PathBuf {
        self.checkpoints().join(format!("{}.ckpt", variant_id(strategy, level)))
    }
    pub fn prune_artifacts(&self, strategy: PruneStrategy, level: &LevelInfo) -> PruneArtifacts {
        let id = variant_id(strategy, level);
        PruneArtifacts {
            checkpoint: self.variant_checkpoint(strategy, level),
            mask_json: self.masks().join(format!("{id}.mask.json")),
            mask_bin: self.masks().join(format!("{id}.mask.bin")),
            sparsity: self.reports().join(format!("{id}.sparsity.json")),
        }
    }
    pub fn training_history(&self) -> PathBuf {
        self.reports().join("training.json")
    }
    pub fn audit_json(&self) -> PathBuf {
        self.reports().join("audit.json")
    }
    pub fn audit_text(&self) -> PathBuf {
        self.reports().join("audit.txt")
    }
    pub fn audit_csv(&self) -> PathBuf {
        self.reports().join("audit.csv")
    }
    pub fn run_log(&self) -> PathBuf {
        self.logs().join("run.log")
    }
}

/// File stem for a pruned variant, e.g. `global-attention-l2`.
pub fn variant_id(strategy: PruneStrategy, level: &LevelInfo) -> String {
    format!("{}-{}", strategy.id(), level.label.to_lowercase())
}

/// Where one pruning run writes its outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneArtifacts {
    pub checkpoint: PathBuf,
    pub mask_json: PathBuf,
    pub mask_bin: PathBuf,
    pub sparsity: PathBuf,
}

impl PruneArtifacts {
    /// Mask and sparsity files next to the checkpoint, sharing its stem.
    pub fn beside(checkpoint: &Path) -> Self {
        let stem = checkpoint.with_extension("");
        let with = |suffix: &str| {
            let mut s = stem.clone().into_os_string();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            checkpoint: checkpoint.to_path_buf(),
            mask_json: with(".mask.json"),
            mask_bin: with(".mask.bin"),
            sparsity: with(".sparsity.json"),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Generates the corpus and held-out set and writes both as JSONL.
pub fn gen_corpus_files(spec: &CorpusSpec, train_path: &Path, heldout_path: &Path) -> Result<(Corpus, Vec<TokenSequence>)> {
    let corpus = corpus::generate_corpus(spec)?;
    let heldout = corpus::generate_heldout(spec, &corpus)?;
    corpus::write_records_jsonl(train_path, &corpus.records)?;
    corpus::write_heldout_jsonl(heldout_path, &heldout)?;
    Ok((corpus, heldout))
}

/// Rebuilds the training stream from records on disk; `seed` is the corpus seed.
pub fn load_corpus(path: &Path, seed: u64) -> Result<Corpus> {
    Ok(Corpus::from_records(corpus::read_records_jsonl(path)?, seed))
}

/// Trains from a fresh initialization and saves the checkpoint.
pub fn train_to_file(
    model: &ModelConfig,
    train: &TrainConfig,
    corpus: &Corpus,
    checkpoint_path: &Path,
) -> Result<LossHistory> {
    let params = ModelParams::init(model)?;
    let outcome = trainer::train(params, &corpus.training_sequences(), train)?;
    checkpoint::save(checkpoint_path, &outcome.params)?;
    Ok(outcome.history)
}

/// Prunes `base` and writes the checkpoint, mask pair and sparsity report.
pub fn prune_to_files(base: &ModelParams, spec: &PruneSpec, out: &PruneArtifacts) -> Result<PruneOutcome> {
    let outcome = pruning::prune(base, spec)?;
    checkpoint::save(&out.checkpoint, &outcome.params)?;
    pruning::write_mask(&out.mask_json, &out.mask_bin, spec, &outcome.mask)?;
    write_json(&out.sparsity, &outcome.report)?;
    Ok(outcome)
}

pub const CANARY: &str = "canary";
pub const BACKGROUND: &str = "background";

struct VariantAudit {
    scans: Vec<FractionScan>,
    perplexity: f64,
}

fn audit_variant(params: &ModelParams, populations: &[(&str, Vec<SequenceRecord>)], heldout: &[TokenSequence], spec: &AuditSpec) -> Result<VariantAudit> {
    let scans = populations
        .iter()
        .map(|(_, records)| audit::memorized_fraction(params, records, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(VariantAudit {
        scans,
        perplexity: audit::perplexity(params, heldout)?,
    })
}

/// Audits the baseline and every pruned variant found in `checkpoint_dir`.
/// Unreadable or absent checkpoints become `n/a` cells and a `missing` entry.
pub fn audit_checkpoints(
    cfg: &ExperimentConfig,
    records: &[SequenceRecord],
    heldout: &[TokenSequence],
    checkpoint_dir: &Path,
) -> Result<AuditReport> {
    let levels = cfg.level_infos();
    let populations: Vec<(&str, Vec<SequenceRecord>)> = [CANARY, BACKGROUND]
        .into_iter()
        .map(|name| {
            let want_canary = name == CANARY;
            (name, records.iter().filter(|r| r.is_canary == want_canary).cloned().collect::<Vec<_>>())
        })
        .filter(|(_, rs)| !rs.is_empty())
        .collect();
    if populations.is_empty() {
        return Err(Error::degenerate("no records to audit"));
    }
    for (name, recs) in &populations {
        if cfg.audit.n_samples > recs.len() {
            log::warn!(
                "{name}: requested {} samples from {} records; auditing all of them",
                cfg.audit.n_samples,
                recs.len()
            );
        }
    }

    let mut columns: Vec<(Option<(PruneStrategy, &LevelInfo)>, PathBuf)> =
        vec![(None, checkpoint_dir.join("baseline.ckpt"))];
    for level in &levels {
        for &s in &cfg.strategies {
            columns.push((Some((s, level)), checkpoint_dir.join(format!("{}.ckpt", variant_id(s, level)))));
        }
    }

    let mut report = AuditReport {
        model: cfg.name.clone(),
        context_lengths: cfg.audit.context_lengths.clone(),
        suffix_len: cfg.audit.suffix_len,
        levels: levels.clone(),
        strategies: cfg.strategies.clone(),
        populations: Vec::new(),
        cells: Vec::new(),
        perplexities: Vec::new(),
        monotonicity: Vec::new(),
        missing: Vec::new(),
        reference: ReferencePoint::published(),
    };
    let mut population_info: BTreeMap<usize, PopulationInfo> = BTreeMap::new();

    for (column, path) in &columns {
        let (strategy, level) = match column {
            None => (BASELINE.to_string(), None),
            Some((s, l)) => (s.id().to_string(), Some(l.label.clone())),
        };
        let audited = match checkpoint::load(path) {
            Ok(params) => Some(audit_variant(&params, &populations, heldout, &cfg.audit)?),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.missing.push(format!("{}: {e}", path.display()));
                None
            }
        };
        for (pi, (pop, recs)) in populations.iter().enumerate() {
            let scan = audited.as_ref().map(|a| &a.scans[pi]);
            if let Some(scan) = scan {
                population_info.entry(pi).or_insert_with(|| PopulationInfo {
                    name: pop.to_string(),
                    records: recs.len(),
                    requested: scan.requested,
                    sampled: scan.sampled_ids.len(),
                    clamped: scan.clamped,
                });
                report.monotonicity.push(MonotonicityCell {
                    population: pop.to_string(),
                    strategy: strategy.clone(),
                    level: level.clone(),
                    violations: scan.context_monotonicity_violations(),
                });
            }
            for (ki, &k) in cfg.audit.context_lengths.iter().enumerate() {
                let tally = scan.map(|s| &s.per_k[ki]);
                report.cells.push(MemorizationCell {
                    population: pop.to_string(),
                    strategy: strategy.clone(),
                    level: level.clone(),
                    k,
                    evaluated: tally.map_or(0, |t| t.evaluated),
                    extracted: tally.map_or(0, |t| t.extracted),
                    skipped: tally.map_or(0, |t| t.skipped),
                    fraction: tally.map(|t| t.fraction),
                });
            }
        }
        report.perplexities.push(PerplexityCell {
            strategy,
            level,
            perplexity: audited.as_ref().map(|a| a.perplexity),
        });
    }
    // Populations whose every variant was missing still get a row.
    for (pi, (pop, recs)) in populations.iter().enumerate() {
        population_info.entry(pi).or_insert_with(|| PopulationInfo {
            name: pop.to_string(),
            records: recs.len(),
            requested: cfg.audit.n_samples,
            sampled: cfg.audit.n_samples.min(recs.len()),
            clamped: cfg.audit.n_samples > recs.len(),
        });
    }
    report.populations = population_info.into_values().collect();
    Ok(report)
}

/// Writes the JSON, text and CSV renderings of `report`.
pub fn write_report_files(report: &AuditReport, json: &Path, text: &Path, csv: &Path) -> Result<()> {
    fs::write(json, report.to_json()?)?;
    fs::write(text, report.render_text())?;
    fs::write(csv, report.to_csv())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub config_hash: String,
    pub name: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// `complete`, or `failed` with the stage and error recorded.
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// Artifact role to path, relative to the output directory.
    pub artifacts: BTreeMap<String, PathBuf>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Run<'a> {
    layout: Layout,
    manifest: RunManifest,
    log: fs::File,
    clock: Instant,
    cfg: &'a ExperimentConfig,
}

impl Run<'_> {
    fn record(&mut self, role: impl Into<String>, path: &Path) {
        let rel = path.strip_prefix(&self.layout.root).unwrap_or(path).to_path_buf();
        self.manifest.artifacts.insert(role.into(), rel);
    }

    fn note(&mut self, msg: &str) {
        log::info!("{msg}");
        let _ = writeln!(self.log, "[{:>8.1}s] {msg}", self.clock.elapsed().as_secs_f64());
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.note(&format!("stage {name}: start"));
        match f(self) {
            Ok(v) => {
                self.note(&format!("stage {name}: done"));
                Ok(v)
            }
            Err(e) => {
                self.note(&format!("stage {name}: failed: {e}"));
                self.manifest.status = "failed".into();
                self.manifest.failed_stage = Some(name.to_string());
                self.manifest.error = Some(e.to_string());
                self.manifest.finished_unix = Some(unix_now());
                let _ = write_json(&self.layout.manifest(), &self.manifest);
                Err(e.in_stage(name))
            }
        }
    }
}

/// generate -> train -> prune (strategies x levels) -> audit -> report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(RunManifest, AuditReport)> {
    cfg.validate()?;
    let layout = cfg.layout();
    layout.create_dirs()?;
    let mut run = Run {
        manifest: RunManifest {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            name: cfg.name.clone(),
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".into(),
            failed_stage: None,
            error: None,
            artifacts: BTreeMap::new(),
        },
        log: fs::File::create(layout.run_log())?,
        layout,
        clock: Instant::now(),
        cfg,
    };
    let log_path = run.layout.run_log();
    run.record("log", &log_path);
    let config_path = run.layout.root.join("config.json");
    write_json(&config_path, cfg)?;
    run.record("config", &config_path);

    let (corpus, heldout) = run.stage("gen-corpus", |r| {
        let (train, held) = (r.layout.train_records(), r.layout.heldout());
        let out = gen_corpus_files(&r.cfg.corpus, &train, &held)?;
        r.record("train_records", &train);
        r.record("heldout", &held);
        Ok(out)
    })?;

    run.stage("train", |r| {
        let ckpt = r.layout.baseline_checkpoint();
        let history = train_to_file(&r.cfg.model, &r.cfg.train, &corpus, &ckpt)?;
        r.record("checkpoint/baseline", &ckpt);
        let hist_path = r.layout.training_history();
        write_json(&hist_path, &history)?;
        r.record("training_history", &hist_path);
        let last = history.epoch_means.last().copied().unwrap_or(f64::NAN);
        r.note(&format!("final epoch mean loss {last:.4}"));
        Ok(())
    })?;

    run.stage("prune", |r| {
        let base = checkpoint::load(&r.layout.baseline_checkpoint())?;
        for level in r.cfg.level_infos() {
            for &s in &r.cfg.strategies {
                let spec = PruneSpec::new(s, level.fraction)?;
                let out = r.layout.prune_artifacts(s, &level);
                let outcome = prune_to_files(&base, &spec, &out)?;
                let id = variant_id(s, &level);
                r.record(format!("checkpoint/{id}"), &out.checkpoint);
                r.record(format!("mask/{id}"), &out.mask_json);
                r.record(format!("mask_bits/{id}"), &out.mask_bin);
                r.record(format!("sparsity/{id}"), &out.sparsity);
                r.note(&format!(
                    "{id}: zeroed {} of {} in-scope weights",
                    outcome.report.scope_zeros, outcome.report.scope_size
                ));
            }
        }
        Ok(())
    })?;

    let report = run.stage("audit", |r| {
        audit_checkpoints(r.cfg, &corpus.records, &heldout, &r.layout.checkpoints())
    })?;

    run.stage("report", |r| {
        let (json, text, csv) = (r.layout.audit_json(), r.layout.audit_text(), r.layout.audit_csv());
        write_report_files(&report, &json, &text, &csv)?;
        r.record("report/json", &json);
        r.record("report/text", &text);
        r.record("report/csv", &csv);
        Ok(())
    })?;

    run.manifest.status = "complete".into();
    run.manifest.finished_unix = Some(unix_now());
    write_json(&run.layout.manifest(), &run.manifest)?;
    Ok((run.manifest, report))
}
