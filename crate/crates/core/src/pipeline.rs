//! Stage orchestration over a run directory.
//!
//! Each stage reads the artifacts of its predecessor from one output
//! directory, writes its own, and records a fingerprint stamp (parameters
//! plus input file contents). Re-running a stage with nothing changed is a
//! no-op; changing a parameter or an upstream file invalidates the stamp and
//! the stage recomputes from scratch. A stage whose input artifact is
//! missing fails fast and names the exact path, so callers can say which
//! earlier stage to run.
//!
//! Directory layout after a full run:
//!
//! ```text
//! out/
//!   locations.ndjson      selected viewpoints        (ingest)
//!   sequences.ndjson      chronological image sets   (ingest)
//!   changes.raw.ndjson    pre-critic findings        (detect)
//!   changes.ndjson        the change store           (detect)
//!   proposals.ndjson      candidate trends           (propose)
//!   pool.vec / pool.ids   change embedding index     (verify)
//!   trends.ndjson         verification results       (verify)
//!   export/trends.geojson, export/report.html        (export)
//!   eval/metrics.json                                (eval)
//!   queries/<id>/...      per-query stores and exports
//!   checkpoints/, stamps/, poison.ndjson             bookkeeping
//! ```
//!
//! All stores are sorted by id before writing, and every stage is a pure
//! function of its inputs and parameters, so two runs from the same corpus,
//! configuration, and seed produce byte-identical artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{
    assemble_sequence, count_neighbors, ingest_manifest, select_locations_nms, CorpusError,
    ImageSequence, DEFAULT_MIN_IMAGES, DEFAULT_RADIUS_M,
};
use crate::detect::{
    self, load_changes, run_stage1, ChangeRecord, DetectError, Stage1Config, Stage1Report,
};
use crate::eval::{
    ap_stability, average_precision, eval_membership, pair_score_vectors, EvalError, LabeledPair,
    StabilityReport, StoreScorer,
};
use crate::gateway::{Gateway, GatewayError};
use crate::index::{IndexError, VectorIndex};
use crate::store::{
    read_ndjson, stable_id, stage_fingerprint, write_ndjson, StageStamp, StoreError,
};
use crate::trends::{
    apply_conditions, changes_by_id, propose_trends, rank_proposals, render_report_html,
    trend_feature_collection, unusual_query, verify_trend, write_geojson, write_report_html,
    ChangePool, ProposeParams, ProposeReport, QueryCondition, RankMode, TrendError, TrendProposal,
    VerificationResult, VerifyMode, DEFAULT_K, DEFAULT_N,
};

pub const LOCATIONS_FILE: &str = "locations.ndjson";
pub const SEQUENCES_FILE: &str = "sequences.ndjson";
pub const PROPOSALS_FILE: &str = "proposals.ndjson";
pub const TRENDS_FILE: &str = "trends.ndjson";
pub const POOL_VEC_FILE: &str = "pool.vec";
pub const POOL_IDS_FILE: &str = "pool.ids";
pub const POISON_FILE: &str = "poison.ndjson";
pub const STAMPS_DIR: &str = "stamps";
pub const GEOJSON_FILE: &str = "export/trends.geojson";
pub const REPORT_FILE: &str = "export/report.html";
pub const METRICS_FILE: &str = "eval/metrics.json";
pub const QUERIES_DIR: &str = "queries";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    /// A stage's input artifact does not exist yet.
    #[error("missing upstream artifact: {}", .0.display())]
    MissingUpstream(PathBuf),
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Trend(#[from] TrendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.to_path_buf(), source }
}

/// The path if it exists, otherwise [`PipelineError::MissingUpstream`].
pub fn require(path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingUpstream(path))
    }
}

pub fn poison_path(out_dir: &Path) -> PathBuf {
    out_dir.join(POISON_FILE)
}

fn stamps_dir(out_dir: &Path) -> PathBuf {
    out_dir.join(STAMPS_DIR)
}

fn report_path(out_dir: &Path, stage: &str) -> PathBuf {
    stamps_dir(out_dir).join(format!("{stage}.report.json"))
}

/// The stage's persisted report, when its stamp is current — i.e. the
/// recorded fingerprint matches and every output file still exists.
fn current_report<R: DeserializeOwned>(out_dir: &Path, stage: &str, fingerprint: &str) -> Option<R> {
    let stamp = StageStamp::load(&stamps_dir(out_dir), stage)?;
    if !stamp.is_current(fingerprint) {
        return None;
    }
    let text = fs::read_to_string(report_path(out_dir, stage)).ok()?;
    serde_json::from_str(&text).ok()
}

fn save_stage<R: Serialize>(
    out_dir: &Path,
    stage: &str,
    fingerprint: &str,
    outputs: Vec<PathBuf>,
    report: &R,
) -> Result<(), PipelineError> {
    StageStamp {
        stage: stage.to_string(),
        fingerprint: fingerprint.to_string(),
        outputs,
    }
    .save(&stamps_dir(out_dir))?;
    let path = report_path(out_dir, stage);
    let text = serde_json::to_string_pretty(report).expect("reports serialize");
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

/// Reconcile a stage's crash-resume state with its fingerprint. Matching
/// marker: a previous attempt of the *same* work was interrupted, so its
/// partial outputs (checkpoints, appended stores) may be resumed. Different
/// marker: the parameters or inputs changed, so partial outputs are stale
/// and are removed before the stage runs.
fn prepare_attempt(
    out_dir: &Path,
    stage: &str,
    fingerprint: &str,
    stale_on_change: &[PathBuf],
) -> Result<(), PipelineError> {
    let dir = stamps_dir(out_dir);
    let marker = dir.join(format!("{stage}.attempt"));
    if fs::read_to_string(&marker).ok().as_deref() == Some(fingerprint) {
        return Ok(());
    }
    for path in stale_on_change {
        if path.exists() {
            fs::remove_file(path).map_err(|e| io_err(path, e))?;
        }
    }
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    fs::write(&marker, fingerprint).map_err(|e| io_err(&marker, e))
}

// ---------------------------------------------------------------------------
// Ingest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestParams {
    /// Grouping radius: images within this distance of a selected viewpoint
    /// form its sequence.
    pub radius_m: f64,
    /// Non-maximum-suppression radius between selected viewpoints.
    pub suppress_radius_m: f64,
    /// Minimum images for a sequence to be kept.
    pub min_images: usize,
}

impl IngestParams {
    /// Defaults derived from a grouping radius: suppression at twice the
    /// radius so neighboring sequences cannot share images.
    pub fn with_radius(radius_m: f64) -> Self {
        Self {
            radius_m,
            suppress_radius_m: radius_m * 2.0,
            min_images: DEFAULT_MIN_IMAGES,
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if !(self.radius_m.is_finite() && self.radius_m > 0.0) {
            return Err(PipelineError::BadParams(format!(
                "grouping radius must be positive, got {}",
                self.radius_m
            )));
        }
        if !(self.suppress_radius_m.is_finite() && self.suppress_radius_m >= self.radius_m) {
            return Err(PipelineError::BadParams(format!(
                "suppression radius {} must be at least the grouping radius {}",
                self.suppress_radius_m, self.radius_m
            )));
        }
        if self.min_images < 2 {
            return Err(PipelineError::BadParams(
                "sequences need at least 2 images to form a pair".into(),
            ));
        }
        Ok(())
    }
}

impl Default for IngestParams {
    fn default() -> Self {
        Self::with_radius(DEFAULT_RADIUS_M)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub points: usize,
    pub manifest_rejects: usize,
    pub locations: usize,
    pub sequences: usize,
    pub sequences_rejected: usize,
    #[serde(default)]
    pub skipped: bool,
}

/// Manifest → selected locations → image sequences.
pub fn run_ingest(
    out_dir: &Path,
    manifest: &Path,
    params: &IngestParams,
) -> Result<IngestReport, PipelineError> {
    params.validate()?;
    let manifest = require(manifest.to_path_buf())?;
    let fingerprint = stage_fingerprint(
        "ingest",
        &serde_json::to_string(params).expect("params serialize"),
        &[&manifest],
    )?;
    if let Some(mut report) = current_report::<IngestReport>(out_dir, "ingest", &fingerprint) {
        report.skipped = true;
        return Ok(report);
    }

    let outcome = ingest_manifest(&manifest)?;
    let counts = count_neighbors(&outcome.points, params.radius_m)?;
    let mut locations = select_locations_nms(&outcome.points, &counts, params.suppress_radius_m)?;
    locations.sort_by(|a, b| a.id.cmp(&b.id));

    let mut sequences = Vec::new();
    let mut rejected = 0usize;
    for location in &locations {
        match assemble_sequence(location, &outcome.points, params.radius_m, params.min_images) {
            Ok(sequence) => sequences.push(sequence),
            Err(_) => rejected += 1,
        }
    }
    let kept: std::collections::BTreeSet<&str> =
        sequences.iter().map(|s| s.location_id.as_str()).collect();
    locations.retain(|l| kept.contains(l.id.as_str()));

    let loc_path = out_dir.join(LOCATIONS_FILE);
    let seq_path = out_dir.join(SEQUENCES_FILE);
    write_ndjson(&loc_path, &locations)?;
    write_ndjson(&seq_path, &sequences)?;

    let report = IngestReport {
        points: outcome.points.len(),
        manifest_rejects: outcome.rejects.len(),
        locations: locations.len(),
        sequences: sequences.len(),
        sequences_rejected: rejected,
        skipped: false,
    };
    save_stage(out_dir, "ingest", &fingerprint, vec![loc_path, seq_path], &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Detect

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    #[serde(flatten)]
    pub stage1: Stage1Report,
    #[serde(default)]
    pub skipped: bool,
}

/// Sequences → change store, via the analyst and (optionally) the
/// self-critic.
///
/// `workers` only sets the fan-out width; it does not affect the store and
/// is excluded from the stage fingerprint. An interrupted run resumes from
/// its checkpoint; a changed critic setting or sequence store discards the
/// checkpoint and recomputes.
pub fn run_detect(
    out_dir: &Path,
    gateway: &Gateway,
    critic_enabled: bool,
    workers: Option<usize>,
) -> Result<DetectReport, PipelineError> {
    let seq_path = require(out_dir.join(SEQUENCES_FILE))?;
    let fingerprint = stage_fingerprint(
        "detect",
        &json!({ "critic_enabled": critic_enabled }).to_string(),
        &[&seq_path],
    )?;
    let changes = out_dir.join(detect::CHANGES_FILE);
    if let Some(mut report) = current_report::<DetectReport>(out_dir, "detect", &fingerprint) {
        report.skipped = true;
        return Ok(report);
    }
    prepare_attempt(
        out_dir,
        "detect",
        &fingerprint,
        &[
            changes.clone(),
            out_dir.join(detect::RAW_CHANGES_FILE),
            out_dir.join(detect::STAGE1_CHECKPOINT),
        ],
    )?;

    let sequences: Vec<ImageSequence> = read_ndjson(&seq_path)?;
    let stage1 = run_stage1(
        &sequences,
        gateway,
        &Stage1Config { critic_enabled, workers },
        out_dir,
    )?;
    let report = DetectReport { stage1, skipped: false };
    save_stage(out_dir, "detect", &fingerprint, vec![changes], &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Propose

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposeStageReport {
    pub proposals: usize,
    #[serde(flatten)]
    pub detail: ProposeReport,
    #[serde(default)]
    pub skipped: bool,
}

/// Change store → clustered trend proposals.
pub fn run_propose(
    out_dir: &Path,
    gateway: &Gateway,
    params: &ProposeParams,
) -> Result<ProposeStageReport, PipelineError> {
    let changes_path = require(detect::changes_path(out_dir))?;
    let fingerprint = stage_fingerprint(
        "propose",
        &json!({
            "tight": params.tight,
            "loose": params.loose,
            "min_members": params.min_members,
            "seed": params.seed,
        })
        .to_string(),
        &[&changes_path],
    )?;
    if let Some(mut report) = current_report::<ProposeStageReport>(out_dir, "propose", &fingerprint)
    {
        report.skipped = true;
        return Ok(report);
    }

    let changes = load_changes(out_dir)?;
    let (mut proposals, detail) = propose_trends(&changes, gateway, params)?;
    proposals.sort_by(|a, b| a.proposal_id.cmp(&b.proposal_id));
    let path = out_dir.join(PROPOSALS_FILE);
    write_ndjson(&path, &proposals)?;

    let report = ProposeStageReport { proposals: proposals.len(), detail, skipped: false };
    save_stage(out_dir, "propose", &fingerprint, vec![path], &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Verify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyParams {
    /// Confirmations required for a positive.
    pub n: usize,
    /// Shortlist size; the per-proposal oracle budget.
    pub k: usize,
    /// Stop querying a proposal once the decision is forced.
    pub early_exit: bool,
    /// Fan-out width across proposals; never affects results.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self { n: DEFAULT_N, k: DEFAULT_K, early_exit: true, workers: None }
    }
}

impl VerifyParams {
    fn validate(&self) -> Result<(), PipelineError> {
        if self.n < 1 {
            return Err(PipelineError::BadParams("N must be at least 1".into()));
        }
        if self.k < self.n {
            return Err(PipelineError::BadParams(format!(
                "k = {} must be at least N = {}",
                self.k, self.n
            )));
        }
        Ok(())
    }

    fn mode(&self) -> VerifyMode {
        if self.early_exit {
            VerifyMode::EarlyExit
        } else {
            VerifyMode::Strict
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub proposals: usize,
    pub positives: usize,
    pub oracle_queries: u64,
    pub pool_size: usize,
    pub pool_skipped: usize,
    #[serde(default)]
    pub skipped: bool,
}

/// Verify every proposal against the full change pool and persist both the
/// results and the pool's embedding index.
pub fn run_verify(
    out_dir: &Path,
    gateway: &Gateway,
    params: &VerifyParams,
) -> Result<VerifyReport, PipelineError> {
    params.validate()?;
    let changes_path = require(detect::changes_path(out_dir))?;
    let proposals_path = require(out_dir.join(PROPOSALS_FILE))?;
    let fingerprint = stage_fingerprint(
        "verify",
        &serde_json::to_string(params).expect("params serialize"),
        &[&changes_path, &proposals_path],
    )?;
    if let Some(mut report) = current_report::<VerifyReport>(out_dir, "verify", &fingerprint) {
        report.skipped = true;
        return Ok(report);
    }

    let changes = load_changes(out_dir)?;
    let proposals: Vec<TrendProposal> = read_ndjson(&proposals_path)?;
    let (pool, pool_report) = ChangePool::build(&changes, gateway)?;
    let vec_path = out_dir.join(POOL_VEC_FILE);
    let ids_path = out_dir.join(POOL_IDS_FILE);
    pool.index().save(&vec_path, &ids_path)?;

    let mut results = verify_all(&proposals, &pool, params, gateway)?;
    results.sort_by(|a, b| a.proposal_id.cmp(&b.proposal_id));
    let trends_path = out_dir.join(TRENDS_FILE);
    write_ndjson(&trends_path, &results)?;

    let report = VerifyReport {
        proposals: results.len(),
        positives: results.iter().filter(|r| r.is_positive()).count(),
        oracle_queries: results.iter().map(|r| r.oracle_queries_used as u64).sum(),
        pool_size: pool.len(),
        pool_skipped: pool_report.skipped,
        skipped: false,
    };
    save_stage(
        out_dir,
        "verify",
        &fingerprint,
        vec![trends_path, vec_path, ids_path],
        &report,
    )?;
    Ok(report)
}

/// Verify proposals in parallel, preserving input order in the output.
///
/// Each worker claims the next unverified proposal and writes its result
/// into that proposal's slot, so the fan-out width changes wall time but
/// never the results: queries within one proposal stay sequential (giving a
/// deterministic query count even with early exit) and the output is
/// reassembled in input order.
pub fn verify_all(
    proposals: &[TrendProposal],
    pool: &ChangePool,
    params: &VerifyParams,
    gateway: &Gateway,
) -> Result<Vec<VerificationResult>, PipelineError> {
    params.validate()?;
    let mode = params.mode();
    let width = params
        .workers
        .unwrap_or_else(|| {
            thread::available_parallelism().map(usize::from).unwrap_or(4)
        })
        .clamp(1, gateway.max_in_flight().max(1))
        .min(proposals.len().max(1));

    if width <= 1 || proposals.len() <= 1 {
        return proposals
            .iter()
            .map(|p| verify_trend(p, pool, params.k, params.n, mode, gateway).map_err(Into::into))
            .collect();
    }

    let slots: Vec<Mutex<Option<Result<VerificationResult, TrendError>>>> =
        (0..proposals.len()).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|scope| {
        for _ in 0..width {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(proposal) = proposals.get(i) else { break };
                let result = verify_trend(proposal, pool, params.k, params.n, mode, gateway);
                *slots[i].lock().expect("slot poisoned") = Some(result);
            });
        }
    });

    let mut results = Vec::with_capacity(slots.len());
    for slot in slots {
        let result = slot
            .into_inner()
            .expect("slot poisoned")
            .expect("every slot claimed by a worker");
        results.push(result?);
    }
    Ok(results)
}

// ---------------------------------------------------------------------------
// Export

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub features: usize,
    pub positives: usize,
    pub geojson: PathBuf,
    pub report: PathBuf,
    #[serde(default)]
    pub skipped: bool,
}

/// Verified trends → GeoJSON evidence map and static review page.
pub fn run_export(out_dir: &Path) -> Result<ExportReport, PipelineError> {
    let changes_path = require(detect::changes_path(out_dir))?;
    let proposals_path = require(out_dir.join(PROPOSALS_FILE))?;
    let trends_path = require(out_dir.join(TRENDS_FILE))?;
    let seq_path = out_dir.join(SEQUENCES_FILE);
    let mut inputs: Vec<&Path> = vec![&changes_path, &proposals_path, &trends_path];
    if seq_path.exists() {
        inputs.push(&seq_path);
    }
    let fingerprint = stage_fingerprint("export", "{}", &inputs)?;
    if let Some(mut report) = current_report::<ExportReport>(out_dir, "export", &fingerprint) {
        report.skipped = true;
        return Ok(report);
    }

    let changes = changes_by_id(&load_changes(out_dir)?);
    let proposals: Vec<TrendProposal> = read_ndjson(&proposals_path)?;
    let proposals = proposals
        .into_iter()
        .map(|p| (p.proposal_id.clone(), p))
        .collect();
    let results: Vec<VerificationResult> = read_ndjson(&trends_path)?;
    let sequences: Vec<ImageSequence> =
        if seq_path.exists() { read_ndjson(&seq_path)? } else { Vec::new() };
    let sequences = sequences
        .into_iter()
        .map(|s| (s.location_id.clone(), s))
        .collect();

    let collection = trend_feature_collection(&results, &proposals, &changes, &sequences)?;
    let features = collection.features.len();
    let geojson = out_dir.join(GEOJSON_FILE);
    if let Some(parent) = geojson.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_geojson(&geojson, collection)?;
    let html = render_report_html(&results, &proposals, &changes)?;
    let report_file = out_dir.join(REPORT_FILE);
    write_report_html(&report_file, &html)?;

    let report = ExportReport {
        features,
        positives: results.iter().filter(|r| r.is_positive()).count(),
        geojson: geojson.clone(),
        report: report_file.clone(),
        skipped: false,
    };
    save_stage(out_dir, "export", &fingerprint, vec![geojson, report_file], &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Query

#[derive(Debug, Clone)]
pub struct QueryParams {
    /// Time window and/or subject to condition the change pool on.
    pub condition: QueryCondition,
    /// Query single images for unusual findings instead of the change
    /// store.
    pub unusual: bool,
    /// Proposal ordering for the per-query stores.
    pub rank: RankMode,
    pub propose: ProposeParams,
    pub verify: VerifyParams,
}

impl Default for QueryParams {
    fn default() -> Self {
        Self {
            condition: QueryCondition::default(),
            unusual: false,
            rank: RankMode::MostDetailed,
            propose: ProposeParams::default(),
            verify: VerifyParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query_id: String,
    pub dir: PathBuf,
    pub changes_considered: usize,
    pub proposals: usize,
    pub positives: usize,
}

/// Run trend discovery over a conditioned slice of the corpus.
///
/// The conditioned pool (time window, subject shortlist, or per-image
/// unusual findings) flows through the same propose/verify machinery as the
/// main pipeline; results land under `queries/<id>/` where `<id>` is a
/// stable hash of the query, so re-asking overwrites rather than
/// accumulates.
pub fn run_query(
    out_dir: &Path,
    gateway: &Gateway,
    params: &QueryParams,
) -> Result<QueryReport, PipelineError> {
    params.verify.validate()?;
    let records: Vec<ChangeRecord> = if params.unusual {
        let seq_path = require(out_dir.join(SEQUENCES_FILE))?;
        let sequences: Vec<ImageSequence> = read_ndjson(&seq_path)?;
        let pseudo = unusual_query(&sequences, gateway)?;
        apply_conditions(&pseudo, &params.condition, gateway)?
    } else {
        require(detect::changes_path(out_dir))?;
        let changes = load_changes(out_dir)?;
        apply_conditions(&changes, &params.condition, gateway)?
    };

    let (proposals, _) = propose_trends(&records, gateway, &params.propose)?;
    let by_id = changes_by_id(&records);
    let ranked = rank_proposals(&proposals, &params.rank, &by_id)?;
    let (pool, _) = ChangePool::build(&records, gateway)?;
    let results = verify_all(&ranked, &pool, &params.verify, gateway)?;

    let descriptor = format!(
        "{}|unusual={}|rank={:?}|tight={}|loose={}|min={}|seed={}|n={}|k={}|early={}",
        serde_json::to_string(&params.condition).expect("condition serializes"),
        params.unusual,
        params.rank,
        params.propose.tight,
        params.propose.loose,
        params.propose.min_members,
        params.propose.seed,
        params.verify.n,
        params.verify.k,
        params.verify.early_exit,
    );
    let query_id = stable_id("query", &[&descriptor]);
    let qdir = out_dir.join(QUERIES_DIR).join(&query_id);
    fs::create_dir_all(&qdir).map_err(|e| io_err(&qdir, e))?;

    let mut records_sorted = records.clone();
    records_sorted.sort_by(|a, b| a.id.cmp(&b.id));
    write_ndjson(&qdir.join("changes.ndjson"), &records_sorted)?;
    // Proposals keep rank order — the ordering is the query's answer.
    write_ndjson(&qdir.join(PROPOSALS_FILE), &ranked)?;
    let mut results_sorted = results.clone();
    results_sorted.sort_by(|a, b| a.proposal_id.cmp(&b.proposal_id));
    write_ndjson(&qdir.join(TRENDS_FILE), &results_sorted)?;

    let proposals_map = ranked
        .iter()
        .cloned()
        .map(|p| (p.proposal_id.clone(), p))
        .collect();
    let changes_map = changes_by_id(&records_sorted);
    let seq_path = out_dir.join(SEQUENCES_FILE);
    let sequences: Vec<ImageSequence> =
        if seq_path.exists() { read_ndjson(&seq_path)? } else { Vec::new() };
    let sequences_map = sequences
        .into_iter()
        .map(|s| (s.location_id.clone(), s))
        .collect();
    let collection =
        trend_feature_collection(&results_sorted, &proposals_map, &changes_map, &sequences_map)?;
    write_geojson(&qdir.join("trends.geojson"), collection)?;
    let html = render_report_html(&results_sorted, &proposals_map, &changes_map)?;
    write_report_html(&qdir.join("report.html"), &html)?;

    Ok(QueryReport {
        query_id,
        dir: qdir,
        changes_considered: records.len(),
        proposals: ranked.len(),
        positives: results.iter().filter(|r| r.is_positive()).count(),
    })
}

// ---------------------------------------------------------------------------
// Eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    /// Pair-level change labels (NDJSON of location/pair/has_change).
    pub pair_labels: Option<PathBuf>,
    /// Membership labels (NDJSON of trend/change/belongs).
    pub membership_labels: Option<PathBuf>,
    /// Resampled subsets for the detection-AP stability estimate; 0 skips
    /// it.
    pub stability_subsets: usize,
    pub stability_fraction: f64,
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            pair_labels: None,
            membership_labels: None,
            stability_subsets: 0,
            stability_fraction: 0.75,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub detection_ap: Option<f64>,
    pub detection_stability: Option<StabilityReport>,
    pub membership_ap: Option<f64>,
    pub metrics: PathBuf,
}

/// Score the run's stores against label files and write `eval/metrics.json`.
pub fn run_eval(
    out_dir: &Path,
    gateway: &Gateway,
    params: &EvalParams,
) -> Result<EvalOutcome, PipelineError> {
    if params.pair_labels.is_none() && params.membership_labels.is_none() {
        return Err(PipelineError::BadParams(
            "nothing to evaluate: provide pair labels, membership labels, or both".into(),
        ));
    }
    let mut detection_ap = None;
    let mut detection_stability = None;
    let mut membership_ap = None;

    if let Some(labels_path) = &params.pair_labels {
        let labels_path = require(labels_path.clone())?;
        let seq_path = require(out_dir.join(SEQUENCES_FILE))?;
        require(detect::changes_path(out_dir))?;
        let sequences: Vec<ImageSequence> = read_ndjson(&seq_path)?;
        let changes = load_changes(out_dir)?;
        let labels: Vec<LabeledPair> = read_ndjson(&labels_path)?;
        let scorer = StoreScorer::new(&changes);
        let (scores, truth) = pair_score_vectors(&scorer, &sequences, &labels)?;
        detection_ap = Some(average_precision(&scores, &truth)?);
        if params.stability_subsets > 0 {
            detection_stability = Some(ap_stability(
                &scores,
                &truth,
                params.stability_subsets,
                params.stability_fraction,
                params.seed,
            )?);
        }
    }

    if let Some(labels_path) = &params.membership_labels {
        let labels_path = require(labels_path.clone())?;
        require(detect::changes_path(out_dir))?;
        let proposals_path = require(out_dir.join(PROPOSALS_FILE))?;
        let changes = changes_by_id(&load_changes(out_dir)?);
        let proposals: Vec<TrendProposal> = read_ndjson(&proposals_path)?;
        let proposals: std::collections::BTreeMap<String, TrendProposal> = proposals
            .into_iter()
            .map(|p| (p.proposal_id.clone(), p))
            .collect();
        let labels: Vec<crate::eval::LabeledMembership> = read_ndjson(&labels_path)?;
        membership_ap = Some(eval_membership(
            |label| {
                let proposal = proposals.get(&label.trend_id).ok_or_else(|| {
                    EvalError::BadParams(format!("label references unknown trend {}", label.trend_id))
                })?;
                let change = changes.get(&label.change_id).ok_or_else(|| {
                    EvalError::BadParams(format!(
                        "label references unknown change {}",
                        label.change_id
                    ))
                })?;
                Ok(if gateway.verify_membership(change, &proposal.text) { 1.0 } else { 0.0 })
            },
            &labels,
        )?);
    }

    let metrics = out_dir.join(METRICS_FILE);
    if let Some(parent) = metrics.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let outcome = EvalOutcome { detection_ap, detection_stability, membership_ap, metrics };
    let text = serde_json::to_string_pretty(&outcome).expect("metrics serialize");
    fs::write(&outcome.metrics, text).map_err(|e| io_err(&outcome.metrics, e))?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------

/// Reopen a saved pool index together with its change store.
pub fn open_pool(out_dir: &Path) -> Result<ChangePool, PipelineError> {
    let vec_path = require(out_dir.join(POOL_VEC_FILE))?;
    let ids_path = require(out_dir.join(POOL_IDS_FILE))?;
    require(detect::changes_path(out_dir))?;
    let changes = load_changes(out_dir)?;
    let index = VectorIndex::open(&vec_path, &ids_path)?;
    Ok(ChangePool::from_index(index, &changes)?)
}

/// Line count of the poison store, or 0 when no request has been poisoned.
pub fn poison_count(out_dir: &Path) -> usize {
    fs::read_to_string(poison_path(out_dir))
        .map(|text| text.lines().filter(|l| !l.trim().is_empty()).count())
        .unwrap_or(0)
}
