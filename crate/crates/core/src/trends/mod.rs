//! Stage 2: from change records to verified trends.
//!
//! The stage runs in three steps. [`propose_trends`] abstracts every change
//! into more general restatements, embeds those texts, canopy-clusters them,
//! and keeps each cluster with enough members as a [`TrendProposal`].
//! [`verify_trend`] then checks a proposal against the full change pool with
//! the hybrid scheme: an exact k-nearest-neighbor shortlist over the pool
//! embeddings, each shortlisted change confirmed or rejected by the analyst,
//! positive once `N` confirmations accumulate. Between the two, the pool can
//! be conditioned by a time window ([`filter_time`]) and a subject sentence
//! ([`filter_subject`]), and proposals can be ordered for triage with
//! [`rank_proposals`].
//!
//! The hybrid check is deliberately one-sided: it can only under-count
//! members relative to asking the analyst about every change in the pool
//! ([`verify_exhaustive`]), so a positive decision is always a sound one.
//! Reported trend counts inherit the spatial and temporal sampling biases of
//! the underlying imagery; nothing here corrects for where and when cameras
//! happened to be.

mod export;

pub use export::{render_report_html, trend_feature_collection, write_geojson, write_report_html};

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ImageSequence;
use crate::detect::{normalize_desc, ChangeRecord};
use crate::gateway::{Gateway, GatewayError};
use crate::index::{canopy_cluster, IndexError, IndexedItem, VectorIndex};
use crate::store::{stable_id, StoreError};

/// Default confirmation threshold for verification.
pub const DEFAULT_N: usize = 500;
/// Default shortlist multiple: `k = DEFAULT_K_MULTIPLE * N`.
pub const DEFAULT_K_MULTIPLE: usize = 3;
/// Default shortlist size.
pub const DEFAULT_K: usize = DEFAULT_K_MULTIPLE * DEFAULT_N;
/// Default tight canopy radius (cosine distance).
pub const DEFAULT_TIGHT: f64 = 0.15;
/// Default loose canopy radius (cosine distance).
pub const DEFAULT_LOOSE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum TrendError {
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("subject pool size {requested} exceeds the {available} available changes")]
    PoolSize { requested: usize, available: usize },
    #[error("unknown ranking mode {0:?}")]
    UnknownRankMode(String),
    #[error("change {0} is indexed but missing from the change store")]
    MissingChange(String),
    #[error("verification result {0} has no matching proposal")]
    MissingProposal(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A candidate trend: one surviving canopy of abstraction texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrendProposal {
    pub proposal_id: String,
    /// The canopy center's abstraction text, verbatim.
    pub text: String,
    /// Changes that contributed at least one member abstraction, sorted.
    pub source_change_ids: Vec<String>,
    /// Number of abstraction texts in the canopy (not deduplicated by
    /// change: one change can contribute several members).
    pub member_count: usize,
    /// Whitespace-separated word count of `text`.
    pub word_count: usize,
}

/// Outcome of verifying one proposal against a change pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub proposal_id: String,
    pub decision: Decision,
    /// Change ids the analyst confirmed, sorted.
    pub confirmed_change_ids: Vec<String>,
    /// Analyst membership queries actually issued.
    pub oracle_queries_used: usize,
    /// Set when the decision is degraded, e.g. backend failures made the
    /// confirmation threshold unreachable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl VerificationResult {
    pub fn is_positive(&self) -> bool {
        self.decision == Decision::Positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Positive,
    Negative,
}

/// Half-open in neither direction: a change is inside the window only if
/// both its capture times are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeWindow {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self, TrendError> {
        let window = Self { start, end };
        window.validate()?;
        Ok(window)
    }

    pub fn validate(&self) -> Result<(), TrendError> {
        if self.start >= self.end {
            return Err(TrendError::BadParams(format!(
                "time window start {} is not before end {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// Both capture times inside the window?
    pub fn contains(&self, change: &ChangeRecord) -> bool {
        change.before_time >= self.start && change.after_time <= self.end
    }
}

/// Restrictions applied to the change pool before verification.
///
/// The time window is applied first, then the subject filter; the subject
/// filter truncates to the `pool_size` nearest changes before asking the
/// analyst, so the order matters and is fixed. `pool_size` without a
/// `subject` has nothing to truncate and is ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryCondition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_window: Option<TimeWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
}

impl QueryCondition {
    pub fn validate(&self) -> Result<(), TrendError> {
        if let Some(window) = &self.time_window {
            window.validate()?;
        }
        if let Some(subject) = &self.subject {
            if subject.trim().is_empty() {
                return Err(TrendError::BadParams("subject sentence is empty".into()));
            }
        }
        if self.pool_size == Some(0) {
            return Err(TrendError::BadParams("subject pool size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.time_window.is_none() && self.subject.is_none()
    }
}

/// Parameters for [`propose_trends`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProposeParams {
    /// Tight canopy radius (cosine distance); consumes candidates.
    pub tight: f64,
    /// Loose canopy radius (cosine distance); defines membership.
    pub loose: f64,
    /// Minimum canopy size for a proposal to survive. Conventionally the
    /// same `k` used for the verification shortlist.
    pub min_members: usize,
    /// Seed for the canopy candidate order.
    pub seed: u64,
}

impl Default for ProposeParams {
    fn default() -> Self {
        Self { tight: DEFAULT_TIGHT, loose: DEFAULT_LOOSE, min_members: DEFAULT_K, seed: 0 }
    }
}

/// Bookkeeping from a [`propose_trends`] run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposeReport {
    /// Changes whose abstraction call succeeded (possibly with zero texts).
    pub changes_processed: usize,
    /// Changes dropped because the abstraction call failed outright.
    pub changes_skipped: usize,
    /// Abstraction texts received across all changes.
    pub abstraction_texts: usize,
    /// Abstraction texts dropped because embedding them failed.
    pub texts_skipped: usize,
    /// Canopies found before the size filter.
    pub clusters_total: usize,
    /// Canopies surviving the size filter (= proposals emitted).
    pub clusters_kept: usize,
}

/// Derive, embed, and cluster abstraction texts for every change; emit one
/// proposal per canopy with at least `min_members` members.
///
/// A proposal's text is its canopy center's abstraction text — the one
/// canonical representative the clustering provides. Backend failures skip
/// the affected change or text (they are poison-recorded by the gateway) and
/// shrink the candidate set rather than failing the run; an empty input
/// yields no proposals.
pub fn propose_trends(
    changes: &[ChangeRecord],
    gateway: &Gateway,
    params: &ProposeParams,
) -> Result<(Vec<TrendProposal>, ProposeReport), TrendError> {
    if params.tight > params.loose {
        return Err(TrendError::BadParams(format!(
            "tight radius {} exceeds loose radius {}",
            params.tight, params.loose
        )));
    }
    if params.min_members == 0 {
        return Err(TrendError::BadParams("min_members must be at least 1".into()));
    }

    let mut report = ProposeReport::default();
    let mut items = Vec::new();
    // item id -> (change id, abstraction text)
    let mut origins: BTreeMap<String, (String, String)> = BTreeMap::new();
    for change in changes {
        let texts = match gateway.derive_abstractions(change) {
            Ok(texts) => texts,
            Err(_) => {
                report.changes_skipped += 1;
                continue;
            }
        };
        report.changes_processed += 1;
        for (i, text) in texts.iter().enumerate() {
            if text.trim().is_empty() {
                continue;
            }
            report.abstraction_texts += 1;
            let vector = match gateway.embed_text(text) {
                Ok(v) => v,
                Err(_) => {
                    report.texts_skipped += 1;
                    continue;
                }
            };
            let item_id = stable_id("abs", &[&change.id, &i.to_string()]);
            origins.insert(item_id.clone(), (change.id.clone(), text.clone()));
            items.push(IndexedItem { item_id, vector });
        }
    }

    let canopies = canopy_cluster(&items, params.tight, params.loose, params.seed)?;
    report.clusters_total = canopies.len();
    let mut proposals = Vec::new();
    for canopy in canopies {
        if canopy.member_ids.len() < params.min_members {
            continue;
        }
        let (_, text) = &origins[&canopy.center_id];
        let sources: BTreeSet<&str> =
            canopy.member_ids.iter().map(|m| origins[m].0.as_str()).collect();
        proposals.push(TrendProposal {
            proposal_id: stable_id("proposal", &[&canopy.center_id, text]),
            text: text.clone(),
            source_change_ids: sources.into_iter().map(str::to_string).collect(),
            member_count: canopy.member_ids.len(),
            word_count: text.split_whitespace().count(),
        });
    }
    report.clusters_kept = proposals.len();
    Ok((proposals, report))
}

/// The embedded change pool a proposal is verified against: a flat exact
/// index over the changes' full texts, plus the texts themselves for the
/// analyst queries.
pub struct ChangePool {
    index: VectorIndex,
    texts: BTreeMap<String, String>,
}

/// Bookkeeping from building a [`ChangePool`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PoolReport {
    pub embedded: usize,
    /// Changes left out because their embedding call failed.
    pub skipped: usize,
}

impl ChangePool {
    /// Embed every change's full text through the gateway. Embedding
    /// failures drop the change from the pool (and are counted), so a
    /// degraded backend shrinks the pool instead of failing the stage.
    pub fn build(
        changes: &[ChangeRecord],
        gateway: &Gateway,
    ) -> Result<(Self, PoolReport), TrendError> {
        let mut report = PoolReport::default();
        let mut items = Vec::new();
        let mut texts = BTreeMap::new();
        for change in changes {
            let text = change.full_text();
            match gateway.embed_text(&text) {
                Ok(vector) => {
                    report.embedded += 1;
                    texts.insert(change.id.clone(), text);
                    items.push(IndexedItem { item_id: change.id.clone(), vector });
                }
                Err(_) => report.skipped += 1,
            }
        }
        Ok((Self { index: VectorIndex::build(items)?, texts }, report))
    }

    /// Rehydrate from a persisted index plus the change store it was built
    /// from. Every indexed id must still resolve to a change.
    pub fn from_index(
        index: VectorIndex,
        changes: &[ChangeRecord],
    ) -> Result<Self, TrendError> {
        let by_id: BTreeMap<&str, &ChangeRecord> =
            changes.iter().map(|c| (c.id.as_str(), c)).collect();
        let mut texts = BTreeMap::new();
        for id in index.ids() {
            let change = by_id
                .get(id.as_str())
                .ok_or_else(|| TrendError::MissingChange(id.clone()))?;
            texts.insert(id.clone(), change.full_text());
        }
        Ok(Self { index, texts })
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn text(&self, change_id: &str) -> Option<&str> {
        self.texts.get(change_id).map(String::as_str)
    }

    /// Change id -> full text, sorted by id.
    pub fn texts(&self) -> &BTreeMap<String, String> {
        &self.texts
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Whether [`verify_trend`] may stop as soon as the decision is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyMode {
    /// Stop querying once `N` confirmations are in; `oracle_queries_used`
    /// reflects the stop point. The default.
    EarlyExit,
    /// Query the whole shortlist for an exact confirmation count. Used by
    /// the evaluation harness.
    Strict,
}

/// Hybrid verification of one proposal.
///
/// Embeds the proposal text, shortlists the `k` nearest pool changes, and
/// asks the analyst about each in shortlist order; the decision is positive
/// once `n` are confirmed. Backend failures count as unconfirmed (never
/// confirmed), so they can only push the decision toward negative; when they
/// alone made the threshold unreachable the result carries a diagnostic.
pub fn verify_trend(
    proposal: &TrendProposal,
    pool: &ChangePool,
    k: usize,
    n: usize,
    mode: VerifyMode,
    gateway: &Gateway,
) -> Result<VerificationResult, TrendError> {
    check_k_n(k, n)?;
    let query = match gateway.embed_text(&proposal.text) {
        Ok(v) => v,
        Err(e) => {
            // Without an embedding there is no shortlist; negative is the
            // only sound answer.
            return Ok(VerificationResult {
                proposal_id: proposal.proposal_id.clone(),
                decision: Decision::Negative,
                confirmed_change_ids: Vec::new(),
                oracle_queries_used: 0,
                diagnostic: Some(format!("proposal embedding failed: {e}")),
            });
        }
    };
    let shortlist = pool.index.knn(&query, k)?;
    let mut confirmed = Vec::new();
    let mut queries = 0usize;
    let mut failures = 0usize;
    for neighbor in &shortlist {
        let text = pool
            .text(&neighbor.item_id)
            .ok_or_else(|| TrendError::MissingChange(neighbor.item_id.clone()))?;
        queries += 1;
        match gateway.verify_membership_checked(text, &proposal.text) {
            Ok(true) => confirmed.push(neighbor.item_id.clone()),
            Ok(false) => {}
            Err(_) => failures += 1,
        }
        if mode == VerifyMode::EarlyExit && confirmed.len() >= n {
            break;
        }
    }
    let positive = confirmed.len() >= n;
    let diagnostic = (!positive && failures > k - n).then(|| {
        format!(
            "cannot reach N: {failures} backend failures exceed the shortlist slack of {} (k - N)",
            k - n
        )
    });
    confirmed.sort();
    Ok(VerificationResult {
        proposal_id: proposal.proposal_id.clone(),
        decision: if positive { Decision::Positive } else { Decision::Negative },
        confirmed_change_ids: confirmed,
        oracle_queries_used: queries,
        diagnostic,
    })
}

/// Ask the analyst about *every* change in the pool — the decision the
/// hybrid scheme approximates. Linear in the pool size; used as ground truth
/// by the evaluation harness and in tests.
pub fn verify_exhaustive(
    proposal: &TrendProposal,
    pool: &ChangePool,
    n: usize,
    gateway: &Gateway,
) -> Result<VerificationResult, TrendError> {
    if n == 0 {
        return Err(TrendError::BadParams("N must be at least 1".into()));
    }
    let mut confirmed = Vec::new();
    let mut queries = 0usize;
    for (id, text) in pool.texts() {
        queries += 1;
        if gateway.verify_membership_text(text, &proposal.text) {
            confirmed.push(id.clone());
        }
    }
    let positive = confirmed.len() >= n;
    Ok(VerificationResult {
        proposal_id: proposal.proposal_id.clone(),
        decision: if positive { Decision::Positive } else { Decision::Negative },
        confirmed_change_ids: confirmed,
        oracle_queries_used: queries,
        diagnostic: None,
    })
}

fn check_k_n(k: usize, n: usize) -> Result<(), TrendError> {
    if n == 0 || k < n {
        return Err(TrendError::BadParams(format!(
            "shortlist size k ({k}) must be >= threshold N ({n}) >= 1"
        )));
    }
    Ok(())
}

/// Cost picture of hybrid verification at a given pool size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetReport {
    pub pool_size: u64,
    pub k: u64,
    /// Analyst queries an exhaustive pass would issue.
    pub exhaustive_queries: u64,
    /// Upper bound on analyst queries the hybrid pass issues.
    pub hybrid_queries_max: u64,
    /// `exhaustive_queries / hybrid_queries_max` (1.0 for an empty pool).
    pub reduction_factor: f64,
}

/// Dry-run query accounting: no analyst calls, just the arithmetic of how
/// much the shortlist saves over the exhaustive pass.
pub fn verification_budget(pool_size: u64, k: u64) -> Result<BudgetReport, TrendError> {
    if k == 0 {
        return Err(TrendError::BadParams("shortlist size k must be at least 1".into()));
    }
    let hybrid_queries_max = pool_size.min(k);
    let reduction_factor = if hybrid_queries_max == 0 {
        1.0
    } else {
        pool_size as f64 / hybrid_queries_max as f64
    };
    Ok(BudgetReport {
        pool_size,
        k,
        exhaustive_queries: pool_size,
        hybrid_queries_max,
        reduction_factor,
    })
}

/// Keep changes whose before *and* after captures both fall inside the
/// window. Input order is preserved.
pub fn filter_time(
    changes: &[ChangeRecord],
    window: &TimeWindow,
) -> Result<Vec<ChangeRecord>, TrendError> {
    window.validate()?;
    Ok(changes.iter().filter(|c| window.contains(c)).cloned().collect())
}

/// Keep the changes relevant to a subject sentence: embed the subject, take
/// the `pool_size` nearest change texts, and keep those the analyst confirms
/// against the subject. Input order is preserved in the output.
///
/// `pool_size` must not exceed the number of changes offered. Changes whose
/// embedding call fails fall out of the candidate set (poison-recorded by
/// the gateway); analyst failures on the confirmation call conservatively
/// drop the change.
pub fn filter_subject(
    changes: &[ChangeRecord],
    subject: &str,
    pool_size: usize,
    gateway: &Gateway,
) -> Result<Vec<ChangeRecord>, TrendError> {
    if subject.trim().is_empty() {
        return Err(TrendError::BadParams("subject sentence is empty".into()));
    }
    if pool_size > changes.len() {
        return Err(TrendError::PoolSize { requested: pool_size, available: changes.len() });
    }
    let query = gateway.embed_text(subject)?;
    let (pool, _) = ChangePool::build(changes, gateway)?;
    let shortlist = pool.index().knn(&query, pool_size)?;
    let mut keep = BTreeSet::new();
    for neighbor in &shortlist {
        let text = pool
            .text(&neighbor.item_id)
            .ok_or_else(|| TrendError::MissingChange(neighbor.item_id.clone()))?;
        if gateway.verify_membership_text(text, subject) {
            keep.insert(neighbor.item_id.clone());
        }
    }
    Ok(changes.iter().filter(|c| keep.contains(&c.id)).cloned().collect())
}

/// Apply a [`QueryCondition`]: time window first, then subject filter.
///
/// The subject filter's `pool_size` defaults to everything that survived the
/// time window; an explicit `pool_size` larger than that is an error rather
/// than a silent clamp.
pub fn apply_conditions(
    changes: &[ChangeRecord],
    condition: &QueryCondition,
    gateway: &Gateway,
) -> Result<Vec<ChangeRecord>, TrendError> {
    condition.validate()?;
    let mut pool = match &condition.time_window {
        Some(window) => filter_time(changes, window)?,
        None => changes.to_vec(),
    };
    if let Some(subject) = &condition.subject {
        let pool_size = condition.pool_size.unwrap_or(pool.len());
        pool = filter_subject(&pool, subject, pool_size, gateway)?;
    }
    Ok(pool)
}

/// How to order proposals for verification triage.
#[derive(Debug, Clone, PartialEq)]
pub enum RankMode {
    /// Longest proposal text first (word count descending, ties by id).
    MostDetailed,
    /// Largest growth between two periods first: proposals are ordered by
    /// (members inside `post`) − (members inside `pre`), descending.
    PeriodDelta { pre: TimeWindow, post: TimeWindow },
    /// Round-robin across word-count buckets, longest bucket class first,
    /// so verification effort spreads over texts of varying detail.
    StratifiedByWordCount,
}

/// Resolve a mode name (as written in configs and on the command line) to a
/// [`RankMode`]. `period_delta` needs both windows.
pub fn parse_rank_mode(
    name: &str,
    pre: Option<TimeWindow>,
    post: Option<TimeWindow>,
) -> Result<RankMode, TrendError> {
    match name {
        "most_detailed" => Ok(RankMode::MostDetailed),
        "period_delta" => match (pre, post) {
            (Some(pre), Some(post)) => {
                pre.validate()?;
                post.validate()?;
                Ok(RankMode::PeriodDelta { pre, post })
            }
            _ => Err(TrendError::BadParams(
                "period_delta ranking needs both a pre and a post window".into(),
            )),
        },
        "stratified_by_word_count" => Ok(RankMode::StratifiedByWordCount),
        other => Err(TrendError::UnknownRankMode(other.to_string())),
    }
}

/// Index a change slice by id, for [`rank_proposals`] and the exporters.
pub fn changes_by_id(changes: &[ChangeRecord]) -> BTreeMap<String, ChangeRecord> {
    changes.iter().map(|c| (c.id.clone(), c.clone())).collect()
}

/// Order proposals under a [`RankMode`]. `changes` is consulted only by
/// `PeriodDelta` (source changes missing from the map count toward neither
/// window); all modes break ties by proposal id.
pub fn rank_proposals(
    proposals: &[TrendProposal],
    mode: &RankMode,
    changes: &BTreeMap<String, ChangeRecord>,
) -> Result<Vec<TrendProposal>, TrendError> {
    let mut ranked: Vec<TrendProposal> = proposals.to_vec();
    match mode {
        RankMode::MostDetailed => {
            ranked.sort_by(|a, b| {
                b.word_count
                    .cmp(&a.word_count)
                    .then_with(|| a.proposal_id.cmp(&b.proposal_id))
            });
        }
        RankMode::PeriodDelta { pre, post } => {
            pre.validate()?;
            post.validate()?;
            let delta = |p: &TrendProposal| -> i64 {
                let count = |w: &TimeWindow| {
                    p.source_change_ids
                        .iter()
                        .filter(|id| changes.get(*id).is_some_and(|c| w.contains(c)))
                        .count() as i64
                };
                count(post) - count(pre)
            };
            ranked.sort_by_cached_key(|p| (-delta(p), p.proposal_id.clone()));
        }
        RankMode::StratifiedByWordCount => {
            // Buckets keyed by exact word count, visited longest-first;
            // within a bucket, id order.
            let mut buckets: BTreeMap<usize, VecDeque<TrendProposal>> = BTreeMap::new();
            ranked.sort_by(|a, b| a.proposal_id.cmp(&b.proposal_id));
            for proposal in ranked.drain(..) {
                buckets.entry(proposal.word_count).or_default().push_back(proposal);
            }
            let mut queues: Vec<VecDeque<TrendProposal>> =
                buckets.into_values().rev().collect();
            while queues.iter().any(|q| !q.is_empty()) {
                for queue in &mut queues {
                    if let Some(p) = queue.pop_front() {
                        ranked.push(p);
                    }
                }
            }
        }
    }
    Ok(ranked)
}

/// Run the single-image "unusual things" query over whole sequences and
/// shape the findings as pseudo-changes so stage 2 runs on them unchanged:
/// empty before text, the finding as the after text, `after_index` 0 (there
/// is no image pair), and both capture times set to the image's timestamp.
///
/// Identical findings on one image collapse to a single record; findings
/// are returned sorted by id. Images whose analyst call fails are skipped
/// (the gateway poison-records them).
pub fn unusual_query(
    sequences: &[ImageSequence],
    gateway: &Gateway,
) -> Result<Vec<ChangeRecord>, TrendError> {
    let mut records: BTreeMap<String, ChangeRecord> = BTreeMap::new();
    for sequence in sequences {
        for image in &sequence.images {
            let findings = match gateway.unusual_things(image) {
                Ok(findings) => findings,
                Err(_) => continue,
            };
            for finding in findings {
                let finding = finding.trim();
                if finding.is_empty() {
                    continue;
                }
                let id = stable_id(
                    "unusual",
                    &[&sequence.location_id, &image.uri, &normalize_desc(finding)],
                );
                records.entry(id.clone()).or_insert_with(|| ChangeRecord {
                    id,
                    location_id: sequence.location_id.clone(),
                    before_desc: String::new(),
                    after_desc: finding.to_string(),
                    after_index: 0,
                    before_time: image.timestamp,
                    after_time: image.timestamp,
                    // No image pair, so the self-critic pass does not
                    // apply; store the finding as accepted.
                    critic_passed: true,
                    lat: image.lat,
                    lon: image.lon,
                });
            }
        }
    }
    Ok(records.into_values().collect())
}
