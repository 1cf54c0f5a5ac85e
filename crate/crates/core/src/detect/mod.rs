//! Stage 1: run the analyst over every image sequence, self-critique the
//! findings, and persist grounded, deduplicated change records.
//!
//! Also hosts the classical per-pair baseline scorers (HoG, color
//! histograms, embedding distance) used by the evaluation module.

mod baselines;

pub use baselines::{
    color_hist_pair_score, embedding_pair_score, hog_descriptor, hog_pair_score,
    CaptionThenEmbed, ImageEmbedder,
};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ImageSequence;
use crate::gateway::{Gateway, GatewayError, RawChange};
use crate::store::{stable_id, write_ndjson, Checkpoint, NdjsonAppender, StoreError};

/// File names used by the stage-1 store inside an output directory.
pub const RAW_CHANGES_FILE: &str = "changes.raw.ndjson";
pub const CHANGES_FILE: &str = "changes.ndjson";
pub const STAGE1_CHECKPOINT: &str = "checkpoints/stage1.ck";

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("cannot decode image {uri}: {source}")]
    Image {
        uri: String,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A confirmed semantic change at one location between two capture times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub id: String,
    pub location_id: String,
    pub before_desc: String,
    pub after_desc: String,
    /// 1-based index of the image the change happened after.
    pub after_index: usize,
    pub before_time: DateTime<Utc>,
    pub after_time: DateTime<Utc>,
    pub critic_passed: bool,
    pub lat: f64,
    pub lon: f64,
}

impl ChangeRecord {
    /// The canonical text of the change, as fed to abstraction and
    /// membership prompts. Pseudo-changes (e.g. unusual-thing findings)
    /// have an empty before state and read as their after description.
    pub fn full_text(&self) -> String {
        if self.before_desc.is_empty() {
            self.after_desc.clone()
        } else {
            format!("Before: {} After: {}", self.before_desc, self.after_desc)
        }
    }
}

/// One detector score for a consecutive image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub location_id: String,
    /// 1-based: pair i covers images i and i+1.
    pub pair_index: usize,
    pub score: f64,
}

/// Trim, collapse internal whitespace, and lowercase — the normalization
/// used by the dedup key so retry near-duplicates collapse.
pub fn normalize_desc(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Stable record id from the dedup key
/// (location, after_index, normalized descriptions).
pub fn change_record_id(
    location_id: &str,
    after_index: usize,
    before_desc: &str,
    after_desc: &str,
) -> String {
    stable_id(
        "change",
        &[
            location_id,
            &after_index.to_string(),
            &normalize_desc(before_desc),
            &normalize_desc(after_desc),
        ],
    )
}

/// Build a grounded [`ChangeRecord`] from a raw finding.
pub fn ground_change(
    sequence: &ImageSequence,
    change: &RawChange,
    critic_passed: bool,
) -> Option<ChangeRecord> {
    let (before_time, after_time) = sequence.pair_times(change.after_index)?;
    Some(ChangeRecord {
        id: change_record_id(
            &sequence.location_id,
            change.after_index,
            &change.before_desc,
            &change.after_desc,
        ),
        location_id: sequence.location_id.clone(),
        before_desc: change.before_desc.clone(),
        after_desc: change.after_desc.clone(),
        after_index: change.after_index,
        before_time,
        after_time,
        critic_passed,
        lat: sequence.lat,
        lon: sequence.lon,
    })
}

#[derive(Debug, Clone)]
pub struct Stage1Config {
    /// Apply one self-critic round to every finding; rejected findings are
    /// dropped. When disabled, records persist with `critic_passed: false`.
    pub critic_enabled: bool,
    /// Worker threads; defaults to the gateway's in-flight cap.
    pub workers: Option<usize>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { critic_enabled: true, workers: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub sequences_processed: usize,
    /// Sequences skipped because a previous run already processed them.
    pub sequences_resumed: usize,
    pub sequences_poisoned: usize,
    pub raw_findings: usize,
    pub critic_rejected: usize,
    pub line_errors: usize,
    /// Final deduplicated store size.
    pub records_written: usize,
}

struct SeqOutcome {
    /// Position in this run's work order, for deterministic writing.
    pos: usize,
    location_id: String,
    records: Vec<ChangeRecord>,
    poisoned: bool,
    raw_findings: usize,
    critic_rejected: usize,
    line_errors: usize,
}

/// Run stage 1 over `sequences`, writing into `out_dir`.
///
/// Work is checkpointed per sequence: an interrupted run resumes where it
/// stopped, and reprocessing is idempotent because the final store is
/// rebuilt from the raw shard by id-dedup and id-sort. Sequences whose
/// detection request exhausts its retries are poison-recorded by the
/// gateway, counted here, checkpointed as attempted, and excluded from the
/// store.
pub fn run_stage1(
    sequences: &[ImageSequence],
    gateway: &Gateway,
    config: &Stage1Config,
    out_dir: &Path,
) -> Result<Stage1Report, DetectError> {
    let raw_path = out_dir.join(RAW_CHANGES_FILE);
    let final_path = out_dir.join(CHANGES_FILE);
    let ck_path = out_dir.join(STAGE1_CHECKPOINT);
    std::fs::create_dir_all(out_dir)?;
    if let Some(parent) = ck_path.parent() {
        std::fs::create_dir_all(parent)?;
    }

    let mut checkpoint = Checkpoint::open(&ck_path)?;
    let mut report = Stage1Report::default();

    let todo: Vec<&ImageSequence> = sequences
        .iter()
        .filter(|s| !checkpoint.contains(&s.location_id))
        .collect();
    report.sequences_resumed = sequences.len() - todo.len();

    if !todo.is_empty() {
        let mut appender = NdjsonAppender::open(&raw_path)?;
        let workers = config
            .workers
            .unwrap_or_else(|| gateway.max_in_flight())
            .clamp(1, todo.len());
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<SeqOutcome>();

        std::thread::scope(|scope| -> Result<(), DetectError> {
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                let todo = &todo;
                scope.spawn(move || loop {
                    let pos = next.fetch_add(1, Ordering::SeqCst);
                    let Some(sequence) = todo.get(pos) else { break };
                    let outcome = process_sequence(sequence, gateway, config, pos);
                    if tx.send(outcome).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            // Reorder-buffer writer: results land in work order, so the raw
            // shard and checkpoint are byte-stable for a given input.
            let mut pending = std::collections::BTreeMap::new();
            let mut next_write = 0usize;
            for outcome in rx {
                pending.insert(outcome.pos, outcome);
                while let Some(outcome) = pending.remove(&next_write) {
                    next_write += 1;
                    for record in &outcome.records {
                        appender.append(record)?;
                    }
                    appender.sync()?;
                    checkpoint.commit_batch([outcome.location_id.clone()])?;
                    report.sequences_processed += 1;
                    report.sequences_poisoned += outcome.poisoned as usize;
                    report.raw_findings += outcome.raw_findings;
                    report.critic_rejected += outcome.critic_rejected;
                    report.line_errors += outcome.line_errors;
                }
            }
            Ok(())
        })?;
    }

    // Rebuild the final store from the raw shard: sort by id, collapse
    // duplicates. Atomic rewrite, so readers never see a half-built store.
    let mut records: Vec<ChangeRecord> = if raw_path.exists() {
        crate::store::read_ndjson(&raw_path)?
    } else {
        Vec::new()
    };
    records.sort_by(|a, b| a.id.cmp(&b.id));
    records.dedup_by(|a, b| a.id == b.id);
    write_ndjson(&final_path, &records)?;
    report.records_written = records.len();
    Ok(report)
}

fn process_sequence(
    sequence: &ImageSequence,
    gateway: &Gateway,
    config: &Stage1Config,
    pos: usize,
) -> SeqOutcome {
    let mut outcome = SeqOutcome {
        pos,
        location_id: sequence.location_id.clone(),
        records: Vec::new(),
        poisoned: false,
        raw_findings: 0,
        critic_rejected: 0,
        line_errors: 0,
    };
    let detected = match gateway.detect_changes(sequence) {
        Ok(detected) => detected,
        Err(_) => {
            // The gateway already retried and poison-recorded the request.
            outcome.poisoned = true;
            return outcome;
        }
    };
    outcome.raw_findings = detected.changes.len();
    outcome.line_errors = detected.errors.len();
    for change in detected.changes {
        let critic_passed = if config.critic_enabled {
            let keep = gateway.self_critic(&change, sequence);
            if !keep {
                outcome.critic_rejected += 1;
                continue;
            }
            true
        } else {
            false
        };
        if let Some(record) = ground_change(sequence, &change, critic_passed) {
            outcome.records.push(record);
        }
    }
    outcome
}

/// The set of image pairs that have at least one recorded change. Multiple
/// changes on one pair count once.
pub fn pairs_with_changes(records: &[ChangeRecord]) -> BTreeSet<(String, usize)> {
    records
        .iter()
        .map(|r| (r.location_id.clone(), r.after_index))
        .collect()
}

/// Load the finalized stage-1 store from an output directory.
pub fn load_changes(out_dir: &Path) -> Result<Vec<ChangeRecord>, DetectError> {
    Ok(crate::store::read_ndjson(&out_dir.join(CHANGES_FILE))?)
}

/// Path of the stage-1 store inside an output directory.
pub fn changes_path(out_dir: &Path) -> PathBuf {
    out_dir.join(CHANGES_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SeqImage;
    use crate::gateway::{
        GatewayConfig, LocationScript, PlantedChange, SyntheticBackend, SyntheticWorld,
    };
    use chrono::TimeZone;
    use std::sync::Arc;

    fn sequence(location_id: &str, images: usize) -> ImageSequence {
        ImageSequence {
            location_id: location_id.to_string(),
            lat: 40.0,
            lon: -74.0,
            heading: 0.0,
            images: (0..images)
                .map(|j| SeqImage {
                    uri: format!("img/{location_id}/{j:02}.png"),
                    timestamp: Utc.timestamp_opt(1_600_000_000 + j as i64 * 86_400, 0).unwrap(),
                    lat: 40.0,
                    lon: -74.0,
                    heading: 0.0,
                })
                .collect(),
        }
    }

    fn plant(world: &mut SyntheticWorld, loc: &str, idx: usize, before: &str, after: &str, hall: bool) {
        world
            .locations
            .entry(loc.to_string())
            .or_insert_with(LocationScript::default)
            .changes
            .push(PlantedChange {
                after_index: idx,
                before: before.to_string(),
                after: after.to_string(),
                hallucination: hall,
            });
    }

    fn test_world() -> SyntheticWorld {
        let mut world = SyntheticWorld::new(8, 7);
        plant(&mut world, "loc-a", 2, "No awning.", "A striped awning appeared.", false);
        plant(&mut world, "loc-a", 5, "The wall was blank.", "A mural covers the wall.", false);
        plant(&mut world, "loc-b", 3, "The lot was empty.", "A kiosk stands in the lot.", false);
        plant(&mut world, "loc-b", 8, "Old signage.", "New signage.", false);
        plant(&mut world, "loc-c", 1, "A phone booth stood here.", "The phone booth is gone.", false);
        world
    }

    fn gateway_for(world: &SyntheticWorld) -> Gateway {
        Gateway::new(
            Arc::new(SyntheticBackend::new(world.clone())),
            GatewayConfig { max_in_flight: 4, ..GatewayConfig::default() },
        )
        .unwrap()
    }

    fn seqs() -> Vec<ImageSequence> {
        vec![sequence("loc-a", 12), sequence("loc-b", 12), sequence("loc-c", 12)]
    }

    #[test]
    fn planted_changes_become_records() {
        let world = test_world();
        let gateway = gateway_for(&world);
        let dir = tempfile::tempdir().unwrap();
        let report =
            run_stage1(&seqs(), &gateway, &Stage1Config::default(), dir.path()).unwrap();
        assert_eq!(report.records_written, 5);
        assert_eq!(report.sequences_processed, 3);
        assert_eq!(report.sequences_poisoned, 0);
        assert_eq!(report.critic_rejected, 0);

        let records = load_changes(dir.path()).unwrap();
        assert_eq!(records.len(), 5);
        assert!(records.iter().all(|r| r.critic_passed));
        // Ids are sorted and timestamps ground to the sequence.
        for w in records.windows(2) {
            assert!(w[0].id < w[1].id);
        }
        let seq_a = sequence("loc-a", 12);
        let rec = records
            .iter()
            .find(|r| r.location_id == "loc-a" && r.after_index == 2)
            .unwrap();
        let (before, after) = seq_a.pair_times(2).unwrap();
        assert_eq!(rec.before_time, before);
        assert_eq!(rec.after_time, after);
        assert!(rec.before_time <= rec.after_time);
    }

    #[test]
    fn critic_filters_hallucinations() {
        let mut world = test_world();
        plant(&mut world, "loc-a", 7, "A ghost sign.", "The ghost sign moved.", true);
        plant(&mut world, "loc-c", 4, "Imagined scaffolding.", "It vanished.", true);

        let gateway = gateway_for(&world);
        let on_dir = tempfile::tempdir().unwrap();
        let report_on = run_stage1(
            &seqs(),
            &gateway,
            &Stage1Config { critic_enabled: true, workers: None },
            on_dir.path(),
        )
        .unwrap();
        assert_eq!(report_on.records_written, 5);
        assert_eq!(report_on.critic_rejected, 2);

        let gateway = gateway_for(&world);
        let off_dir = tempfile::tempdir().unwrap();
        let report_off = run_stage1(
            &seqs(),
            &gateway,
            &Stage1Config { critic_enabled: false, workers: None },
            off_dir.path(),
        )
        .unwrap();
        assert_eq!(report_off.records_written, 7);

        // Critic-off records carry critic_passed = false.
        let off_records = load_changes(off_dir.path()).unwrap();
        assert!(off_records.iter().all(|r| !r.critic_passed));

        // Monotonicity: critic-on ids are a subset of critic-off ids.
        let on_ids: BTreeSet<String> =
            load_changes(on_dir.path()).unwrap().into_iter().map(|r| r.id).collect();
        let off_ids: BTreeSet<String> = off_records.into_iter().map(|r| r.id).collect();
        assert!(on_ids.is_subset(&off_ids));
    }

    #[test]
    fn near_duplicate_findings_collapse() {
        let mut world = SyntheticWorld::new(8, 7);
        plant(&mut world, "loc-a", 2, "No awning.", "A striped awning appeared.", false);
        plant(&mut world, "loc-a", 2, "  no   AWNING. ", "A striped  awning APPEARED.", false);
        let gateway = gateway_for(&world);
        let dir = tempfile::tempdir().unwrap();
        let report = run_stage1(
            &[sequence("loc-a", 12)],
            &gateway,
            &Stage1Config::default(),
            dir.path(),
        )
        .unwrap();
        assert_eq!(report.raw_findings, 2);
        assert_eq!(report.records_written, 1);
    }

    #[test]
    fn empty_sequence_set_yields_empty_store() {
        let gateway = gateway_for(&SyntheticWorld::new(8, 7));
        let dir = tempfile::tempdir().unwrap();
        let report =
            run_stage1(&[], &gateway, &Stage1Config::default(), dir.path()).unwrap();
        assert_eq!(report.records_written, 0);
        assert!(load_changes(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn interrupted_run_resumes_to_the_same_store() {
        let world = test_world();
        let sequences = seqs();

        // Reference: one uninterrupted run.
        let full_dir = tempfile::tempdir().unwrap();
        run_stage1(&sequences, &gateway_for(&world), &Stage1Config::default(), full_dir.path())
            .unwrap();
        let reference = std::fs::read(full_dir.path().join(CHANGES_FILE)).unwrap();

        // Interrupted: first run sees only part of the corpus, second run
        // resumes with all of it.
        let part_dir = tempfile::tempdir().unwrap();
        run_stage1(
            &sequences[..1],
            &gateway_for(&world),
            &Stage1Config::default(),
            part_dir.path(),
        )
        .unwrap();
        let resumed = run_stage1(
            &sequences,
            &gateway_for(&world),
            &Stage1Config::default(),
            part_dir.path(),
        )
        .unwrap();
        assert_eq!(resumed.sequences_resumed, 1);
        assert_eq!(resumed.sequences_processed, 2);
        let rebuilt = std::fs::read(part_dir.path().join(CHANGES_FILE)).unwrap();
        assert_eq!(rebuilt, reference);
    }

    #[test]
    fn torn_raw_shard_dedups_on_finalize() {
        // Simulate a crash after the raw append but before the checkpoint
        // commit: the sequence is reprocessed and its records appear twice
        // in the raw shard. Finalization must collapse them.
        let world = test_world();
        let sequences = vec![sequence("loc-a", 12)];
        let dir = tempfile::tempdir().unwrap();
        run_stage1(&sequences, &gateway_for(&world), &Stage1Config::default(), dir.path())
            .unwrap();

        // Duplicate the raw shard contents and nuke the checkpoint.
        let raw_path = dir.path().join(RAW_CHANGES_FILE);
        let raw = std::fs::read_to_string(&raw_path).unwrap();
        std::fs::write(&raw_path, format!("{raw}{raw}")).unwrap();
        std::fs::remove_file(dir.path().join(STAGE1_CHECKPOINT)).unwrap();

        let report =
            run_stage1(&sequences, &gateway_for(&world), &Stage1Config::default(), dir.path())
                .unwrap();
        assert_eq!(report.records_written, 2);
        let records = load_changes(dir.path()).unwrap();
        let ids: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), records.len(), "duplicates survived finalize");
    }

    #[test]
    fn pair_sets_discard_multiplicity() {
        assert!(pairs_with_changes(&[]).is_empty());

        let seq = sequence("L1", 12);
        let rec = |idx: usize, text: &str| {
            ground_change(
                &seq,
                &RawChange {
                    before_desc: text.to_string(),
                    after_desc: format!("{text} after"),
                    after_index: idx,
                },
                true,
            )
            .unwrap()
        };
        // Two changes at the same pair count once.
        let set = pairs_with_changes(&[rec(2, "a"), rec(2, "b")]);
        assert_eq!(set.len(), 1);
        assert!(set.contains(&("L1".to_string(), 2)));
        // Different pairs count separately.
        let set = pairs_with_changes(&[rec(2, "a"), rec(3, "b")]);
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn full_text_reads_naturally() {
        let seq = sequence("L1", 12);
        let rec = ground_change(
            &seq,
            &RawChange {
                before_desc: "A".into(),
                after_desc: "B".into(),
                after_index: 1,
            },
            true,
        )
        .unwrap();
        assert_eq!(rec.full_text(), "Before: A After: B");
        let mut pseudo = rec.clone();
        pseudo.before_desc = String::new();
        pseudo.after_desc = "A strange sculpture.".into();
        assert_eq!(pseudo.full_text(), "A strange sculpture.");
    }

    #[test]
    fn normalization_collapses_retry_noise() {
        assert_eq!(normalize_desc("  The   WALL  was Blank. "), "the wall was blank.");
        assert_eq!(
            change_record_id("L", 3, "The wall", "A mural"),
            change_record_id("L", 3, " the  WALL ", "a MURAL")
        );
        assert_ne!(
            change_record_id("L", 3, "The wall", "A mural"),
            change_record_id("L", 4, "The wall", "A mural")
        );
    }
}
