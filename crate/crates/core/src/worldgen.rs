//! Seeded synthetic worlds.
//!
//! Real corpora need a vision-language model and millions of images; these
//! generators build small, fully scripted stand-ins whose ground truth is
//! known by construction, so pipeline behavior can be asserted exactly. Three
//! shapes cover the test surface:
//!
//! * [`build_trend_world`] — a bare change pool with scripted memberships and
//!   embeddings of controllable quality, for exercising verification and the
//!   accuracy protocols;
//! * [`build_detect_world`] — per-location image sequences with planted
//!   genuine changes and hallucinated ones, for stage-1 and self-critic
//!   evaluation;
//! * [`build_city_world`] — a complete capture-point corpus with planted
//!   city-wide trends and sub-threshold distractors, for end-to-end runs.
//!
//! Every generator is a pure function of its parameter struct (all
//! randomness flows from the seed), so worlds are reproducible anywhere.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CapturePoint, ImageSequence, SeqImage};
use crate::detect::ChangeRecord;
use crate::embedding::EmbeddingVector;
use crate::eval::{planted_key, ChangeKey, LabeledMembership, LabeledPair};
use crate::gateway::{AbstractionScript, LocationScript, PlantedChange, SyntheticWorld};
use crate::geo::{meters_to_lat_deg, meters_to_lon_deg};
use crate::store::{stable_id, write_ndjson, StoreError};
use crate::trends::TrendProposal;

/// How informative the scripted embeddings are about true membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldFlavor {
    /// Every member embeds strictly nearer to its proposal than every
    /// non-member. Guaranteed by construction: proposal centers are
    /// orthogonal basis directions, members get a tiny perturbation, and
    /// everything else lives on a far-away axis.
    Monotone,
    /// Members are nearer on average with mild noise; orderings mostly hold.
    Informative,
    /// Heavy noise; nearest-neighbor shortlists miss real members at small
    /// sizes.
    Noisy,
}

impl WorldFlavor {
    fn sigma(self) -> f64 {
        match self {
            WorldFlavor::Monotone => 0.01,
            WorldFlavor::Informative => 0.25,
            WorldFlavor::Noisy => 0.7,
        }
    }
}

/// Parameters for [`build_trend_world`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrendWorldParams {
    pub seed: u64,
    pub pool_size: usize,
    pub proposal_count: usize,
    pub embed_dim: usize,
    /// Per-proposal true member count, drawn uniformly (inclusive). Member
    /// assignments never overlap; if the draws exceed the pool the later
    /// proposals get whatever remains.
    pub members_range: (usize, usize),
    pub flavor: WorldFlavor,
}

impl TrendWorldParams {
    pub fn new(seed: u64, flavor: WorldFlavor) -> Self {
        Self {
            seed,
            pool_size: 400,
            proposal_count: 10,
            embed_dim: 24,
            members_range: (0, 40),
            flavor,
        }
    }
}

/// A scripted change pool plus the proposals and ground truth that go with
/// it.
pub struct TrendWorld {
    pub world: SyntheticWorld,
    pub changes: Vec<ChangeRecord>,
    pub proposals: Vec<TrendProposal>,
    /// True member change ids per proposal, parallel to `proposals`.
    pub members: Vec<BTreeSet<String>>,
}

fn ts(days: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(1_577_836_800 + days * 86_400, 0).unwrap() // 2020-01-01
}

fn unit_noise(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v = unit_noise(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

fn perturbed(center: &[f32], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let noise = unit_noise(rng, center.len());
    center
        .iter()
        .zip(noise)
        .map(|(c, n)| (*c as f64 + sigma * n) as f32)
        .collect()
}

/// Build a change pool with `proposal_count` scripted trends.
pub fn build_trend_world(params: &TrendWorldParams) -> TrendWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let monotone = params.flavor == WorldFlavor::Monotone;
    // Monotone separation wants exactly orthogonal centers, which needs one
    // axis per proposal plus one for the unaffiliated rest.
    let dim = if monotone {
        params.embed_dim.max(params.proposal_count + 1)
    } else {
        params.embed_dim
    };
    let sigma = params.flavor.sigma();
    let mut world = SyntheticWorld::new(dim, params.seed);

    let basis = |axis: usize| -> Vec<f32> {
        let mut v = vec![0.0f32; dim];
        v[axis] = 1.0;
        v
    };
    let centers: Vec<Vec<f32>> = (0..params.proposal_count)
        .map(|p| if monotone { basis(p) } else { random_unit(&mut rng, dim) })
        .collect();
    let junk_center = if monotone { basis(params.proposal_count) } else { Vec::new() };

    let mut proposals = Vec::new();
    for (p, _) in centers.iter().enumerate() {
        let text =
            format!("Recurring pattern {p} appeared across the city (world {}).", params.seed);
        world.embeddings.insert(text.clone(), centers[p].clone());
        proposals.push(TrendProposal {
            proposal_id: stable_id("proposal", &[&params.seed.to_string(), &p.to_string()]),
            word_count: text.split_whitespace().count(),
            text,
            source_change_ids: Vec::new(),
            member_count: 0,
        });
    }

    let counts: Vec<usize> = (0..params.proposal_count)
        .map(|_| rng.random_range(params.members_range.0..=params.members_range.1))
        .collect();

    let mut changes = Vec::new();
    let mut members = vec![BTreeSet::new(); params.proposal_count];
    let mut owner = Vec::new(); // proposal index per member change, in order
    for (p, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            if owner.len() >= params.pool_size {
                break;
            }
            owner.push(Some(p));
        }
    }
    while owner.len() < params.pool_size {
        owner.push(None);
    }

    for (i, owner) in owner.iter().enumerate() {
        let (before, after) = match owner {
            Some(p) => (
                format!("Site {i} lacked pattern {p} (world {}).", params.seed),
                format!("Site {i} gained pattern {p} (world {}).", params.seed),
            ),
            None => (
                format!("Site {i} before, unremarkable (world {}).", params.seed),
                format!("Site {i} after, still unremarkable (world {}).", params.seed),
            ),
        };
        let record = ChangeRecord {
            id: stable_id("wchange", &[&params.seed.to_string(), &i.to_string()]),
            location_id: format!("w{}-loc-{i:04}", params.seed),
            before_desc: before,
            after_desc: after,
            after_index: 1,
            before_time: ts((i % 300) as i64),
            after_time: ts((i % 300) as i64 + 30),
            critic_passed: true,
            lat: 40.0 + 0.001 * (i / 100) as f64,
            lon: -74.0 + 0.001 * (i % 100) as f64,
        };
        let text = record.full_text();
        let embedding = match owner {
            Some(p) => perturbed(&centers[*p], sigma, &mut rng),
            None if monotone => perturbed(&junk_center, sigma, &mut rng),
            None => random_unit(&mut rng, dim),
        };
        world.embeddings.insert(text.clone(), embedding);
        if let Some(p) = owner {
            world
                .memberships
                .entry(text)
                .or_default()
                .insert(proposals[*p].text.clone());
            members[*p].insert(record.id.clone());
        }
        changes.push(record);
    }

    for (p, proposal) in proposals.iter_mut().enumerate() {
        proposal.source_change_ids = members[p].iter().cloned().collect();
        proposal.member_count = members[p].len();
    }

    TrendWorld { world, changes, proposals, members }
}

/// True iff, for every proposal with both members and non-members, the
/// farthest member embeds strictly nearer than the nearest non-member.
pub fn is_monotone(tw: &TrendWorld) -> bool {
    let embed = |text: &str| -> EmbeddingVector {
        EmbeddingVector::normalized(tw.world.raw_embedding(text))
            .expect("world embeddings are finite and nonzero")
    };
    for (p, proposal) in tw.proposals.iter().enumerate() {
        let center = embed(&proposal.text);
        let mut max_member = f64::NEG_INFINITY;
        let mut min_other = f64::INFINITY;
        for change in &tw.changes {
            let d = 1.0 - center.dot(&embed(&change.full_text())).expect("same dim");
            if tw.members[p].contains(&change.id) {
                max_member = max_member.max(d);
            } else {
                min_other = min_other.min(d);
            }
        }
        if max_member >= min_other {
            return false;
        }
    }
    true
}

/// Balanced membership labels for a trend world: up to `per_proposal`
/// labels per proposal, half true members, half non-members, sampled
/// deterministically.
pub fn membership_labels(tw: &TrendWorld, per_proposal: usize, seed: u64) -> Vec<LabeledMembership> {
    let mut labels = Vec::new();
    let all_ids: Vec<&String> = tw.changes.iter().map(|c| &c.id).collect();
    for (p, proposal) in tw.proposals.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x9E37_79B9));
        let members: Vec<&String> = tw.members[p].iter().collect();
        let others: Vec<&&String> =
            all_ids.iter().filter(|id| !tw.members[p].contains(**id)).collect();
        let half = per_proposal / 2;
        for id in members.choose_multiple(&mut rng, half.min(members.len())) {
            labels.push(LabeledMembership {
                trend_id: proposal.proposal_id.clone(),
                change_id: (*id).clone(),
                belongs: true,
            });
        }
        for id in others.choose_multiple(&mut rng, half.min(others.len())) {
            labels.push(LabeledMembership {
                trend_id: proposal.proposal_id.clone(),
                change_id: (**id).clone(),
                belongs: false,
            });
        }
    }
    labels
}

/// Parameters for [`build_detect_world`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectWorldParams {
    pub seed: u64,
    pub locations: usize,
    pub images_per_location: usize,
    /// Planted findings per location, drawn uniformly (inclusive).
    pub findings_range: (usize, usize),
    /// Probability that a planted finding is a hallucination (visible to
    /// the detector but rejected by ground truth and the critic).
    pub hallucination_rate: f64,
}

impl Default for DetectWorldParams {
    fn default() -> Self {
        Self {
            seed: 0,
            locations: 40,
            images_per_location: 12,
            findings_range: (1, 3),
            hallucination_rate: 0.3,
        }
    }
}

/// Image sequences with planted detections and their ground truth.
pub struct DetectWorld {
    pub world: SyntheticWorld,
    pub sequences: Vec<ImageSequence>,
    /// Keys of the genuine planted changes.
    pub truth: BTreeSet<ChangeKey>,
    /// (location, pair) slots holding at least one genuine change.
    pub genuine_pairs: BTreeSet<(String, usize)>,
    pub planted_genuine: usize,
    pub planted_hallucinations: usize,
}

impl DetectWorld {
    /// Full label cover for the sequences: a pair is positive iff a genuine
    /// change was planted on it.
    pub fn pair_labels(&self) -> Vec<LabeledPair> {
        let mut labels = Vec::new();
        for sequence in &self.sequences {
            for pair_index in 1..sequence.images.len() {
                labels.push(LabeledPair {
                    location_id: sequence.location_id.clone(),
                    pair_index,
                    has_change: self
                        .genuine_pairs
                        .contains(&(sequence.location_id.clone(), pair_index)),
                });
            }
        }
        labels
    }
}

const SUBJECTS: &[&str] = &[
    "awning", "mural", "bench", "planter", "kiosk", "scaffold", "signage", "fence",
    "bus shelter", "bike rack", "newsstand", "hydrant",
];

/// Build per-location sequences with planted genuine changes and
/// hallucinations at the configured rate.
pub fn build_detect_world(params: &DetectWorldParams) -> DetectWorld {
    assert!(params.images_per_location >= 2, "sequences need at least one pair");
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut world = SyntheticWorld::new(16, params.seed);
    let mut sequences = Vec::new();
    let mut truth = BTreeSet::new();
    let mut genuine_pairs = BTreeSet::new();
    let mut planted_genuine = 0usize;
    let mut planted_hallucinations = 0usize;

    for l in 0..params.locations {
        let location_id = format!("w{}loc{l:03}", params.seed);
        let lat = 40.70 + 0.0005 * (l / 50) as f64;
        let lon = -74.00 + 0.0005 * (l % 50) as f64;
        let images: Vec<SeqImage> = (0..params.images_per_location)
            .map(|j| SeqImage {
                uri: format!("img/{location_id}/{j:02}.png"),
                timestamp: ts(30 * j as i64),
                lat,
                lon,
                heading: 0.0,
            })
            .collect();
        let pairs = images.len() - 1;
        let n_findings = rng
            .random_range(params.findings_range.0..=params.findings_range.1)
            .min(pairs);
        let mut slots = rand::seq::index::sample(&mut rng, pairs, n_findings).into_vec();
        slots.sort_unstable();
        let mut script = LocationScript::default();
        for slot in slots {
            let after_index = slot + 1;
            let subject = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
            let hallucination = rng.random::<f64>() < params.hallucination_rate;
            let before = format!("No {subject} at {location_id} pair {after_index}.");
            let after = format!("A new {subject} at {location_id} pair {after_index}.");
            if hallucination {
                planted_hallucinations += 1;
            } else {
                planted_genuine += 1;
                truth.insert(planted_key(&location_id, after_index, &before, &after));
                genuine_pairs.insert((location_id.clone(), after_index));
            }
            script.changes.push(PlantedChange { after_index, before, after, hallucination });
        }
        world.locations.insert(location_id.clone(), script);
        sequences.push(ImageSequence { location_id, lat, lon, heading: 0.0, images });
    }

    DetectWorld {
        world,
        sequences,
        truth,
        genuine_pairs,
        planted_genuine,
        planted_hallucinations,
    }
}

/// Parameters for [`build_city_world`].
#[derive(Debug, Clone, PartialEq)]
pub struct CityWorldParams {
    pub seed: u64,
    /// Planted city-wide trends.
    pub trends: usize,
    /// Member locations per trend.
    pub locations_per_trend: usize,
    /// Sub-threshold distractor patterns.
    pub distractors: usize,
    /// Member locations per distractor (too few to clear the cluster
    /// filter).
    pub locations_per_distractor: usize,
    pub images_per_location: usize,
    /// Scripted abstraction texts per trend change; all land in one canopy.
    pub paraphrases: usize,
    /// (lat, lon) of the street grid's corner.
    pub origin: (f64, f64),
    /// Grid spacing between locations, meters.
    pub spacing_m: f64,
    /// Per-image position jitter, meters (the first image of a location
    /// stays exactly on the grid).
    pub jitter_m: f64,
    pub embed_dim: usize,
}

impl Default for CityWorldParams {
    fn default() -> Self {
        Self {
            seed: 0,
            trends: 5,
            locations_per_trend: 30,
            distractors: 50,
            locations_per_distractor: 2,
            images_per_location: 12,
            paraphrases: 3,
            origin: (40.75, -73.99),
            spacing_m: 20.0,
            jitter_m: 0.5,
            embed_dim: 16,
        }
    }
}

/// Ground truth for one planted trend.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTrend {
    /// The paraphrase set; any of these may surface as the proposal text.
    pub texts: Vec<String>,
    /// Location ids as they appear downstream (the first capture point of
    /// each member location).
    pub location_ids: Vec<String>,
    /// (lat, lon) of each member location.
    pub coords: Vec<(f64, f64)>,
}

/// A full synthetic corpus: capture points, the scripted analyst world, and
/// the planted ground truth.
pub struct CityWorld {
    pub world: SyntheticWorld,
    pub points: Vec<CapturePoint>,
    pub planted: Vec<PlantedTrend>,
    /// Every genuine planted change (trend members and distractors).
    pub truth: BTreeSet<ChangeKey>,
}

const TREND_NOUNS: &[&str] = &[
    "parklet", "mural", "bike rack", "planter box", "awning", "food kiosk", "bench",
    "fountain", "streetlight banner", "tree pit fence",
];

fn trend_paraphrases(t: usize, count: usize) -> Vec<String> {
    let noun = if t < TREND_NOUNS.len() {
        TREND_NOUNS[t].to_string()
    } else {
        format!("{} (variant {t})", TREND_NOUNS[t % TREND_NOUNS.len()])
    };
    let forms = [
        format!("New {noun} installations appeared on many streets."),
        format!("Many corners gained a new {noun} this season."),
        format!("A wave of {noun} additions spread through the neighborhood."),
        format!("Fresh {noun} fixtures turned up all over town."),
        format!("The city saw {noun} upgrades at one corner after another."),
    ];
    (0..count).map(|i| forms[i % forms.len()].clone()).collect()
}

/// Build the planted-trend city corpus.
pub fn build_city_world(params: &CityWorldParams) -> CityWorld {
    assert!(params.images_per_location >= 3, "need room for a change pair");
    assert!(params.paraphrases >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut world = SyntheticWorld::new(params.embed_dim, params.seed);
    assert!(params.trends < params.embed_dim, "one axis per trend center");

    let mut points = Vec::new();
    let mut planted = Vec::new();
    let mut truth = BTreeSet::new();

    let total_locations =
        params.trends * params.locations_per_trend + params.distractors * params.locations_per_distractor;
    let cols = (total_locations as f64).sqrt().ceil() as usize;
    let mut grid_slot = 0usize;
    let location_coords = |grid_slot: usize| -> (f64, f64) {
        let row = grid_slot / cols;
        let col = grid_slot % cols;
        (
            params.origin.0 + meters_to_lat_deg(params.spacing_m * row as f64),
            params.origin.1 + meters_to_lon_deg(params.spacing_m * col as f64, params.origin.0),
        )
    };

    let emit_location = |name: &str,
                             grid_slot: usize,
                             points: &mut Vec<CapturePoint>,
                             rng: &mut ChaCha8Rng|
     -> (f64, f64) {
        let (lat, lon) = location_coords(grid_slot);
        for j in 0..params.images_per_location {
            let (dlat, dlon) = if j == 0 {
                (0.0, 0.0)
            } else {
                let r = rng.random::<f64>() * params.jitter_m;
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                (
                    meters_to_lat_deg(r * theta.sin()),
                    meters_to_lon_deg(r * theta.cos(), lat),
                )
            };
            points.push(CapturePoint {
                id: format!("{name}/{j:02}"),
                lat: lat + dlat,
                lon: lon + dlon,
                timestamp: ts(30 * j as i64),
                image_uri: format!("img/{name}/{j:02}.png"),
                heading: 0.0,
            });
        }
        (lat, lon)
    };

    for t in 0..params.trends {
        let texts = trend_paraphrases(t, params.paraphrases);
        let mut center = vec![0.0f32; params.embed_dim];
        center[t] = 1.0;
        for text in &texts {
            world.embeddings.insert(text.clone(), perturbed(&center, 0.01, &mut rng));
        }
        let mut location_ids = Vec::new();
        let mut coords = Vec::new();
        for l in 0..params.locations_per_trend {
            let name = format!("t{t:02}l{l:02}");
            let (lat, lon) = emit_location(&name, grid_slot, &mut points, &mut rng);
            grid_slot += 1;
            let after_index = 1 + rng.random_range(1..params.images_per_location - 1);
            let noun_phrase = &texts[0];
            let before = format!("The corner at {name} had no sign of it: {noun_phrase}");
            let after = format!("It arrived at {name}: {noun_phrase}");
            world.locations.insert(
                name.clone(),
                LocationScript {
                    changes: vec![PlantedChange {
                        after_index,
                        before: before.clone(),
                        after: after.clone(),
                        hallucination: false,
                    }],
                },
            );
            let full_text = format!("Before: {before} After: {after}");
            world
                .embeddings
                .insert(full_text.clone(), perturbed(&center, 0.02, &mut rng));
            world.abstractions.insert(
                full_text.clone(),
                AbstractionScript { texts: texts.clone(), grid: Some((1, params.paraphrases)) },
            );
            world
                .memberships
                .entry(full_text)
                .or_default()
                .extend(texts.iter().cloned());
            let selected = format!("{name}/00");
            truth.insert(planted_key(&selected, after_index, &before, &after));
            location_ids.push(selected);
            coords.push((lat, lon));
        }
        planted.push(PlantedTrend { texts, location_ids, coords });
    }

    for d in 0..params.distractors {
        let phrase = format!("An uncommon oddity of kind {d} turned up here.");
        for l in 0..params.locations_per_distractor {
            let name = format!("d{d:02}l{l}");
            emit_location(&name, grid_slot, &mut points, &mut rng);
            grid_slot += 1;
            let after_index = 1 + rng.random_range(1..params.images_per_location - 1);
            let before = format!("Nothing odd at {name} yet.");
            let after = format!("Oddity {d} appeared at {name}.");
            world.locations.insert(
                name.clone(),
                LocationScript {
                    changes: vec![PlantedChange {
                        after_index,
                        before: before.clone(),
                        after: after.clone(),
                        hallucination: false,
                    }],
                },
            );
            let full_text = format!("Before: {before} After: {after}");
            world.abstractions.insert(
                full_text,
                AbstractionScript { texts: vec![phrase.clone()], grid: None },
            );
            truth.insert(planted_key(&format!("{name}/00"), after_index, &before, &after));
        }
    }

    CityWorld { world, points, planted, truth }
}

/// Write capture points as a newline-delimited manifest, the format the
/// ingest stage reads.
pub fn write_manifest(path: &Path, points: &[CapturePoint]) -> Result<(), StoreError> {
    write_ndjson(path, points)
}
