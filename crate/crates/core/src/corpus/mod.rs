//! Corpus ingestion: capture points, location selection, and per-location
//! chronological image sequences.
//!
//! Raw capture metadata arrives as a newline-delimited manifest. Points are
//! grouped by proximity (grouping radius, default 1.8 m), non-redundant
//! locations are picked by greedy non-maximum suppression over neighbor
//! counts, and each selected location becomes one chronologically sorted
//! image sequence of at least `min_images` images.

mod manifest;
mod nms;

pub use manifest::{ingest_manifest, IngestOutcome, RejectedLine};
pub use nms::{count_neighbors, sample_candidates, select_locations_nms, SpatialGrid};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::haversine_m;

/// Default grouping radius in meters.
pub const DEFAULT_RADIUS_M: f64 = 1.8;
/// Default minimum images per sequence.
pub const DEFAULT_MIN_IMAGES: usize = 10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read manifest {path}: {source}")]
    Unreadable {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("radius must be positive, got {0}")]
    BadRadius(f64),
}

/// One raw capture: a posed, timestamped image reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapturePoint {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: DateTime<Utc>,
    pub image_uri: String,
    pub heading: f64,
}

/// A selected viewpoint with its neighbor count at the grouping radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub heading: f64,
    pub neighbor_count: usize,
}

/// One image of a sequence, with its capture pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqImage {
    pub uri: String,
    pub timestamp: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    pub heading: f64,
}

/// Chronologically sorted images around one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSequence {
    pub location_id: String,
    pub lat: f64,
    pub lon: f64,
    pub heading: f64,
    pub images: Vec<SeqImage>,
}

impl ImageSequence {
    /// Number of consecutive image pairs, i.e. valid 1-based `after_index`
    /// values are `1..=pair_count()`.
    pub fn pair_count(&self) -> usize {
        self.images.len().saturating_sub(1)
    }

    /// Timestamps of the evidence pair for a 1-based `after_index`.
    pub fn pair_times(&self, after_index: usize) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
        if after_index == 0 || after_index >= self.images.len() {
            return None;
        }
        Some((self.images[after_index - 1].timestamp, self.images[after_index].timestamp))
    }
}

/// A location that produced too few images to keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRejection {
    pub location_id: String,
    pub image_count: usize,
    pub min_images: usize,
}

/// Collect the images within `radius_m` of `location`, sorted by
/// (timestamp, id). Rejects locations with fewer than `min_images` members.
pub fn assemble_sequence(
    location: &Location,
    points: &[CapturePoint],
    radius_m: f64,
    min_images: usize,
) -> Result<ImageSequence, SequenceRejection> {
    let mut members: Vec<&CapturePoint> = points
        .iter()
        .filter(|p| haversine_m(location.lat, location.lon, p.lat, p.lon) <= radius_m)
        .collect();
    if members.len() < min_images {
        return Err(SequenceRejection {
            location_id: location.id.clone(),
            image_count: members.len(),
            min_images,
        });
    }
    members.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
    Ok(ImageSequence {
        location_id: location.id.clone(),
        lat: location.lat,
        lon: location.lon,
        heading: location.heading,
        images: members
            .into_iter()
            .map(|p| SeqImage {
                uri: p.image_uri.clone(),
                timestamp: p.timestamp,
                lat: p.lat,
                lon: p.lon,
                heading: p.heading,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn point(id: &str, lat: f64, lon: f64, ts: i64) -> CapturePoint {
        CapturePoint {
            id: id.into(),
            lat,
            lon,
            timestamp: Utc.timestamp_opt(ts, 0).unwrap(),
            image_uri: format!("img/{id}.png"),
            heading: 90.0,
        }
    }

    fn loc(id: &str, lat: f64, lon: f64) -> Location {
        Location { id: id.into(), lat, lon, heading: 90.0, neighbor_count: 0 }
    }

    #[test]
    fn sorts_shuffled_timestamps() {
        let mut points: Vec<CapturePoint> =
            (0..12).map(|i| point(&format!("p{i:02}"), 0.0, 0.0, 1000 - i * 7)).collect();
        points.rotate_left(5);
        let seq = assemble_sequence(&loc("L", 0.0, 0.0), &points, 1.8, 10).unwrap();
        assert_eq!(seq.images.len(), 12);
        for w in seq.images.windows(2) {
            assert!(w[0].timestamp <= w[1].timestamp);
        }
    }

    #[test]
    fn rejects_below_min_images() {
        let points: Vec<CapturePoint> =
            (0..9).map(|i| point(&format!("p{i}"), 0.0, 0.0, i as i64)).collect();
        let err = assemble_sequence(&loc("L", 0.0, 0.0), &points, 1.8, 10).unwrap_err();
        assert_eq!(err.image_count, 9);
        assert_eq!(err.min_images, 10);
    }

    #[test]
    fn equal_timestamps_order_by_id() {
        let points = vec![
            point("b", 0.0, 0.0, 5),
            point("a", 0.0, 0.0, 5),
            point("c", 0.0, 0.0, 1),
        ];
        let seq = assemble_sequence(&loc("L", 0.0, 0.0), &points, 1.8, 3).unwrap();
        let ids: Vec<&str> = seq.images.iter().map(|i| i.uri.as_str()).collect();
        assert_eq!(ids, vec!["img/c.png", "img/a.png", "img/b.png"]);
    }

    #[test]
    fn excludes_points_outside_radius() {
        // ~5 m east at the equator.
        let far_lon = 5.0 / 111_319.49;
        let mut points: Vec<CapturePoint> =
            (0..10).map(|i| point(&format!("p{i}"), 0.0, 0.0, i as i64)).collect();
        points.push(point("far", 0.0, far_lon, 99));
        let seq = assemble_sequence(&loc("L", 0.0, 0.0), &points, 1.8, 10).unwrap();
        assert_eq!(seq.images.len(), 10);
        assert!(seq.images.iter().all(|i| i.uri != "img/far.png"));
    }

    #[test]
    fn pair_times_ground_to_sequence() {
        let points: Vec<CapturePoint> =
            (0..10).map(|i| point(&format!("p{i}"), 0.0, 0.0, i as i64 * 100)).collect();
        let seq = assemble_sequence(&loc("L", 0.0, 0.0), &points, 1.8, 10).unwrap();
        let (before, after) = seq.pair_times(4).unwrap();
        assert_eq!(before, seq.images[3].timestamp);
        assert_eq!(after, seq.images[4].timestamp);
        assert!(seq.pair_times(0).is_none());
        assert!(seq.pair_times(10).is_none());
    }
}
