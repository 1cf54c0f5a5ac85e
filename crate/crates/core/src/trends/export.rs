//! Map and report exports for verified trends.
//!
//! The GeoJSON export flattens every positive trend into one
//! `FeatureCollection` of points — one feature per confirmed change, carrying
//! the trend text, the change's capture interval, and the evidence image
//! uris — so any RFC 7946 consumer can render or facet them. The HTML report
//! is a static page for human review of the same data plus the negatives.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use geojson::feature::Id;
use geojson::{Feature, FeatureCollection, GeoJson, Geometry, JsonObject, JsonValue, Value};

use crate::corpus::ImageSequence;
use crate::detect::ChangeRecord;
use crate::trends::{TrendError, TrendProposal, VerificationResult};

/// Build the combined feature collection for all positive results.
///
/// Features are ordered by proposal id, then change id, so the output is
/// stable for a given trend store. Every confirmed change id must resolve in
/// `changes`, and every result in `proposals`; `sequences` (keyed by
/// location id) is only consulted to attach evidence image uris and may be
/// incomplete, in which case those properties are null.
pub fn trend_feature_collection(
    results: &[VerificationResult],
    proposals: &BTreeMap<String, TrendProposal>,
    changes: &BTreeMap<String, ChangeRecord>,
    sequences: &BTreeMap<String, ImageSequence>,
) -> Result<FeatureCollection, TrendError> {
    let mut ordered: Vec<&VerificationResult> = results.iter().collect();
    ordered.sort_by(|a, b| a.proposal_id.cmp(&b.proposal_id));

    let mut features = Vec::new();
    for result in ordered {
        let proposal = proposals
            .get(&result.proposal_id)
            .ok_or_else(|| TrendError::MissingProposal(result.proposal_id.clone()))?;
        if !result.is_positive() {
            continue;
        }
        for change_id in &result.confirmed_change_ids {
            let change = changes
                .get(change_id)
                .ok_or_else(|| TrendError::MissingChange(change_id.clone()))?;
            let (before_image, after_image) = evidence_uris(change, sequences);
            let mut properties = JsonObject::new();
            properties.insert("trend_id".into(), JsonValue::from(proposal.proposal_id.clone()));
            properties.insert("trend".into(), JsonValue::from(proposal.text.clone()));
            properties.insert("change_id".into(), JsonValue::from(change.id.clone()));
            properties.insert("location_id".into(), JsonValue::from(change.location_id.clone()));
            properties.insert("before".into(), JsonValue::from(change.before_desc.clone()));
            properties.insert("after".into(), JsonValue::from(change.after_desc.clone()));
            properties.insert("before_time".into(), JsonValue::from(rfc3339(change.before_time)));
            properties.insert("after_time".into(), JsonValue::from(rfc3339(change.after_time)));
            properties.insert("before_image".into(), opt_string(before_image));
            properties.insert("after_image".into(), opt_string(after_image));
            features.push(Feature {
                bbox: None,
                geometry: Some(Geometry::new(Value::Point(vec![change.lon, change.lat]))),
                id: Some(Id::String(format!("{}:{}", proposal.proposal_id, change.id))),
                properties: Some(properties),
                foreign_members: None,
            });
        }
    }
    Ok(FeatureCollection { bbox: None, features, foreign_members: None })
}

/// Serialize and write a feature collection. An empty collection still
/// writes a valid (empty) `FeatureCollection` document.
pub fn write_geojson(path: &Path, collection: FeatureCollection) -> Result<(), TrendError> {
    let mut text = GeoJson::FeatureCollection(collection).to_string();
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Render the static review page: positives with their evidence, then the
/// negatives with whatever diagnostics they carry.
pub fn render_report_html(
    results: &[VerificationResult],
    proposals: &BTreeMap<String, TrendProposal>,
    changes: &BTreeMap<String, ChangeRecord>,
) -> Result<String, TrendError> {
    let mut ordered: Vec<&VerificationResult> = results.iter().collect();
    ordered.sort_by(|a, b| a.proposal_id.cmp(&b.proposal_id));
    let positives: Vec<&&VerificationResult> =
        ordered.iter().filter(|r| r.is_positive()).collect();

    let mut html = String::new();
    html.push_str(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n\
         <title>Trend report</title>\n<style>\n\
         body { font-family: sans-serif; margin: 2rem auto; max-width: 60rem; }\n\
         section { border-top: 1px solid #ccc; padding: 0.5rem 0; }\n\
         code { background: #f4f4f4; padding: 0 0.2rem; }\n\
         table { border-collapse: collapse; }\n\
         td, th { border: 1px solid #ccc; padding: 0.2rem 0.5rem; text-align: left; }\n\
         </style>\n</head>\n<body>\n<h1>Trend report</h1>\n",
    );
    let _ = writeln!(
        html,
        "<p>{} of {} verified proposals are positive.</p>",
        positives.len(),
        ordered.len()
    );

    for result in &positives {
        let proposal = proposals
            .get(&result.proposal_id)
            .ok_or_else(|| TrendError::MissingProposal(result.proposal_id.clone()))?;
        let _ = writeln!(html, "<section>\n<h2>{}</h2>", escape(&proposal.text));
        let _ = writeln!(
            html,
            "<p><code>{}</code> &mdash; {} proposal members, {} confirmed with {} analyst queries.</p>",
            escape(&proposal.proposal_id),
            proposal.member_count,
            result.confirmed_change_ids.len(),
            result.oracle_queries_used,
        );
        html.push_str("<ul>\n");
        for change_id in &result.confirmed_change_ids {
            let change = changes
                .get(change_id)
                .ok_or_else(|| TrendError::MissingChange(change_id.clone()))?;
            let _ = writeln!(
                html,
                "<li><code>{}</code> at {} ({:.6}, {:.6}), {} &rarr; {}: {} &rarr; {}</li>",
                escape(&change.id),
                escape(&change.location_id),
                change.lat,
                change.lon,
                rfc3339(change.before_time),
                rfc3339(change.after_time),
                escape(&change.before_desc),
                escape(&change.after_desc),
            );
        }
        html.push_str("</ul>\n</section>\n");
    }

    let negatives: Vec<&&VerificationResult> =
        ordered.iter().filter(|r| !r.is_positive()).collect();
    if !negatives.is_empty() {
        html.push_str(
            "<section>\n<h2>Negative proposals</h2>\n<table>\n\
             <tr><th>Proposal</th><th>Confirmed</th><th>Queries</th><th>Note</th></tr>\n",
        );
        for result in &negatives {
            let proposal = proposals
                .get(&result.proposal_id)
                .ok_or_else(|| TrendError::MissingProposal(result.proposal_id.clone()))?;
            let _ = writeln!(
                html,
                "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
                escape(&proposal.text),
                result.confirmed_change_ids.len(),
                result.oracle_queries_used,
                escape(result.diagnostic.as_deref().unwrap_or("")),
            );
        }
        html.push_str("</table>\n</section>\n");
    }
    html.push_str("</body>\n</html>\n");
    Ok(html)
}

pub fn write_report_html(path: &Path, html: &str) -> Result<(), TrendError> {
    fs::write(path, html)?;
    Ok(())
}

/// Evidence image uris for a change, when its sequence is at hand. A paired
/// change points at the images either side of its pair index; a single-image
/// pseudo-change (index 0) is matched back to its image by timestamp.
fn evidence_uris(
    change: &ChangeRecord,
    sequences: &BTreeMap<String, ImageSequence>,
) -> (Option<String>, Option<String>) {
    let Some(sequence) = sequences.get(&change.location_id) else {
        return (None, None);
    };
    if change.after_index >= 1 && change.after_index < sequence.images.len() {
        (
            Some(sequence.images[change.after_index - 1].uri.clone()),
            Some(sequence.images[change.after_index].uri.clone()),
        )
    } else if change.after_index == 0 {
        let hit = sequence
            .images
            .iter()
            .find(|image| image.timestamp == change.after_time)
            .map(|image| image.uri.clone());
        (None, hit)
    } else {
        (None, None)
    }
}

fn rfc3339(time: DateTime<Utc>) -> String {
    time.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn opt_string(value: Option<String>) -> JsonValue {
    value.map(JsonValue::from).unwrap_or(JsonValue::Null)
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SeqImage;
    use crate::trends::Decision;
    use chrono::TimeZone;

    fn ts(days: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_600_000_000 + days * 86_400, 0).unwrap()
    }

    fn change(id: &str, location: &str, after_index: usize) -> ChangeRecord {
        ChangeRecord {
            id: id.to_string(),
            location_id: location.to_string(),
            before_desc: "The wall was gray.".into(),
            after_desc: "The wall shows a mural.".into(),
            after_index,
            before_time: ts(after_index as i64),
            after_time: ts(after_index as i64 + 1),
            critic_passed: true,
            lat: 40.75,
            lon: -73.99,
        }
    }

    fn sequence(location: &str, count: usize) -> ImageSequence {
        ImageSequence {
            location_id: location.to_string(),
            lat: 40.75,
            lon: -73.99,
            heading: 0.0,
            images: (0..count)
                .map(|i| SeqImage {
                    uri: format!("img/{location}/{i}.png"),
                    timestamp: ts(i as i64),
                    lat: 40.75,
                    lon: -73.99,
                    heading: 0.0,
                })
                .collect(),
        }
    }

    fn proposal(id: &str, text: &str) -> TrendProposal {
        TrendProposal {
            proposal_id: id.to_string(),
            text: text.to_string(),
            source_change_ids: Vec::new(),
            member_count: 12,
            word_count: text.split_whitespace().count(),
        }
    }

    fn result(id: &str, decision: Decision, confirmed: &[&str]) -> VerificationResult {
        VerificationResult {
            proposal_id: id.to_string(),
            decision,
            confirmed_change_ids: confirmed.iter().map(|s| s.to_string()).collect(),
            oracle_queries_used: confirmed.len() + 2,
            diagnostic: None,
        }
    }

    #[test]
    fn empty_store_exports_a_valid_empty_collection() {
        let collection =
            trend_feature_collection(&[], &BTreeMap::new(), &BTreeMap::new(), &BTreeMap::new())
                .unwrap();
        assert!(collection.features.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trends.geojson");
        write_geojson(&path, collection).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let parsed: GeoJson = text.parse().unwrap();
        match parsed {
            GeoJson::FeatureCollection(fc) => assert!(fc.features.is_empty()),
            other => panic!("expected a feature collection, got {other:?}"),
        }
    }

    #[test]
    fn confirmed_changes_become_point_features() {
        let proposals =
            BTreeMap::from([("p1".to_string(), proposal("p1", "Murals are appearing."))]);
        let changes = BTreeMap::from([
            ("c1".to_string(), change("c1", "loc-a", 2)),
            ("c2".to_string(), change("c2", "loc-b", 1)),
        ]);
        let sequences = BTreeMap::from([("loc-a".to_string(), sequence("loc-a", 4))]);
        let results = vec![result("p1", Decision::Positive, &["c1", "c2"])];
        let collection =
            trend_feature_collection(&results, &proposals, &changes, &sequences).unwrap();
        assert_eq!(collection.features.len(), 2);

        let feature = &collection.features[0];
        match &feature.geometry.as_ref().unwrap().value {
            Value::Point(coords) => assert_eq!(coords, &vec![-73.99, 40.75]),
            other => panic!("expected a point, got {other:?}"),
        }
        let props = feature.properties.as_ref().unwrap();
        assert_eq!(props["trend"], JsonValue::from("Murals are appearing."));
        assert_eq!(props["change_id"], JsonValue::from("c1"));
        assert_eq!(props["before_image"], JsonValue::from("img/loc-a/1.png"));
        assert_eq!(props["after_image"], JsonValue::from("img/loc-a/2.png"));
        assert!(props["before_time"].as_str().unwrap().ends_with('Z'));

        // loc-b has no sequence on file: images degrade to null.
        let props = collection.features[1].properties.as_ref().unwrap();
        assert_eq!(props["before_image"], JsonValue::Null);
        assert_eq!(props["after_image"], JsonValue::Null);
    }

    #[test]
    fn negative_results_contribute_no_features() {
        let proposals =
            BTreeMap::from([("p1".to_string(), proposal("p1", "Nothing much."))]);
        let results = vec![result("p1", Decision::Negative, &[])];
        let collection =
            trend_feature_collection(&results, &proposals, &BTreeMap::new(), &BTreeMap::new())
                .unwrap();
        assert!(collection.features.is_empty());
    }

    #[test]
    fn pseudo_change_evidence_is_found_by_timestamp() {
        let mut c = change("c1", "loc-a", 0);
        c.before_time = ts(3);
        c.after_time = ts(3);
        let sequences = BTreeMap::from([("loc-a".to_string(), sequence("loc-a", 5))]);
        let (before, after) = evidence_uris(&c, &sequences);
        assert_eq!(before, None);
        assert_eq!(after, Some("img/loc-a/3.png".to_string()));
    }

    #[test]
    fn missing_proposal_is_an_error() {
        let results = vec![result("ghost", Decision::Positive, &[])];
        let err =
            trend_feature_collection(&results, &BTreeMap::new(), &BTreeMap::new(), &BTreeMap::new())
                .unwrap_err();
        assert!(matches!(err, TrendError::MissingProposal(id) if id == "ghost"));
    }

    #[test]
    fn report_escapes_text_and_lists_negatives() {
        let proposals = BTreeMap::from([
            ("p1".to_string(), proposal("p1", "Benches <b>everywhere</b> & more.")),
            ("p2".to_string(), proposal("p2", "A quiet non-trend.")),
        ]);
        let changes = BTreeMap::from([("c1".to_string(), change("c1", "loc-a", 2))]);
        let mut negative = result("p2", Decision::Negative, &[]);
        negative.diagnostic = Some("cannot reach N: 4 backend failures".into());
        let results = vec![result("p1", Decision::Positive, &["c1"]), negative];
        let html = render_report_html(&results, &proposals, &changes).unwrap();
        assert!(html.contains("Benches &lt;b&gt;everywhere&lt;/b&gt; &amp; more."));
        assert!(!html.contains("<b>everywhere</b>"));
        assert!(html.contains("1 of 2 verified proposals are positive."));
        assert!(html.contains("Negative proposals"));
        assert!(html.contains("cannot reach N: 4 backend failures"));
        assert!(html.contains("The wall shows a mural."));
    }
}
