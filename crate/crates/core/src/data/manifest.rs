//! JSON-lines manifest tying ATFS files to segments and labels.
//!
//! One line per (segment, modality):
//! `{"segment_id":..,"subject_id":..,"modality":"acoustic"|"textual","path":..,"rows":..,"cols":..,"sentiment":..,"depression":..}`.
//! Paths are relative to the manifest's directory.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::atfs::{read_atfs, write_atfs};
use crate::data::SegmentRecord;
use crate::encoder::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::labels::{DepressionClass, SentimentLabel};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub segment_id: String,
    pub subject_id: String,
    pub modality: Modality,
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub sentiment: SentimentLabel,
    pub depression: DepressionClass,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))
        })
        .collect()
}

/// Loads every segment of a data directory, in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SegmentRecord>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Data(format!("data directory {} does not exist", dir.display())));
    }
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let entries = parse_manifest(&text)?;

    let mut order: Vec<String> = Vec::new();
    let mut halves: HashMap<String, [Option<(ManifestEntry, FeatureSequence)>; 2]> = HashMap::new();
    for e in entries {
        let features = read_atfs(dir.join(&e.path))?;
        if (features.rows(), features.cols()) != (e.rows, e.cols) {
            return Err(Error::Data(format!(
                "{}: manifest says {}x{}, file holds {}x{}",
                e.path,
                e.rows,
                e.cols,
                features.rows(),
                features.cols()
            )));
        }
        let slot = match e.modality {
            Modality::Acoustic => 0,
            Modality::Textual => 1,
        };
        let entry = halves.entry(e.segment_id.clone()).or_insert_with(|| {
            order.push(e.segment_id.clone());
            [None, None]
        });
        if entry[slot].is_some() {
            return Err(Error::Data(format!(
                "segment {} lists {} features twice",
                e.segment_id,
                e.modality.as_str()
            )));
        }
        let seq = FeatureSequence::new(e.modality, features);
        entry[slot] = Some((e, seq));
    }

    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let [a, t] = halves.remove(&id).expect("recorded id");
        let (Some((ea, sa)), Some((et, st))) = (a, t) else {
            return Err(Error::Data(format!("segment {id} is missing a modality")));
        };
        if ea.subject_id != et.subject_id || ea.depression != et.depression {
            return Err(Error::Data(format!(
                "segment {id}: acoustic and textual rows disagree on subject or class"
            )));
        }
        records.push(SegmentRecord::new(
            id,
            ea.subject_id,
            sa,
            st,
            ea.sentiment,
            et.sentiment,
            ea.depression,
        ));
    }
    crate::data::validate_records(&records)?;
    Ok(records)
}

/// Writes `features/<segment>.<a|t>.atfs` files plus the manifest.
pub fn write_dataset(dir: impl AsRef<Path>, records: &[SegmentRecord]) -> Result<()> {
    let dir = dir.as_ref();
    let fdir = dir.join("features");
    std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let mut manifest = Vec::new();
    for r in records {
        for (seq, sent, tag) in [(&r.acoustic, r.sent_a, "a"), (&r.textual, r.sent_t, "t")] {
            let rel = format!("features/{}.{tag}.atfs", r.segment_id);
            write_atfs(&seq.features, dir.join(&rel))?;
            let entry = ManifestEntry {
                segment_id: r.segment_id.clone(),
                subject_id: r.subject_id.clone(),
                modality: seq.modality,
                path: rel,
                rows: seq.len(),
                cols: seq.dim(),
                sentiment: sent,
                depression: r.depression,
            };
            serde_json::to_writer(&mut manifest, &entry)?;
            manifest.push(b'\n');
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&mpath, e))
}
