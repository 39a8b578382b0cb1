//! JSONL records plus a little-endian f32 sidecar holding the frames.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClipSample, NarrationSample, Pair};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    clip_id: String,
    scenario_id: usize,
    duration_s: f64,
    text_tokens: Vec<usize>,
    nouns: BTreeSet<usize>,
    verbs: BTreeSet<usize>,
    blob_offset: u64,
    frame_shape: [usize; 4],
}

/// `dir/name.jsonl` keeps its frames in `dir/name.frames.bin`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.frames.bin"))
}

pub fn save_jsonl(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut jsonl = BufWriter::new(File::create(path)?);
    let mut blob = BufWriter::new(File::create(sidecar_path(path))?);
    let mut offset = 0u64;
    for p in pairs {
        let rec = Record {
            clip_id: p.clip.clip_id.clone(),
            scenario_id: p.clip.scenario_id,
            duration_s: p.clip.duration_s,
            text_tokens: p.narration.text.clone(),
            nouns: p.narration.nouns.clone(),
            verbs: p.narration.verbs.clone(),
            blob_offset: offset,
            frame_shape: p.clip.frame_shape,
        };
        serde_json::to_writer(&mut jsonl, &rec)?;
        jsonl.write_all(b"\n")?;
        for v in &p.clip.frames {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += 4 * p.clip.frames.len() as u64;
    }
    jsonl.flush()?;
    blob.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Pair>> {
    let blob = fs::read(sidecar_path(path))?;
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let numel: usize = rec.frame_shape.iter().product();
        let start = usize::try_from(rec.blob_offset).unwrap_or(usize::MAX);
        let bytes = start
            .checked_add(numel * 4)
            .filter(|&end| end <= blob.len())
            .map(|end| &blob[start..end])
            .ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("frame blob range at offset {} overruns the sidecar", rec.blob_offset),
            })?;
        let frames = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        pairs.push(Pair {
            clip: ClipSample {
                clip_id: rec.clip_id,
                frames,
                frame_shape: rec.frame_shape,
                scenario_id: rec.scenario_id,
                duration_s: rec.duration_s,
            },
            narration: NarrationSample::from_tokens(rec.text_tokens, rec.nouns, rec.verbs),
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CorpusConfig, ModelConfig};
    use crate::corpus::{generate_corpus, Lexicon};

    fn corpus(n: usize) -> Vec<Pair> {
        let cc = CorpusConfig {
            n_pairs: n,
            n_scenarios: 2,
            ..CorpusConfig::default()
        };
        generate_corpus(&cc, &ModelConfig::default(), &Lexicon::standard(), 11).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.jsonl");
        let pairs = corpus(6);
        save_jsonl(&path, &pairs).unwrap();
        assert!(dir.path().join("toy.frames.bin").exists());
        assert_eq!(load_jsonl(&path).unwrap(), pairs);
    }

    #[test]
    fn truncated_file_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.jsonl");
        save_jsonl(&path, &corpus(4)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let cut = text.len() - 40;
        fs::write(&path, &text[..cut]).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }
}
