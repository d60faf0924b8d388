use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CorpusError, NormStats};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: Option<u32>,
    pub frames: usize,
}

/// Utterance list plus, once computed, the global normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub norm: Option<NormStats>,
}

impl CorpusManifest {
    /// One line per utterance: `id label-or-"-" T`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let label = e.speaker.map_or_else(|| "-".to_owned(), |l| l.to_string());
            writeln!(s, "{} {} {}", e.id, label, e.frames).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: &str| CorpusError::Manifest { line: line_no, detail: detail.to_owned() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [id, label, frames] = fields[..] else {
                return Err(bad("expected `id label frames`"));
            };
            let speaker = match label {
                "-" => None,
                l => Some(l.parse().map_err(|_| bad("label is not an integer"))?),
            };
            let frames = frames.parse().map_err(|_| bad("frame count is not an integer"))?;
            entries.push(ManifestEntry { id: id.to_owned(), speaker, frames });
        }
        Ok(Self { entries, norm: None })
    }
}

pub fn write_manifest(manifest: &CorpusManifest, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    fs::write(path, manifest.to_text())?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest, CorpusError> {
    CorpusManifest::parse(&fs::read_to_string(path)?)
}
