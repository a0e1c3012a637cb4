//! Dataset manifests: one record per line, `audio<TAB>text`.
//!
//! Audio paths are relative to the manifest's directory. The format is
//! line-diffable and parse/write round-trips exactly.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub audio: String,
    pub text: String,
}

impl ManifestEntry {
    /// Resolves the audio path against the manifest location.
    pub fn audio_path(&self, manifest_dir: &Path) -> PathBuf {
        manifest_dir.join(&self.audio)
    }
}

pub fn parse_manifest_str(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((audio, text)) = line.split_once('\t') else {
            return Err(Error::Config(format!(
                "manifest line {} has no tab separator: {line:?}",
                i + 1
            )));
        };
        entries.push(ManifestEntry {
            audio: audio.to_string(),
            text: text.to_string(),
        });
    }
    Ok(entries)
}

pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text)
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.audio);
        out.push('\t');
        out.push_str(&e.text);
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, manifest_to_string(entries)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_canonical() {
        let text = "wavs/utt_0000.wav\tone two three\nwavs/utt_0001.wav\tfour\n";
        let entries = parse_manifest_str(text).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].text, "one two three");
        assert_eq!(manifest_to_string(&entries), text);
    }

    #[test]
    fn rejects_untabbed_lines() {
        assert!(parse_manifest_str("no separator here\n").is_err());
    }

    #[test]
    fn tolerates_blank_lines() {
        let entries = parse_manifest_str("a.wav\tx\n\nb.wav\ty\n").unwrap();
        assert_eq!(entries.len(), 2);
    }
}
