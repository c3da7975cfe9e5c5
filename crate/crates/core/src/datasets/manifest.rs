use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::datasets::{Split, VideoRecord};
use crate::error::{Error, Result};

/// Validated list of video records with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<VideoRecord>,
    /// Directory relative media paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<VideoRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.video_id.as_str()) {
                return Err(Error::Argument(format!("duplicate video_id {:?}", r.video_id)));
            }
        }
        Ok(Self {
            records,
            root: root.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.split).or_insert(0) += 1;
        }
        out
    }

    /// True when any record carries challenge tags; such sets are scored by
    /// MAE only.
    pub fn is_tagged(&self) -> bool {
        self.records.iter().any(|r| !r.challenge_tags.is_empty())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }
}

/// Parses line-delimited JSON records. Blank lines and lines starting with
/// `#` are skipped.
pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: VideoRecord = serde_json::from_str(trimmed).map_err(|e| parse_err(i + 1, e.to_string()))?;
        record.validate().map_err(|e| parse_err(i + 1, e.to_string()))?;
        if !seen.insert(record.video_id.clone()) {
            return Err(parse_err(i + 1, format!("duplicate video_id {:?}", record.video_id)));
        }
        records.push(record);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if records.is_empty() {
        log::warn!("manifest {} has no records", path.display());
    }
    Ok(DatasetManifest { records, root })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, split: &str, seg: (f64, f64)) -> String {
        format!(
            r#"{{"video_id":"{id}","media_path":"v/{id}","split":"{split}","count":4.0,"segment":[{},{}]}}"#,
            seg.0, seg.1
        )
    }

    #[test]
    fn parses_and_counts_splits() {
        let text = format!(
            "# header\n{}\n\n{}\n{}\n",
            line("a", "train", (0.0, 2.0)),
            line("b", "val", (1.0, 3.0)),
            line("c", "train", (0.0, 1.0))
        );
        let m = parse_manifest(&text, Path::new("/data/m.jsonl")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.split_counts()[&Split::Train], 2);
        assert_eq!(m.resolve(Path::new("v/a")), PathBuf::from("/data/v/a"));
        assert!(!m.is_tagged());
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        assert!(parse_manifest("", Path::new("m.jsonl")).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_segment_with_line_number() {
        let text = format!("{}\n{}\n", line("a", "train", (0.0, 2.0)), line("b", "train", (3.0, 3.0)));
        match parse_manifest(&text, Path::new("m.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_bad_counts() {
        let text = format!("{}\n{}\n", line("a", "train", (0.0, 2.0)), line("a", "val", (0.0, 2.0)));
        assert!(matches!(parse_manifest(&text, Path::new("m")), Err(Error::Parse { line: 2, .. })));
        let bad = line("a", "train", (0.0, 2.0)).replace("4.0", "0.0");
        assert!(matches!(parse_manifest(&bad, Path::new("m")), Err(Error::Parse { line: 1, .. })));
        let bad = line("a", "holdout", (0.0, 2.0));
        assert!(parse_manifest(&bad, Path::new("m")).is_err());
    }

    #[test]
    fn accepts_either_test_total() {
        // Test-split sizes are reported as observed, never asserted.
        for n_test in [562usize, 565] {
            let mut text = String::new();
            for (split, n) in [("train", 987usize), ("val", 311), ("test", n_test)] {
                for i in 0..n {
                    text.push_str(&line(&format!("{split}{i}"), split, (0.0, 1.0)));
                    text.push('\n');
                }
            }
            let m = parse_manifest(&text, Path::new("m")).unwrap();
            let counts = m.split_counts();
            assert_eq!((counts[&Split::Train], counts[&Split::Val], counts[&Split::Test]), (987, 311, n_test));
        }
    }
}
