//! Plain-text dataset index: one `relative/path.png,count` record per line,
//! `#` starts a comment, blank lines are skipped. Paths are relative to the
//! manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Path as written in the manifest; also the sample id.
    pub path: String,
    pub count: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Parses manifest text; `origin` is only used in error messages.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            detail,
        };
        let (path, count) = line
            .rsplit_once(',')
            .ok_or_else(|| err(format!("expected `path,count`, got {line:?}")))?;
        let path = path.trim();
        if path.is_empty() {
            return Err(err("empty path".into()));
        }
        let count: f64 = count
            .trim()
            .parse()
            .map_err(|_| err(format!("count {:?} is not a number", count.trim())))?;
        if !count.is_finite() || count < 0.0 {
            return Err(err(format!("count {count} must be a non-negative number")));
        }
        records.push(Record {
            path: path.to_string(),
            count,
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{} has no records", origin.display())));
    }
    Ok(records)
}

/// Reads a manifest and checks that every referenced image exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_manifest(&text, path)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((rel, _)) = line.rsplit_once(',') {
            if !root.join(rel.trim()).is_file() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    detail: format!("image {} not found", rel.trim()),
                });
            }
        }
    }
    Ok(Manifest { root, records })
}

impl Manifest {
    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn counts(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.count).collect()
    }
}

/// Min, max and mean count of a non-empty record list.
pub fn dataset_stats(records: &[Record]) -> Result<DatasetStats> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("no records to summarize".into()))?;
    let mut s = DatasetStats {
        min: first.count,
        max: first.count,
        mean: 0.0,
    };
    let mut total = 0.0;
    for r in records {
        s.min = s.min.min(r.count);
        s.max = s.max.max(r.count);
        total += r.count;
    }
    s.mean = total / records.len() as f64;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<Record>> {
        parse_manifest(text, Path::new("m.txt"))
    }

    #[test]
    fn parses_comments_and_blanks() {
        let r = parse("# header\n\na.png,9\n  b/c.png , 578 \n").unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].path, "b/c.png");
        let s = dataset_stats(&r).unwrap();
        assert_eq!((s.min, s.max, s.mean), (9.0, 578.0, 293.5));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        for (text, line) in [
            ("a.png,1\nb.png\n", 2),
            ("# x\na.png,-3\n", 2),
            ("a.png,abc\n", 1),
            (",4\n", 1),
        ] {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_manifest_is_an_error() {
        assert!(parse("# nothing\n").is_err());
        assert!(dataset_stats(&[]).is_err());
    }

    #[test]
    fn missing_file_and_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_manifest(&dir.path().join("none.txt")),
            Err(Error::Io { .. })
        ));
        let m = dir.path().join("manifest.txt");
        fs::write(&m, "x.png,3\n").unwrap();
        assert!(matches!(load_manifest(&m), Err(Error::Parse { line: 1, .. })));
    }
}
