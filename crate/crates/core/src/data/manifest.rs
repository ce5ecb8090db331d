use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;

/// Label index to class name.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "central serous retinopathy",
    "diabetic retinopathy",
    "macular hole",
    "normal",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Record {
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Self {
        DatasetManifest {
            root: root.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Writes `path,label` CSV with paths as stored.
    pub fn write(&self, path: &Path) -> Result<()> {
        let write = || -> std::io::Result<()> {
            let mut f = File::create(path)?;
            writeln!(f, "path,label")?;
            for r in &self.records {
                writeln!(f, "{},{}", r.path.display(), r.label)?;
            }
            f.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Reads a `path,label` CSV manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing `{name}` column")))
    };
    let (path_col, label_col) = (column("path")?, column("label")?);

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let (Some(p), Some(l)) = (row.get(path_col), row.get(label_col)) else {
            return Err(parse_err(line, "missing column value".into()));
        };
        if p.is_empty() {
            return Err(parse_err(line, "empty image path".into()));
        }
        let label = l
            .parse::<usize>()
            .ok()
            .filter(|&v| v < NUM_CLASSES)
            .ok_or_else(|| parse_err(line, format!("label `{l}` is not in 0..={}", NUM_CLASSES - 1)))?;
        records.push(Record {
            path: PathBuf::from(p),
            label,
        });
    }

    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::new(root, records);
    if manifest.is_empty() {
        log::warn!("{}: manifest has no records", path.display());
    } else {
        let counts = manifest.class_counts();
        log::info!(
            "{}: {} records, per class {:?}",
            path.display(),
            manifest.len(),
            counts
        );
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn class_names_follow_label_encoding() {
        assert_eq!(CLASS_NAMES[0], "central serous retinopathy");
        assert_eq!(CLASS_NAMES[1], "diabetic retinopathy");
        assert_eq!(CLASS_NAMES[2], "macular hole");
        assert_eq!(CLASS_NAMES[3], "normal");
    }

    #[test]
    fn two_records() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&write(dir.path(), "path,label\na.png,0\nb.png,3\n")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.class_counts(), [1, 0, 0, 1]);
        assert_eq!(m.records[1].path, PathBuf::from("b.png"));
        assert_eq!(m.resolve(&m.records[0]), dir.path().join("a.png"));
    }

    #[test]
    fn empty_body_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&write(dir.path(), "path,label\n")).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn bad_label_cites_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "path,label\na.png,0\nb.png,1\nc.png,2\nd.png,7\n";
        match load_manifest(&write(dir.path(), body)) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 5);
                assert!(msg.contains('7'));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_unreadable_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_manifest(&write(dir.path(), "file,label\na.png,0\n")),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            load_manifest(&write(dir.path(), "path,label\na.png\n")),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            load_manifest(&dir.path().join("nope.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            dir.path(),
            vec![
                Record { path: "x/1.png".into(), label: 2 },
                Record { path: "2.jpg".into(), label: 0 },
            ],
        );
        let p = dir.path().join("m.csv");
        m.write(&p).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), m);
    }
}
