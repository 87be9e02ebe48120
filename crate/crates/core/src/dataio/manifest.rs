use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!(
                "unknown split `{other}` (train, val, test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub image_path: PathBuf,
    pub label: String,
    pub subject_id: String,
    pub split: Split,
}

/// Validated records plus the directory relative paths resolve against.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
    pub root: PathBuf,
}

#[derive(Deserialize)]
struct RawRecord {
    image_path: String,
    label: String,
    subject_id: String,
    split: String,
}

const HEADER: [&str; 4] = ["image_path", "label", "subject_id", "split"];

impl Manifest {
    /// Checks labels and that no subject appears in more than one split.
    pub fn new(records: Vec<Record>, root: PathBuf) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.label.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "record {} ({}) has an empty label",
                    i + 1,
                    r.image_path.display()
                )));
            }
            if r.subject_id.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "record {} ({}) has an empty subject id",
                    i + 1,
                    r.image_path.display()
                )));
            }
        }
        let mut seen: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for r in &records {
            seen.entry(&r.subject_id).or_default().insert(r.split);
        }
        let leaked: Vec<&str> = seen
            .iter()
            .filter(|(_, s)| s.len() > 1)
            .map(|(id, _)| *id)
            .collect();
        if !leaked.is_empty() {
            return Err(Error::Validation(format!(
                "subjects appear in more than one split: {}",
                leaked.join(", ")
            )));
        }
        Ok(Self { records, root })
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.split).or_insert(0) += 1;
        }
        m
    }

    /// Sorted distinct labels; class index = position.
    pub fn classes(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != HEADER {
        return Err(Error::Validation(format!(
            "{}: header must be `{}`, got `{}`",
            path.display(),
            HEADER.join(","),
            header.join(",")
        )));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.deserialize::<RawRecord>().enumerate() {
        let row =
            row.map_err(|e| Error::Validation(format!("{} row {}: {e}", path.display(), i + 2)))?;
        records.push(Record {
            image_path: PathBuf::from(row.image_path.trim()),
            label: row.label.trim().to_string(),
            subject_id: row.subject_id.trim().to_string(),
            split: row.split.parse().map_err(|e: Error| {
                Error::Validation(format!("{} row {}: {e}", path.display(), i + 2))
            })?,
        });
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::new(records, root)
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.image_path.to_string_lossy().as_ref(),
            &r.label,
            &r.subject_id,
            &r.split.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.csv");
        std::fs::write(&p, format!("image_path,label,subject_id,split\n{body}")).unwrap();
        p
    }

    #[test]
    fn valid_manifest_counts_splits() {
        let d = tempfile::tempdir().unwrap();
        let m = load_manifest(&write(
            d.path(),
            "a.png,0,S1,train\nb.png,1,S2,val\nc.png,1,S3,test\n",
        ))
        .unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(
            m.split_counts().values().copied().collect::<Vec<_>>(),
            [1, 1, 1]
        );
        assert_eq!(m.resolve(Path::new("a.png")), d.path().join("a.png"));
    }

    #[test]
    fn leakage_names_subjects() {
        let d = tempfile::tempdir().unwrap();
        let err = load_manifest(&write(
            d.path(),
            "a.png,0,S1,train\nb.png,1,S1,test\nc.png,0,S2,train\n",
        ))
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("S1") && !msg.contains("S2"), "{msg}");
    }

    #[test]
    fn rejects_empty_label_bad_split_and_missing_file() {
        let d = tempfile::tempdir().unwrap();
        assert!(load_manifest(&write(d.path(), "a.png,,S1,train\n")).is_err());
        assert!(load_manifest(&write(d.path(), "a.png,0,S1,holdout\n")).is_err());
        let err = load_manifest(&d.path().join("absent.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }) && err.to_string().contains("absent.csv"));
    }

    #[test]
    fn write_then_load() {
        let d = tempfile::tempdir().unwrap();
        let recs = vec![Record {
            image_path: "x, y.png".into(),
            label: "tumour".into(),
            subject_id: "P1".into(),
            split: Split::Train,
        }];
        let p = d.path().join("m.csv");
        write_manifest(&p, &recs).unwrap();
        assert_eq!(load_manifest(&p).unwrap().records, recs);
    }
}
