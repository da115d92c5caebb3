use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::Split;
use crate::error::{Error, Result};

/// One manifest row. `source_id` is only present for generated complements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: u8,
    pub split: Split,
    pub source_id: Option<String>,
}

/// Parsed CSV manifest. Relative record paths resolve against `root`, the
/// directory that holds the manifest file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.label > 1 {
                return Err(Error::Invalid(format!("record {i}: label {} outside {{0,1}}", r.label)));
            }
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Invalid(format!("duplicate path {}", r.path)));
            }
        }
        Ok(Self {
            records,
            root: root.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// `split -> [count(label 0), count(label 1)]`, only for splits that occur.
    pub fn class_counts(&self) -> BTreeMap<Split, [usize; 2]> {
        let mut out: BTreeMap<Split, [usize; 2]> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.split).or_default()[r.label as usize] += 1;
        }
        out
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn filter_split(&self, split: Split) -> Self {
        Self {
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
            root: self.root.clone(),
        }
    }

    /// Same records with paths made relative to (or absolute from) `new_root`.
    pub fn rebased(&self, new_root: &Path) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| {
                let abs = self.resolve(&r.path);
                let path = match abs.strip_prefix(new_root) {
                    Ok(rel) => rel.to_string_lossy().into_owned(),
                    Err(_) if abs.is_absolute() && new_root.is_absolute() => pathdiff::diff_paths(&abs, new_root)
                        .unwrap_or(abs)
                        .to_string_lossy()
                        .into_owned(),
                    Err(_) => abs.to_string_lossy().into_owned(),
                };
                ManifestRecord {
                    path,
                    ..r.clone()
                }
            })
            .collect();
        Self {
            records,
            root: new_root.to_path_buf(),
        }
    }
}

/// Reads a `path,label,split[,source_id]` CSV manifest. Row numbers in errors
/// are file line numbers (the header is line 1).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);
    let bad = |row: u64, message: String| Error::Manifest {
        path: path.to_path_buf(),
        row,
        message,
    };
    let headers = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[..3] != ["path", "label", "split"] || cols.len() > 4 {
        return Err(bad(1, format!("expected header path,label,split[,source_id], got {}", cols.join(","))));
    }
    if cols.len() == 4 && cols[3] != "source_id" {
        return Err(bad(1, format!("unknown column {}", cols[3])));
    }
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let row = e.position().map(|p| p.line()).unwrap_or(0);
            bad(row, e.to_string())
        })?;
        let row = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != cols.len() {
            return Err(bad(row, format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        let p = rec[0].to_string();
        if p.is_empty() {
            return Err(bad(row, "empty path".into()));
        }
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(row, format!("label {other:?} is not 0 or 1"))),
        };
        let split = Split::parse(&rec[2]).ok_or_else(|| bad(row, format!("unknown split {:?}", &rec[2])))?;
        let source_id = rec.get(3).filter(|s| !s.is_empty()).map(str::to_string);
        if !seen.insert(p.clone()) {
            return Err(bad(row, format!("duplicate path {p}")));
        }
        records.push(ManifestRecord {
            path: p,
            label,
            split,
            source_id,
        });
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DatasetManifest { records, root })
}

/// Writes the manifest to `path`. The `source_id` column is emitted only when
/// some record carries one. Paths are rebased onto the destination directory.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    super::ensure_parent(path)?;
    let dest_root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = if dest_root == manifest.root {
        manifest.clone()
    } else {
        manifest.rebased(&dest_root)
    };
    let with_source = m.records.iter().any(|r| r.source_id.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    if with_source {
        w.write_record(["path", "label", "split", "source_id"]).map_err(io)?;
    } else {
        w.write_record(["path", "label", "split"]).map_err(io)?;
    }
    for r in &m.records {
        let label = r.label.to_string();
        if with_source {
            w.write_record([
                r.path.as_str(),
                label.as_str(),
                r.split.as_str(),
                r.source_id.as_deref().unwrap_or(""),
            ])
            .map_err(io)?;
        } else {
            w.write_record([r.path.as_str(), label.as_str(), r.split.as_str()]).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.csv");
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn header_only_is_empty() {
        let d = tempfile::tempdir().unwrap();
        let m = load_manifest(&write(d.path(), "path,label,split\n")).unwrap();
        assert_eq!(m.n(), 0);
        assert!(m.class_counts().is_empty());
    }

    #[test]
    fn counts_labels() {
        let d = tempfile::tempdir().unwrap();
        let mut body = String::from("path,label,split\n");
        for i in 0..10 {
            body += &format!("img{i}.png,{},train\n", u8::from(i < 3));
        }
        let m = load_manifest(&write(d.path(), &body)).unwrap();
        assert_eq!(m.n(), 10);
        assert_eq!(m.class_counts()[&Split::Train], [7, 3]);
    }

    #[test]
    fn duplicate_path_names_the_path_and_row() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "path,label,split\na.png,0,train\nb.png,1,train\na.png,1,validation\n");
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("duplicate path a.png"), "{err}");
        assert!(err.contains("row 4"), "{err}");
    }

    #[test]
    fn bad_label_and_malformed_rows() {
        let d = tempfile::tempdir().unwrap();
        let err = load_manifest(&write(d.path(), "path,label,split\na.png,2,train\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 2") && err.contains("label"), "{err}");
        let err = load_manifest(&write(d.path(), "path,label,split\na.png,0\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 2"), "{err}");
        let err = load_manifest(&write(d.path(), "path,label,split\na.png,1,test\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("split"), "{err}");
        let err = load_manifest(&write(d.path(), "file,label\n")).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_manifest(Path::new("/nonexistent/manifest.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn source_id_column_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            vec![
                ManifestRecord {
                    path: "a.png".into(),
                    label: 0,
                    split: Split::Train,
                    source_id: None,
                },
                ManifestRecord {
                    path: "a__gen.png".into(),
                    label: 1,
                    split: Split::Train,
                    source_id: Some("a".into()),
                },
            ],
            d.path(),
        )
        .unwrap();
        let p = d.path().join("aug.csv");
        save_manifest(&m, &p).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), m);
    }

    #[test]
    fn saving_elsewhere_rebases_paths() {
        let d = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            vec![ManifestRecord {
                path: "img/a.png".into(),
                label: 1,
                split: Split::Validation,
                source_id: None,
            }],
            d.path().join("data"),
        )
        .unwrap();
        let p = d.path().join("out/m.csv");
        save_manifest(&m, &p).unwrap();
        let back = load_manifest(&p).unwrap();
        let target = d.path().join("data/img/a.png");
        std::fs::create_dir_all(target.parent().unwrap()).unwrap();
        std::fs::write(&target, b"").unwrap();
        let resolved = back.resolve(&back.records[0].path);
        assert_eq!(resolved.canonicalize().unwrap(), target.canonicalize().unwrap());
    }
}
