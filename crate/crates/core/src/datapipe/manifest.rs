//! Ground-truth manifests: one image id and a one-hot class row per line.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{CLASS_NAMES, NUM_CLASSES};

pub const MANIFEST_HEADER: &str = "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_id: String,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for r in &self.records {
            c[r.label] += 1;
        }
        c
    }

    pub fn label_of(&self, id: &str) -> Option<usize> {
        self.records.iter().find(|r| r.image_id == id).map(|r| r.label)
    }

    /// Builds a manifest with `counts[j]` images of class `j`, named
    /// `{prefix}_{index:07}` in class order.
    pub fn synthetic(counts: &[usize; NUM_CLASSES], prefix: &str) -> Self {
        let mut records = Vec::with_capacity(counts.iter().sum());
        for (label, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let image_id = format!("{prefix}_{:07}", records.len());
                records.push(ManifestRecord { image_id, label });
            }
        }
        DatasetManifest { records }
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{MANIFEST_HEADER}")?;
        for r in &self.records {
            write!(w, "{}", r.image_id)?;
            for j in 0..NUM_CLASSES {
                write!(w, ",{}", if j == r.label { "1.0" } else { "0.0" })?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        parse_manifest(f)
    }
}

/// Parses a ground-truth file. Line numbers in errors are 1-based and count
/// the header.
pub fn parse_manifest<R: Read>(reader: R) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut header_seen = false;
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Manifest {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.iter().all(|f| f.is_empty()) {
            continue;
        }
        if !header_seen {
            let got: Vec<&str> = row.iter().collect();
            let want: Vec<&str> = MANIFEST_HEADER.split(',').collect();
            if got != want {
                return Err(Error::Manifest {
                    line,
                    message: format!("expected header `{MANIFEST_HEADER}`, got `{}`", got.join(",")),
                });
            }
            header_seen = true;
            continue;
        }
        let bad = |message: String| Error::Manifest { line, message };
        if row.len() != NUM_CLASSES + 1 {
            return Err(bad(format!("expected {} fields, got {}", NUM_CLASSES + 1, row.len())));
        }
        let image_id = row[0].to_owned();
        if image_id.is_empty() {
            return Err(bad("empty image id".into()));
        }
        let mut label = None;
        for j in 0..NUM_CLASSES {
            let v: f64 = row[j + 1]
                .parse()
                .map_err(|_| bad(format!("{} value `{}` is not a number", CLASS_NAMES[j], &row[j + 1])))?;
            if v == 1.0 {
                if label.is_some() {
                    return Err(bad("more than one positive label".into()));
                }
                label = Some(j);
            } else if v != 0.0 {
                return Err(bad(format!("{} value {v} is neither 0 nor 1", CLASS_NAMES[j])));
            }
        }
        let label = label.ok_or_else(|| bad("no positive label".into()))?;
        if !seen.insert(image_id.clone()) {
            return Err(bad(format!("duplicate image id `{image_id}`")));
        }
        records.push(ManifestRecord { image_id, label });
    }
    if !header_seen {
        return Err(Error::Manifest {
            line: 1,
            message: "missing header".into(),
        });
    }
    Ok(DatasetManifest { records })
}

/// Extensions tried, in order, when resolving an image id to a file.
pub const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "raw"];

/// The first existing `{dir}/{id}.{ext}`.
pub fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_one_hot_rows() {
        let text = "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nISIC_1,0.0,1.0,0.0,0.0,0.0,0.0,0.0\nISIC_2,0,0,0,0,0,0,1\n";
        let m = parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[0].label, 1);
        assert_eq!(m.records[1].label, 6);
    }

    #[test]
    fn header_only_is_empty() {
        let m = parse_manifest(format!("{MANIFEST_HEADER}\n").as_bytes()).unwrap();
        assert!(m.is_empty());
        assert!(parse_manifest("".as_bytes()).is_err());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nA,1,0,0,0,0,0,0\nB,1.0,1.0,0,0,0,0,0\n";
        match parse_manifest(text.as_bytes()) {
            Err(Error::Manifest { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        let dup = "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nA,1,0,0,0,0,0,0\nA,0,1,0,0,0,0,0\n";
        assert!(matches!(parse_manifest(dup.as_bytes()), Err(Error::Manifest { line: 3, .. })));
        let none = "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nA,0,0,0,0,0,0,0\n";
        assert!(matches!(parse_manifest(none.as_bytes()), Err(Error::Manifest { line: 2, .. })));
        let short = "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nA,0,1\n";
        assert!(matches!(parse_manifest(short.as_bytes()), Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn write_parse_round_trip() {
        let m = DatasetManifest::synthetic(&[2, 1, 0, 0, 0, 1, 3], "img");
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert_eq!(parse_manifest(&buf[..]).unwrap(), m);
        assert_eq!(m.class_counts(), [2, 1, 0, 0, 0, 1, 3]);
    }
}
