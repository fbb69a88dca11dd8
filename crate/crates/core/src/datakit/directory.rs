//! Directory datasets: `index.csv` (`path,pad_label,subject_id`) next to
//! 8-bit RGB PNG files referenced by relative path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::preprocess::{decode_png, encode_png, preprocess};
use super::{DomainDataset, FaceSample, PadLabel, SplitTag};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    path: String,
    pad_label: String,
    subject_id: usize,
}

/// Reads a directory dataset, preprocessing each image to `resolution`.
/// Row numbers in errors count data rows from 1.
pub fn load_directory_dataset(dir: &Path, domain_id: &str, resolution: usize) -> Result<DomainDataset> {
    let index = dir.join(INDEX_FILE);
    if !index.is_file() {
        return Err(Error::MissingArtifact {
            path: index,
            hint: "dataset directory needs an index.csv".into(),
        });
    }
    let mut reader = csv::Reader::from_path(&index)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "pad_label", "subject_id"] {
        return Err(Error::IndexRow {
            row: 0,
            reason: format!(
                "header must be `path,pad_label,subject_id`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut samples = Vec::new();
    for (i, rec) in reader.deserialize::<IndexRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::IndexRow {
            row,
            reason: e.to_string(),
        })?;
        let pad_label: PadLabel = rec.pad_label.parse().map_err(|reason| Error::IndexRow { row, reason })?;
        let path = dir.join(&rec.path);
        let bytes = std::fs::read(&path).map_err(|e| Error::IndexRow {
            row,
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        let raw = decode_png(&bytes).map_err(|e| Error::IndexRow {
            row,
            reason: format!("cannot decode {}: {e}", path.display()),
        })?;
        let image = preprocess(&raw, resolution).map_err(|e| Error::IndexRow {
            row,
            reason: e.to_string(),
        })?;
        samples.push(FaceSample {
            image,
            pad_label,
            subject_id: rec.subject_id,
            domain_id: domain_id.to_string(),
        });
    }
    DomainDataset::new(domain_id, samples, SplitTag::Train)
}

/// Writes `dataset` in directory format; returns the written file paths.
pub fn write_directory_dataset(dataset: &DomainDataset, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let mut written = Vec::with_capacity(dataset.len() + 1);
    let mut index = csv::Writer::from_writer(Vec::new());
    for (i, s) in dataset.samples.iter().enumerate() {
        let name = format!("img_{i:05}.png");
        let path = dir.join(&name);
        atomic_write(&path, &encode_png(&s.image)?)?;
        written.push(path);
        index.serialize(IndexRow {
            path: name,
            pad_label: s.pad_label.to_string(),
            subject_id: s.subject_id,
        })?;
    }
    if dataset.is_empty() {
        index.write_record(["path", "pad_label", "subject_id"])?;
    }
    let bytes = index.into_inner().map_err(|e| Error::io("flush index", e.into_error()))?;
    let index_path = dir.join(INDEX_FILE);
    atomic_write(&index_path, &bytes)?;
    written.push(index_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn write_index(dir: &Path, rows: &[(&str, &str, usize)]) {
        let mut s = String::from("path,pad_label,subject_id\n");
        for (p, l, id) in rows {
            s.push_str(&format!("{p},{l},{id}\n"));
        }
        std::fs::write(dir.join(INDEX_FILE), s).unwrap();
    }

    #[test]
    fn loads_labels_in_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let png = encode_png(&Tensor::full(&[3, 8, 8], 0.25)).unwrap();
        std::fs::write(dir.path().join("a.png"), &png).unwrap();
        let labels = ["live", "live", "spoof", "live", "spoof", "live", "spoof", "live", "spoof", "live"];
        let rows: Vec<(&str, &str, usize)> = labels.iter().enumerate().map(|(i, l)| ("a.png", *l, i % 3)).collect();
        write_index(dir.path(), &rows);
        let d = load_directory_dataset(dir.path(), "x", 4).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.count(PadLabel::Live), 6);
        assert_eq!(d.count(PadLabel::Spoof), 4);
        assert_eq!(d.samples[2].pad_label, PadLabel::Spoof);
        assert_eq!(d.samples[0].image.shape(), &[3, 4, 4]);
    }

    #[test]
    fn unknown_label_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), encode_png(&Tensor::zeros(&[3, 4, 4])).unwrap()).unwrap();
        write_index(dir.path(), &[("a.png", "live", 0), ("a.png", "genuine", 1)]);
        match load_directory_dataset(dir.path(), "x", 4) {
            Err(Error::IndexRow { row, reason }) => {
                assert_eq!(row, 2);
                assert!(reason.contains("genuine"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unreadable_image_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.png"), b"not a png").unwrap();
        write_index(dir.path(), &[("bad.png", "live", 0)]);
        assert!(matches!(
            load_directory_dataset(dir.path(), "x", 4),
            Err(Error::IndexRow { row: 1, .. })
        ));
        write_index(dir.path(), &[("missing.png", "live", 0)]);
        assert!(matches!(
            load_directory_dataset(dir.path(), "x", 4),
            Err(Error::IndexRow { row: 1, .. })
        ));
    }

    #[test]
    fn missing_index_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_directory_dataset(dir.path(), "x", 4),
            Err(Error::MissingArtifact { .. })
        ));
    }
}
