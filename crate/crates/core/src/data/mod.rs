//! Dataset manifests, WAV ingestion, spectrogram persistence, and
//! fold-based splits.

pub mod sgrm;
pub mod wav;

pub use sgrm::{load_spectrogram, read_spectrogram, save_spectrogram, write_spectrogram};
pub use wav::{parse_wav, read_wav, write_wav};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on predefined fold ids.
pub const MAX_FOLDS: u32 = 10;

/// One dataset entry: a file path, its predefined fold, and its class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub fold: u32,
    pub class_id: usize,
    pub class_name: String,
}

impl ManifestRow {
    pub fn validate(&self) -> Result<()> {
        if self.path.is_empty() {
            return Err(Error::Manifest("empty path".into()));
        }
        if !(1..=MAX_FOLDS).contains(&self.fold) {
            return Err(Error::Manifest(format!(
                "fold {} outside 1..={MAX_FOLDS} for {}",
                self.fold, self.path
            )));
        }
        Ok(())
    }
}

/// Read a `path,fold,class_id,class_name` CSV manifest, preserving row
/// order.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path.as_ref())
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.as_ref().display())))?;
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let row =
            record.map_err(|e| Error::Manifest(format!("row {}: {e}", i + 1)))?;
        row.validate()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Manifest(format!(
            "{}: no rows",
            path.as_ref().display()
        )));
    }
    Ok(rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.as_ref().display())))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Manifest(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Train/test index partition for one held-out fold.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub fold: u32,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Build one split per fold id in `1..=folds`, testing on the held-out fold
/// and training on the rest (predefined-fold protocol, no random
/// assignment). Folds with no rows are skipped with a warning.
pub fn kfold_splits(rows: &[ManifestRow], folds: u32) -> Result<Vec<FoldSplit>> {
    if folds == 0 || folds > MAX_FOLDS {
        return Err(Error::Manifest(format!("folds {folds} outside 1..={MAX_FOLDS}")));
    }
    for row in rows {
        row.validate()?;
        if row.fold > folds {
            return Err(Error::Manifest(format!(
                "row {} has fold {} but only {folds} folds requested",
                row.path, row.fold
            )));
        }
    }
    let mut splits = Vec::new();
    for fold in 1..=folds {
        let test: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.fold == fold)
            .map(|(i, _)| i)
            .collect();
        if test.is_empty() {
            log::warn!("fold {fold} is empty; split skipped");
            continue;
        }
        let train: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.fold != fold)
            .map(|(i, _)| i)
            .collect();
        splits.push(FoldSplit { fold, train, test });
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_rows() -> Vec<ManifestRow> {
        (0..12)
            .map(|i| ManifestRow {
                path: format!("clip{i}.wav"),
                fold: (i % 3 + 1) as u32,
                class_id: i % 2,
                class_name: if i % 2 == 0 { "dog" } else { "siren" }.into(),
            })
            .collect()
    }

    #[test]
    fn manifest_roundtrip_preserves_order() {
        use tempfile::tempdir;
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let rows = demo_rows();
        write_manifest(&path, &rows).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, rows);
        // idempotent: write what was read, read again
        let path2 = dir.path().join("again.csv");
        write_manifest(&path2, &back).unwrap();
        assert_eq!(read_manifest(&path2).unwrap(), rows);
    }

    #[test]
    fn manifest_rejects_bad_folds() {
        let mut row = demo_rows().remove(0);
        row.fold = 0;
        assert!(row.validate().is_err());
        row.fold = 11;
        assert!(row.validate().is_err());
    }

    #[test]
    fn splits_partition_the_manifest() {
        let rows = demo_rows();
        let splits = kfold_splits(&rows, 3).unwrap();
        assert_eq!(splits.len(), 3);
        for split in &splits {
            assert!(split.test.iter().all(|&i| rows[i].fold == split.fold));
            assert!(split.train.iter().all(|&i| rows[i].fold != split.fold));
            let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..rows.len()).collect::<Vec<_>>());
            // per-class counts preserved across the union
            let count = |ids: &[usize], class: usize| {
                ids.iter().filter(|&&i| rows[i].class_id == class).count()
            };
            for class in 0..2 {
                assert_eq!(
                    count(&split.train, class) + count(&split.test, class),
                    rows.iter().filter(|r| r.class_id == class).count()
                );
            }
        }
    }

    #[test]
    fn empty_fold_is_skipped_not_fatal() {
        let rows: Vec<ManifestRow> = demo_rows()
            .into_iter()
            .map(|mut r| {
                r.fold = r.fold.min(2);
                r
            })
            .collect();
        let splits = kfold_splits(&rows, 3).unwrap();
        assert_eq!(splits.len(), 2, "fold 3 is empty and must be skipped");
    }

    #[test]
    fn fold_out_of_requested_range_errors() {
        let rows = demo_rows(); // folds 1..=3
        assert!(kfold_splits(&rows, 2).is_err());
    }
}
