use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti::{read_mask, read_volume};
use super::{LabelMask, Volume};
use crate::error::{Error, Result};

/// One row of a dataset manifest. Relative paths are resolved against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
    pub lesion_volume: usize,
}

impl CaseRecord {
    pub fn load(&self, base: &Path) -> Result<(Volume, LabelMask)> {
        let v = read_volume(&base.join(&self.volume_path))?;
        let m = read_mask(&base.join(&self.mask_path))?;
        if v.extents() != m.extents() {
            return Err(Error::Data(format!("{}: volume {:?} vs mask {:?}", self.id, v.extents(), m.extents())));
        }
        Ok((v, m))
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<CaseRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<CaseRecord>, _>>()?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[CaseRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        let rows = vec![CaseRecord {
            id: "case_000".into(),
            volume_path: "case_000_img.nii".into(),
            mask_path: "case_000_mask.nii".into(),
            lesion_volume: 42,
        }];
        write_manifest(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,volume_path,mask_path,lesion_volume\n"));
        assert_eq!(read_manifest(&p).unwrap(), rows);
    }
}
