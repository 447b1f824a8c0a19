//! Dataset directory layout:
//!
//! ```text
//! images/{id}.ppm
//! masks/{id}.pgm
//! meta.csv        id,kind,seed
//! ```
//!
//! Ids are zero-padded scene indices, so lexicographic and index order
//! agree.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm, NetpbmError};
use super::synth::{SceneKind, SyntheticScene};
use crate::ensemble::BinaryMask;
use crate::tensor::Tensor;

pub const META_HEADER: &str = "id,kind,seed";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0} exists and is not empty (use --force to overwrite)")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Netpbm(#[from] NetpbmError),
    #[error("{path}: {detail}")]
    Meta { path: PathBuf, detail: String },
    #[error("scene {id}: {detail}")]
    Mismatch { id: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneMeta {
    pub id: String,
    pub kind: SceneKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub meta: SceneMeta,
    pub image: Tensor,
    pub mask: BinaryMask,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

pub fn scene_id(index: usize, n: usize) -> String {
    let digits = n.saturating_sub(1).to_string().len().max(4);
    format!("{index:0digits$}")
}

/// Writes `scenes` under `dir`. A non-empty `dir` is refused unless
/// `force`, in which case the previous images, masks and meta are removed.
pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene], force: bool) -> Result<Vec<SceneMeta>, DatasetError> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(io(dir))?.next().is_some();
        if non_empty && !force {
            return Err(DatasetError::Exists(dir.to_path_buf()));
        }
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(io(&p))?;
            }
        }
    }
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(io(&p))?;
    }
    let mut meta = Vec::with_capacity(scenes.len());
    let mut csv = format!("{META_HEADER}\n");
    for (i, s) in scenes.iter().enumerate() {
        let id = scene_id(i, scenes.len());
        write_ppm(&s.image, &dir.join("images").join(format!("{id}.ppm")))?;
        write_pgm(&s.mask, &dir.join("masks").join(format!("{id}.pgm")))?;
        writeln!(csv, "{id},{},{}", s.kind, s.seed).expect("string write");
        meta.push(SceneMeta { id, kind: s.kind, seed: s.seed });
    }
    let path = dir.join("meta.csv");
    std::fs::write(&path, csv).map_err(io(&path))?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<Vec<SceneMeta>, DatasetError> {
    let path = dir.join("meta.csv");
    let meta_err = |detail: String| DatasetError::Meta { path: path.clone(), detail };
    let mut reader = csv::Reader::from_path(&path).map_err(|e| meta_err(e.to_string()))?;
    let header = reader.headers().map_err(|e| meta_err(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != META_HEADER {
        return Err(meta_err(format!("header must be `{META_HEADER}`")));
    }
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| meta_err(e.to_string()))?;
        let at = |detail: String| meta_err(format!("row {}: {detail}", line + 1));
        let kind = record[1].parse::<SceneKind>().map_err(at)?;
        let seed = record[2].parse::<u64>().map_err(|e| at(format!("seed `{}`: {e}", &record[2])))?;
        out.push(SceneMeta { id: record[0].to_string(), kind, seed });
    }
    Ok(out)
}

/// Loads every scene listed in `meta.csv`, in file order.
pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetEntry>, DatasetError> {
    read_meta(dir)?
        .into_iter()
        .map(|meta| {
            let image = read_ppm(&dir.join("images").join(format!("{}.ppm", meta.id)))?;
            let mask = read_pgm(&dir.join("masks").join(format!("{}.pgm", meta.id)))?;
            let (_, h, w) = image.chw().expect("ppm is [3,H,W]");
            if mask.dims() != (w, h) {
                return Err(DatasetError::Mismatch {
                    id: meta.id,
                    detail: format!("image is {w}x{h} but mask is {}x{}", mask.width(), mask.height()),
                });
            }
            if (meta.kind == SceneKind::Empty) != mask.is_empty() {
                return Err(DatasetError::Mismatch { id: meta.id, detail: format!("kind {} disagrees with mask", meta.kind) });
            }
            Ok(DatasetEntry { meta, image, mask })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, KindMix};

    #[test]
    fn ids_are_padded() {
        assert_eq!(scene_id(7, 500), "0007");
        assert_eq!(scene_id(12, 20000), "00012");
    }

    #[test]
    fn roundtrip_and_force() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let scenes = generate_dataset(3, 12, 16, &KindMix::default()).unwrap();
        let meta = write_dataset(&root, &scenes, false).unwrap();
        let back = read_dataset(&root).unwrap();
        assert_eq!(back.len(), 12);
        for ((e, s), m) in back.iter().zip(&scenes).zip(&meta) {
            assert_eq!(&e.meta, m);
            assert_eq!(e.mask, s.mask);
            assert_eq!(e.meta.kind, s.kind);
            assert!(e.image.data().iter().zip(s.image.data()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-15));
        }
        assert!(matches!(write_dataset(&root, &scenes, false), Err(DatasetError::Exists(_))));
        write_dataset(&root, &scenes[..5], true).unwrap();
        assert_eq!(read_dataset(&root).unwrap().len(), 5);
        assert_eq!(std::fs::read_dir(root.join("images")).unwrap().count(), 5);
    }

    #[test]
    fn bad_meta() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("meta.csv"), "id,kind,seed\n0000,triangle,3\n").unwrap();
        let err = read_meta(dir.path()).unwrap_err();
        assert!(err.to_string().contains("triangle"), "{err}");
        std::fs::write(dir.path().join("meta.csv"), "name,kind\n").unwrap();
        assert!(read_meta(dir.path()).is_err());
    }
}
