// Latent files, data manifests and checkpoint loading for the command line.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::RocNet;
use crate::voxel::VoxelGrid;

pub const LATENT_MAGIC: &[u8; 4] = b"RLAT";
pub const LATENT_VERSION: u8 = 1;

pub fn write_latents(path: &Path, codes: &[Vec<f32>]) -> Result<()> {
    let dim = codes.first().map_or(0, Vec::len);
    if codes.iter().any(|c| c.len() != dim) {
        return Err(Error::Dimension("latent codes differ in length".into()));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(LATENT_MAGIC)?;
    w.write_all(&[LATENT_VERSION])?;
    w.write_all(&(codes.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for v in codes.iter().flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_latents(path: &Path) -> Result<Vec<Vec<f32>>> {
    let mut bytes = Vec::new();
    BufReader::new(std::fs::File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 13 || &bytes[..4] != LATENT_MAGIC || bytes[4] != LATENT_VERSION {
        return Err(Error::Format(format!("{} is not a latent file", path.display())));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    if body.len() != count * dim * 4 {
        return Err(Error::Format(format!("latent file holds {} bytes, expected {}", body.len(), count * dim * 4)));
    }
    let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(values.chunks(dim.max(1)).take(count).map(<[f32]>::to_vec).collect())
}

/// One manifest row: a grid file and its class label.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest; relative paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rows = Vec::new();
    for r in csv::Reader::from_path(path).map_err(csv_err)?.deserialize() {
        let mut row: ManifestRow = r.map_err(csv_err)?;
        if row.path.is_relative() {
            row.path = base.join(&row.path);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("manifest {} has no rows", path.display())));
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Grids named directly, or through any `.csv` manifest among `inputs`.
pub fn load_grids(inputs: &[PathBuf]) -> Result<(Vec<VoxelGrid>, Vec<String>)> {
    let mut grids = Vec::new();
    let mut labels = Vec::new();
    for p in inputs {
        if p.extension().is_some_and(|e| e == "csv") {
            for row in read_manifest(p)? {
                grids.push(VoxelGrid::load(&row.path)?);
                labels.push(row.label);
            }
        } else {
            grids.push(VoxelGrid::load(p)?);
            labels.push(String::new());
        }
    }
    if grids.is_empty() {
        return Err(Error::EmptyInput("no grids given".into()));
    }
    Ok((grids, labels))
}

/// Loads a checkpoint at either precision as an `f32` model.
pub fn load_model(path: &Path) -> Result<RocNet<f32>> {
    match RocNet::<f32>::load(path) {
        Ok(net) => Ok(net),
        Err(Error::Format(_)) => Ok(RocNet::<f64>::load(path)?.cast()),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.rlat");
        let codes = vec![vec![1.5f32, -2.0, 0.25], vec![0.0, 3.0, -1e-7]];
        write_latents(&path, &codes).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 13 + 6 * 4);
        assert_eq!(read_latents(&path).unwrap(), codes);
        std::fs::write(&path, b"RLAT\x01\x02\x00\x00\x00\x03\x00\x00\x00").unwrap();
        assert!(matches!(read_latents(&path), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_paths_resolve_against_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![ManifestRow { path: "a.rvox".into(), label: "sphere".into() }];
        write_manifest(&path, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "path,label\na.rvox,sphere\n");
        let back = read_manifest(&path).unwrap();
        assert_eq!(back[0].path, dir.path().join("a.rvox"));
    }
}
