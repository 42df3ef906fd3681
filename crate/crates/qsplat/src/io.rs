//! File formats: PPM images, raw feature maps, feature tables, camera
//! JSON, cluster label lists, and the voxel container.
//!
//! Raw arrays are little-endian 32-bit floats with a JSON sidecar at
//! `<path>.json` describing the shape. The voxel container layout is:
//! magic "QVOX", u32 version (1), f64 grid size, u64 unique-voxel count
//! U, u64 sampled-voxel count S, u64 gaussian count G, then U*3 i64
//! cells, U*7 f64 features, S u64 inverse indices, G u64 counts, all
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::RenderedMap;
use crate::scene::{CameraModel, FeatureTable};
use crate::voxel::{VoxelSet, VOXEL_FEATURE_LEN};

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write an RGB map as a binary PPM (P6, 8 bits per channel). Values
/// are clamped to [0, 1] and rounded.
pub fn write_ppm(path: &Path, map: &RenderedMap) -> Result<()> {
    if map.channels != 3 {
        return Err(Error::Contract(format!(
            "PPM output needs 3 channels, got {}",
            map.channels
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", map.width, map.height)?;
    let bytes: Vec<u8> = map
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FeatureMapSidecar {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Write a rendered map as raw f32 plus a shape sidecar.
pub fn save_feature_map(path: &Path, map: &RenderedMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in &map.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let sidecar = FeatureMapSidecar {
        height: map.height,
        width: map.width,
        channels: map.channels,
    };
    serde_json::to_writer_pretty(File::create(sidecar_path(path))?, &sidecar)?;
    Ok(())
}

pub fn load_feature_map(path: &Path) -> Result<(FeatureMapSidecar, Vec<f32>)> {
    let sidecar: FeatureMapSidecar = serde_json::from_reader(File::open(sidecar_path(path))?)?;
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let expected = sidecar.height * sidecar.width * sidecar.channels * 4;
    if bytes.len() != expected {
        return Err(Error::Schema(format!(
            "feature map holds {} bytes, sidecar implies {expected}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Ok((sidecar, data))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FeatureTableSidecar {
    pub count: usize,
    pub channels: usize,
    pub seed: u64,
    pub steps: usize,
}

/// Write a feature table as row-major raw f32 plus a sidecar recording
/// its provenance (training seed and step count).
pub fn save_feature_table(path: &Path, table: &FeatureTable, seed: u64, steps: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in &table.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let sidecar = FeatureTableSidecar {
        count: table.rows,
        channels: table.channels,
        seed,
        steps,
    };
    serde_json::to_writer_pretty(File::create(sidecar_path(path))?, &sidecar)?;
    Ok(())
}

pub fn load_feature_table(path: &Path) -> Result<(FeatureTable, FeatureTableSidecar)> {
    let sidecar: FeatureTableSidecar = serde_json::from_reader(File::open(sidecar_path(path))?)?;
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let expected = sidecar.count * sidecar.channels * 4;
    if bytes.len() != expected {
        return Err(Error::Schema(format!(
            "feature table holds {} bytes, sidecar implies {expected}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    Ok((FeatureTable::new(sidecar.count, sidecar.channels, data)?, sidecar))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraJson {
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major 4x4 world-to-camera transform.
    world_to_camera: [[f64; 4]; 4],
    near: f64,
}

pub fn load_camera_json(path: &Path) -> Result<CameraModel> {
    let raw: CameraJson = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let m = Matrix4::from_fn(|r, c| raw.world_to_camera[r][c]);
    CameraModel::new(
        m, raw.fx, raw.fy, raw.cx, raw.cy, raw.width, raw.height, raw.near,
    )
}

pub fn save_camera_json(path: &Path, cam: &CameraModel) -> Result<()> {
    let raw = CameraJson {
        width: cam.width,
        height: cam.height,
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        world_to_camera: std::array::from_fn(|r| {
            std::array::from_fn(|c| cam.world_to_camera[(r, c)])
        }),
        near: cam.near,
    };
    serde_json::to_writer_pretty(File::create(path)?, &raw)?;
    Ok(())
}

/// Per-Gaussian cluster labels as a JSON array.
pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    serde_json::to_writer(BufWriter::new(File::create(path)?), labels)?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

const VOXEL_MAGIC: &[u8; 4] = b"QVOX";
const VOXEL_VERSION: u32 = 1;

pub fn save_voxel_set(path: &Path, vs: &VoxelSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VOXEL_MAGIC)?;
    w.write_all(&VOXEL_VERSION.to_le_bytes())?;
    w.write_all(&vs.grid_size.to_le_bytes())?;
    w.write_all(&(vs.cells.len() as u64).to_le_bytes())?;
    w.write_all(&(vs.inverse.len() as u64).to_le_bytes())?;
    w.write_all(&(vs.counts.len() as u64).to_le_bytes())?;
    for cell in &vs.cells {
        for &c in cell {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    for f in &vs.features {
        for &v in f {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for &i in &vs.inverse {
        w.write_all(&(i as u64).to_le_bytes())?;
    }
    for &c in &vs.counts {
        w.write_all(&(c as u64).to_le_bytes())?;
    }
    Ok(())
}

pub fn load_voxel_set(path: &Path) -> Result<VoxelSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VOXEL_MAGIC {
        return Err(Error::Schema("not a voxel container (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VOXEL_VERSION {
        return Err(Error::Schema(format!("unsupported voxel container version {version}")));
    }
    let grid_size = read_f64(&mut r)?;
    let unique = read_u64(&mut r)? as usize;
    let sampled = read_u64(&mut r)? as usize;
    let gaussians = read_u64(&mut r)? as usize;
    let mut cells = Vec::with_capacity(unique);
    for _ in 0..unique {
        cells.push([read_i64(&mut r)?, read_i64(&mut r)?, read_i64(&mut r)?]);
    }
    let mut features = Vec::with_capacity(unique);
    for _ in 0..unique {
        let mut f = [0.0; VOXEL_FEATURE_LEN];
        for v in &mut f {
            *v = read_f64(&mut r)?;
        }
        features.push(f);
    }
    let mut inverse = Vec::with_capacity(sampled);
    for _ in 0..sampled {
        inverse.push(read_u64(&mut r)? as usize);
    }
    let mut counts = Vec::with_capacity(gaussians);
    for _ in 0..gaussians {
        counts.push(read_u64(&mut r)? as usize);
    }
    Ok(VoxelSet {
        cells,
        features,
        inverse,
        counts,
        grid_size,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_i64(r: &mut impl Read) -> Result<i64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(i64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, look_at_camera, SyntheticSceneSpec};
    use crate::voxel::voxelize;

    fn tmp(name: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join(name);
        (dir, path)
    }

    #[test]
    fn ppm_header_and_bytes() {
        let map = RenderedMap {
            width: 2,
            height: 1,
            channels: 3,
            data: vec![0.0, 0.5, 1.0, 2.0, -1.0, 0.25],
            residual: vec![0.0, 0.0],
            covered: vec![true, true],
        };
        let (_dir, path) = tmp("img.ppm");
        write_ppm(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 0, 64]);
    }

    #[test]
    fn ppm_rejects_non_rgb() {
        let map = RenderedMap {
            width: 1,
            height: 1,
            channels: 2,
            data: vec![0.0, 0.0],
            residual: vec![0.0],
            covered: vec![true],
        };
        let (_dir, path) = tmp("bad.ppm");
        assert!(write_ppm(&path, &map).is_err());
    }

    #[test]
    fn feature_map_round_trip() {
        let map = RenderedMap {
            width: 3,
            height: 2,
            channels: 4,
            data: (0..24).map(|i| i as f32 * 0.5).collect(),
            residual: vec![0.0; 6],
            covered: vec![true; 6],
        };
        let (_dir, path) = tmp("feat.bin");
        save_feature_map(&path, &map).unwrap();
        let (sidecar, data) = load_feature_map(&path).unwrap();
        assert_eq!(sidecar, FeatureMapSidecar { height: 2, width: 3, channels: 4 });
        assert_eq!(data, map.data);
    }

    #[test]
    fn feature_table_round_trip() {
        let table = FeatureTable::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (_dir, path) = tmp("table.bin");
        save_feature_table(&path, &table, 42, 100).unwrap();
        let (back, sidecar) = load_feature_table(&path).unwrap();
        assert_eq!(back.data, table.data);
        assert_eq!(sidecar.seed, 42);
        assert_eq!(sidecar.steps, 100);
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = look_at_camera(3.0, 64, 48, 50.0);
        let (_dir, path) = tmp("cam.json");
        save_camera_json(&path, &cam).unwrap();
        let back = load_camera_json(&path).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn labels_round_trip() {
        let labels = vec![0usize, 3, 1, 1, 2];
        let (_dir, path) = tmp("labels.json");
        save_labels(&path, &labels).unwrap();
        assert_eq!(load_labels(&path).unwrap(), labels);
    }

    #[test]
    fn voxel_container_round_trip() {
        let spec = SyntheticSceneSpec {
            count: 200,
            extent: 3.0,
            scale_range: (0.05, 0.2),
            opacity_range: (0.3, 0.8),
            clusters: 4,
            seed: 8,
        };
        let (scene, _) = generate_scene(&spec);
        let vs = voxelize(&scene, 0.25).unwrap();
        let (_dir, path) = tmp("voxels.bin");
        save_voxel_set(&path, &vs).unwrap();
        let back = load_voxel_set(&path).unwrap();
        assert_eq!(back, vs);
    }

    #[test]
    fn bad_magic_is_schema_error() {
        let (_dir, path) = tmp("garbage.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_voxel_set(&path), Err(Error::Schema(_))));
    }
}
