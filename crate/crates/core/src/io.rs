//! On-disk formats: volumes (JSON header plus raw little-endian `f32`),
//! point clouds (CSV), and JSON documents for transforms, boxes and heads.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::volume::{Dims, VoxelGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub dtype: String,
}

/// The raw sibling of a volume header: same stem, `.raw` extension.
pub fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `header` as JSON and the samples, narrowed to `f32`, next to it.
pub fn save_volume(header: &Path, grid: &VoxelGrid) -> Result<()> {
    let h = VolumeHeader {
        dims: grid.dims(),
        spacing: grid.spacing(),
        dtype: "f32".into(),
    };
    save_json(header, &h)?;
    let mut raw = Vec::with_capacity(grid.len() * 4);
    for &v in grid.data() {
        raw.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write(&raw_path(header), raw)
}

pub fn load_volume(header: &Path) -> Result<VoxelGrid> {
    let h: VolumeHeader = load_json(header)?;
    if h.dtype != "f32" {
        return Err(Error::parse(header, format!("unsupported dtype {:?}", h.dtype)));
    }
    let raw_file = raw_path(header);
    let raw = read(&raw_file)?;
    let expected = h.dims.iter().product::<usize>() * 4;
    if raw.len() != expected {
        return Err(Error::parse(
            &raw_file,
            format!("expected {expected} bytes for dims {:?}, found {}", h.dims, raw.len()),
        ));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    VoxelGrid::new(h.dims, h.spacing, data).map_err(|e| Error::parse(header, e))
}

pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    write(path, text)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e))
}

pub fn cloud_to_csv(cloud: &PointCloud) -> String {
    let mut s = String::from("x,y,z\n");
    for p in &cloud.points {
        // `Display` for f64 prints the shortest string that parses back exactly
        let _ = writeln!(s, "{},{},{}", p[0], p[1], p[2]);
    }
    s
}

pub fn cloud_from_csv(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "x,y,z" => {}
        _ => return Err(Error::parse(path, "missing header \"x,y,z\"")),
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        let bad = || Error::parse(path, format!("line {}: expected three numbers, got {line:?}", i + 1));
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if v.len() != 3 {
            return Err(bad());
        }
        points.push([v[0], v[1], v[2]]);
    }
    PointCloud::new(points).map_err(|e| Error::parse(path, e))
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write(path, cloud_to_csv(cloud))
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    cloud_from_csv(&read_text(path)?, path)
}

/// CSV with header `step,loss`.
pub fn save_loss_trace(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    write(path, s)
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::RigidTransform;
    use crate::volume::Box3;

    #[test]
    fn volume_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGrid::from_fn([3, 4, 5], |z, y, x| (z as f64) * 0.5 - (y * x) as f64 * 0.25).with_spacing([2.0, 1.0, 0.5]);
        let h = dir.path().join("v.json");
        save_volume(&h, &g).unwrap();
        assert_eq!(fs::metadata(raw_path(&h)).unwrap().len(), 60 * 4);
        assert_eq!(load_volume(&h).unwrap(), g);
        let header: serde_json::Value = load_json(&h).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["dims"], serde_json::json!([3, 4, 5]));
    }

    #[test]
    fn raw_bytes_are_little_endian_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGrid::from_fn([1, 2, 2], |_, y, x| (2 * y + x) as f64);
        let h = dir.path().join("v.json");
        save_volume(&h, &g).unwrap();
        let raw = fs::read(raw_path(&h)).unwrap();
        assert_eq!(&raw[4..8], &1.0f32.to_le_bytes());
        assert_eq!(&raw[8..12], &2.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_raw_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let h = dir.path().join("v.json");
        save_volume(&h, &VoxelGrid::zeros([2, 2, 2])).unwrap();
        fs::write(raw_path(&h), [0u8; 12]).unwrap();
        assert!(matches!(load_volume(&h), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_cloud(Path::new("/nonexistent/t.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/t.csv"));
    }

    #[test]
    fn cloud_round_trip() {
        let c = PointCloud::new(vec![[0.1, 1e-17, -3.25], [1.0 / 3.0, 2.0f64.sqrt(), 7.0]]).unwrap();
        let back = cloud_from_csv(&cloud_to_csv(&c), Path::new("mem")).unwrap();
        for (a, b) in c.points.iter().zip(&back.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-9);
            }
        }
        assert!(cloud_from_csv("a,b,c\n1,2,3\n", Path::new("mem")).is_err());
        assert!(cloud_from_csv("x,y,z\n1,2\n", Path::new("mem")).is_err());
    }

    #[test]
    fn json_documents_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = RigidTransform::from_axis_angle([1.0, 2.0, 0.5], 0.3, [1.0, -2.0, 0.25]);
        let p = dir.path().join("t.json");
        save_json(&p, &t).unwrap();
        assert_eq!(load_json::<RigidTransform>(&p).unwrap(), t);
        let v: serde_json::Value = load_json(&p).unwrap();
        assert_eq!(v["rotation"].as_array().unwrap().len(), 3);
        let b = Box3::new([1, 2, 3], [4, 5, 6]).unwrap();
        save_json(&p, &b).unwrap();
        assert_eq!(load_json::<Box3>(&p).unwrap(), b);
    }

    #[test]
    fn loss_trace_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        save_loss_trace(&p, &[1.5, 0.25]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "step,loss\n0,1.5\n1,0.25\n");
    }
}
