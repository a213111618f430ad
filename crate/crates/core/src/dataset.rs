//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json          scene count, beam count, fingerprint, generator config
//! <root>/scenes/<idx>/points.bin
//! <root>/scenes/<idx>/cam<p>.npyish
//! <root>/scenes/<idx>/calib.json
//! <root>/scenes/<idx>/gt.json
//! ```
//!
//! `<idx>` is the scene index zero-padded to six digits. `points.bin` is a
//! headerless sequence of 18-byte records: `x, y, z, intensity` as
//! little-endian `f32`, then `beam_id` as little-endian `u16`.
//! `cam<p>.npyish` holds one image: the 8 magic bytes `NPYISH\x01\x00`, a
//! little-endian `u32` rank, that many little-endian `u32` dimensions
//! (`3, height, width`), then the little-endian `f32` data in row-major
//! order. The JSON files carry the dataset fingerprint next to their payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, BoxSize, CameraCalib, Point3};
use crate::scene_synth::{Image, LidarPoint, PointCloud, SceneSample};

pub const NPYISH_MAGIC: [u8; 8] = *b"NPYISH\x01\x00";
const POINT_RECORD: usize = 18;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fingerprint: String,
    pub scenes: usize,
    pub beams: usize,
    pub cameras: usize,
    /// Free-form description of how the data was produced.
    pub provenance: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: usize,
}

impl From<&Box3D> for GtBox {
    fn from(b: &Box3D) -> Self {
        Self {
            center: [b.center.x, b.center.y, b.center.z],
            size: [b.size.w, b.size.l, b.size.h],
            yaw: b.yaw,
            class: b.class_id,
        }
    }
}

impl From<&GtBox> for Box3D {
    fn from(g: &GtBox) -> Self {
        Box3D::new(
            Point3::new(g.center[0], g.center[1], g.center[2]),
            BoxSize {
                w: g.size[0],
                l: g.size[1],
                h: g.size[2],
            },
            g.yaw,
            g.class,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct GtFile {
    fingerprint: String,
    seed: u64,
    index: u64,
    boxes: Vec<GtBox>,
}

#[derive(Serialize, Deserialize)]
struct CalibFile {
    fingerprint: String,
    cameras: Vec<CameraCalib>,
}

pub fn scene_dir(root: &Path, idx: usize) -> PathBuf {
    root.join("scenes").join(format!("{idx:06}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(what, path, e.to_string()))
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_RECORD);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.beam.to_le_bytes());
    }
    out
}

pub fn decode_points(bytes: &[u8], beams: usize, path: &Path) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(POINT_RECORD) {
        return Err(Error::format(
            "point file",
            path,
            format!("length {} is not a multiple of {POINT_RECORD}", bytes.len()),
        ));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let points = bytes
        .chunks_exact(POINT_RECORD)
        .map(|r| LidarPoint {
            x: f(&r[0..4]),
            y: f(&r[4..8]),
            z: f(&r[8..12]),
            intensity: f(&r[12..16]),
            beam: u16::from_le_bytes([r[16], r[17]]),
        })
        .collect();
    Ok(PointCloud::from_points(points, beams))
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 + img.data.len() * 4);
    out.extend_from_slice(&NPYISH_MAGIC);
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in [3, img.height, img.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |r: &str| Error::format("image file", path, r);
    if bytes.len() < 12 || bytes[..8] != NPYISH_MAGIC {
        return Err(bad("missing magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let rank = u32_at(8);
    if rank != 3 || bytes.len() < 12 + 4 * rank {
        return Err(bad("expected a rank-3 tensor"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| u32_at(12 + 4 * i)).collect();
    if dims[0] != 3 {
        return Err(bad("expected 3 channels"));
    }
    let start = 12 + 4 * rank;
    let n = dims.iter().product::<usize>();
    if bytes.len() != start + 4 * n {
        return Err(bad("data length does not match the header"));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Image {
        height: dims[1],
        width: dims[2],
        data,
    })
}

pub fn write_dataset(
    root: &Path,
    samples: &[SceneSample],
    fingerprint: &str,
    provenance: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(root.join("scenes")).map_err(|e| Error::io(root, e))?;
    let manifest = Manifest {
        fingerprint: fingerprint.to_string(),
        scenes: samples.len(),
        beams: samples.first().map_or(0, |s| s.cloud.beams),
        cameras: samples.first().map_or(0, |s| s.calibs.len()),
        provenance,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    for (i, s) in samples.iter().enumerate() {
        write_scene(root, i, s, fingerprint)?;
    }
    Ok(())
}

pub fn write_scene(root: &Path, idx: usize, s: &SceneSample, fingerprint: &str) -> Result<()> {
    let dir = scene_dir(root, idx);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("points.bin"), &encode_points(&s.cloud))?;
    for (p, img) in s.images.iter().enumerate() {
        write(&dir.join(format!("cam{p}.npyish")), &encode_image(img))?;
    }
    write_json(
        &dir.join("calib.json"),
        &CalibFile {
            fingerprint: fingerprint.to_string(),
            cameras: s.calibs.clone(),
        },
    )?;
    write_json(
        &dir.join("gt.json"),
        &GtFile {
            fingerprint: fingerprint.to_string(),
            seed: s.seed,
            index: s.index,
            boxes: s.gt_boxes.iter().map(GtBox::from).collect(),
        },
    )
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    read_json(&root.join("manifest.json"), "manifest")
}

pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<SceneSample>)> {
    let manifest = read_manifest(root)?;
    let scenes = (0..manifest.scenes)
        .map(|i| read_scene(root, i, &manifest))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

pub fn read_scene(root: &Path, idx: usize, manifest: &Manifest) -> Result<SceneSample> {
    let dir = scene_dir(root, idx);
    let pts_path = dir.join("points.bin");
    let cloud = decode_points(&read(&pts_path)?, manifest.beams, &pts_path)?;
    let calib_path = dir.join("calib.json");
    let calib: CalibFile = read_json(&calib_path, "calibration")?;
    let gt_path = dir.join("gt.json");
    let gt: GtFile = read_json(&gt_path, "ground truth")?;
    for (path, fp) in [(&calib_path, &calib.fingerprint), (&gt_path, &gt.fingerprint)] {
        if fp != &manifest.fingerprint {
            return Err(Error::Fingerprint(format!(
                "{} carries {fp}, manifest carries {}",
                path.display(),
                manifest.fingerprint
            )));
        }
    }
    let images = (0..calib.cameras.len())
        .map(|p| {
            let path = dir.join(format!("cam{p}.npyish"));
            decode_image(&read(&path)?, &path)
        })
        .collect::<Result<Vec<_>>>()?;
    for c in &calib.cameras {
        c.validate()?;
    }
    Ok(SceneSample {
        cloud,
        images,
        calibs: calib.cameras,
        gt_boxes: gt.boxes.iter().map(Box3D::from).collect(),
        seed: gt.seed,
        index: gt.index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_synth::{generate_dataset, RigConfig, SynthConfig};

    fn tiny() -> SynthConfig {
        SynthConfig {
            n_scenes: 2,
            rays_per_beam: 32,
            rig: RigConfig {
                image_width: 16,
                image_height: 8,
                ..RigConfig::default()
            },
            ..SynthConfig::default()
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let data = generate_dataset(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, "abc", serde_json::json!({"kind": "test"})).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m.fingerprint, "abc");
        assert_eq!(m.scenes, 2);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.cloud, b.cloud);
            assert_eq!(a.images, b.images);
            assert_eq!(a.calibs, b.calibs);
            assert_eq!(a.index, b.index);
            for (x, y) in a.gt_boxes.iter().zip(&b.gt_boxes) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn point_records_are_18_bytes_little_endian() {
        let cloud = PointCloud::from_points(
            vec![LidarPoint {
                x: 1.0,
                y: -2.0,
                z: 0.5,
                intensity: 0.25,
                beam: 7,
            }],
            32,
        );
        let bytes = encode_points(&cloud);
        assert_eq!(bytes.len(), 18);
        assert_eq!(&bytes[0..4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[16..18], &[7, 0]);
        assert_eq!(decode_points(&bytes, 32, Path::new("x")).unwrap(), cloud);
        assert!(decode_points(&bytes[..17], 32, Path::new("x")).is_err());
    }

    #[test]
    fn image_header_layout() {
        let mut img = Image::new(2, 3);
        img.set(2, 1, 2, 0.5);
        let bytes = encode_image(&img);
        assert_eq!(&bytes[..8], b"NPYISH\x01\x00");
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..24], &[3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 24 + 18 * 4);
        assert_eq!(decode_image(&bytes, Path::new("x")).unwrap(), img);
        let mut broken = bytes.clone();
        broken[0] = b'X';
        assert!(decode_image(&broken, Path::new("x")).is_err());
    }

    #[test]
    fn mismatched_scene_fingerprint_is_rejected() {
        let data = generate_dataset(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, "abc", serde_json::Value::Null).unwrap();
        write_scene(dir.path(), 1, &data[1], "other").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Fingerprint(_))));
    }
}
