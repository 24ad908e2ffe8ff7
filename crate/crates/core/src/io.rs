//! Binary and text artifact formats.
//!
//! All multi-byte integers and floats are little-endian.
//!
//! - `PMAP1\0` + u32 N,H,W + u8 frame tag (0 world, 1 camera) + N*H*W*3 f64.
//! - `MASK1\0` + u32 N,H,W + bit-packed rows, LSB-first within each byte,
//!   each (n,h) row padded to a byte boundary.
//! - `CAMS1\0` + u32 N + per view 18 f64: rotation row-major (9), translation
//!   (3), fx, fy, cx, cy, H, W.
//! - `CGRD1\0` + u32 N,H,W + N*H*W f64 — scalar grids (confidence).
//! - `DFCK1\0` + u32 array count + entries of: u16 name length, UTF-8 name,
//!   u8 rank, u32 dims, f64 payload — model checkpoints.
//! - ASCII PLY export of a point map (x y z per vertex, row-major).
//! - Line-oriented dataset manifest: `pair_id seed op_tag files...`.
//! - Key-value config text: one `key = value` per line, `#` comments.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{CameraView, EditMask, Frame, PointMap};

pub const PMAP_MAGIC: &[u8; 6] = b"PMAP1\0";
pub const MASK_MAGIC: &[u8; 6] = b"MASK1\0";
pub const CAMS_MAGIC: &[u8; 6] = b"CAMS1\0";
pub const CGRD_MAGIC: &[u8; 6] = b"CGRD1\0";
pub const CKPT_MAGIC: &[u8; 6] = b"DFCK1\0";

fn open_read(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn open_write(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_all(w: &mut impl Write, path: &Path, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_exact(r: &mut impl Read, path: &Path, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_magic(r: &mut impl Read, path: &Path, expected: &[u8; 6], what: &str) -> Result<()> {
    let mut magic = [0u8; 6];
    read_exact(r, path, &mut magic)?;
    if &magic != expected {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected {what}",
            path.display(),
            magic
        )));
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, path, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, path, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read, path: &Path) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, path, &mut b)?;
    Ok(b[0])
}

fn read_f64s(r: &mut impl Read, path: &Path, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    read_exact(r, path, &mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_f64s(w: &mut impl Write, path: &Path, values: &[f64]) -> Result<()> {
    for v in values {
        write_all(w, path, &v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_pointmap(path: impl AsRef<Path>, p: &PointMap) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_write(path)?;
    write_all(&mut w, path, PMAP_MAGIC)?;
    for dim in [p.views, p.height, p.width] {
        write_all(&mut w, path, &(dim as u32).to_le_bytes())?;
    }
    let tag: u8 = match p.frame {
        Frame::World => 0,
        Frame::Camera => 1,
    };
    write_all(&mut w, path, &[tag])?;
    write_f64s(&mut w, path, p.values())?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pointmap(path: impl AsRef<Path>) -> Result<PointMap> {
    let path = path.as_ref();
    let mut r = open_read(path)?;
    read_magic(&mut r, path, PMAP_MAGIC, "PMAP1")?;
    let n = read_u32(&mut r, path)? as usize;
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    let frame = match read_u8(&mut r, path)? {
        0 => Frame::World,
        1 => Frame::Camera,
        other => {
            return Err(Error::Format(format!(
                "{}: unknown frame tag {other}",
                path.display()
            )))
        }
    };
    let values = read_f64s(&mut r, path, n * h * w * 3)?;
    PointMap::new(n, h, w, frame, values)
}

pub fn write_mask(path: impl AsRef<Path>, m: &EditMask) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_write(path)?;
    write_all(&mut w, path, MASK_MAGIC)?;
    for dim in [m.views, m.height, m.width] {
        write_all(&mut w, path, &(dim as u32).to_le_bytes())?;
    }
    let row_bytes = m.width.div_ceil(8);
    let mut row = vec![0u8; row_bytes];
    for n in 0..m.views {
        for h in 0..m.height {
            row.iter_mut().for_each(|b| *b = 0);
            for ww in 0..m.width {
                if m.get(n, h, ww) == 1 {
                    row[ww / 8] |= 1 << (ww % 8);
                }
            }
            write_all(&mut w, path, &row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<EditMask> {
    let path = path.as_ref();
    let mut r = open_read(path)?;
    read_magic(&mut r, path, MASK_MAGIC, "MASK1")?;
    let n = read_u32(&mut r, path)? as usize;
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    let row_bytes = w.div_ceil(8);
    let mut values = vec![0u8; n * h * w];
    let mut row = vec![0u8; row_bytes];
    for view in 0..n {
        for hh in 0..h {
            read_exact(&mut r, path, &mut row)?;
            for ww in 0..w {
                values[(view * h + hh) * w + ww] = (row[ww / 8] >> (ww % 8)) & 1;
            }
        }
    }
    EditMask::new(n, h, w, values)
}

pub fn write_cameras(path: impl AsRef<Path>, cams: &[CameraView]) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_write(path)?;
    write_all(&mut w, path, CAMS_MAGIC)?;
    write_all(&mut w, path, &(cams.len() as u32).to_le_bytes())?;
    for cam in cams {
        let mut values = Vec::with_capacity(18);
        for r in 0..3 {
            for c in 0..3 {
                values.push(cam.rotation[(r, c)]);
            }
        }
        values.extend_from_slice(&[cam.translation.x, cam.translation.y, cam.translation.z]);
        values.extend_from_slice(&[cam.fx, cam.fy, cam.cx, cam.cy]);
        values.extend_from_slice(&[cam.height as f64, cam.width as f64]);
        write_f64s(&mut w, path, &values)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cameras(path: impl AsRef<Path>) -> Result<Vec<CameraView>> {
    let path = path.as_ref();
    let mut r = open_read(path)?;
    read_magic(&mut r, path, CAMS_MAGIC, "CAMS1")?;
    let n = read_u32(&mut r, path)? as usize;
    let mut cams = Vec::with_capacity(n);
    for _ in 0..n {
        let v = read_f64s(&mut r, path, 18)?;
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        let translation = Vector3::new(v[9], v[10], v[11]);
        cams.push(CameraView::new(
            rotation,
            translation,
            v[12],
            v[13],
            v[14],
            v[15],
            v[16] as usize,
            v[17] as usize,
        )?);
    }
    Ok(cams)
}

/// Scalar per-pixel grid (confidence); shape (N, H, W).
pub fn write_scalar_grid(
    path: impl AsRef<Path>,
    views: usize,
    height: usize,
    width: usize,
    values: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    if values.len() != views * height * width {
        return Err(Error::Shape(format!(
            "scalar grid expects {} values, got {}",
            views * height * width,
            values.len()
        )));
    }
    let mut w = open_write(path)?;
    write_all(&mut w, path, CGRD_MAGIC)?;
    for dim in [views, height, width] {
        write_all(&mut w, path, &(dim as u32).to_le_bytes())?;
    }
    write_f64s(&mut w, path, values)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scalar_grid(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let mut r = open_read(path)?;
    read_magic(&mut r, path, CGRD_MAGIC, "CGRD1")?;
    let n = read_u32(&mut r, path)? as usize;
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    let values = read_f64s(&mut r, path, n * h * w)?;
    Ok((n, h, w, values))
}

/// ASCII PLY export, one vertex per pixel in row-major (n, h, w) order.
/// Coordinates are printed with the shortest round-trippable representation.
pub fn write_ply(path: impl AsRef<Path>, p: &PointMap) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_write(path)?;
    let header = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        p.pixels()
    );
    write_all(&mut w, path, header.as_bytes())?;
    for px in p.values().chunks_exact(3) {
        let line = format!("{} {} {}\n", px[0], px[1], px[2]);
        write_all(&mut w, path, line.as_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Named f64 arrays with explicit dims, as stored in checkpoints.
pub type NamedArrays = Vec<(String, Vec<u32>, Vec<f64>)>;

/// Write named arrays into the checkpoint container.
pub fn write_named_arrays(
    path: impl AsRef<Path>,
    arrays: &[(String, Vec<u32>, Vec<f64>)],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_write(path)?;
    write_all(&mut w, path, CKPT_MAGIC)?;
    write_all(&mut w, path, &(arrays.len() as u32).to_le_bytes())?;
    for (name, dims, values) in arrays {
        let expect: usize = dims.iter().map(|&d| d as usize).product();
        if expect != values.len() {
            return Err(Error::Shape(format!(
                "array {name}: dims {:?} imply {expect} values, got {}",
                dims,
                values.len()
            )));
        }
        let name_bytes = name.as_bytes();
        write_all(&mut w, path, &(name_bytes.len() as u16).to_le_bytes())?;
        write_all(&mut w, path, name_bytes)?;
        write_all(&mut w, path, &[dims.len() as u8])?;
        for d in dims {
            write_all(&mut w, path, &d.to_le_bytes())?;
        }
        write_f64s(&mut w, path, values)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_named_arrays(path: impl AsRef<Path>) -> Result<NamedArrays> {
    let path = path.as_ref();
    let mut r = open_read(path)?;
    read_magic(&mut r, path, CKPT_MAGIC, "DFCK1")?;
    let count = read_u32(&mut r, path)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, path, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("{}: array name not UTF-8", path.display())))?;
        let rank = read_u8(&mut r, path)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r, path)?);
        }
        let total: usize = dims.iter().map(|&d| d as usize).product();
        let values = read_f64s(&mut r, path, total)?;
        arrays.push((name, dims, values));
    }
    Ok(arrays)
}

/// One dataset pair in a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub seed: u64,
    pub op_tag: String,
    pub files: Vec<String>,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_write(path)?;
    for e in entries {
        let line = format!(
            "{} {} {} {}\n",
            e.pair_id,
            e.seed,
            e.op_tag,
            e.files.join(" ")
        );
        write_all(&mut w, path, line.as_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let r = open_read(path)?;
    let mut entries = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let pair_id = parts
            .next()
            .ok_or_else(|| {
                Error::Format(format!("{}:{}: empty manifest line", path.display(), i + 1))
            })?
            .to_string();
        let seed = parts
            .next()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::Format(format!("{}:{}: bad seed", path.display(), i + 1)))?;
        let op_tag = parts
            .next()
            .ok_or_else(|| Error::Format(format!("{}:{}: missing op tag", path.display(), i + 1)))?
            .to_string();
        let files: Vec<String> = parts.map(str::to_string).collect();
        entries.push(ManifestEntry {
            pair_id,
            seed,
            op_tag,
            files,
        });
    }
    Ok(entries)
}

/// Space-separated token ids on a single line.
pub fn write_tokens(path: impl AsRef<Path>, tokens: &[u16]) -> Result<()> {
    let path = path.as_ref();
    let text = tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_tokens(path: impl AsRef<Path>) -> Result<Vec<u16>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|s| {
            s.parse::<u16>()
                .map_err(|_| Error::Format(format!("{}: bad token id {s:?}", path.display())))
        })
        .collect()
}

/// Parse `key = value` lines. `#` starts a comment, blank lines are skipped.
/// Returns pairs in file order; key recognition is the caller's contract.
pub fn parse_kv_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{origin}:{}: expected `key = value`, got {raw:?}",
                i + 1
            ))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_kv_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv_text(&text, &path.display().to_string())
}

/// Resolve a manifest-relative file name.
pub fn sibling(manifest: &Path, file: &str) -> PathBuf {
    match manifest.parent() {
        Some(dir) => dir.join(file),
        None => PathBuf::from(file),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn pointmap_roundtrip_bitexact() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let values: Vec<f64> = (0..2 * 3 * 4 * 3)
            .map(|_| rng.gen_range(-5.0..5.0))
            .collect();
        let p = PointMap::new(2, 3, 4, Frame::Camera, values).unwrap();
        let path = dir.path().join("a.pmap");
        write_pointmap(&path, &p).unwrap();
        let q = read_pointmap(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.frame, Frame::Camera);
    }

    #[test]
    fn pointmap_magic_guard() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pmap");
        std::fs::write(&path, b"NOTPMAPDATA").unwrap();
        assert!(matches!(read_pointmap(&path), Err(Error::Format(_))));
    }

    #[test]
    fn mask_roundtrip_with_padding() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // Width 11 forces row padding.
        let values: Vec<u8> = (0..2 * 5 * 11).map(|_| rng.gen_range(0..=1)).collect();
        let m = EditMask::new(2, 5, 11, values).unwrap();
        let path = dir.path().join("m.mask");
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
    }

    #[test]
    fn cameras_roundtrip() {
        let dir = tempdir().unwrap();
        let cam = CameraView::look_at(
            Vector3::new(3.0, 1.0, 2.0),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            38.4,
            38.4,
            15.5,
            15.5,
            32,
            32,
        )
        .unwrap();
        let path = dir.path().join("c.cams");
        write_cameras(&path, std::slice::from_ref(&cam)).unwrap();
        let back = read_cameras(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], cam);
    }

    #[test]
    fn scalar_grid_roundtrip() {
        let dir = tempdir().unwrap();
        let values: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
        let path = dir.path().join("c.cgrd");
        write_scalar_grid(&path, 2, 3, 4, &values).unwrap();
        let (n, h, w, back) = read_scalar_grid(&path).unwrap();
        assert_eq!((n, h, w), (2, 3, 4));
        assert_eq!(back, values);
    }

    #[test]
    fn ply_export_counts_and_roundtrips() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let values: Vec<f64> = (0..2 * 4 * 4 * 3)
            .map(|_| rng.gen_range(-5.0..5.0))
            .collect();
        let p = PointMap::new(2, 4, 4, Frame::World, values).unwrap();
        let path = dir.path().join("p.ply");
        write_ply(&path, &p).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 32"));
        let body: Vec<&str> = text
            .lines()
            .skip_while(|l| *l != "end_header")
            .skip(1)
            .collect();
        assert_eq!(body.len(), 32);
        // Shortest-roundtrip printing: parsing back gives the exact values.
        for (i, line) in body.iter().enumerate() {
            let coords: Vec<f64> = line.split(' ').map(|t| t.parse().unwrap()).collect();
            for c in 0..3 {
                assert_eq!(coords[c].to_bits(), p.values()[i * 3 + c].to_bits());
            }
        }
    }

    #[test]
    fn named_arrays_roundtrip() {
        let dir = tempdir().unwrap();
        let arrays = vec![
            (
                "head.weight".to_string(),
                vec![2u32, 3u32],
                vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            ),
            ("head.bias".to_string(), vec![3u32], vec![0.5, -0.5, 0.0]),
        ];
        let path = dir.path().join("x.dfck");
        write_named_arrays(&path, &arrays).unwrap();
        assert_eq!(read_named_arrays(&path).unwrap(), arrays);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempdir().unwrap();
        let entries = vec![ManifestEntry {
            pair_id: "0000".into(),
            seed: 17,
            op_tag: "move".into(),
            files: vec!["0000_base.pmap".into(), "0000_gt.pmap".into()],
        }];
        let path = dir.path().join("manifest.txt");
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }

    #[test]
    fn kv_parse() {
        let pairs = parse_kv_text("# comment\nmodel_dim = 64\n\nheads=4\n", "test").unwrap();
        assert_eq!(
            pairs,
            vec![
                ("model_dim".to_string(), "64".to_string()),
                ("heads".to_string(), "4".to_string())
            ]
        );
        assert!(parse_kv_text("notakv", "test").is_err());
    }

    #[test]
    fn tokens_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.txt");
        write_tokens(&path, &[4, 18, 8]).unwrap();
        assert_eq!(read_tokens(&path).unwrap(), vec![4, 18, 8]);
    }
}
