//! SGV volume files and PNG slice export.
//!
//! An SGV volume is a JSON header (`dims`, `spacing`, `dtype`, `meta`) next to
//! a raw payload of `D*H*W` little-endian f32 values in z, y, x order. The
//! payload lives at the header path with its extension replaced by `raw`.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Spacing, Volume3D};

pub const SGV_DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SgvHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    meta: BTreeMap<String, String>,
}

pub fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn save_volume(vol: &Volume3D, header_path: &Path) -> Result<()> {
    let (d, h, w) = vol.dims();
    let header = SgvHeader {
        dims: [d, h, w],
        spacing: vol.spacing().as_array(),
        dtype: SGV_DTYPE.to_string(),
        meta: vol.meta().clone(),
    };
    if let Some(parent) = header_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
    text.push('\n');
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;
    let mut payload = Vec::with_capacity(d * h * w * 4);
    for v in vol.data().iter() {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let raw = raw_path(header_path);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

pub fn load_volume(header_path: &Path) -> Result<Volume3D> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: SgvHeader = serde_json::from_str(&text)
        .map_err(|e| Error::format(header_path, format!("bad header: {e}")))?;
    if header.dtype != SGV_DTYPE {
        return Err(Error::format(
            header_path,
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    let [d, h, w] = header.dims;
    let raw = raw_path(header_path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = d * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &raw,
            format!(
                "payload has {} bytes, dims {:?} need {expected}",
                bytes.len(),
                header.dims
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let data = Array3::from_shape_vec((d, h, w), values).expect("length checked");
    let [sz, sy, sx] = header.spacing;
    let spacing =
        Spacing::new(sz, sy, sx).map_err(|e| Error::format(header_path, e.to_string()))?;
    let mut vol =
        Volume3D::new(data, spacing).map_err(|e| Error::format(header_path, e.to_string()))?;
    *vol.meta_mut() = header.meta;
    Ok(vol)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png_gray(img: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let pixels: Vec<u8> = img.iter().map(|v| to_u8(*v)).collect();
    write_png_raw(&pixels, w, h, path)
}

fn write_png_raw(pixels: &[u8], w: usize, h: usize, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(pixels).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// A tile in a panel image; `marked` tiles get a white frame.
pub struct Tile<'a> {
    pub image: &'a Array2<f64>,
    pub marked: bool,
}

/// Lays out rows of equally sized tiles with a 2-pixel gray gutter.
pub fn write_panel_png(rows: &[Vec<Tile<'_>>], path: &Path) -> Result<()> {
    const GUTTER: usize = 2;
    let (th, tw) = rows
        .iter()
        .flatten()
        .next()
        .map(|t| t.image.dim())
        .ok_or_else(|| Error::InvalidArgument("empty panel".into()))?;
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = ncols * (tw + GUTTER) + GUTTER;
    let height = rows.len() * (th + GUTTER) + GUTTER;
    let mut pixels = vec![96u8; width * height];
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.image.dim() != (th, tw) {
                return Err(Error::Shape(format!(
                    "panel tile {:?} != {:?}",
                    tile.image.dim(),
                    (th, tw)
                )));
            }
            let oy = GUTTER + r * (th + GUTTER);
            let ox = GUTTER + c * (tw + GUTTER);
            for ((y, x), v) in tile.image.indexed_iter() {
                let edge = y == 0 || x == 0 || y + 1 == th || x + 1 == tw;
                pixels[(oy + y) * width + ox + x] =
                    if tile.marked && edge { 255 } else { to_u8(*v) };
            }
        }
    }
    write_png_raw(&pixels, width, height, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume3D {
        Volume3D::from_shape_fn(
            (3, 4, 5),
            Spacing::new(3.3, 0.4, 0.4).unwrap(),
            |(z, y, x)| ((z * 31 + y * 7 + x) as f64 * 0.173).sin().abs(),
        )
        .unwrap()
        .with_meta("seed", "11")
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_volume(&sample(), &a).unwrap();
        let loaded = load_volume(&a).unwrap();
        save_volume(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(
            fs::read(raw_path(&a)).unwrap(),
            fs::read(raw_path(&b)).unwrap()
        );
        assert_eq!(loaded.meta()["seed"], "11");
        assert_eq!(loaded.dims(), (3, 4, 5));
        // f32 storage: values agree to single precision
        for (x, y) in loaded.data().iter().zip(sample().data()) {
            assert!((x - y).abs() < 1e-7);
        }
        assert_eq!(load_volume(&b).unwrap(), loaded);
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        save_volume(&sample(), &a).unwrap();
        fs::write(&a, "{\"dims\": [3, 4").unwrap();
        assert!(matches!(load_volume(&a), Err(Error::Format { .. })));
    }

    #[test]
    fn payload_length_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        save_volume(&sample(), &a).unwrap();
        fs::write(raw_path(&a), vec![0u8; 12]).unwrap();
        assert!(matches!(load_volume(&a), Err(Error::Format { .. })));
    }

    #[test]
    fn png_export_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        write_png_gray(&sample().slice(0).data, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        let img = sample().slice(1).data;
        let panel = dir.path().join("panel.png");
        write_panel_png(
            &[vec![
                Tile {
                    image: &img,
                    marked: true,
                },
                Tile {
                    image: &img,
                    marked: false,
                },
            ]],
            &panel,
        )
        .unwrap();
        assert!(panel.exists());
    }
}
