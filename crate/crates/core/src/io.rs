//! On-disk formats: 8-bit RGB PNG images, `LGHT` height grids and
//! `instances.json` instance lists.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, BinaryMask, HeightMap, ImageTile, Instance, InstanceSet};
use crate::error::{LightError, Result};

pub const GRID_MAGIC: &[u8; 4] = b"LGHT";
pub const GRID_DTYPE_F32: u32 = 0;

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| LightError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| LightError::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(rgb).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

pub fn write_image(path: &Path, image: &ImageTile) -> Result<()> {
    write_png(path, image.width, image.height, &image.to_rgb8())
}

/// Reads an 8-bit PNG (gray, gray+alpha, RGB or RGBA) as an RGB tile.
pub fn read_image(path: &Path) -> Result<ImageTile> {
    let file = File::open(path).map_err(|e| LightError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let bad = |e: png::DecodingError| LightError::data(format!("{}: {}", path.display(), e));
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader.output_buffer_size().ok_or_else(|| LightError::data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => {
            return Err(LightError::data(format!("{}: unexpanded palette image", path.display())))
        }
    };
    ImageTile::from_rgb8(w, h, &rgb)
}

/// Encodes a height grid: `LGHT`, u32 rows, u32 cols, u32 dtype (0 = f32 LE), then row-major f32 LE.
pub fn encode_grid(map: &HeightMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.values.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(map.rows as u32).to_le_bytes());
    out.extend_from_slice(&(map.cols as u32).to_le_bytes());
    out.extend_from_slice(&GRID_DTYPE_F32.to_le_bytes());
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<HeightMap> {
    if bytes.len() < 16 || &bytes[..4] != GRID_MAGIC {
        return Err(LightError::data("height grid: missing LGHT header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols, dtype) = (word(4), word(8), word(12));
    if dtype != GRID_DTYPE_F32 as usize {
        return Err(LightError::data(format!("height grid: unsupported dtype {dtype}")));
    }
    let n = rows * cols;
    if bytes.len() != 16 + 4 * n {
        return Err(LightError::data(format!(
            "height grid: {}x{} needs {} bytes, file has {}",
            rows,
            cols,
            16 + 4 * n,
            bytes.len()
        )));
    }
    let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(HeightMap { rows, cols, values })
}

pub fn write_grid(path: &Path, map: &HeightMap) -> Result<()> {
    write_bytes(path, &encode_grid(map))
}

pub fn read_grid(path: &Path) -> Result<HeightMap> {
    decode_grid(&read_bytes(path)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| LightError::io(path, e))?;
    f.write_all(bytes).map_err(|e| LightError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path).map_err(|e| LightError::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| LightError::io(path, e))?;
    Ok(buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| LightError::data(e.to_string()))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| LightError::data(format!("{}: {}", path.display(), e)))
}

/// Row-major run-length encoding, first run counts zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[rows, cols]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

/// One record of `instances.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub rle_mask: RleMask,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub height_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
}

pub fn instances_to_records(set: &InstanceSet, with_scores: bool) -> Vec<InstanceRecord> {
    set.instances
        .iter()
        .map(|inst| InstanceRecord {
            bbox: inst.bbox.to_array(),
            rle_mask: RleMask { size: [inst.mask.height, inst.mask.width], counts: inst.mask.to_rle() },
            height_m: inst.height_m,
            score: with_scores.then_some(inst.score),
        })
        .collect()
}

pub fn records_to_instances(width: usize, height: usize, records: &[InstanceRecord]) -> Result<InstanceSet> {
    let mut instances = Vec::with_capacity(records.len());
    for r in records {
        if r.rle_mask.size != [height, width] {
            return Err(LightError::data(format!(
                "instance mask size {:?} does not match image {}x{}",
                r.rle_mask.size, height, width
            )));
        }
        let [x1, y1, x2, y2] = r.bbox;
        instances.push(Instance {
            bbox: BBox::new(x1, y1, x2, y2),
            mask: BinaryMask::from_rle(width, height, &r.rle_mask.counts)?,
            score: r.score.unwrap_or(1.0),
            height_m: r.height_m,
        });
    }
    Ok(InstanceSet { width, height, instances })
}

pub fn write_instances(path: &Path, set: &InstanceSet, with_scores: bool) -> Result<()> {
    write_json(path, &instances_to_records(set, with_scores))
}

pub fn read_instances(path: &Path, width: usize, height: usize) -> Result<InstanceSet> {
    let records: Vec<InstanceRecord> = read_json(path)?;
    records_to_instances(width, height, &records)
}
