//! Binary tensor records and checkpoint containers.
//!
//! A tensor record is laid out as:
//!
//! ```text
//! b"ALDD" | u32 version | u32 rank | u32 dims[rank] | f32 data[prod(dims)]
//! ```
//!
//! with every integer and float little-endian and data in row-major order.
//!
//! A checkpoint is a UTF-8 text index followed by concatenated tensor
//! records. The index starts with the line `dragkit-checkpoint 1`, then one
//! line per tensor `<name> <offset> <d0>x<d1>x...`, and ends with an empty
//! line. Offsets are byte positions relative to the first byte after the
//! index.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Grid, Shape};

pub const MAGIC: &[u8; 4] = b"ALDD";
pub const FORMAT_VERSION: u32 = 1;
const CHECKPOINT_HEADER: &str = "dragkit-checkpoint 1";

/// A named n-dimensional `f32` tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                format!("{expected} values for dims {dims:?}"),
                data.len(),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn from_grid(grid: &Grid) -> Self {
        let s = grid.shape();
        Self {
            dims: vec![s.channels, s.height, s.width],
            data: grid.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_grid(&self) -> Result<Grid> {
        let shape = match self.dims.as_slice() {
            [c, h, w] => Shape::new(*c, *h, *w),
            [h, w] => Shape::new(1, *h, *w),
            other => {
                return Err(Error::Format(format!(
                    "expected a rank 2 or 3 tensor, found dims {other:?}"
                )))
            }
        };
        Grid::from_vec(shape, self.to_f64())
    }

    pub fn encoded_len(&self) -> usize {
        12 + 4 * self.dims.len() + 4 * self.data.len()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// 8-bit grayscale PNG of channel 0, values clamped to `[0, 1]`.
pub fn encode_png(grid: &Grid) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, grid.width() as u32, grid.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        let pixels: Vec<u8> = grid.channel(0).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_image_data(&pixels).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit PNG into a single-channel grid in `[0, 1]`; colour images
/// are averaged over their colour channels, alpha is ignored.
pub fn decode_png(bytes: &[u8]) -> Result<Grid> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (samples, colour) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::Format(format!("unsupported PNG colour type {other:?}"))),
    };
    let row = info.line_size;
    Ok(Grid::from_fn(Shape::new(1, h, w), |_, y, x| {
        let px = &buf[y * row + x * samples..][..colour];
        px.iter().map(|&v| v as f64).sum::<f64>() / (255.0 * colour as f64)
    }))
}

pub fn save_png(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    fs::write(path, encode_png(grid)?)?;
    Ok(())
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Grid> {
    decode_png(&fs::read(path)?)
}

pub fn save_grid(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    fs::write(path, TensorRecord::from_grid(grid).to_bytes())?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let bytes = fs::read(path)?;
    TensorRecord::from_bytes(&bytes)?.to_grid()
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, TensorRecord)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, record: TensorRecord) {
        self.entries.push((name.into(), record));
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = String::from(CHECKPOINT_HEADER);
        index.push('\n');
        let mut offset = 0usize;
        for (name, rec) in &self.entries {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid tensor name {name:?}")));
            }
            let dims = rec
                .dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            index.push_str(&format!("{name} {offset} {dims}\n"));
            offset += rec.encoded_len();
        }
        index.push('\n');
        let mut out = index.into_bytes();
        for (_, rec) in &self.entries {
            rec.write_to(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Format("checkpoint index is not terminated".into()))?;
        let index = std::str::from_utf8(&bytes[..end])
            .map_err(|e| Error::Format(format!("checkpoint index is not UTF-8: {e}")))?;
        let body = &bytes[end + 2..];
        let mut lines = index.lines();
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(Error::Format("missing checkpoint header".into()));
        }
        let mut entries = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let (Some(name), Some(offset), Some(dims), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Format(format!("bad index line {line:?}")));
            };
            let offset: usize = offset
                .parse()
                .map_err(|_| Error::Format(format!("bad offset in {line:?}")))?;
            let dims = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("bad dims in {line:?}")))?;
            let rec = TensorRecord::from_bytes(
                body.get(offset..)
                    .ok_or_else(|| Error::Format(format!("offset past end in {line:?}")))?,
            )?;
            if rec.dims != dims {
                return Err(Error::Format(format!(
                    "index dims {dims:?} disagree with record dims {:?} for {name}",
                    rec.dims
                )));
            }
            entries.push((name.to_string(), rec));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
