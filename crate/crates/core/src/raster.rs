//! Image, depth and label rasters plus their Netpbm / raw encodings.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// RGB image, interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut im = Self::new(height, width);
        for px in im.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        im
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Round every channel to the nearest multiple of 1/255.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize8(*v) as f32 / 255.0;
        }
    }
}

pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Depth raster in meters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Every pixel valid.
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "depth {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            valid: vec![true; values.len()],
            values,
        })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self::new(height, width, vec![v; height * width]).expect("sized")
    }

    pub fn with_mask(mut self, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != self.values.len() {
            return Err(Error::Shape("mask size differs from depth size".into()));
        }
        self.valid = valid;
        Ok(self)
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_size(&self, other: &DepthMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Integer label raster (superpixels, instance ids, segment ids).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape("label count differs from raster size".into()));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Largest label + 1.
    pub fn label_bound(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }
}

fn read_token<R: Read>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::Format("truncated netpbm header".into()));
            }
            return Ok(tok);
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            // comment to end of line
            while r.read(&mut byte)? == 1 && byte[0] != b'\n' {}
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

fn read_header<R: Read>(r: &mut R, magic: &str) -> Result<(usize, usize, u32)> {
    let m = read_token(r)?;
    if m != magic {
        return Err(Error::Format(format!("expected netpbm magic {magic}, found {m:?}")));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad netpbm header field {s:?}")))
    };
    let w = parse(read_token(r)?)?;
    let h = parse(read_token(r)?)?;
    let maxval = parse(read_token(r)?)? as u32;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format("bad netpbm dimensions".into()));
    }
    Ok((h, w, maxval))
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated raster payload".into())
        } else {
            Error::Io(e)
        }
    })
}

/// Binary PPM (P6, 8-bit).
pub fn write_ppm<W: Write>(w: &mut W, im: &Image) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", im.width, im.height)?;
    let bytes: Vec<u8> = im.data.iter().map(|&v| quantize8(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm<R: Read>(r: &mut R) -> Result<Image> {
    let (h, w, maxval) = read_header(r, "P6")?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PPM supported, maxval {maxval}")));
    }
    let mut buf = vec![0u8; h * w * 3];
    read_exact_or_truncated(r, &mut buf)?;
    Ok(Image {
        height: h,
        width: w,
        data: buf.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

/// Binary PGM (P5, 16-bit big-endian).
pub fn write_pgm16<W: Write>(w: &mut W, labels: &LabelMap) -> Result<()> {
    if labels.labels.iter().any(|&l| l > u16::MAX as u32) {
        return Err(Error::InvalidInput("label exceeds 16 bits".into()));
    }
    write!(w, "P5\n{} {}\n65535\n", labels.width, labels.height)?;
    let mut bytes = Vec::with_capacity(labels.labels.len() * 2);
    for &l in &labels.labels {
        bytes.extend_from_slice(&(l as u16).to_be_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm16<R: Read>(r: &mut R) -> Result<LabelMap> {
    let (h, w, maxval) = read_header(r, "P5")?;
    if maxval < 256 {
        return Err(Error::Format("expected a 16-bit PGM".into()));
    }
    let mut buf = vec![0u8; h * w * 2];
    read_exact_or_truncated(r, &mut buf)?;
    let labels = buf
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .collect();
    LabelMap::new(h, w, labels)
}

pub const DEPTH_MAGIC: &[u8; 8] = b"SHEDDPTH";

/// Raw depth: magic, u32 height, u32 width (little-endian), then f32 values.
/// Invalid pixels are stored as 0.
pub fn write_depth<W: Write>(w: &mut W, d: &DepthMap) -> Result<()> {
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&(d.height as u32).to_le_bytes())?;
    w.write_all(&(d.width as u32).to_le_bytes())?;
    let mut bytes = Vec::with_capacity(d.values.len() * 4);
    for (&v, &ok) in d.values.iter().zip(&d.valid) {
        bytes.extend_from_slice(&(if ok { v } else { 0.0 }).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Inverse of [`write_depth`]; pixels stored as 0 or non-finite come back invalid.
pub fn read_depth<R: Read>(r: &mut R) -> Result<DepthMap> {
    let mut head = [0u8; 16];
    read_exact_or_truncated(r, &mut head)?;
    if &head[..8] != DEPTH_MAGIC {
        return Err(Error::Format("depth magic mismatch".into()));
    }
    let h = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    if h == 0 || w == 0 {
        return Err(Error::Format("empty depth raster".into()));
    }
    let mut buf = vec![0u8; h * w * 4];
    read_exact_or_truncated(r, &mut buf)?;
    let values: Vec<f32> = buf
        .chunks(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
    DepthMap::new(h, w, values)?.with_mask(valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_of_quantized_image() {
        let mut im = Image::new(3, 5);
        for (i, v) in im.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.137).fract();
        }
        im.quantize();
        let mut buf = Vec::new();
        write_ppm(&mut buf, &im).unwrap();
        assert_eq!(read_ppm(&mut buf.as_slice()).unwrap(), im);
    }

    #[test]
    fn pgm16_roundtrip_is_big_endian() {
        let l = LabelMap::new(1, 2, vec![1, 300]).unwrap();
        let mut buf = Vec::new();
        write_pgm16(&mut buf, &l).unwrap();
        assert_eq!(&buf[buf.len() - 4..], &[0, 1, 1, 44]);
        assert_eq!(read_pgm16(&mut buf.as_slice()).unwrap(), l);
    }

    #[test]
    fn depth_rejects_bad_magic_and_truncation() {
        let d = DepthMap::filled(2, 2, 1.5);
        let mut buf = Vec::new();
        write_depth(&mut buf, &d).unwrap();
        assert_eq!(buf.len(), 16 + 16);
        assert_eq!(read_depth(&mut buf.as_slice()).unwrap(), d);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_depth(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_depth(&mut &buf[..20]), Err(Error::Format(_))));
    }

    #[test]
    fn netpbm_comments_are_skipped() {
        let data = b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff";
        let im = read_ppm(&mut &data[..]).unwrap();
        assert_eq!(im.pixel(0, 0), [0.0, 128.0 / 255.0, 1.0]);
    }
}
