//! CSV point sets and PGM grey images.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::density::PointSet;
use crate::error::{Error, Result};

/// 8-bit grey image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreyImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmFormat {
    /// ASCII samples.
    P2,
    /// Binary samples.
    P5,
}

impl GreyImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Image(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(GreyImage { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn map_pixels(&self, f: impl Fn(u8) -> u8) -> GreyImage {
        GreyImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn distinct_levels(&self) -> usize {
        let mut seen = [false; 256];
        for &p in &self.pixels {
            seen[p as usize] = true;
        }
        seen.iter().filter(|s| **s).count()
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() && self.bytes[self.pos] != b'#' {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self
            .token()
            .ok_or_else(|| Error::Image(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image(format!("invalid {what}: {:?}", String::from_utf8_lossy(tok))))
    }
}

/// Parses a P2 or P5 greymap with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<(GreyImage, PgmFormat)> {
    let mut r = HeaderReader { bytes, pos: 0 };
    let format = match r.token() {
        Some(b"P2") => PgmFormat::P2,
        Some(b"P5") => PgmFormat::P5,
        Some(other) => {
            return Err(Error::Image(format!(
                "unsupported magic {:?}, expected P2 or P5",
                String::from_utf8_lossy(other)
            )))
        }
        None => return Err(Error::Image("empty file".into())),
    };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval}, expected 255")));
    }
    let count = width * height;
    let pixels = match format {
        PgmFormat::P2 => {
            let mut px = Vec::with_capacity(count);
            for _ in 0..count {
                let v = r.number("pixel")?;
                if v > 255 {
                    return Err(Error::Image(format!("pixel value {v} exceeds maxval")));
                }
                px.push(v as u8);
            }
            px
        }
        PgmFormat::P5 => {
            // exactly one whitespace byte separates maxval from the raster
            let start = r.pos + 1;
            let end = start + count;
            if end > bytes.len() {
                return Err(Error::Image(format!(
                    "raster truncated: need {count} bytes, have {}",
                    bytes.len().saturating_sub(start)
                )));
            }
            bytes[start..end].to_vec()
        }
    };
    Ok((GreyImage::new(width, height, pixels)?, format))
}

pub fn read_pgm(path: &Path) -> Result<(GreyImage, PgmFormat)> {
    parse_pgm(&fs::read(path)?)
}

pub fn encode_pgm(image: &GreyImage, format: PgmFormat) -> Vec<u8> {
    let mut out = Vec::new();
    match format {
        PgmFormat::P2 => {
            let _ = writeln!(out, "P2\n{} {}\n255", image.width, image.height);
            for row in image.pixels.chunks(image.width.max(1)) {
                let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        PgmFormat::P5 => {
            let _ = write!(out, "P5\n{} {}\n255\n", image.width, image.height);
            out.extend_from_slice(&image.pixels);
        }
    }
    out
}

pub fn write_pgm(path: &Path, image: &GreyImage, format: PgmFormat) -> Result<()> {
    fs::write(path, encode_pgm(image, format))?;
    Ok(())
}

/// Parses comma-separated points, one per row. A first row whose first
/// field is not a number is treated as a header.
pub fn parse_points_csv(text: &str) -> Result<PointSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut dim = None;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(row + 1);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let first = record.get(0).unwrap_or("");
        if points.is_empty() && dim.is_none() && first.parse::<f64>().is_err() {
            dim = Some(record.len());
            continue;
        }
        let p: Vec<f64> = record
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first_row) = points.first() {
            if p.len() != first_row.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} columns, found {}", first_row.len(), p.len()),
                });
            }
        }
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "non-finite coordinate".into(),
            });
        }
        points.push(p);
    }
    let d = points.first().map(Vec::len).ok_or(Error::Empty("point set"))?;
    PointSet::new(d, &points)
}

pub fn read_points_csv(path: &Path) -> Result<PointSet> {
    parse_points_csv(&fs::read_to_string(path)?)
}

pub fn write_points_csv(path: &Path, points: &PointSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..points.dim()).map(|a| format!("x{a}")).collect();
    w.write_record(&header)?;
    for p in points.iter() {
        w.write_record(p.iter().map(|c| format!("{c}")))?;
    }
    w.flush()?;
    Ok(())
}
