//! The native `PXG1` binary frame plus 8-bit PGM/PPM export.
//!
//! A frame is `PXG1\n<channels> <height> <width>\n` followed by
//! `channels*height*width` little-endian `f64` values in row-major,
//! channel-first order. Frames can be concatenated; [`Grid::decode`] reports
//! how many bytes it consumed.

use std::io::Write;

use super::Grid;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"PXG1\n";
// Anything bigger than this is not a desk-scale grid; refuse before allocating.
const MAX_ELEMENTS: usize = 1 << 26;

impl Grid {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.len() * 8);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        writeln!(w, "{} {} {}", self.channels, self.height, self.width)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Decodes one frame from the front of `bytes`, returning the grid and
    /// the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Grid, usize)> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::format("grid frame", "missing PXG1 magic"))?;
        let nl = rest
            .iter()
            .take(64)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("grid frame", "unterminated dimension line"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::format("grid frame", "dimension line is not UTF-8"))?;
        let dims: Vec<usize> = line
            .split(' ')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::format("grid frame", format!("bad dimension {s:?}")))
            })
            .collect::<Result<_>>()?;
        let [c, h, w] = dims[..] else {
            return Err(Error::format("grid frame", "expected three dimensions"));
        };
        let n = c
            .checked_mul(h)
            .and_then(|n| n.checked_mul(w))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::format("grid frame", "grid too large"))?;
        let body = &rest[nl + 1..];
        let need = n * 8;
        if body.len() < need {
            return Err(Error::format(
                "grid frame",
                format!("expected {need} payload bytes, found {}", body.len()),
            ));
        }
        let data = body[..need]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let grid = Grid::from_vec(c, h, w, data)?;
        Ok((grid, MAGIC.len() + nl + 1 + need))
    }

    /// Decodes a buffer holding exactly one frame.
    pub fn from_bytes(bytes: &[u8]) -> Result<Grid> {
        let (grid, used) = Grid::decode(bytes)?;
        if used != bytes.len() {
            return Err(Error::format("grid frame", "trailing bytes after frame"));
        }
        Ok(grid)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Grid> {
        Grid::from_bytes(&std::fs::read(path)?)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1-channel grid as binary PGM, mapping `[0,1]` to `0..=255`.
pub fn write_pgm<W: Write>(grid: &Grid, w: &mut W) -> Result<()> {
    if grid.channels() != 1 {
        return Err(Error::Dimension("PGM export needs a 1-channel grid".into()));
    }
    write!(w, "P5\n{} {}\n255\n", grid.width(), grid.height())?;
    let bytes: Vec<u8> = grid.as_slice().iter().map(|&v| to_byte(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Interleaved 8-bit RGB rows of a 3-channel grid, mapping `[0,1]` to `0..=255`.
pub fn rgb8_bytes(grid: &Grid) -> Result<Vec<u8>> {
    if grid.channels() != 3 {
        return Err(Error::Dimension("RGB export needs a 3-channel grid".into()));
    }
    let n = grid.plane_len();
    let mut bytes = Vec::with_capacity(n * 3);
    for i in 0..n {
        for c in 0..3 {
            bytes.push(to_byte(grid.plane(c)[i]));
        }
    }
    Ok(bytes)
}

/// Writes a 3-channel grid as binary PPM.
pub fn write_ppm<W: Write>(grid: &Grid, w: &mut W) -> Result<()> {
    let bytes = rgb8_bytes(grid)?;
    write!(w, "P6\n{} {}\n255\n", grid.width(), grid.height())?;
    w.write_all(&bytes)?;
    Ok(())
}

/// Raw 8-bit samples from a binary PGM (`P5`) file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

impl PnmImage {
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Parses a binary PGM with `maxval < 256`. Comments (`#` to end of line) are
/// allowed between header tokens.
pub fn read_pgm_bytes(bytes: &[u8]) -> Result<PnmImage> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::format("PGM", "expected P5 magic"));
    }
    let width = parse_field(next_token(bytes, &mut pos)?, "width")?;
    let height = parse_field(next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_field(next_token(bytes, &mut pos)?, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format("PGM", "zero-sized image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("PGM", format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if bytes.get(pos).is_none_or(|b| !b.is_ascii_whitespace()) {
        return Err(Error::format("PGM", "missing raster separator"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::format("PGM", "image too large"))?;
    let raster = &bytes[pos..];
    if raster.len() != n {
        return Err(Error::format(
            "PGM",
            format!("expected {n} raster bytes, found {}", raster.len()),
        ));
    }
    if let Some(&b) = raster.iter().find(|&&b| b as usize > maxval) {
        return Err(Error::format("PGM", format!("sample {b} exceeds maxval {maxval}")));
    }
    Ok(PnmImage {
        width,
        height,
        maxval: maxval as u16,
        pixels: raster.to_vec(),
    })
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::format("PGM", "truncated header")),
        }
    }
    let start = *pos;
    while bytes
        .get(*pos)
        .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
    {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_field(tok: &[u8], name: &str) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .filter(|s| s.len() <= 9)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("PGM", format!("bad {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let g = Grid::from_vec(1, 1, 2, vec![1.0, -0.5]).unwrap();
        let bytes = g.encode();
        assert_eq!(&bytes[..11], b"PXG1\n1 1 2\n");
        assert_eq!(&bytes[11..19], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 11 + 16);
    }

    #[test]
    fn rejects_truncated_and_trailing() {
        let bytes = Grid::zeros(2, 2, 2).unwrap().encode();
        assert!(Grid::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Grid::from_bytes(&extra).is_err());
        assert!(Grid::from_bytes(b"PXG1\n1 1\n").is_err());
        assert!(Grid::from_bytes(b"PXG1\n99999 99999 99999\n").is_err());
        let mut nan = Grid::zeros(1, 1, 1).unwrap().encode();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(Grid::from_bytes(&nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn concatenated_frames() {
        let a = Grid::filled(1, 2, 2, 1.0).unwrap();
        let b = Grid::filled(3, 1, 1, 2.0).unwrap();
        let mut buf = a.encode();
        buf.extend(b.encode());
        let (ga, used) = Grid::decode(&buf).unwrap();
        let (gb, _) = Grid::decode(&buf[used..]).unwrap();
        assert_eq!((ga, gb), (a, b));
    }

    #[test]
    fn pnm_export() {
        let g = Grid::from_vec(1, 1, 3, vec![-1.0, 0.5, 2.0]).unwrap();
        let mut out = Vec::new();
        write_pgm(&g, &mut out).unwrap();
        assert_eq!(out, b"P5\n3 1\n255\n\x00\x80\xff");
        let rgb = Grid::from_vec(3, 1, 1, vec![1.0, 0.0, 0.5]).unwrap();
        let mut out = Vec::new();
        write_ppm(&rgb, &mut out).unwrap();
        assert_eq!(out, b"P6\n1 1\n255\n\xff\x00\x80");
        assert!(write_ppm(&g, &mut Vec::new()).is_err());
    }

    #[test]
    fn pgm_parse_with_comments() {
        let img = read_pgm_bytes(b"P5\n# mask\n2 1\n# coding\n2\n\x01\x02").unwrap();
        assert_eq!((img.width, img.height, img.maxval), (2, 1, 2));
        assert_eq!(img.pixels, vec![1, 2]);
        assert!(read_pgm_bytes(b"P5\n2 1\n2\n\x01\x03").is_err());
        assert!(read_pgm_bytes(b"P6\n2 1\n2\n\x01\x01").is_err());
        assert!(read_pgm_bytes(b"P5\n2 1\n2\n\x01").is_err());
        assert_eq!(read_pgm_bytes(&img.encode_pgm()).unwrap(), img);
    }

    proptest! {
        #[test]
        fn binary_frame_roundtrip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f64> = (0..c * h * w)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 10007) as f64 - 5000.0) / 7.0)
                .collect();
            let g = Grid::from_vec(c, h, w, data).unwrap();
            prop_assert_eq!(Grid::from_bytes(&g.encode()).unwrap(), g);
        }
    }
}
