//! PFM float images, 8/16-bit PGM images and ASCII PLY point clouds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::raster::{PointMap, ScalarMap};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Splits a Netpbm-style header into `count` whitespace-separated tokens
/// (skipping `#` comments) and returns them with the offset of the payload,
/// which starts after exactly one whitespace byte.
fn header_tokens<'a>(path: &Path, bytes: &'a [u8], count: usize) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format(path, "header is not ASCII"))?;
        tokens.push(token);
    }
    if pos >= bytes.len() {
        return Err(Error::format(path, "missing payload"));
    }
    Ok((tokens, pos + 1))
}

fn parse_dim(path: &Path, token: &str) -> Result<usize> {
    match token.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(path, format!("invalid dimension {token:?}"))),
    }
}

/// Grayscale little-endian PFM; masked pixels are NaN; rows stored bottom-to-top.
pub fn encode_pfm(map: &ScalarMap) -> Vec<u8> {
    let (w, h) = map.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for v in (0..h).rev() {
        for u in 0..w {
            let value = map.get(u, v).map_or(f32::NAN, |x| x as f32);
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<()> {
    write_file(path, &encode_pfm(map))
}

/// Reads a grayscale PFM of either byte order; NaN pixels become masked.
pub fn read_pfm(path: &Path) -> Result<ScalarMap> {
    decode_pfm(path, &read_file(path)?)
}

pub fn decode_pfm(path: &Path, bytes: &[u8]) -> Result<ScalarMap> {
    let (tokens, offset) = header_tokens(path, bytes, 4)?;
    if tokens[0] != "Pf" {
        return Err(Error::format(path, format!("expected grayscale PFM magic \"Pf\", found {:?}", tokens[0])));
    }
    let (w, h) = (parse_dim(path, tokens[1])?, parse_dim(path, tokens[2])?);
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::format(path, format!("invalid PFM scale {:?}", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "PFM scale must be non-zero"));
    }
    let little = scale < 0.0;
    let payload = &bytes[offset..];
    if payload.len() != w * h * 4 {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", w * h * 4, payload.len())));
    }
    let mut cells = vec![None; w * h];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("4-byte chunk");
        let value = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row_from_bottom, u) = (k / w, k % w);
        let v = h - 1 - row_from_bottom;
        cells[v * w + u] = value.is_finite().then_some(f64::from(value));
    }
    Ok(ScalarMap::from_options(w, h, cells))
}

/// 16-bit PGM of intensities divided by `scale` and clamped to [0, 1]; masked pixels are 0.
pub fn encode_pgm16(map: &ScalarMap, scale: f64) -> Vec<u8> {
    let (w, h) = map.dims();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(w * h * 2);
    for i in 0..w * h {
        let level = map.at(i).map_or(0, |v| quantize(v / scale, 65535.0) as u16);
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

pub fn write_pgm16(path: &Path, map: &ScalarMap, scale: f64) -> Result<()> {
    write_file(path, &encode_pgm16(map, scale))
}

/// 8-bit PGM of raw levels.
pub fn write_pgm8(path: &Path, width: usize, height: usize, levels: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(levels);
    write_file(path, &out)
}

/// Reads an 8- or 16-bit binary PGM, returning levels divided by maxval and
/// multiplied by `scale`. All pixels are valid.
pub fn read_pgm(path: &Path, scale: f64) -> Result<ScalarMap> {
    let bytes = read_file(path)?;
    let (tokens, offset) = header_tokens(path, &bytes, 4)?;
    if tokens[0] != "P5" {
        return Err(Error::format(path, format!("expected binary PGM magic \"P5\", found {:?}", tokens[0])));
    }
    let (w, h) = (parse_dim(path, tokens[1])?, parse_dim(path, tokens[2])?);
    let maxval: u32 = tokens[3]
        .parse()
        .ok()
        .filter(|m| (1..=65535).contains(m))
        .ok_or_else(|| Error::format(path, format!("invalid PGM maxval {:?}", tokens[3])))?;
    let payload = &bytes[offset..];
    let wide = maxval > 255;
    let expected = w * h * if wide { 2 } else { 1 };
    if payload.len() != expected {
        return Err(Error::format(path, format!("expected {expected} payload bytes, found {}", payload.len())));
    }
    let max = f64::from(maxval);
    let values = if wide {
        payload
            .chunks_exact(2)
            .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / max * scale)
            .collect()
    } else {
        payload.iter().map(|&b| f64::from(b) / max * scale).collect()
    };
    ScalarMap::from_values(w, h, values)
}

/// One vertex of a gridded point cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyVertex {
    pub point: Vector3<f64>,
    pub quality: u8,
    pub pixel: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub grid: Option<(usize, usize)>,
    pub vertices: Vec<PlyVertex>,
}

impl PlyCloud {
    pub fn points(&self) -> Vec<Vector3<f64>> {
        self.vertices.iter().map(|v| v.point).collect()
    }

    /// Scatters vertices back onto their pixel grid.
    pub fn to_point_map(&self) -> Option<PointMap> {
        let (w, h) = self.grid?;
        let mut cells = vec![None; w * h];
        for v in &self.vertices {
            let (u, row) = v.pixel?;
            if u >= w || row >= h {
                return None;
            }
            cells[row * w + u] = Some(v.point);
        }
        Some(PointMap::from_points(w, h, &cells))
    }
}

/// ASCII PLY of valid points in ascending pixel order with their quality flag
/// and pixel coordinates.
pub fn encode_ply(points: &PointMap, quality: &[u8]) -> String {
    let (w, _) = points.dims();
    let valid = points.indexed_points();
    let mut out = String::with_capacity(64 * valid.len() + 256);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "comment grid {} {}", points.dims().0, points.dims().1);
    let _ = writeln!(out, "element vertex {}", valid.len());
    for line in [
        "property double x",
        "property double y",
        "property double z",
        "property uchar quality",
        "property int u",
        "property int v",
        "end_header",
    ] {
        out.push_str(line);
        out.push('\n');
    }
    for (i, p) in valid {
        let _ = writeln!(out, "{:.6} {:.6} {:.6} {} {} {}", p.x, p.y, p.z, quality.get(i).copied().unwrap_or(0), i % w, i / w);
    }
    out
}

pub fn write_ply(path: &Path, points: &PointMap, quality: &[u8]) -> Result<()> {
    write_file(path, encode_ply(points, quality).as_bytes())
}

/// Reads an ASCII PLY whose vertices carry at least x, y, z.
pub fn read_ply(path: &Path) -> Result<PlyCloud> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::format(path, "PLY must be ASCII"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(path, "missing \"ply\" magic"));
    }
    let mut grid = None;
    let mut count = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = lines.next().ok_or_else(|| Error::format(path, "missing end_header"))?.trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(Error::format(path, format!("unsupported PLY format {other}"))),
            ["comment", "grid", w, h] => {
                grid = Some((parse_dim(path, w)?, parse_dim(path, h)?));
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::format(path, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => properties.push((*name).to_string()),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(Error::format(path, format!("unexpected header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| Error::format(path, "no vertex element"))?;
    let column = |name: &str| properties.iter().position(|p| p == name);
    let (Some(xi), Some(yi), Some(zi)) = (column("x"), column("y"), column("z")) else {
        return Err(Error::format(path, "vertices need x, y and z"));
    };
    let (qi, ui, vi) = (column("quality"), column("u"), column("v"));
    let mut vertices = Vec::with_capacity(count);
    for k in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("expected {count} vertices, found {k}")))?;
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("bad number in vertex {k}")))?;
        if fields.len() < properties.len() {
            return Err(Error::format(path, format!("vertex {k} has {} fields", fields.len())));
        }
        let pixel = match (ui, vi) {
            (Some(a), Some(b)) if fields[a] >= 0.0 && fields[b] >= 0.0 => Some((fields[a] as usize, fields[b] as usize)),
            _ => None,
        };
        vertices.push(PlyVertex {
            point: Vector3::new(fields[xi], fields[yi], fields[zi]),
            quality: qi.map_or(0, |q| fields[q] as u8),
            pixel,
        });
    }
    Ok(PlyCloud { grid, vertices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> ScalarMap {
        ScalarMap::from_fn(4, 3, |u, v| (u != 2 || v != 1).then_some(u as f64 * 0.5 - v as f64 * 0.25))
    }

    #[test]
    fn pfm_round_trip_and_layout() {
        let map = sample_map();
        let bytes = encode_pfm(&map);
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
        // First stored row is the bottom image row (v = 2).
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(f64::from(first), map.get(0, 2).unwrap());
        let back = decode_pfm(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn pfm_big_endian_and_errors() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        assert_eq!(decode_pfm(Path::new("be"), &bytes).unwrap().at(0), Some(1.5));
        let truncated = &bytes[..bytes.len() - 1];
        assert_eq!(decode_pfm(Path::new("t"), truncated).unwrap_err().kind(), "FormatError");
        assert!(decode_pfm(Path::new("c"), b"PF\n1 1\n-1.0\n000000000000").is_err());
    }

    #[test]
    fn pgm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let map = ScalarMap::from_fn(5, 2, |u, v| Some(0.1 * u as f64 + 0.3 * v as f64));
        write_pgm16(&path, &map, 2.0).unwrap();
        let back = read_pgm(&path, 2.0).unwrap();
        for (a, b) in map.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 2.0 / 65535.0 / 2.0 + 1e-15);
        }
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n5 2\n65535\n"));
    }

    #[test]
    fn pgm8_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.pgm");
        write_pgm8(&path, 3, 1, &[0, 128, 255]).unwrap();
        let back = read_pgm(&path, 255.0).unwrap();
        assert_eq!(back.values(), &[0.0, 128.0, 255.0]);
    }

    #[test]
    fn ply_round_trip() {
        let pts = vec![Some(Vector3::new(1.0, -2.5, 600.125)), None, Some(Vector3::new(0.0, 0.0, 599.0)), None];
        let map = PointMap::from_points(2, 2, &pts);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_ply(&path, &map, &[0, 0, 3, 0]).unwrap();
        let cloud = read_ply(&path).unwrap();
        assert_eq!(cloud.grid, Some((2, 2)));
        assert_eq!(cloud.vertices.len(), 2);
        assert_eq!(cloud.vertices[1].quality, 3);
        assert_eq!(cloud.vertices[1].pixel, Some((0, 1)));
        assert_eq!(cloud.to_point_map().unwrap(), map);
        fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert_eq!(read_ply(&path).unwrap_err().kind(), "FormatError");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_pfm(Path::new("/nonexistent/x.pfm")).unwrap_err();
        assert_eq!(err.kind(), "IoError");
        assert!(err.to_string().contains("/nonexistent/x.pfm"));
    }
}
