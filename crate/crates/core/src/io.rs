//! File formats: JSON documents, Wavefront OBJ meshes, binary PGM masks,
//! binary PPM frames and Middlebury `.flo` flow fields.

use crate::geom::Vec3;
use crate::raster::{FlowField, Mask};
use crate::refine::Frame;
use crate::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const FLO_MAGIC: f32 = 202021.25;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_owned(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_owned(), source })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Writes a file, creating parent directories as needed.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// `dir/prefix_000123.ext`
pub fn frame_path(dir: &Path, prefix: &str, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("{prefix}_{index:06}.{ext}"))
}

/// Triangle mesh as read from or written to OBJ.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

pub fn obj_string(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(vertices.len() * 40 + faces.len() * 20);
    for v in vertices {
        // {:?} prints the shortest representation that round-trips
        let _ = writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(path: &Path, vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<()> {
    write_bytes(path, obj_string(vertices, faces).as_bytes())
}

/// Reads the `v`/`f` subset of OBJ. Faces may use `i/t/n` syntax; polygons
/// with more than three corners are rejected.
pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text).map_err(|m| Error::format(path, m))
}

pub fn parse_obj(text: &str) -> std::result::Result<TriMesh, String> {
    let mut mesh = TriMesh::default();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xyz: Vec<f64> = it.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| format!("line {}: {e}", lineno + 1))?;
                if xyz.len() != 3 {
                    return Err(format!("line {}: vertex needs three coordinates", lineno + 1));
                }
                mesh.vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|tok| tok.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("line {}: {e}", lineno + 1))?;
                if idx.len() != 3 || idx.iter().any(|&i| i == 0) {
                    return Err(format!("line {}: only 1-based triangles are supported", lineno + 1));
                }
                mesh.faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    let n = mesh.vertices.len();
    if let Some(f) = mesh.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
        return Err(format!("face {:?} references a missing vertex", f.map(|i| i + 1)));
    }
    Ok(mesh)
}

/// Splits a binary netpbm header (`P5`/`P6`) and returns (width, height, maxval, payload offset).
fn parse_pnm_header(bytes: &[u8], magic: &str) -> std::result::Result<(usize, usize, usize, usize), String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != magic {
        return Err(format!("expected magic {magic}, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("only 8-bit files are supported (maxval {maxval})"));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((w, h, maxval, i + 1))
}

pub fn mask_to_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write_bytes(path, &mask_to_pgm(mask))
}

/// Reads a P5 mask; any non-zero sample counts as foreground.
pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = read_bytes(path)?;
    let (w, h, _, off) = parse_pnm_header(&bytes, "P5").map_err(|m| Error::format(path, m))?;
    let data = bytes.get(off..off + w * h).ok_or_else(|| Error::format(path, "truncated raster"))?;
    Ok(Mask::from_bits(w, h, data.iter().map(|&b| b != 0).collect()))
}

fn to_u8(x: f32) -> u8 {
    (((x.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn frame_to_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.samples().iter().map(|&x| to_u8(x)));
    out
}

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    write_bytes(path, &frame_to_ppm(frame))
}

/// Reads a P6 frame, mapping 0..255 linearly onto [-1, 1].
pub fn read_ppm(path: &Path) -> Result<Frame> {
    let bytes = read_bytes(path)?;
    let (w, h, _, off) = parse_pnm_header(&bytes, "P6").map_err(|m| Error::format(path, m))?;
    let data = bytes.get(off..off + w * h * 3).ok_or_else(|| Error::format(path, "truncated raster"))?;
    Frame::from_samples(w, h, data.iter().map(|&b| b as f32 / 255.0 * 2.0 - 1.0).collect())
}

/// Written for pixels without flow; readers treat anything above 1e9 as unknown.
const FLO_UNKNOWN: f64 = 1e10;

/// Middlebury layout.
pub fn flow_to_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.width() * flow.height() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for i in 0..flow.width() * flow.height() {
        let v = if flow.is_valid(i) { flow.vector(i) } else { [FLO_UNKNOWN; 2] };
        out.extend_from_slice(&(v[0] as f32).to_le_bytes());
        out.extend_from_slice(&(v[1] as f32).to_le_bytes());
    }
    out
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_bytes(path, &flow_to_flo(flow))
}

/// Reads a `.flo` file. Vectors with a component above 1e9 in magnitude
/// (the Middlebury "unknown" marker) or non-finite are marked invalid;
/// everything else is valid.
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = read_bytes(path)?;
    parse_flo(&bytes).map_err(|m| Error::format(path, m))
}

pub fn parse_flo(bytes: &[u8]) -> std::result::Result<FlowField, String> {
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let i32_at = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if bytes.len() < 12 {
        return Err("truncated header".into());
    }
    if f32_at(0) != FLO_MAGIC {
        return Err(format!("bad magic {}", f32_at(0)));
    }
    let (w, h) = (i32_at(4), i32_at(8));
    if w < 1 || h < 1 {
        return Err(format!("bad size {w}x{h}"));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() < 12 + w * h * 8 {
        return Err("truncated flow data".into());
    }
    let mut flow = FlowField::invalid(w, h);
    for i in 0..w * h {
        let (u, v) = (f32_at(12 + i * 8), f32_at(16 + i * 8));
        if u.is_finite() && v.is_finite() && u.abs() < 1e9 && v.abs() < 1e9 {
            flow.set(i, [u as f64, v as f64]);
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obj_parses_slash_faces_and_rejects_quads() {
        let m = parse_obj("# c\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
        assert!(parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n").is_err());
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn obj_text_round_trips_exactly() {
        let v = vec![Vec3::new(0.1, -2.0 / 3.0, 1e-17), Vec3::new(3.0, 4.0, 5.0), Vec3::new(-0.0, 7.25, 1.0 / 7.0)];
        let f = vec![[0, 1, 2]];
        let back = parse_obj(&obj_string(&v, &f)).unwrap();
        assert_eq!(back.vertices, v);
        assert_eq!(back.faces, f);
    }

    #[test]
    fn flo_header_layout() {
        let mut flow = FlowField::invalid(3, 2);
        flow.set(4, [1.5, -2.0]);
        let bytes = flow_to_flo(&flow);
        assert_eq!(&bytes[0..4], &202021.25f32.to_le_bytes());
        assert_eq!(&bytes[4..8], &3i32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2i32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 6 * 8);
        let back = parse_flo(&bytes).unwrap();
        assert_eq!(back.vector(4), [1.5, -2.0]);
        assert!(parse_flo(&bytes[..20]).is_err());
    }

    #[test]
    fn pnm_header_tolerates_comments() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let (w, h, _, off) = parse_pnm_header(bytes, "P5").unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(&bytes[off..], b"\x00\xff");
        assert!(parse_pnm_header(bytes, "P6").is_err());
    }
}
