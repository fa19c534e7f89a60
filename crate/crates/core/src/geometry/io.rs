//! On-disk formats: ASCII OBJ (`v` and `f` lines only) and the
//! `<name>.json` + `<name>.raw` volume pair.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mesh::TriangleMesh;
use super::volume::{ScalarVolume, VolumeKind};
use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};

pub fn parse_obj<T: Real>(text: &str, path: &Path) -> Result<TriangleMesh<T>> {
    let bad = |line: usize, reason: String| Error::Format {
        format: "OBJ",
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let tag = tokens.next().unwrap_or_default();
        let rest: Vec<&str> = tokens.collect();
        match tag {
            "v" => {
                if rest.len() != 3 {
                    return Err(bad(ln + 1, "vertex needs exactly 3 coordinates".into()));
                }
                let mut c = [0f64; 3];
                for (slot, tok) in c.iter_mut().zip(&rest) {
                    *slot = tok
                        .parse::<f64>()
                        .map_err(|e| bad(ln + 1, format!("bad coordinate {tok:?}: {e}")))?;
                }
                vertices.push(Vec3::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2])));
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(bad(ln + 1, "face needs exactly 3 indices".into()));
                }
                let mut f = [0usize; 3];
                for (slot, tok) in f.iter_mut().zip(&rest) {
                    let idx = tok
                        .parse::<usize>()
                        .map_err(|e| bad(ln + 1, format!("bad index {tok:?}: {e}")))?;
                    if idx == 0 {
                        return Err(bad(ln + 1, "indices are 1-based".into()));
                    }
                    *slot = idx - 1;
                }
                faces.push(f);
            }
            other => {
                return Err(bad(ln + 1, format!("unsupported line type {other:?}")));
            }
        }
    }
    TriangleMesh::new(vertices, faces).map_err(|e| Error::Format {
        format: "OBJ",
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn format_obj<T: Real>(mesh: &TriangleMesh<T>) -> String {
    let mut out = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", v.x.as_f64(), v.y.as_f64(), v.z.as_f64());
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn read_obj<T: Real>(path: &Path) -> Result<TriangleMesh<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

pub fn write_obj<T: Real>(mesh: &TriangleMesh<T>, path: &Path) -> Result<()> {
    fs::write(path, format_obj(mesh)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: String,
    pub order: String,
    pub kind: VolumeKind,
}

/// `<stem>.json` and `<stem>.raw` for a volume stem path (extension ignored).
pub fn volume_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("raw"))
}

pub fn write_volume<T: Real>(volume: &ScalarVolume<T>, stem: &Path) -> Result<()> {
    let (json_path, raw_path) = volume_paths(stem);
    let s = volume.spacing();
    let o = volume.origin();
    let header = VolumeHeader {
        dims: volume.dims(),
        spacing_mm: [s.x.as_f64(), s.y.as_f64(), s.z.as_f64()],
        origin_mm: [o.x.as_f64(), o.y.as_f64(), o.z.as_f64()],
        dtype: "f32le".into(),
        order: "x-fastest".into(),
        kind: volume.kind(),
    };
    let text = serde_json::to_string(&header).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(volume.len() * 4);
    for v in volume.values() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

pub fn read_volume<T: Real>(stem: &Path) -> Result<ScalarVolume<T>> {
    let (json_path, raw_path) = volume_paths(stem);
    let bad = |reason: String| Error::Format {
        format: "volume",
        path: json_path.clone(),
        reason,
    };
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(bad(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "x-fastest" {
        return Err(bad(format!("unsupported order {:?}", header.order)));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let count: usize = header.dims.iter().product();
    if bytes.len() != count * 4 {
        return Err(Error::Format {
            format: "volume",
            path: raw_path,
            reason: format!("expected {} bytes, found {}", count * 4, bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let lit3 = |a: [f64; 3]| Vec3::new(T::lit(a[0]), T::lit(a[1]), T::lit(a[2]));
    ScalarVolume::new(
        header.dims,
        lit3(header.spacing_mm),
        lit3(header.origin_mm),
        values,
        header.kind,
    )
    .map_err(|e| bad(e.to_string()))
}
