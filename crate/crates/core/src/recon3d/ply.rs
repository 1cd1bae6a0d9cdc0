//! PLY 1.0 reading and writing, ASCII and binary little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{GridMesh, PointCloud};
use crate::error::{Error, Result};

fn header(cloud: &PointCloud, faces: usize, binary: bool) -> String {
    let mut h = String::from("ply\n");
    h.push_str(if binary {
        "format binary_little_endian 1.0\n"
    } else {
        "format ascii 1.0\n"
    });
    let _ = writeln!(h, "element vertex {}", cloud.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(h, "property float {p}");
    }
    if cloud.normals.is_some() {
        for p in ["nx", "ny", "nz"] {
            let _ = writeln!(h, "property float {p}");
        }
    }
    if cloud.colors.is_some() {
        for p in ["red", "green", "blue"] {
            let _ = writeln!(h, "property uchar {p}");
        }
    }
    if cloud.labels.is_some() {
        h.push_str("property ushort label\n");
    }
    if faces > 0 {
        let _ = writeln!(h, "element face {faces}");
        h.push_str("property list uchar int vertex_indices\n");
    }
    h.push_str("end_header\n");
    h
}

fn encode(cloud: &PointCloud, faces: &[[u32; 3]], binary: bool) -> Result<Vec<u8>> {
    cloud.validate()?;
    let n = cloud.len() as u32;
    if let Some(bad) = faces.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("face index {bad} out of range for {n} vertices")));
    }
    let mut out = header(cloud, faces.len(), binary).into_bytes();
    if binary {
        for i in 0..cloud.len() {
            for v in cloud.points[i] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(ns) = &cloud.normals {
                for v in ns[i] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            if let Some(cs) = &cloud.colors {
                out.extend_from_slice(&cs[i]);
            }
            if let Some(ls) = &cloud.labels {
                out.extend_from_slice(&ls[i].to_le_bytes());
            }
        }
        for f in faces {
            out.push(3);
            for &i in f {
                out.extend_from_slice(&(i as i32).to_le_bytes());
            }
        }
    } else {
        let mut s = String::new();
        for i in 0..cloud.len() {
            let [x, y, z] = cloud.points[i];
            let _ = write!(s, "{x} {y} {z}");
            if let Some(ns) = &cloud.normals {
                let [a, b, c] = ns[i];
                let _ = write!(s, " {a} {b} {c}");
            }
            if let Some(cs) = &cloud.colors {
                let [r, g, b] = cs[i];
                let _ = write!(s, " {r} {g} {b}");
            }
            if let Some(ls) = &cloud.labels {
                let _ = write!(s, " {}", ls[i]);
            }
            s.push('\n');
        }
        for [a, b, c] in faces {
            let _ = writeln!(s, "3 {a} {b} {c}");
        }
        out.extend_from_slice(s.as_bytes());
    }
    Ok(out)
}

pub fn encode_cloud_ply(cloud: &PointCloud, binary: bool) -> Result<Vec<u8>> {
    encode(cloud, &[], binary)
}

pub fn encode_mesh_ply(mesh: &GridMesh, binary: bool) -> Result<Vec<u8>> {
    encode(&mesh.vertex_cloud(), &mesh.faces, binary)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_cloud_ply(cloud: &PointCloud, path: &Path, binary: bool) -> Result<()> {
    write(path, &encode_cloud_ply(cloud, binary)?)
}

pub fn write_mesh_ply(mesh: &GridMesh, path: &Path, binary: bool) -> Result<()> {
    write(path, &encode_mesh_ply(mesh, binary)?)
}

/// Vertices and triangular faces read back from a PLY file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyData {
    pub cloud: PointCloud,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Format(format!("unknown PLY type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Reads values in file order, from either ASCII tokens or little-endian bytes.
enum Body<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary(&'a [u8], usize),
}

impl Body<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64> {
        match self {
            Body::Ascii(tokens) => {
                let tok = tokens.next().ok_or_else(|| bad("PLY body ends early"))?;
                // f32 fields parse as f32 directly to avoid double rounding
                let v = if ty == Scalar::F32 {
                    tok.parse::<f32>().map(f64::from)
                } else {
                    tok.parse::<f64>()
                };
                v.map_err(|e| bad(format!("bad PLY value '{tok}': {e}")))
            }
            Body::Binary(bytes, pos) => {
                let end = *pos + ty.size();
                if end > bytes.len() {
                    return Err(bad("PLY body ends early"));
                }
                let v = ty.read_le(&bytes[*pos..end]);
                *pos = end;
                Ok(v)
            }
        }
    }
}

pub fn decode_ply(bytes: &[u8]) -> Result<PlyData> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("PLY header has no end_header"))?
        + END.len();
    let head = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("PLY header is not UTF-8"))?;
    let mut lines = head.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing 'ply' magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "ascii", "1.0"] => binary = Some(false),
            ["format", "binary_little_endian", "1.0"] => binary = Some(true),
            ["format", other, ..] => return Err(bad(format!("unsupported PLY format {other}"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", cty, ity, name] => elements
                .last_mut()
                .ok_or_else(|| bad("property before element"))?
                .props
                .push(Property::List(name.to_string(), Scalar::parse(cty)?, Scalar::parse(ity)?)),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| bad("property before element"))?
                .props
                .push(Property::Scalar(name.to_string(), Scalar::parse(ty)?)),
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            _ => return Err(bad(format!("unrecognized PLY header line '{line}'"))),
        }
    }
    let binary = binary.ok_or_else(|| bad("PLY header has no format line"))?;
    let rest = &bytes[header_end..];
    let mut body = if binary {
        Body::Binary(rest, 0)
    } else {
        Body::Ascii(
            std::str::from_utf8(rest)
                .map_err(|_| bad("ASCII PLY body is not UTF-8"))?
                .split_ascii_whitespace(),
        )
    };

    let mut cloud = PointCloud::default();
    let mut faces = Vec::new();
    for el in &elements {
        let names: Vec<&str> = el
            .props
            .iter()
            .map(|p| match p {
                Property::Scalar(n, _) | Property::List(n, _, _) => n.as_str(),
            })
            .collect();
        let has = |n: &str| names.contains(&n);
        if el.name == "vertex" {
            if !(has("x") && has("y") && has("z")) {
                return Err(bad("vertex element lacks x/y/z"));
            }
            let want_n = has("nx") && has("ny") && has("nz");
            let want_c = has("red") && has("green") && has("blue");
            let want_l = has("label");
            let mut normals = Vec::new();
            let mut colors = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..el.count {
                let (mut p, mut n, mut c) = ([0f32; 3], [0f32; 3], [0u8; 3]);
                for prop in &el.props {
                    match prop {
                        Property::Scalar(name, ty) => {
                            let v = body.next(*ty)?;
                            match name.as_str() {
                                "x" => p[0] = v as f32,
                                "y" => p[1] = v as f32,
                                "z" => p[2] = v as f32,
                                "nx" => n[0] = v as f32,
                                "ny" => n[1] = v as f32,
                                "nz" => n[2] = v as f32,
                                "red" => c[0] = v as u8,
                                "green" => c[1] = v as u8,
                                "blue" => c[2] = v as u8,
                                "label" => labels.push(v as u16),
                                _ => {}
                            }
                        }
                        Property::List(_, cty, ity) => {
                            let k = body.next(*cty)? as usize;
                            for _ in 0..k {
                                body.next(*ity)?;
                            }
                        }
                    }
                }
                cloud.points.push(p);
                normals.push(n);
                colors.push(c);
            }
            cloud.normals = want_n.then_some(normals);
            cloud.colors = want_c.then_some(colors);
            cloud.labels = want_l.then_some(labels);
        } else {
            for _ in 0..el.count {
                for prop in &el.props {
                    match prop {
                        Property::Scalar(_, ty) => {
                            body.next(*ty)?;
                        }
                        Property::List(name, cty, ity) => {
                            let k = body.next(*cty)? as usize;
                            let mut idx = Vec::with_capacity(k);
                            for _ in 0..k {
                                idx.push(body.next(*ity)? as u32);
                            }
                            if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                                if k != 3 {
                                    return Err(bad(format!("only triangular faces are supported, got {k}")));
                                }
                                faces.push([idx[0], idx[1], idx[2]]);
                            }
                        }
                    }
                }
            }
        }
    }
    let n = cloud.len() as u32;
    if faces.iter().flatten().any(|&i| i >= n) {
        return Err(bad("face index out of range"));
    }
    Ok(PlyData { cloud, faces })
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    decode_ply(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_cloud() -> PointCloud {
        PointCloud {
            points: vec![[0.1, -2.5, 1e-7], [3.0e6, 0.0, -0.0]],
            colors: Some(vec![[0, 128, 255], [1, 2, 3]]),
            labels: Some(vec![0, 700]),
            normals: Some(vec![[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]]),
        }
    }

    #[test]
    fn header_counts_vertices() {
        let c = PointCloud {
            points: vec![[1.0, 2.0, 3.0]],
            ..PointCloud::default()
        };
        let text = String::from_utf8(encode_cloud_ply(&c, false).unwrap()).unwrap();
        assert!(text.contains("element vertex 1\n"));
        assert!(text.ends_with("end_header\n1 2 3\n"));
    }

    #[test]
    fn ascii_and_binary_roundtrip() {
        let c = sample_cloud();
        for binary in [false, true] {
            let back = decode_ply(&encode_cloud_ply(&c, binary).unwrap()).unwrap();
            assert_eq!(back.cloud, c);
            assert!(back.faces.is_empty());
        }
    }

    #[test]
    fn mesh_faces_in_ascii() {
        let mesh = GridMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
            colors: None,
            normals: None,
        };
        let bytes = encode_mesh_ply(&mesh, false).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("element face 1\n"));
        assert!(text.ends_with("3 0 1 2\n"));
        assert_eq!(decode_ply(&bytes).unwrap().faces, mesh.faces);
        let back = decode_ply(&encode_mesh_ply(&mesh, true).unwrap()).unwrap();
        assert_eq!(back.faces, mesh.faces);
        assert_eq!(back.cloud.points, mesh.vertices);
    }

    #[test]
    fn malformed_rejected() {
        assert!(decode_ply(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n").is_err());
        assert!(decode_ply(b"not a ply").is_err());
        let bad_face = GridMesh {
            vertices: vec![[0.0; 3]],
            faces: vec![[0, 1, 2]],
            ..GridMesh::default()
        };
        assert!(encode_mesh_ply(&bad_face, false).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = write_cloud_ply(&sample_cloud(), Path::new("/nonexistent-dir/x.ply"), true).unwrap_err();
        assert_eq!(err.category(), "io");
    }

    proptest! {
        #[test]
        fn roundtrip_is_lossless(
            pts in prop::collection::vec((any::<f32>(), any::<f32>(), any::<f32>(), any::<[u8; 3]>()), 1..40),
            binary in any::<bool>(),
        ) {
            let pts: Vec<_> = pts.into_iter().filter(|p| p.0.is_finite() && p.1.is_finite() && p.2.is_finite()).collect();
            let c = PointCloud {
                points: pts.iter().map(|p| [p.0, p.1, p.2]).collect(),
                colors: Some(pts.iter().map(|p| p.3).collect()),
                ..PointCloud::default()
            };
            let back = decode_ply(&encode_cloud_ply(&c, binary).unwrap()).unwrap();
            for (a, b) in back.cloud.points.iter().zip(&c.points) {
                for k in 0..3 {
                    prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
                }
            }
            prop_assert_eq!(back.cloud.colors, c.colors);
        }
    }
}
