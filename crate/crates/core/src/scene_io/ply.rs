//! Binary little-endian PLY in the common splat-viewer layout.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::SceneIoError;
use crate::gaussians::GaussianPrimitive;

/// Vertex properties written, in order.
pub const PLY_FIELDS: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
    "rot_2", "rot_3",
];

fn fields_of(p: &GaussianPrimitive) -> [f64; 14] {
    [
        p.mean.x,
        p.mean.y,
        p.mean.z,
        p.sh_dc.x,
        p.sh_dc.y,
        p.sh_dc.z,
        p.opacity_logit,
        p.log_scales.x,
        p.log_scales.y,
        p.log_scales.z,
        p.rotation[0],
        p.rotation[1],
        p.rotation[2],
        p.rotation[3],
    ]
}

fn from_fields(v: &[f64; 14]) -> GaussianPrimitive {
    GaussianPrimitive {
        mean: Vector3::new(v[0], v[1], v[2]),
        sh_dc: Vector3::new(v[3], v[4], v[5]),
        opacity_logit: v[6],
        log_scales: Vector3::new(v[7], v[8], v[9]),
        rotation: [v[10], v[11], v[12], v[13]],
    }
}

pub fn write_ply(out: &mut impl Write, prims: &[GaussianPrimitive]) -> std::io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format binary_little_endian 1.0")?;
    writeln!(out, "element vertex {}", prims.len())?;
    for f in PLY_FIELDS {
        writeln!(out, "property float {f}")?;
    }
    writeln!(out, "end_header")?;
    for p in prims {
        for v in fields_of(p) {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn export_ply(path: &Path, prims: &[GaussianPrimitive]) -> Result<(), SceneIoError> {
    let io = |source| SceneIoError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    write_ply(&mut w, prims).map_err(io)?;
    w.flush().map_err(io)
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

/// Reads splat primitives from a binary little-endian PLY. Extra vertex
/// properties are skipped; the fourteen splat fields are required.
pub fn read_ply(input: impl Read) -> Result<Vec<GaussianPrimitive>, SceneIoError> {
    let bad = |why: String| SceneIoError::Ply(why);
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<_>| -> Result<String, SceneIoError> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        if n == 0 {
            return Err(bad("unexpected end of header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut reader)? != "ply" {
        return Err(bad("missing 'ply' magic".into()));
    }
    let mut count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let l = next_line(&mut reader)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(bad(format!("unsupported format {fmt}")));
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, n] => {
                if count.is_some() {
                    return Err(bad(format!("unsupported extra element {name}")));
                }
                in_vertex = *name == "vertex";
                if !in_vertex {
                    return Err(bad(format!("unsupported element {name}")));
                }
                count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
            }
            ["property", "list", ..] => return Err(bad("list properties are not supported".into())),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown property type {ty}")))?;
                props.push((name.to_string(), s));
            }
            _ => return Err(bad(format!("unexpected header line {l:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let mut slots = [usize::MAX; 14];
    for (k, f) in PLY_FIELDS.iter().enumerate() {
        slots[k] = props.iter().position(|(n, _)| n == f).ok_or_else(|| bad(format!("missing property {f}")))?;
    }
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let offsets: Vec<usize> = props.iter().scan(0, |acc, (_, s)| {
        let o = *acc;
        *acc += s.size();
        Some(o)
    }).collect();
    let mut payload = vec![0u8; stride * count];
    reader.read_exact(&mut payload).map_err(|_| bad(format!("expected {count} vertices of {stride} bytes")))?;
    Ok(payload
        .chunks_exact(stride.max(1))
        .take(count)
        .map(|rec| {
            let mut v = [0.0; 14];
            for k in 0..14 {
                let p = slots[k];
                v[k] = props[p].1.decode(&rec[offsets[p]..]);
            }
            from_fields(&v)
        })
        .collect())
}

pub fn import_ply(path: &Path) -> Result<Vec<GaussianPrimitive>, SceneIoError> {
    let file = std::fs::File::open(path).map_err(|source| SceneIoError::Io { path: path.to_path_buf(), source })?;
    read_ply(file)
}
