//! Point cloud container, voxelization, and PLY reading/writing.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Coord3;

/// Integer point cloud at bit precision `n_bits`. Canonical form is unique
/// coordinates in Morton order; `original_count` remembers how many points
/// existed before deduplication so bpp stays comparable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointCloud {
    pub points: Vec<Coord3>,
    pub n_bits: u32,
    pub original_count: usize,
}

impl PointCloud {
    /// Canonicalizes raw integer points: range check, Morton sort, dedup.
    pub fn from_points(points: Vec<Coord3>, n_bits: u32) -> Result<PointCloud> {
        if n_bits == 0 || n_bits > 18 {
            return Err(Error::Metrics(format!("precision {} out of range", n_bits)));
        }
        let hi = 1i64 << n_bits;
        for p in &points {
            if [p.x, p.y, p.z].iter().any(|&c| (c as i64) < 0 || c as i64 >= hi) {
                return Err(Error::Metrics(format!(
                    "point ({},{},{}) outside [0, 2^{})",
                    p.x, p.y, p.z, n_bits
                )));
            }
        }
        let original_count = points.len();
        let mut points = points;
        points.sort_by_key(|c| c.morton());
        points.dedup();
        Ok(PointCloud {
            points,
            n_bits,
            original_count,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Maps float coordinates affinely from `bbox` onto [0, 2^N - 1], rounds to
/// the nearest voxel, and canonicalizes.
pub fn quantize(raw: &[[f64; 3]], n_bits: u32, bbox: ([f64; 3], [f64; 3])) -> Result<PointCloud> {
    if n_bits == 0 || n_bits > 18 {
        return Err(Error::Metrics(format!("precision {} out of range", n_bits)));
    }
    let (lo, hi) = bbox;
    let span: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).collect();
    if span.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Metrics("degenerate bounding box".into()));
    }
    let top = ((1u32 << n_bits) - 1) as f64;
    let points = raw
        .iter()
        .map(|p| {
            let q = |a: usize| {
                let t = ((p[a] - lo[a]) / span[a]).clamp(0.0, 1.0);
                (t * top).round() as i32
            };
            Coord3::new(q(0), q(1), q(2))
        })
        .collect();
    PointCloud::from_points(points, n_bits)
}

/// Axis-aligned bounding box of raw float points.
pub fn bbox_of(raw: &[[f64; 3]]) -> Result<([f64; 3], [f64; 3])> {
    if raw.is_empty() {
        return Err(Error::Metrics("empty point set has no bounding box".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in raw {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy)]
enum PlyScalar {
    F32,
    F64,
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
}

impl PlyScalar {
    fn parse(s: &str) -> Option<PlyScalar> {
        match s {
            "float" | "float32" => Some(PlyScalar::F32),
            "double" | "float64" => Some(PlyScalar::F64),
            "char" | "int8" => Some(PlyScalar::I8),
            "uchar" | "uint8" => Some(PlyScalar::U8),
            "short" | "int16" => Some(PlyScalar::I16),
            "ushort" | "uint16" => Some(PlyScalar::U16),
            "int" | "int32" => Some(PlyScalar::I32),
            "uint" | "uint32" => Some(PlyScalar::U32),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::F32 | PlyScalar::I32 | PlyScalar::U32 => 4,
            PlyScalar::F64 => 8,
        }
    }

    fn read_le(self, buf: &[u8]) -> f64 {
        match self {
            PlyScalar::F32 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            PlyScalar::F64 => f64::from_le_bytes(buf[..8].try_into().unwrap()),
            PlyScalar::I8 => buf[0] as i8 as f64,
            PlyScalar::U8 => buf[0] as f64,
            PlyScalar::I16 => i16::from_le_bytes(buf[..2].try_into().unwrap()) as f64,
            PlyScalar::U16 => u16::from_le_bytes(buf[..2].try_into().unwrap()) as f64,
            PlyScalar::I32 => i32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            PlyScalar::U32 => u32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
        }
    }
}

struct PlyHeader {
    format: PlyFormat,
    vertex_count: usize,
    /// (name, type) of every vertex property, in declaration order.
    props: Vec<(String, PlyScalar)>,
}

fn parse_header(r: &mut impl BufRead) -> Result<PlyHeader> {
    let perr = |line: usize, msg: &str| Error::PlyParse {
        line,
        msg: msg.to_string(),
    };
    fn next_line(r: &mut impl BufRead, lineno: usize) -> Result<String> {
        let mut s = String::new();
        if r.read_line(&mut s)? == 0 {
            return Err(Error::PlyParse {
                line: lineno,
                msg: "unexpected end of header".to_string(),
            });
        }
        Ok(s.trim().to_string())
    }

    if next_line(r, 1)? != "ply" {
        return Err(perr(1, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut props = Vec::new();
    let mut in_vertex_element = false;
    let mut line_idx = 1;
    loop {
        line_idx += 1;
        let line = next_line(r, line_idx)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first().copied() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                format = Some(match fields.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLe,
                    _ => return Err(perr(line_idx, "unsupported format")),
                });
            }
            Some("element") => {
                in_vertex_element = fields.get(1) == Some(&"vertex");
                if in_vertex_element {
                    let n = fields
                        .get(2)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| perr(line_idx, "bad vertex count"))?;
                    vertex_count = Some(n);
                }
            }
            Some("property") => {
                if in_vertex_element {
                    if fields.get(1) == Some(&"list") {
                        return Err(perr(line_idx, "list property on vertex element"));
                    }
                    let ty = fields
                        .get(1)
                        .and_then(|s| PlyScalar::parse(s))
                        .ok_or_else(|| perr(line_idx, "unknown property type"))?;
                    let name = fields
                        .get(2)
                        .ok_or_else(|| perr(line_idx, "missing property name"))?;
                    props.push((name.to_string(), ty));
                }
            }
            Some("end_header") => break,
            Some(_) => return Err(perr(line_idx, "unrecognized header line")),
        }
    }
    let format = format.ok_or_else(|| perr(line_idx, "missing format line"))?;
    let vertex_count =
        vertex_count.ok_or_else(|| perr(line_idx, "missing 'element vertex' line"))?;
    for axis in ["x", "y", "z"] {
        if !props.iter().any(|(n, _)| n == axis) {
            return Err(perr(line_idx, "vertex element lacks x/y/z properties"));
        }
    }
    Ok(PlyHeader {
        format,
        vertex_count,
        props,
    })
}

/// Reads an ASCII or binary-little-endian PLY. Integer coordinates in range
/// pass through exactly; float coordinates are voxelized to `n_bits` over
/// their bounding box.
pub fn read_ply(path: &Path, n_bits: u32) -> Result<PointCloud> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let header = parse_header(&mut r)?;

    let xi = header.props.iter().position(|(n, _)| n == "x").unwrap();
    let yi = header.props.iter().position(|(n, _)| n == "y").unwrap();
    let zi = header.props.iter().position(|(n, _)| n == "z").unwrap();
    let mut raw = Vec::with_capacity(header.vertex_count);
    match header.format {
        PlyFormat::Ascii => {
            for i in 0..header.vertex_count {
                let mut line = String::new();
                if r.read_line(&mut line)? == 0 {
                    return Err(Error::PlyParse {
                        line: 0,
                        msg: format!("vertex data ends after {} of {} rows", i, header.vertex_count),
                    });
                }
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::PlyParse {
                        line: 0,
                        msg: format!("vertex row {}: {}", i, e),
                    })?;
                if vals.len() < header.props.len() {
                    return Err(Error::PlyParse {
                        line: 0,
                        msg: format!("vertex row {} has too few values", i),
                    });
                }
                raw.push([vals[xi], vals[yi], vals[zi]]);
            }
        }
        PlyFormat::BinaryLe => {
            let row: usize = header.props.iter().map(|(_, t)| t.size()).sum();
            let mut buf = vec![0u8; row];
            for i in 0..header.vertex_count {
                r.read_exact(&mut buf).map_err(|_| Error::PlyParse {
                    line: 0,
                    msg: format!("vertex data ends after {} of {} rows", i, header.vertex_count),
                })?;
                let mut off = 0;
                let mut vals = [0.0; 3];
                for (j, (_, ty)) in header.props.iter().enumerate() {
                    let v = ty.read_le(&buf[off..]);
                    if j == xi {
                        vals[0] = v;
                    } else if j == yi {
                        vals[1] = v;
                    } else if j == zi {
                        vals[2] = v;
                    }
                    off += ty.size();
                }
                raw.push(vals);
            }
        }
    }

    let hi = (1i64 << n_bits) as f64;
    let integral = raw
        .iter()
        .all(|p| p.iter().all(|&v| v.fract() == 0.0 && v >= 0.0 && v < hi));
    if integral {
        PointCloud::from_points(
            raw.iter()
                .map(|p| Coord3::new(p[0] as i32, p[1] as i32, p[2] as i32))
                .collect(),
            n_bits,
        )
    } else {
        quantize(&raw, n_bits, bbox_of(&raw)?)
    }
}

/// Writes the canonical cloud as ASCII PLY with integer coordinates.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ply")?;
    writeln!(f, "format ascii 1.0")?;
    writeln!(f, "element vertex {}", cloud.points.len())?;
    writeln!(f, "property int x")?;
    writeln!(f, "property int y")?;
    writeln!(f, "property int z")?;
    writeln!(f, "end_header")?;
    for p in &cloud.points {
        writeln!(f, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}
