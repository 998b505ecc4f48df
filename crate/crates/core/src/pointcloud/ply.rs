//! Minimal PLY reader/writer for colored point clouds.
//!
//! Reads ASCII and binary little-endian files. Only the `vertex` element is
//! interpreted; other elements are parsed and skipped. Colors stored as
//! integer types are scaled by `1/255`, float colors are taken as-is.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, ScalarType::F32 | ScalarType::F64)
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: ScalarType },
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    format: Format,
    elements: Vec<Element>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn read_header(reader: &mut impl BufRead) -> Result<Header> {
    let mut line_no = 0;
    let mut next_line = |reader: &mut dyn BufRead| -> Result<(usize, String)> {
        let mut buf = Vec::new();
        let n = reader.read_until(b'\n', &mut buf)?;
        line_no += 1;
        if n == 0 {
            return Err(parse_err(line_no, "unexpected end of file in header"));
        }
        let text = String::from_utf8(buf).map_err(|_| parse_err(line_no, "header is not valid UTF-8"))?;
        Ok((line_no, text.trim_end_matches(['\r', '\n']).to_string()))
    };

    let (n, magic) = next_line(reader)?;
    if magic.trim() != "ply" {
        return Err(parse_err(n, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (n, line) = next_line(reader)?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            None => continue,
            Some("comment") | Some("obj_info") => continue,
            Some("format") => {
                let kind = tok.next().ok_or_else(|| parse_err(n, "format line without a type"))?;
                format = Some(match kind {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLittleEndian,
                    other => return Err(parse_err(n, format!("unsupported format '{other}'"))),
                });
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| parse_err(n, "element without a name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(n, "element without a valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(n, "property before any element"))?;
                let ty = tok.next().ok_or_else(|| parse_err(n, "property without a type"))?;
                if ty == "list" {
                    let count = tok.next().and_then(ScalarType::parse);
                    let item = tok.next().and_then(ScalarType::parse);
                    match (count, item, tok.next()) {
                        (Some(count), Some(item), Some(_)) => {
                            element.properties.push(Property::List { count, item })
                        }
                        _ => return Err(parse_err(n, "malformed list property")),
                    }
                } else {
                    let ty = ScalarType::parse(ty).ok_or_else(|| parse_err(n, format!("unknown property type '{ty}'")))?;
                    let name = tok.next().ok_or_else(|| parse_err(n, "property without a name"))?;
                    element.properties.push(Property::Scalar {
                        name: name.to_string(),
                        ty,
                    });
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(n, format!("unexpected header keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| parse_err(line_no, "header has no format line"))?;
    Ok(Header { format, elements })
}

/// Positions and colors (in `[0, 1]`) read from a PLY file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyPoints {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

const REQUIRED: [&str; 6] = ["x", "y", "z", "red", "green", "blue"];

pub fn read(reader: impl Read) -> Result<PlyPoints> {
    let mut reader = std::io::BufReader::new(reader);
    let header = read_header(&mut reader)?;
    let mut out = PlyPoints::default();
    let mut found_vertex = false;
    for element in &header.elements {
        if element.name != "vertex" {
            skip_element(&mut reader, header.format, element)?;
            continue;
        }
        found_vertex = true;
        let mut slots = [usize::MAX; 6];
        let mut color_scale = [1.0; 3];
        for (i, prop) in element.properties.iter().enumerate() {
            if let Property::Scalar { name, ty } = prop {
                if let Some(k) = REQUIRED.iter().position(|r| r == name) {
                    slots[k] = i;
                    if k >= 3 && !ty.is_float() {
                        color_scale[k - 3] = 1.0 / 255.0;
                    }
                }
            }
        }
        if let Some(k) = slots.iter().position(|&s| s == usize::MAX) {
            return Err(Error::format(format!("missing property {}", REQUIRED[k])));
        }
        let mut values = vec![0.0; element.properties.len()];
        for _ in 0..element.count {
            read_record(&mut reader, header.format, &element.properties, &mut values)?;
            out.positions.push([values[slots[0]], values[slots[1]], values[slots[2]]]);
            out.colors.push([
                values[slots[3]] * color_scale[0],
                values[slots[4]] * color_scale[1],
                values[slots[5]] * color_scale[2],
            ]);
        }
    }
    if !found_vertex {
        return Err(Error::format("missing element vertex"));
    }
    Ok(out)
}

fn read_record(
    reader: &mut impl BufRead,
    format: Format,
    props: &[Property],
    values: &mut [f64],
) -> Result<()> {
    match format {
        Format::Ascii => {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::format("unexpected end of file in vertex data"));
            }
            let mut tok = line.split_whitespace();
            let mut next = || -> Result<f64> {
                tok.next()
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| Error::format(format!("malformed ASCII record: {}", line.trim())))
            };
            for (i, p) in props.iter().enumerate() {
                match p {
                    Property::Scalar { .. } => values[i] = next()?,
                    Property::List { .. } => {
                        let n = next()? as usize;
                        for _ in 0..n {
                            next()?;
                        }
                    }
                }
            }
        }
        Format::BinaryLittleEndian => {
            let mut buf = [0u8; 8];
            for (i, p) in props.iter().enumerate() {
                match p {
                    Property::Scalar { ty, .. } => {
                        reader.read_exact(&mut buf[..ty.size()])?;
                        values[i] = ty.decode(&buf);
                    }
                    Property::List { count, item } => {
                        reader.read_exact(&mut buf[..count.size()])?;
                        let n = count.decode(&buf) as usize;
                        let mut skip = vec![0u8; n * item.size()];
                        reader.read_exact(&mut skip)?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn skip_element(reader: &mut impl BufRead, format: Format, element: &Element) -> Result<()> {
    let mut values = vec![0.0; element.properties.len()];
    for _ in 0..element.count {
        read_record(reader, format, &element.properties, &mut values)?;
    }
    Ok(())
}

/// Writes binary little-endian PLY with double positions and byte colors.
pub fn write(mut writer: impl Write, positions: &[[f64; 3]], colors: &[[f64; 3]]) -> Result<()> {
    assert_eq!(positions.len(), colors.len());
    let mut out = Vec::with_capacity(128 + positions.len() * 27);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        positions.len()
    )?;
    for (p, c) in positions.iter().zip(colors) {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in c {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    writer.write_all(&out)?;
    Ok(())
}
