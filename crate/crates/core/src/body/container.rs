//! Body-model container.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   b"RSHPBODY"
//! header_len u32 LE
//! header     header_len bytes of UTF-8 JSON
//! data       concatenated little-endian array blocks
//! ```
//!
//! The header carries `version`, `dims` (`vertices`, `faces`, `joints`,
//! `betas`) and an `arrays` list of `{name, dtype, shape, offset}` where
//! `offset` is a byte offset into the data section. Real-valued arrays are
//! `f32`, `faces` is `u32` and `parents` is `i32` with `-1` marking the root.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use super::{BodyModel, BodyModelError, BodyModelParts, Result};

pub const CONTAINER_MAGIC: &[u8; 8] = b"RSHPBODY";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dims: Dims,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Dims {
    vertices: usize,
    faces: usize,
    joints: usize,
    betas: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

impl ArrayEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

enum Block {
    F32(Vec<f64>),
    U32(Vec<u32>),
    I32(Vec<i32>),
}

impl Block {
    fn dtype(&self) -> &'static str {
        match self {
            Block::F32(_) => "f32",
            Block::U32(_) => "u32",
            Block::I32(_) => "i32",
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Block::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
            Block::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Block::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

/// Serializes `model` into the container format.
pub fn write_model<W: Write>(model: &BodyModel, mut w: W) -> std::io::Result<()> {
    let p = model.parts();
    let (v, f, j, b) = (model.num_vertices(), model.num_faces(), model.num_joints(), model.num_betas());
    let blocks: Vec<(&str, Vec<usize>, Block)> = vec![
        ("template_vertices", vec![v, 3], Block::F32(p.template_vertices.iter().flatten().copied().collect())),
        ("faces", vec![f, 3], Block::U32(p.faces.iter().flatten().copied().collect())),
        ("shape_dirs", vec![v, 3, b], Block::F32(p.shape_dirs.clone())),
        ("pose_dirs", vec![v, 3, 9 * (j - 1)], Block::F32(p.pose_dirs.clone())),
        ("joint_regressor", vec![j, v], Block::F32(p.joint_regressor.clone())),
        ("skin_weights", vec![v, j], Block::F32(p.skin_weights.clone())),
        ("parents", vec![j], Block::I32(p.parents.iter().map(|x| x.map_or(-1, |i| i as i32)).collect())),
    ];
    let mut data = Vec::new();
    let mut arrays = Vec::new();
    for (name, shape, block) in &blocks {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            dtype: block.dtype().into(),
            shape: shape.clone(),
            offset: data.len(),
        });
        block.write_le(&mut data);
    }
    let header =
        Header { version: CONTAINER_VERSION, dims: Dims { vertices: v, faces: f, joints: j, betas: b }, arrays };
    let header = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&data)?;
    Ok(())
}

pub fn save_model(model: &BodyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| BodyModelError::Io { path: path.to_path_buf(), source };
    let mut buf = Vec::new();
    write_model(model, &mut buf).map_err(io_err)?;
    std::fs::write(path, buf).map_err(io_err)
}

/// Reads and validates a model from container bytes.
pub fn read_model<R: Read>(mut r: R) -> Result<BodyModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| BodyModelError::Malformed(format!("read failed: {e}")))?;
    parse(&bytes)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BodyModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| BodyModelError::Io { path: path.to_path_buf(), source })?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<BodyModel> {
    let malformed = |m: String| BodyModelError::Malformed(m);
    if bytes.len() < 12 || &bytes[..8] != CONTAINER_MAGIC {
        return Err(malformed("missing RSHPBODY magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let data_start = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| malformed(format!("header length {header_len} exceeds file size")))?;
    let header: Header =
        serde_json::from_slice(&bytes[12..data_start]).map_err(|e| malformed(format!("bad header: {e}")))?;
    if header.version != CONTAINER_VERSION {
        return Err(malformed(format!("unsupported container version {}", header.version)));
    }
    let data = &bytes[data_start..];
    let Dims { vertices: v, faces: f, joints: j, betas: b } = header.dims;
    if j == 0 {
        return Err(BodyModelError::Dimension("model declares zero joints".into()));
    }

    let find = |name: &str, dtype: &str, shape: &[usize]| -> Result<&[u8]> {
        let e = header
            .arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| malformed(format!("array `{name}` missing")))?;
        if e.dtype != dtype {
            return Err(malformed(format!("array `{name}` has dtype {}, expected {dtype}", e.dtype)));
        }
        if e.shape != shape {
            return Err(BodyModelError::Dimension(format!(
                "array `{name}` has shape {:?}, dims imply {:?}",
                e.shape, shape
            )));
        }
        let len = e.len() * 4;
        let end = e.offset.checked_add(len).filter(|&end| end <= data.len()).ok_or_else(|| {
            malformed(format!(
                "array `{name}` block [{}, +{len}) runs past end of data ({} bytes)",
                e.offset,
                data.len()
            ))
        })?;
        Ok(&data[e.offset..end])
    };
    let words = |raw: &[u8]| raw.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap()).collect::<Vec<_>>();
    let f32s = |raw: &[u8]| words(raw).into_iter().map(|w| f32::from_le_bytes(w) as f64).collect::<Vec<_>>();

    let tv = f32s(find("template_vertices", "f32", &[v, 3])?);
    let faces: Vec<u32> = words(find("faces", "u32", &[f, 3])?).into_iter().map(u32::from_le_bytes).collect();
    let parents: Vec<i32> = words(find("parents", "i32", &[j])?).into_iter().map(i32::from_le_bytes).collect();
    let parents = parents
        .iter()
        .enumerate()
        .map(|(row, &p)| match p {
            -1 => Ok(None),
            p if p >= 0 => Ok(Some(p as usize)),
            _ => Err(BodyModelError::Invariant { what: format!("invalid parent index {p}"), row }),
        })
        .collect::<Result<Vec<_>>>()?;

    BodyModel::new(BodyModelParts {
        template_vertices: tv.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        faces: faces.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        shape_dirs: f32s(find("shape_dirs", "f32", &[v, 3, b])?),
        num_betas: b,
        pose_dirs: f32s(find("pose_dirs", "f32", &[v, 3, 9 * (j - 1)])?),
        joint_regressor: f32s(find("joint_regressor", "f32", &[j, v])?),
        skin_weights: f32s(find("skin_weights", "f32", &[v, j])?),
        parents,
    })
}
