//! NPZ checkpoint serialization: a ZIP archive holding one NPY member per
//! tensor entry, member name `<key>.npy`.
//!
//! Only the NPY subset real checkpoints need is accepted: format version
//! 1.0, C-order payloads, descr in `<f4`, `<f8`, `|u1`, `<i8`. Anything
//! else is rejected with a precise error rather than guessed at.

use std::fs;
use std::path::Path;

use crate::container::{Checkpoint, ContainerError, ContainerFormat, DType, TensorEntry};
use crate::ziparc::{self, ZipCompression, ZipMemberSpec};

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";
const MEMBER_SUFFIX: &str = ".npy";

/// Serializes every entry of the checkpoint as an NPY member (stored, not
/// deflated, matching common checkpoint tooling) in entry order.
pub fn write_npz_bytes(c: &Checkpoint) -> Result<Vec<u8>, ContainerError> {
    let names: Vec<String> = c
        .entries()
        .iter()
        .map(|e| format!("{}{MEMBER_SUFFIX}", e.key()))
        .collect();
    let payloads: Vec<Vec<u8>> = c.entries().iter().map(npy_bytes).collect();
    let specs: Vec<ZipMemberSpec<'_>> = names
        .iter()
        .zip(&payloads)
        .map(|(name, data)| ZipMemberSpec {
            name,
            data,
            compression: ZipCompression::Store,
        })
        .collect();
    Ok(ziparc::write_zip(&specs)?)
}

pub fn write_npz(c: &Checkpoint, path: &Path) -> Result<u64, ContainerError> {
    let bytes = write_npz_bytes(c)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_npz_bytes(bytes: &[u8]) -> Result<Checkpoint, ContainerError> {
    let members = ziparc::read_zip(bytes)?;
    let mut c = Checkpoint::with_format(ContainerFormat::Npz);
    for m in members {
        let key = m
            .name
            .strip_suffix(MEMBER_SUFFIX)
            .ok_or_else(|| ContainerError::UnsupportedNpy {
                member: m.name.clone(),
                reason: "member name lacks .npy suffix".into(),
            })?
            .to_owned();
        let (dtype, shape, payload) = parse_npy(&m.name, &m.data)?;
        c.add_entry(TensorEntry::new(key, dtype, shape, payload)?)?;
    }
    Ok(c)
}

pub fn read_npz(path: &Path) -> Result<Checkpoint, ContainerError> {
    read_npz_bytes(&fs::read(path)?)
}

/// NPY v1.0 serialization of one entry.
fn npy_bytes(e: &TensorEntry) -> Vec<u8> {
    let shape = match e.shape().len() {
        0 => "()".to_owned(),
        1 => format!("({},)", e.shape()[0]),
        _ => format!(
            "({})",
            e.shape()
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        e.dtype().npy_descr()
    );
    // Pad with spaces so magic+version+len+header is a multiple of 64,
    // terminated by a newline, as numpy writes it.
    let prefix = NPY_MAGIC.len() + 2 + 2;
    let total = (prefix + header.len() + 1).div_ceil(64) * 64;
    header.extend(std::iter::repeat_n(' ', total - prefix - header.len() - 1));
    header.push('\n');

    let mut out = Vec::with_capacity(total + e.payload().len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]); // format version 1.0
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(e.payload());
    out
}

fn parse_npy(member: &str, bytes: &[u8]) -> Result<(DType, Vec<u64>, Vec<u8>), ContainerError> {
    let unsupported = |reason: String| ContainerError::UnsupportedNpy {
        member: member.to_owned(),
        reason,
    };
    if bytes.len() < 10 {
        return Err(unsupported("shorter than the fixed NPY prefix".into()));
    }
    if &bytes[..6] != NPY_MAGIC {
        return Err(unsupported("bad NPY magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(unsupported(format!("unsupported NPY version {major}.{minor}")));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let payload_start = 10 + header_len;
    if bytes.len() < payload_start {
        return Err(unsupported("header overruns member".into()));
    }
    let header = std::str::from_utf8(&bytes[10..payload_start])
        .map_err(|_| unsupported("header is not UTF-8".into()))?;

    let descr = dict_str_value(header, "descr").ok_or_else(|| unsupported("missing descr".into()))?;
    let dtype = DType::from_npy_descr(&descr)
        .ok_or_else(|| unsupported(format!("unsupported descr {descr:?}")))?;

    match dict_raw_value(header, "fortran_order") {
        Some(v) if v.starts_with("False") => {}
        Some(v) if v.starts_with("True") => {
            return Err(unsupported("fortran_order layouts are unsupported".into()))
        }
        _ => return Err(unsupported("missing or malformed fortran_order".into())),
    }

    let shape_src =
        dict_raw_value(header, "shape").ok_or_else(|| unsupported("missing shape".into()))?;
    let shape = parse_shape_tuple(&shape_src)
        .ok_or_else(|| unsupported(format!("malformed shape {shape_src:?}")))?;

    Ok((dtype, shape, bytes[payload_start..].to_vec()))
}

/// Value of `'key': '<string>'` inside the header dict.
fn dict_str_value(header: &str, key: &str) -> Option<String> {
    let raw = dict_raw_value(header, key)?;
    let rest = raw.strip_prefix('\'')?;
    let end = rest.find('\'')?;
    Some(rest[..end].to_owned())
}

/// Raw text following `'key':` up to the end of the header.
fn dict_raw_value(header: &str, key: &str) -> Option<String> {
    let marker = format!("'{key}':");
    let at = header.find(&marker)? + marker.len();
    Some(header[at..].trim_start().to_owned())
}

/// Parses `()`, `(5,)` or `(2, 3, ...)` into dims.
fn parse_shape_tuple(src: &str) -> Option<Vec<u64>> {
    let rest = src.strip_prefix('(')?;
    let end = rest.find(')')?;
    let inner = &rest[..end];
    let mut dims = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        dims.push(part.parse::<u64>().ok()?);
    }
    Some(dims)
}
