//! Minimal ZIP archive reader/writer.
//!
//! Covers exactly the subset the toolkit needs: single-disk archives,
//! stored or DEFLATE members, no encryption, no zip64. The writer emits
//! byte-deterministic output (fixed 1980-01-01 timestamps, fixed
//! compression level) so equal inputs produce equal archives.

use std::io::Read;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use std::io::Write;
use thiserror::Error;

const LOCAL_SIG: u32 = 0x0403_4B50;
const CENTRAL_SIG: u32 = 0x0201_4B50;
const EOCD_SIG: u32 = 0x0605_4B50;
const EOCD_MIN: usize = 22;
/// DOS date for 1980-01-01, the deterministic timestamp on every member.
const DOS_EPOCH_DATE: u16 = 0x0021;

#[derive(Debug, Error)]
pub enum ZipError {
    #[error("no end-of-central-directory record found")]
    MissingEocd,
    #[error("malformed central directory: {0}")]
    BadCentralDirectory(String),
    #[error("malformed local header for member {member:?}: {reason}")]
    BadLocalHeader { member: String, reason: String },
    #[error("member {member:?} uses unsupported compression method {method}")]
    UnsupportedMethod { member: String, method: u16 },
    #[error("member {member:?} is encrypted")]
    Encrypted { member: String },
    #[error("multi-disk archives are unsupported")]
    MultiDisk,
    #[error("member name is not valid UTF-8")]
    NameNotUtf8,
    #[error("member {member:?} fails CRC32 verification")]
    CrcMismatch { member: String },
    #[error("member {member:?} decompressed to {actual} bytes, header declares {expected}")]
    SizeMismatch {
        member: String,
        expected: u64,
        actual: u64,
    },
    #[error("member {member:?}: DEFLATE stream corrupt: {reason}")]
    Corrupt { member: String, reason: String },
    #[error("archive exceeds 32-bit ZIP limits: {0}")]
    TooLarge(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZipCompression {
    Store,
    /// Raw DEFLATE at the maximum compression level.
    Deflate,
}

/// A member to be written: name, uncompressed data, compression choice.
pub struct ZipMemberSpec<'a> {
    pub name: &'a str,
    pub data: &'a [u8],
    pub compression: ZipCompression,
}

/// A member read back from an archive, already decompressed and
/// CRC-verified.
#[derive(Debug, Clone, PartialEq)]
pub struct ZipMember {
    pub name: String,
    pub data: Vec<u8>,
}

/// Serializes members into a single-disk ZIP archive, in order.
pub fn write_zip(members: &[ZipMemberSpec<'_>]) -> Result<Vec<u8>, ZipError> {
    if members.len() > u16::MAX as usize {
        return Err(ZipError::TooLarge(format!("{} members", members.len())));
    }
    let mut out = Vec::new();
    let mut central = Vec::new();
    for m in members {
        if m.name.len() > u16::MAX as usize {
            return Err(ZipError::TooLarge(format!("member name {} bytes", m.name.len())));
        }
        let uncompressed_len = u32::try_from(m.data.len())
            .map_err(|_| ZipError::TooLarge(format!("member {:?} data", m.name)))?;
        let crc = crc32fast::hash(m.data);
        let (method, compressed): (u16, Vec<u8>) = match m.compression {
            ZipCompression::Store => (0, m.data.to_vec()),
            ZipCompression::Deflate => {
                let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
                enc.write_all(m.data).expect("in-memory deflate");
                (8, enc.finish().expect("in-memory deflate"))
            }
        };
        let compressed_len = u32::try_from(compressed.len())
            .map_err(|_| ZipError::TooLarge(format!("member {:?} compressed", m.name)))?;
        let local_offset = u32::try_from(out.len())
            .map_err(|_| ZipError::TooLarge("archive body".into()))?;

        out.extend_from_slice(&LOCAL_SIG.to_le_bytes());
        out.extend_from_slice(&20u16.to_le_bytes()); // version needed
        out.extend_from_slice(&0u16.to_le_bytes()); // flags
        out.extend_from_slice(&method.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes()); // mod time
        out.extend_from_slice(&DOS_EPOCH_DATE.to_le_bytes());
        out.extend_from_slice(&crc.to_le_bytes());
        out.extend_from_slice(&compressed_len.to_le_bytes());
        out.extend_from_slice(&uncompressed_len.to_le_bytes());
        out.extend_from_slice(&(m.name.len() as u16).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes()); // extra len
        out.extend_from_slice(m.name.as_bytes());
        out.extend_from_slice(&compressed);

        central.push((m.name, method, crc, compressed_len, uncompressed_len, local_offset));
    }

    let cd_offset =
        u32::try_from(out.len()).map_err(|_| ZipError::TooLarge("central directory offset".into()))?;
    for (name, method, crc, csize, usize_, offset) in &central {
        out.extend_from_slice(&CENTRAL_SIG.to_le_bytes());
        out.extend_from_slice(&20u16.to_le_bytes()); // version made by
        out.extend_from_slice(&20u16.to_le_bytes()); // version needed
        out.extend_from_slice(&0u16.to_le_bytes()); // flags
        out.extend_from_slice(&method.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes()); // mod time
        out.extend_from_slice(&DOS_EPOCH_DATE.to_le_bytes());
        out.extend_from_slice(&crc.to_le_bytes());
        out.extend_from_slice(&csize.to_le_bytes());
        out.extend_from_slice(&usize_.to_le_bytes());
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes()); // extra len
        out.extend_from_slice(&0u16.to_le_bytes()); // comment len
        out.extend_from_slice(&0u16.to_le_bytes()); // disk number start
        out.extend_from_slice(&0u16.to_le_bytes()); // internal attrs
        out.extend_from_slice(&0u32.to_le_bytes()); // external attrs
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    let cd_size = u32::try_from(out.len() - cd_offset as usize)
        .map_err(|_| ZipError::TooLarge("central directory".into()))?;

    out.extend_from_slice(&EOCD_SIG.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes()); // this disk
    out.extend_from_slice(&0u16.to_le_bytes()); // cd start disk
    out.extend_from_slice(&(central.len() as u16).to_le_bytes());
    out.extend_from_slice(&(central.len() as u16).to_le_bytes());
    out.extend_from_slice(&cd_size.to_le_bytes());
    out.extend_from_slice(&cd_offset.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes()); // comment len
    Ok(out)
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes(b[o..o + 2].try_into().unwrap())
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn find_eocd(bytes: &[u8]) -> Option<usize> {
    if bytes.len() < EOCD_MIN {
        return None;
    }
    let lowest = bytes.len().saturating_sub(EOCD_MIN + u16::MAX as usize);
    let mut pos = bytes.len() - EOCD_MIN;
    loop {
        if u32_at(bytes, pos) == EOCD_SIG {
            let comment_len = u16_at(bytes, pos + 20) as usize;
            if pos + EOCD_MIN + comment_len == bytes.len() {
                return Some(pos);
            }
        }
        if pos == lowest {
            return None;
        }
        pos -= 1;
    }
}

/// Parses an archive, decompressing and CRC-checking every member.
/// Members come back in central-directory order.
pub fn read_zip(bytes: &[u8]) -> Result<Vec<ZipMember>, ZipError> {
    let eocd = find_eocd(bytes).ok_or(ZipError::MissingEocd)?;
    let this_disk = u16_at(bytes, eocd + 4);
    let cd_disk = u16_at(bytes, eocd + 6);
    if this_disk != 0 || cd_disk != 0 {
        return Err(ZipError::MultiDisk);
    }
    let total_entries = u16_at(bytes, eocd + 10) as usize;
    let cd_size = u32_at(bytes, eocd + 12) as usize;
    let cd_offset = u32_at(bytes, eocd + 16) as usize;
    let cd_end = cd_offset
        .checked_add(cd_size)
        .filter(|&e| e <= eocd)
        .ok_or_else(|| ZipError::BadCentralDirectory("directory range out of bounds".into()))?;

    let mut members = Vec::with_capacity(total_entries.min(1024));
    let mut pos = cd_offset;
    for _ in 0..total_entries {
        if pos + 46 > cd_end {
            return Err(ZipError::BadCentralDirectory(
                "central entry overruns directory".into(),
            ));
        }
        if u32_at(bytes, pos) != CENTRAL_SIG {
            return Err(ZipError::BadCentralDirectory(format!(
                "bad signature at offset {pos}"
            )));
        }
        let flags = u16_at(bytes, pos + 8);
        let method = u16_at(bytes, pos + 10);
        let crc = u32_at(bytes, pos + 16);
        let csize = u32_at(bytes, pos + 20) as usize;
        let usize_ = u32_at(bytes, pos + 24) as usize;
        let name_len = u16_at(bytes, pos + 28) as usize;
        let extra_len = u16_at(bytes, pos + 30) as usize;
        let comment_len = u16_at(bytes, pos + 32) as usize;
        let local_offset = u32_at(bytes, pos + 42) as usize;
        if pos + 46 + name_len > cd_end {
            return Err(ZipError::BadCentralDirectory("name overruns directory".into()));
        }
        let name = std::str::from_utf8(&bytes[pos + 46..pos + 46 + name_len])
            .map_err(|_| ZipError::NameNotUtf8)?
            .to_owned();
        pos += 46 + name_len + extra_len + comment_len;

        if flags & 0x1 != 0 {
            return Err(ZipError::Encrypted { member: name });
        }
        let data = read_member(bytes, &name, method, crc, csize, usize_, local_offset)?;
        members.push(ZipMember { name, data });
    }
    Ok(members)
}

fn read_member(
    bytes: &[u8],
    name: &str,
    method: u16,
    crc: u32,
    csize: usize,
    usize_: usize,
    local_offset: usize,
) -> Result<Vec<u8>, ZipError> {
    let bad = |reason: &str| ZipError::BadLocalHeader {
        member: name.to_owned(),
        reason: reason.to_owned(),
    };
    if local_offset + 30 > bytes.len() {
        return Err(bad("header outside archive"));
    }
    if u32_at(bytes, local_offset) != LOCAL_SIG {
        return Err(bad("bad signature"));
    }
    let name_len = u16_at(bytes, local_offset + 26) as usize;
    let extra_len = u16_at(bytes, local_offset + 28) as usize;
    let data_start = local_offset + 30 + name_len + extra_len;
    let data_end = data_start.checked_add(csize).ok_or_else(|| bad("size overflow"))?;
    if data_end > bytes.len() {
        return Err(bad("data outside archive"));
    }
    let raw = &bytes[data_start..data_end];

    let data = match method {
        0 => {
            if csize != usize_ {
                return Err(ZipError::SizeMismatch {
                    member: name.to_owned(),
                    expected: usize_ as u64,
                    actual: csize as u64,
                });
            }
            raw.to_vec()
        }
        8 => {
            let mut out = Vec::with_capacity(usize_.min(1 << 20));
            let mut decoder = DeflateDecoder::new(raw).take(usize_ as u64 + 1);
            decoder.read_to_end(&mut out).map_err(|e| ZipError::Corrupt {
                member: name.to_owned(),
                reason: e.to_string(),
            })?;
            if out.len() != usize_ {
                return Err(ZipError::SizeMismatch {
                    member: name.to_owned(),
                    expected: usize_ as u64,
                    actual: out.len() as u64,
                });
            }
            out
        }
        other => {
            return Err(ZipError::UnsupportedMethod {
                member: name.to_owned(),
                method: other,
            })
        }
    };
    if crc32fast::hash(&data) != crc {
        return Err(ZipError::CrcMismatch {
            member: name.to_owned(),
        });
    }
    Ok(data)
}
