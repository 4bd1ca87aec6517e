//! On-disk record formats.
//!
//! Binary store layout (all integers little-endian):
//!
//! ```text
//! header:  "LSIM" | u16 version=1 | u32 dense_dim | u32 multi_dim | u64 count
//! record:  u16 id_len | id (UTF-8) | u8 role | u8 modality
//!          | f32 x dense_dim | u32 t | f32 x (t * multi_dim)
//! ```
//!
//! A record without a multi-vector is written with `t = 0`.
//!
//! JSONL interchange is one object per line:
//! `{"id": .., "role": "query"|"passage", "modality": "text"|"image", "dense": [..], "multi": [[..], ..]}`
//! where `multi` may be omitted or null.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{DenseVector, EmbeddingRecord, Modality, MultiVector, Role};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LSIM";
pub const VERSION: u16 = 1;

/// Parsed store header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub dense_dim: u32,
    pub multi_dim: u32,
    pub count: u64,
}

/// Dimensions shared by a record set. `multi_dim` is 0 when no record
/// carries a multi-vector.
pub fn validate_records(records: &[EmbeddingRecord]) -> Result<(usize, usize)> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("record set is empty"))?;
    let dense_dim = first.dense.dim();
    let multi_dim = records
        .iter()
        .find_map(|r| r.multi.as_ref().map(|m| m.dim()))
        .unwrap_or(0);
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if r.id.is_empty() {
            return Err(Error::invalid("record id is empty"));
        }
        if r.id.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("record id `{}` is too long", r.id)));
        }
        if !seen.insert(r.id.as_str()) {
            return Err(Error::invalid(format!("duplicate record id `{}`", r.id)));
        }
        if r.dense.dim() != dense_dim {
            return Err(Error::DimensionMismatch {
                expected: dense_dim,
                found: r.dense.dim(),
            });
        }
        if let Some(m) = &r.multi {
            if m.dim() != multi_dim {
                return Err(Error::DimensionMismatch {
                    expected: multi_dim,
                    found: m.dim(),
                });
            }
        }
    }
    Ok((dense_dim, multi_dim))
}

pub fn write_binary<W: Write>(mut w: W, records: &[EmbeddingRecord]) -> Result<()> {
    let (dense_dim, multi_dim) = validate_records(records)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dense_dim as u32).to_le_bytes())?;
    w.write_all(&(multi_dim as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        w.write_all(&(r.id.len() as u16).to_le_bytes())?;
        w.write_all(r.id.as_bytes())?;
        w.write_all(&[r.role.to_byte(), r.modality.to_byte()])?;
        for v in r.dense.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        match &r.multi {
            Some(m) => {
                w.write_all(&(m.len() as u32).to_le_bytes())?;
                for v in m.as_slice() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            None => w.write_all(&0u32.to_le_bytes())?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_binary_file(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let f = File::create(path)?;
    write_binary(BufWriter::new(f), records)
}

/// Maps truncation to a format error; other IO errors pass through.
fn fmt_err(e: io::Error, what: &str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format(format!("truncated {what}"))
    } else {
        Error::Io(e)
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| fmt_err(e, what))?;
    Ok(buf)
}

fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|e| fmt_err(e, what))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_header<R: Read>(r: &mut R) -> Result<StoreHeader> {
    let magic: [u8; 4] = read_array(r, "header")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected \"LSIM\""
        )));
    }
    let version = u16::from_le_bytes(read_array(r, "header")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dense_dim = u32::from_le_bytes(read_array(r, "header")?);
    let multi_dim = u32::from_le_bytes(read_array(r, "header")?);
    let count = u64::from_le_bytes(read_array(r, "header")?);
    if dense_dim == 0 {
        return Err(Error::Format("dense dimension is 0".into()));
    }
    if count == 0 {
        return Err(Error::Format("record count is 0".into()));
    }
    Ok(StoreHeader {
        dense_dim,
        multi_dim,
        count,
    })
}

pub fn read_binary<R: Read>(mut r: R) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    let header = read_header(&mut r)?;
    let dense_dim = header.dense_dim as usize;
    let multi_dim = header.multi_dim as usize;
    let mut records = Vec::with_capacity(header.count.min(1 << 16) as usize);
    for idx in 0..header.count {
        let what = format!("record {idx}");
        let id_len = u16::from_le_bytes(read_array(&mut r, &what)?) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|e| fmt_err(e, &what))?;
        let id =
            String::from_utf8(id).map_err(|_| Error::Format(format!("{what}: id is not UTF-8")))?;
        let [role, modality] = read_array(&mut r, &what)?;
        let role = Role::from_byte(role)
            .ok_or_else(|| Error::Format(format!("{what}: bad role byte {role}")))?;
        let modality = Modality::from_byte(modality)
            .ok_or_else(|| Error::Format(format!("{what}: bad modality byte {modality}")))?;
        let dense = DenseVector::new(read_f32s(&mut r, dense_dim, &what)?)
            .map_err(|e| Error::Format(format!("{what}: {e}")))?;
        let t = u32::from_le_bytes(read_array(&mut r, &what)?) as usize;
        let multi = if t == 0 {
            None
        } else {
            if multi_dim == 0 {
                return Err(Error::Format(format!(
                    "{what}: has {t} tokens but store multi dimension is 0"
                )));
            }
            let data = read_f32s(&mut r, t * multi_dim, &what)?;
            Some(
                MultiVector::new(data, multi_dim)
                    .map_err(|e| Error::Format(format!("{what}: {e}")))?,
            )
        };
        records.push(EmbeddingRecord {
            id,
            role,
            modality,
            dense,
            multi,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    validate_records(&records).map_err(|e| Error::Format(e.to_string()))?;
    Ok((header, records))
}

pub fn read_binary_file(path: &Path) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    read_binary(BufReader::new(File::open(path)?))
}

/// SHA-256 of the binary encoding of `records`.
pub fn checksum(records: &[EmbeddingRecord]) -> Result<String> {
    let mut hasher = Sha256::new();
    write_binary(HashWriter(&mut hasher), records)?;
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    id: String,
    role: Role,
    modality: Modality,
    dense: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    multi: Option<Vec<Vec<f32>>>,
}

impl JsonRecord {
    fn into_record(self) -> Result<EmbeddingRecord> {
        let multi = match self.multi {
            Some(rows) => Some(MultiVector::from_rows(&rows)?),
            None => None,
        };
        Ok(EmbeddingRecord {
            id: self.id,
            role: self.role,
            modality: self.modality,
            dense: DenseVector::new(self.dense)?,
            multi,
        })
    }

    fn from_record(r: &EmbeddingRecord) -> Self {
        JsonRecord {
            id: r.id.clone(),
            role: r.role,
            modality: r.modality,
            dense: r.dense.as_slice().to_vec(),
            multi: r
                .multi
                .as_ref()
                .map(|m| m.rows().map(|row| row.to_vec()).collect()),
        }
    }
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
        out.push(
            rec.into_record()
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[EmbeddingRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(&JsonRecord::from_record(r))
            .map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads either format, sniffing the magic bytes.
pub fn read_records_file(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut f = BufReader::new(File::open(path)?);
    let is_binary = f.fill_buf()?.starts_with(MAGIC);
    if is_binary {
        Ok(read_binary(f)?.1)
    } else {
        read_jsonl(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, role: Role, with_multi: bool) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            role,
            modality: Modality::Image,
            dense: DenseVector::new(vec![0.25, -1.5, 3.0]).unwrap(),
            multi: with_multi.then(|| MultiVector::new(vec![1.0, 2.0, 0.5, -0.5], 2).unwrap()),
        }
    }

    #[test]
    fn binary_roundtrip() {
        let records = vec![
            rec("a", Role::Query, true),
            rec("bé", Role::Passage, false),
            rec("c", Role::Passage, true),
        ];
        let mut buf = Vec::new();
        write_binary(&mut buf, &records).unwrap();
        let (header, back) = read_binary(buf.as_slice()).unwrap();
        assert_eq!(header.count, 3);
        assert_eq!(header.dense_dim, 3);
        assert_eq!(header.multi_dim, 2);
        assert_eq!(back, records);
    }

    #[test]
    fn layout_is_exact() {
        let mut buf = Vec::new();
        write_binary(&mut buf, &[rec("a", Role::Passage, false)]).unwrap();
        let mut expected = b"LSIM".to_vec();
        expected.extend(1u16.to_le_bytes());
        expected.extend(3u32.to_le_bytes());
        expected.extend(0u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1u16.to_le_bytes());
        expected.push(b'a');
        expected.extend([1u8, 1u8]);
        for v in [0.25f32, -1.5, 3.0] {
            expected.extend(v.to_le_bytes());
        }
        expected.extend(0u32.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let err = validate_records(&[
            rec("x", Role::Passage, false),
            rec("x", Role::Passage, false),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("`x`"));
    }

    #[test]
    fn malformed_headers() {
        let mut good = Vec::new();
        write_binary(&mut good, &[rec("a", Role::Passage, true)]).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_binary(bad_magic.as_slice()),
            Err(Error::Format(_))
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            read_binary(bad_version.as_slice()),
            Err(Error::Format(_))
        ));

        assert!(matches!(read_binary(&good[..10]), Err(Error::Format(_))));
        assert!(matches!(
            read_binary(&good[..good.len() - 1]),
            Err(Error::Format(_))
        ));

        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(
            read_binary(extra.as_slice()),
            Err(Error::Format(_))
        ));

        let mut bad_role = good.clone();
        bad_role[4 + 2 + 4 + 4 + 8 + 2 + 1] = 9;
        assert!(matches!(
            read_binary(bad_role.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn jsonl_roundtrip() {
        let records = vec![rec("a", Role::Query, true), rec("b", Role::Passage, false)];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &records).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn jsonl_rejects_unknown_fields() {
        let line = r#"{"id":"a","role":"query","modality":"text","dense":[1.0],"extra":1}"#;
        assert!(read_jsonl(line.as_bytes()).is_err());
    }
}
