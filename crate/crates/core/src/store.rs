//! Binary persistence for keys, encrypted databases and tokens.
//!
//! All integers and floats are little-endian; matrices are written row-major
//! as IEEE-754 binary64. Every file opens with a 4-byte magic and a `u16`
//! version word whose low 15 bits carry the format version and whose top bit
//! marks files produced in test mode.
//!
//! ```text
//! key:      "SBK1" ver:u16 n:u32 π:(n+5)×u32  M1 M1⁻¹ M2 M2⁻¹
//! database: "SBD1" ver:u16 n:u32 m:u64        m × (id:u64 C_p C_q)
//! token:    "SBT1" ver:u16 n:u32              C_y
//! ```
//!
//! Permutation entries are zero-based destination slots.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Permutation};
use crate::scheme::{EncryptedTemplate, QueryToken, SecretKey, EXTENSION_SLOTS};

pub const KEY_MAGIC: [u8; 4] = *b"SBK1";
pub const DB_MAGIC: [u8; 4] = *b"SBD1";
pub const TOKEN_MAGIC: [u8; 4] = *b"SBT1";

pub const FORMAT_VERSION: u16 = 1;
pub const TEST_MODE_FLAG: u16 = 0x8000;

/// magic + version + n
pub const COMMON_HEADER_LEN: usize = 4 + 2 + 4;
pub const DB_HEADER_LEN: usize = COMMON_HEADER_LEN + 8;
const DB_COUNT_OFFSET: u64 = COMMON_HEADER_LEN as u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Key,
    Database,
    Token,
}

impl FileKind {
    pub fn magic(self) -> [u8; 4] {
        match self {
            FileKind::Key => KEY_MAGIC,
            FileKind::Database => DB_MAGIC,
            FileKind::Token => TOKEN_MAGIC,
        }
    }

    fn from_magic(m: [u8; 4]) -> Option<Self> {
        match &m {
            b"SBK1" => Some(FileKind::Key),
            b"SBD1" => Some(FileKind::Database),
            b"SBT1" => Some(FileKind::Token),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub kind: FileKind,
    pub version: u16,
    pub test_mode: bool,
    pub n: u32,
    /// Databases only.
    pub record_count: Option<u64>,
}

impl Header {
    pub fn ext_dim(&self) -> usize {
        self.n as usize + EXTENSION_SLOTS
    }

    fn version_word(&self) -> u16 {
        self.version | if self.test_mode { TEST_MODE_FLAG } else { 0 }
    }
}

fn matrix_bytes(dim: usize) -> u64 {
    (dim * dim * 8) as u64
}

/// Size of one database record for template dimension `n`:
/// `8 + 2·(n+5)²·8` bytes.
pub fn record_len(n: usize) -> u64 {
    8 + 2 * matrix_bytes(n + EXTENSION_SLOTS)
}

pub fn key_len(n: usize) -> u64 {
    let d = n + EXTENSION_SLOTS;
    COMMON_HEADER_LEN as u64 + 4 * d as u64 + 4 * matrix_bytes(d)
}

pub fn token_len(n: usize) -> u64 {
    COMMON_HEADER_LEN as u64 + matrix_bytes(n + EXTENSION_SLOTS)
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.reserve(m.as_slice().len() * 8);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_common(out: &mut Vec<u8>, kind: FileKind, n: usize, test_mode: bool) {
    let h = Header {
        kind,
        version: FORMAT_VERSION,
        test_mode,
        n: n as u32,
        record_count: None,
    };
    out.extend_from_slice(&kind.magic());
    out.extend_from_slice(&h.version_word().to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

/// Cursor over a byte slice that reports truncation against the total size
/// the header promised.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        if end > self.buf.len() {
            return Err(Error::Truncated {
                needed: end as u64,
                available: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, dim: usize) -> Result<Matrix> {
        let raw = self.take(dim * dim * 8)?;
        decode_matrix(raw, dim)
    }
}

fn decode_matrix(raw: &[u8], dim: usize) -> Result<Matrix> {
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_row_major(dim, dim, data)
}

fn parse_header(raw: &[u8], expect: FileKind) -> Result<Header> {
    let mut r = Reader::new(raw);
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != expect.magic() {
        return Err(Error::BadMagic {
            expected: expect.magic(),
            found: magic,
        });
    }
    let word = r.u16()?;
    let version = word & !TEST_MODE_FLAG;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = r.u32()?;
    if n == 0 {
        return Err(Error::Corrupt("template dimension is zero".into()));
    }
    let record_count = match expect {
        FileKind::Database => Some(r.u64()?),
        _ => None,
    };
    Ok(Header {
        kind: expect,
        version,
        test_mode: word & TEST_MODE_FLAG != 0,
        n,
        record_count,
    })
}

fn exact_length(buf: &[u8], expected: u64) -> Result<()> {
    let have = buf.len() as u64;
    if have < expected {
        return Err(Error::Truncated {
            needed: expected,
            available: have,
        });
    }
    if have > expected {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after payload",
            have - expected
        )));
    }
    Ok(())
}

pub fn encode_key(sk: &SecretKey, test_mode: bool) -> Vec<u8> {
    let n = sk.n();
    let mut out = Vec::with_capacity(key_len(n) as usize);
    put_common(&mut out, FileKind::Key, n, test_mode);
    for &ix in sk.permutation().as_slice() {
        out.extend_from_slice(&ix.to_le_bytes());
    }
    for m in [sk.m1(), sk.m1_inv(), sk.m2(), sk.m2_inv()] {
        put_matrix(&mut out, m);
    }
    out
}

pub fn decode_key(buf: &[u8]) -> Result<(SecretKey, Header)> {
    let header = parse_header(buf, FileKind::Key)?;
    exact_length(buf, key_len(header.n as usize))?;
    let d = header.ext_dim();
    let mut r = Reader::new(&buf[COMMON_HEADER_LEN..]);
    let map = (0..d).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let pi = Permutation::from_vec(map)?;
    let m1 = r.matrix(d)?;
    let m1_inv = r.matrix(d)?;
    let m2 = r.matrix(d)?;
    let m2_inv = r.matrix(d)?;
    Ok((SecretKey::from_parts(m1, m1_inv, m2, m2_inv, pi)?, header))
}

pub fn write_key(path: impl AsRef<Path>, sk: &SecretKey, test_mode: bool) -> Result<()> {
    std::fs::write(path, encode_key(sk, test_mode))?;
    Ok(())
}

pub fn read_key(path: impl AsRef<Path>) -> Result<SecretKey> {
    read_key_with_header(path).map(|(sk, _)| sk)
}

pub fn read_key_with_header(path: impl AsRef<Path>) -> Result<(SecretKey, Header)> {
    decode_key(&std::fs::read(path)?)
}

pub fn encode_token(tok: &QueryToken, test_mode: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(token_len(tok.n()) as usize);
    put_common(&mut out, FileKind::Token, tok.n(), test_mode);
    put_matrix(&mut out, tok.c_y());
    out
}

pub fn decode_token(buf: &[u8]) -> Result<(QueryToken, Header)> {
    let header = parse_header(buf, FileKind::Token)?;
    exact_length(buf, token_len(header.n as usize))?;
    let c_y = decode_matrix(&buf[COMMON_HEADER_LEN..], header.ext_dim())?;
    Ok((QueryToken::from_matrix(c_y)?, header))
}

pub fn write_token(path: impl AsRef<Path>, tok: &QueryToken, test_mode: bool) -> Result<()> {
    std::fs::write(path, encode_token(tok, test_mode))?;
    Ok(())
}

/// Reads a token; when `expected_n` is given the token must target that
/// template dimension.
pub fn read_token(path: impl AsRef<Path>, expected_n: Option<usize>) -> Result<QueryToken> {
    let (tok, _) = decode_token(&std::fs::read(path)?)?;
    if let Some(n) = expected_n {
        if tok.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: tok.n(),
            });
        }
    }
    Ok(tok)
}

pub fn encode_record(ct: &EncryptedTemplate) -> Vec<u8> {
    let mut out = Vec::with_capacity(record_len(ct.n()) as usize);
    out.extend_from_slice(&ct.id.to_le_bytes());
    put_matrix(&mut out, ct.c_p());
    put_matrix(&mut out, ct.c_q());
    out
}

pub fn decode_record(buf: &[u8], n: usize) -> Result<EncryptedTemplate> {
    let d = n + EXTENSION_SLOTS;
    exact_length(buf, record_len(n))?;
    let mut r = Reader::new(buf);
    let id = r.u64()?;
    let c_p = r.matrix(d)?;
    let c_q = r.matrix(d)?;
    EncryptedTemplate::from_parts(id, c_p, c_q)
}

fn db_header_bytes(n: usize, count: u64, test_mode: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(DB_HEADER_LEN);
    put_common(&mut out, FileKind::Database, n, test_mode);
    out.extend_from_slice(&count.to_le_bytes());
    out
}

/// Creates (or truncates) an empty database for dimension `n`.
pub fn create_database(path: impl AsRef<Path>, n: usize, test_mode: bool) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "template dimension must be at least 1".into(),
        ));
    }
    std::fs::write(path, db_header_bytes(n, 0, test_mode))?;
    Ok(())
}

fn read_db_header(file: &mut File) -> Result<Header> {
    let mut raw = [0u8; DB_HEADER_LEN];
    let available = file.metadata()?.len();
    file.seek(SeekFrom::Start(0))?;
    file.read_exact(&mut raw).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Truncated {
            needed: DB_HEADER_LEN as u64,
            available,
        },
        _ => Error::Io(e),
    })?;
    parse_header(&raw, FileKind::Database)
}

pub fn read_database_header(path: impl AsRef<Path>) -> Result<Header> {
    read_db_header(&mut File::open(path)?)
}

/// Appends one record. The record bytes land before the count is bumped, so
/// a concurrent [`scan`] sees either the old or the new prefix.
pub fn append_record(path: impl AsRef<Path>, ct: &EncryptedTemplate) -> Result<()> {
    append_records(path, std::slice::from_ref(ct))
}

pub fn append_records(path: impl AsRef<Path>, cts: &[EncryptedTemplate]) -> Result<()> {
    let mut file = OpenOptions::new().read(true).write(true).open(path)?;
    let header = read_db_header(&mut file)?;
    let n = header.n as usize;
    let count = header.record_count.unwrap_or(0);
    for ct in cts {
        if ct.n() != n {
            return Err(Error::RecordDimension {
                id: ct.id,
                expected: n,
                found: ct.n(),
            });
        }
    }
    let end = DB_HEADER_LEN as u64 + count * record_len(n);
    if file.metadata()?.len() < end {
        return Err(Error::Truncated {
            needed: end,
            available: file.metadata()?.len(),
        });
    }
    file.seek(SeekFrom::Start(end))?;
    let mut buf = Vec::new();
    for ct in cts {
        buf.extend_from_slice(&encode_record(ct));
    }
    file.write_all(&buf)?;
    file.flush()?;
    file.seek(SeekFrom::Start(DB_COUNT_OFFSET))?;
    file.write_all(&(count + cts.len() as u64).to_le_bytes())?;
    file.flush()?;
    Ok(())
}

/// Streaming reader over a database file. Holds at most one record.
pub struct Scan {
    reader: BufReader<File>,
    header: Header,
    remaining: u64,
    buf: Vec<u8>,
    failed: bool,
}

impl Scan {
    pub fn header(&self) -> &Header {
        &self.header
    }
}

impl Iterator for Scan {
    type Item = Result<EncryptedTemplate>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 || self.failed {
            return None;
        }
        self.remaining -= 1;
        let res = match self.reader.read_exact(&mut self.buf) {
            Ok(()) => decode_record(&self.buf, self.header.n as usize),
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(Error::Truncated {
                needed: record_len(self.header.n as usize),
                available: 0,
            }),
            Err(e) => Err(Error::Io(e)),
        };
        self.failed = res.is_err();
        Some(res)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (0, Some(self.remaining as usize))
    }
}

/// Yields the records committed at open time, in append order.
pub fn scan(path: impl AsRef<Path>) -> Result<Scan> {
    let mut file = File::open(path)?;
    let header = read_db_header(&mut file)?;
    let n = header.n as usize;
    let count = header.record_count.unwrap_or(0);
    let needed = DB_HEADER_LEN as u64 + count * record_len(n);
    let available = file.metadata()?.len();
    if available < needed {
        return Err(Error::Truncated { needed, available });
    }
    file.seek(SeekFrom::Start(DB_HEADER_LEN as u64))?;
    Ok(Scan {
        reader: BufReader::new(file),
        header,
        remaining: count,
        buf: vec![0u8; record_len(n) as usize],
        failed: false,
    })
}

/// Reads just the header of any of the three formats.
pub fn inspect(path: impl AsRef<Path>) -> Result<Header> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|_| Error::Truncated {
        needed: 4,
        available: 0,
    })?;
    let kind = FileKind::from_magic(magic).ok_or(Error::BadMagic {
        expected: KEY_MAGIC,
        found: magic,
    })?;
    match kind {
        FileKind::Database => read_db_header(&mut file),
        _ => {
            let mut raw = [0u8; COMMON_HEADER_LEN];
            file.seek(SeekFrom::Start(0))?;
            file.read_exact(&mut raw).map_err(|_| Error::Truncated {
                needed: COMMON_HEADER_LEN as u64,
                available: file.metadata().map(|m| m.len()).unwrap_or(0),
            })?;
            parse_header(&raw, kind)
        }
    }
}
