//! Encoded dataset cache: versioned little-endian binary container.
//!
//! Layout: magic "SSDS", version u32, split tag u8, schema block
//! (per-field id/kind/name/n_i), record count u64, then packed u32 token
//! ids and u8 labels.

use std::io::{Read, Write};
use std::path::Path;

use crate::dataio::{Dataset, FieldKind, FieldSchema, Record, Schema, SplitTag};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"SSDS";
pub const CACHE_VERSION: u32 = 1;

fn tag_byte(tag: SplitTag) -> u8 {
    match tag {
        SplitTag::Full => 0,
        SplitTag::Train => 1,
        SplitTag::Valid => 2,
        SplitTag::Test => 3,
    }
}

fn tag_from_byte(b: u8, path: &Path) -> Result<SplitTag> {
    Ok(match b {
        0 => SplitTag::Full,
        1 => SplitTag::Train,
        2 => SplitTag::Valid,
        3 => SplitTag::Test,
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("bad split tag {b}"),
            })
        }
    })
}

pub fn write_cache(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&[tag_byte(ds.tag)])?;
    w.write_all(&(ds.schema.num_fields() as u32).to_le_bytes())?;
    for (f, &n) in ds.schema.fields.iter().zip(&ds.field_sizes) {
        w.write_all(&(f.field_id as u32).to_le_bytes())?;
        w.write_all(&[match f.kind {
            FieldKind::Categorical => 0u8,
            FieldKind::Numeric => 1u8,
        }])?;
        let name = f.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    w.write_all(&(ds.records.len() as u64).to_le_bytes())?;
    for r in &ds.records {
        for &t in &r.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&[r.label])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Dataset> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let fmt_err = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CACHE_VERSION {
        return Err(fmt_err(&format!("unsupported version {version}")));
    }
    let tag = tag_from_byte(read_u8(&mut r)?, path)?;
    let m = read_u32(&mut r)? as usize;
    if m == 0 {
        return Err(fmt_err("zero fields"));
    }
    let mut fields = Vec::with_capacity(m);
    let mut field_sizes = Vec::with_capacity(m);
    for _ in 0..m {
        let field_id = read_u32(&mut r)? as usize;
        let kind = match read_u8(&mut r)? {
            0 => FieldKind::Categorical,
            1 => FieldKind::Numeric,
            k => return Err(fmt_err(&format!("bad field kind {k}"))),
        };
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| fmt_err("non-utf8 field name"))?;
        let n = read_u32(&mut r)? as usize;
        fields.push(FieldSchema { field_id, kind, name });
        field_sizes.push(n);
    }
    let count = read_u64(&mut r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tokens = Vec::with_capacity(m);
        for _ in 0..m {
            tokens.push(read_u32(&mut r)?);
        }
        let label = read_u8(&mut r)?;
        records.push(Record { tokens, label });
    }
    Dataset::new(Schema::new(fields)?, field_sizes, records, tag)
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
