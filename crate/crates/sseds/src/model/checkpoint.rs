//! Model checkpoint container: magic "SSED", version, architecture tag,
//! per-field headers, row-major little-endian f32 tables, interaction
//! parameter blocks, optional optimizer section, trailing CRC32.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    AlignMatrix, Architecture, CtrModel, DenseLayer, FieldTable, InitKind, LinearPart, Mlp,
    Provenance,
};

pub const CKPT_MAGIC: &[u8; 4] = b"SSED";
pub const CKPT_VERSION: u32 = 1;

fn arch_byte(a: Architecture) -> u8 {
    match a {
        Architecture::Fm => 0,
        Architecture::WideDeep => 1,
        Architecture::DeepFm => 2,
    }
}

fn init_byte(k: InitKind) -> u8 {
    match k {
        InitKind::Random => 0,
        InitKind::WinningTicket => 1,
        InitKind::Identity => 2,
        InitKind::Absent => 3,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for &x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, model: &CtrModel<f32>) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(arch_byte(model.arch));
    out.extend_from_slice(&(model.d_align as u32).to_le_bytes());
    out.extend_from_slice(&(model.tables.len() as u32).to_le_bytes());
    for t in &model.tables {
        out.extend_from_slice(&(t.field_id as u32).to_le_bytes());
        out.extend_from_slice(&(t.n as u32).to_le_bytes());
        out.extend_from_slice(&(t.dim as u32).to_le_bytes());
        for &k in &t.kept_dims {
            out.extend_from_slice(&k.to_le_bytes());
        }
    }
    for t in &model.tables {
        push_f32s(&mut out, &t.weights);
    }
    // wide block
    push_f32s(&mut out, &[model.linear.bias]);
    for w in &model.linear.weights {
        push_f32s(&mut out, w);
    }
    // deep block
    match &model.mlp {
        Some(mlp) => {
            out.push(1);
            out.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
            for l in &mlp.layers {
                out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
                out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
                push_f32s(&mut out, &l.w);
                push_f32s(&mut out, &l.b);
            }
        }
        None => out.push(0),
    }
    // alignment block
    match &model.align {
        Some(ms) => {
            out.push(1);
            for m in ms {
                out.extend_from_slice(&(m.out_dim as u32).to_le_bytes());
                out.extend_from_slice(&(m.in_dim as u32).to_le_bytes());
                push_f32s(&mut out, &m.weights);
            }
        }
        None => out.push(0),
    }
    // provenance flags: embeddings, align, linear, interaction
    out.push(init_byte(model.provenance.embeddings));
    out.push(init_byte(model.provenance.align));
    out.push(init_byte(model.provenance.linear));
    out.push(init_byte(model.provenance.interaction));
    // optimizer state section (none)
    out.push(0);

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());

    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CtrModel<f32>> {
    let buf = std::fs::read(path)?;
    if buf.len() < 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "file too short".into(),
        });
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "crc mismatch".into(),
        });
    }

    let mut r = Reader {
        buf: body,
        pos: 0,
        path,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(r.err(&format!("unsupported version {version}")));
    }
    let arch = match r.u8()? {
        0 => Architecture::Fm,
        1 => Architecture::WideDeep,
        2 => Architecture::DeepFm,
        b => return Err(r.err(&format!("bad architecture tag {b}"))),
    };
    let d_align = r.u32()? as usize;
    let q = r.u32()? as usize;
    let mut headers = Vec::with_capacity(q);
    for _ in 0..q {
        let field_id = r.u32()? as usize;
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut kept_dims = Vec::with_capacity(dim);
        for _ in 0..dim {
            kept_dims.push(r.u32()?);
        }
        headers.push((field_id, n, dim, kept_dims));
    }
    let mut tables = Vec::with_capacity(q);
    for (field_id, n, dim, kept_dims) in headers {
        let weights = r.f32s(n * dim)?;
        tables.push(FieldTable {
            field_id,
            n,
            dim,
            kept_dims,
            weights,
        });
    }
    let bias = r.f32s(1)?[0];
    let mut lin_weights = Vec::with_capacity(q);
    for t in &tables {
        lin_weights.push(r.f32s(t.n)?);
    }
    let mlp = if r.u8()? == 1 {
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let w = r.f32s(out_dim * in_dim)?;
            let b = r.f32s(out_dim)?;
            layers.push(DenseLayer {
                in_dim,
                out_dim,
                w,
                b,
            });
        }
        Some(Mlp { layers })
    } else {
        None
    };
    let align = if r.u8()? == 1 {
        let mut ms = Vec::with_capacity(q);
        for _ in 0..q {
            let out_dim = r.u32()? as usize;
            let in_dim = r.u32()? as usize;
            let weights = r.f32s(out_dim * in_dim)?;
            ms.push(AlignMatrix {
                out_dim,
                in_dim,
                weights,
            });
        }
        Some(ms)
    } else {
        None
    };
    let init_kind = |r: &mut Reader, b: u8| -> Result<InitKind> {
        Ok(match b {
            0 => InitKind::Random,
            1 => InitKind::WinningTicket,
            2 => InitKind::Identity,
            3 => InitKind::Absent,
            x => return Err(r.err(&format!("bad provenance byte {x}"))),
        })
    };
    let b = [r.u8()?, r.u8()?, r.u8()?, r.u8()?];
    let provenance = Provenance {
        embeddings: init_kind(&mut r, b[0])?,
        align: init_kind(&mut r, b[1])?,
        linear: init_kind(&mut r, b[2])?,
        interaction: init_kind(&mut r, b[3])?,
    };
    if r.u8()? != 0 {
        return Err(r.err("optimizer state section not supported"));
    }
    if r.pos != r.buf.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(CtrModel {
        arch,
        tables,
        align,
        linear: LinearPart {
            bias,
            weights: lin_weights,
        },
        mlp,
        d_align,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_model() -> CtrModel<f32> {
        let config = ModelConfig {
            architecture: Architecture::DeepFm,
            embedding_dim: 4,
            hidden: vec![8],
        };
        CtrModel::init(&config, &[5, 7, 3], 42).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ssed");
        let model = small_model();
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ssed");
        save_checkpoint(&path, &small_model()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn checkpoint_bytes_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ssed");
        let b = dir.path().join("b.ssed");
        save_checkpoint(&a, &small_model()).unwrap();
        save_checkpoint(&b, &small_model()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
