//! Binary containers: model checkpoints and embedding dumps.
//!
//! All integers and floats are little-endian; floats are raw IEEE-754 bits,
//! so a write/read round trip is bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::isotropy::{EmbeddingDump, EmbeddingRecord};
use crate::model::{AttentionLayer, ModelParams};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ISOP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DUMP_MAGIC: &[u8; 7] = b"ISOEMB1";
pub const DUMP_VERSION: u32 = 1;

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, what)?))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, what)?))
}

fn read_f64s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated {what}: {e}")))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn expect_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format(format!("trailing bytes after {what}"))),
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

/// Header: magic, version, then `N, D, m, layers` as u32; then the tensors
/// in [`ModelParams::tensors`] order, row-major.
pub fn write_checkpoint(params: &ModelParams, w: &mut impl Write) -> Result<()> {
    params.validate()?;
    let h = params.hyper();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (v, name) in [(h.vocab_size, "vocab"), (h.dim, "dim"), (h.rank, "rank"), (h.layers, "layers")] {
        w.write_all(&to_u32(v, name)?.to_le_bytes())?;
    }
    for t in params.tensors() {
        write_f64s(w, t.data())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
    let magic: [u8; 4] = read_exact(r, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(r, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = read_u32(r, "vocab")? as usize;
    let d = read_u32(r, "dim")? as usize;
    let m = read_u32(r, "rank")? as usize;
    let layers = read_u32(r, "layers")? as usize;
    let mut tensor = |rows: usize, cols: usize, what: &str| -> Result<Matrix> {
        Matrix::new(rows, cols, read_f64s(r, rows * cols, what)?)
            .map_err(|e| Error::Format(format!("{what}: {e}")))
    };
    let embed = tensor(n, d, "embed")?;
    let mut out = Vec::with_capacity(layers);
    for i in 0..layers {
        let wq = tensor(d, m, &format!("layers.{i}.wq"))?;
        let wk = tensor(d, m, &format!("layers.{i}.wk"))?;
        out.push(AttentionLayer { wq, wk });
    }
    expect_eof(r, "checkpoint")?;
    let params = ModelParams { embed, layers: out };
    params.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(params)
}

/// Header: magic, version, layer count, `D` (u32 each) and record count
/// (u64); then per record `layer u32, token u32, context u64, D × f64`.
pub fn write_dump(dump: &EmbeddingDump, w: &mut impl Write) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&to_u32(dump.layers().len(), "layer count")?.to_le_bytes())?;
    w.write_all(&to_u32(dump.dim, "dimension")?.to_le_bytes())?;
    w.write_all(&(dump.records.len() as u64).to_le_bytes())?;
    for r in &dump.records {
        w.write_all(&r.layer.to_le_bytes())?;
        w.write_all(&r.token_id.to_le_bytes())?;
        w.write_all(&r.context_id.to_le_bytes())?;
        write_f64s(w, &r.vector)?;
    }
    Ok(())
}

pub fn read_dump(r: &mut impl Read) -> Result<EmbeddingDump> {
    let magic: [u8; 7] = read_exact(r, "dump magic")?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format("not an embedding dump (bad magic)".into()));
    }
    let version = read_u32(r, "dump version")?;
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let layer_count = read_u32(r, "layer count")? as usize;
    let dim = read_u32(r, "dimension")? as usize;
    let count = read_u64(r, "record count")?;
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let what = format!("record {i}");
        let layer = read_u32(r, &what)?;
        let token_id = read_u32(r, &what)?;
        let context_id = read_u64(r, &what)?;
        let vector = read_f64s(r, dim, &what)?;
        records.push(EmbeddingRecord { layer, token_id, context_id, vector });
    }
    expect_eof(r, "embedding dump")?;
    let dump = EmbeddingDump::new(dim, records).map_err(|e| Error::Format(e.to_string()))?;
    if dump.layers().len() != layer_count {
        return Err(Error::Format(format!(
            "header declares {layer_count} layers, records carry {}",
            dump.layers().len()
        )));
    }
    Ok(dump)
}
