//! Parameter checkpoints: a flat little-endian sequence of named blocks,
//! each `u32` name length, name bytes, `u32` rank, `rank × u64` extents and
//! the `f64` payload, in parameter registration order. Batchnorm running
//! moments are included.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use graphshot_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub fn write_params(store: &ParamStore, w: &mut impl Write) -> Result<()> {
    for id in store.ids() {
        let name = store.name(id);
        let t = store.get(id);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<Option<[u8; N]>> {
    let mut b = [0u8; N];
    let mut got = 0;
    while got < N {
        match r.read(&mut b[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(Error::Checkpoint(format!("truncated {what}"))),
            k => got += k,
        }
    }
    Ok(Some(b))
}

fn require<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    read_exact::<N>(r, what)?.ok_or_else(|| Error::Checkpoint(format!("truncated {what}")))
}

/// Reads every block as `(name, tensor)`.
pub fn read_blocks(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    while let Some(len) = read_exact::<4>(r, "name length")? {
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?;
        let rank = u32::from_le_bytes(require::<4>(r, "rank")?) as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(require::<8>(r, "extent")?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| Ok(f64::from_le_bytes(require::<8>(r, "payload")?)))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Overwrites every entry of `store` from the blocks in `r`. Names, order
/// and shapes must match exactly.
pub fn read_params(store: &mut ParamStore, r: &mut impl Read) -> Result<()> {
    let blocks = read_blocks(r)?;
    if blocks.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} blocks, model expects {}",
            blocks.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(blocks) {
        if store.name(id) != name {
            return Err(Error::Checkpoint(format!("expected block {:?}, found {name:?}", store.name(id))));
        }
        if store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "block {name:?} has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

/// Overwrites the entries of `store` named in the checkpoint at `path`,
/// leaving the rest untouched. Every block must name an existing entry of
/// the same shape. Returns the number of blocks loaded.
pub fn load_subset(store: &mut ParamStore, path: &Path) -> Result<usize> {
    let f = fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let blocks = read_blocks(&mut BufReader::new(f))?;
    let count = blocks.len();
    for (name, t) in blocks {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("block {name:?} has no counterpart in the model")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "block {name:?} has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(count)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_params(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let f = fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_params(store, &mut BufReader::new(f))
}
