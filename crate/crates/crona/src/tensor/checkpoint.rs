//! Self-describing binary checkpoint container.
//!
//! Layout (little-endian): magic, version, config text, update index,
//! then every parameter with name, group, shape, values, and optional
//! Adam moments. Readers reject unknown magic or version before
//! touching anything else.

use super::adam::AdamState;
use super::params::{ParamGroup, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 9] = b"CRONACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Config snapshot as the text the trainer was launched with.
    pub config_text: String,
    pub update_index: u64,
    pub store: ParamStore,
    pub adam: Option<AdamState>,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    write_bytes(&mut w, ckpt.config_text.as_bytes())?;
    w.write_u64::<LittleEndian>(ckpt.update_index)?;
    w.write_u32::<LittleEndian>(ckpt.store.len() as u32)?;
    let has_adam = ckpt.adam.is_some();
    w.write_u8(has_adam as u8)?;
    if let Some(a) = &ckpt.adam {
        w.write_u64::<LittleEndian>(a.step)?;
    }
    for (i, (_, e)) in ckpt.store.iter().enumerate() {
        write_bytes(&mut w, e.name.as_bytes())?;
        w.write_u8(match e.group {
            ParamGroup::Actor => 0,
            ParamGroup::Critic => 1,
        })?;
        write_tensor(&mut w, &e.value)?;
        if let Some(a) = &ckpt.adam {
            write_tensor(&mut w, &a.m[i])?;
            write_tensor(&mut w, &a.v[i])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_text = String::from_utf8(read_bytes(&mut r)?)
        .map_err(|e| Error::Format(format!("config text not utf-8: {e}")))?;
    let update_index = r.read_u64::<LittleEndian>()?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let has_adam = r.read_u8()? != 0;
    let adam_step = if has_adam { r.read_u64::<LittleEndian>()? } else { 0 };
    let mut store = ParamStore::new();
    let mut ms = Vec::new();
    let mut vs = Vec::new();
    for _ in 0..n {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|e| Error::Format(format!("param name not utf-8: {e}")))?;
        let group = match r.read_u8()? {
            0 => ParamGroup::Actor,
            1 => ParamGroup::Critic,
            g => return Err(Error::Format(format!("unknown param group tag {g}"))),
        };
        let value = read_tensor(&mut r)?;
        if has_adam {
            ms.push(read_tensor(&mut r)?);
            vs.push(read_tensor(&mut r)?);
        }
        store.add(name, group, value);
    }
    let adam = has_adam.then_some(AdamState { step: adam_step, m: ms, v: vs });
    Ok(Checkpoint { config_text, update_index, store, adam })
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_u32::<LittleEndian>(b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > (1 << 30) {
        return Err(Error::Format(format!("unreasonable field length {n}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_u8(t.shape.len() as u8)?;
    for &d in &t.shape {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in &t.data {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    if n > (1 << 28) {
        return Err(Error::Format(format!("unreasonable tensor size {n}")));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("enc.w", ParamGroup::Actor, Tensor::randn(&[4, 3], &mut rng));
        store.add("head.b", ParamGroup::Critic, Tensor::randn(&[7], &mut rng));
        let mut adam = AdamState::for_store(&store);
        adam.step = 42;
        adam.m[0].data[0] = 0.5;
        Checkpoint {
            config_text: "seed = 1\n".into(),
            update_index: 99,
            store,
            adam: Some(adam),
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ck = sample_checkpoint();
        save(&path, &ck).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config_text, ck.config_text);
        assert_eq!(back.update_index, 99);
        assert_eq!(back.store.len(), 2);
        let id = back.store.find("enc.w").unwrap();
        assert_eq!(back.store.get(id).data, ck.store.get(id).data);
        let adam = back.adam.unwrap();
        assert_eq!(adam.step, 42);
        assert_eq!(adam.m[0].data[0], 0.5);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTACKPT!unrelated bytes").unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
