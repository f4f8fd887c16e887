//! Flat binary checkpoints: the magic bytes, then one record per tensor
//! (`u32` path length, path bytes, `u32` rank, `u64` extents, `f32`
//! values), all little-endian, read until end of file. Running batch-norm
//! statistics are stored alongside the weights.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::NetworkParams;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MSCSAv1";

fn is_buffer(key: &str) -> bool {
    key.ends_with(".running_mean") || key.ends_with(".running_var")
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams<f32>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<std::fs::File>| -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for (key, t) in params.weights.iter().chain(params.buffers.iter()) {
            w.write_all(&(key.len() as u32).to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
    if !buf.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::Data(format!("{}: not a checkpoint", path.display())));
    }
    let mut c = Cursor { buf: &buf, pos: CHECKPOINT_MAGIC.len() };
    let mut params = NetworkParams::new();
    while c.pos < buf.len() {
        let len = c.u32()? as usize;
        let key = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Data("non-UTF-8 key".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = c.take(n.checked_mul(4).ok_or_else(|| Error::Data("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Data(format!("{key}: {e}")))?;
        if is_buffer(&key) {
            params.buffers.insert(key, t);
        } else {
            params.weights.insert(key, t);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{init_params, ModelConfig};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = init_params::<f32>(&ModelConfig::new(vec![2, 3]).with_mscsa(), 1).unwrap();
        p.buffers.get_mut("enc.s0.c0.bn.running_var").unwrap().data_mut()[0] = 0.25;
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p.weights, q.weights);
        assert_eq!(p.buffers, q.buffers);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..7], b"MSCSAv1");
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Data(_))));
        let p = init_params::<f32>(&ModelConfig::new(vec![2, 3]), 1).unwrap();
        save_checkpoint(&path, &p).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Data(_))));
    }
}
