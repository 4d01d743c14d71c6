//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`/`i32`):
//!
//! ```text
//! "CVHP" magic, tensor count N
//! N × { name length, UTF-8 name, rank, rank × dim }
//! N × { C, H, W, tag = 2, C·H·W × f32 }
//! ```
//!
//! Each tensor block uses the event-tensor layout: `C` is the leading
//! dimension, `W` the trailing one, and `H` the product of everything in
//! between (1 for rank ≤ 2).

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

const MAGIC: &[u8; 4] = b"CVHP";
pub(crate) const PARAM_TAG: i32 = 2;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                t.shape()
            )));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for t in &self.tensors {
            let (c, h, wd) = chw_view(t.shape());
            for v in [c as i32, h as i32, wd as i32, PARAM_TAG] {
                w.write_all(&v.to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse {
                line: 0,
                msg: "not a parameter checkpoint".into(),
            });
        }
        let n = read_u32(&mut r)? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let name = String::from_utf8(buf).map_err(|e| Error::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut store = ParamStore::new();
        for (name, shape) in table {
            let mut header = [0i32; 4];
            for h in header.iter_mut() {
                *h = read_u32(&mut r)? as i32;
            }
            let expect = chw_view(&shape);
            if (header[0] as usize, header[1] as usize, header[2] as usize) != expect
                || header[3] != PARAM_TAG
            {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("block header {header:?} does not match {name} {shape:?}"),
                });
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
            store.add(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(store)
    }

    /// Copies values from `other` by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let id = other
                .find(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            let t = other.get(id);
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Shape(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }
}

fn chw_view(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [] => (1, 1, 1),
        [w] => (1, 1, *w),
        [c, w] => (*c, 1, *w),
        [c, mid @ .., w] => (*c, mid.iter().product(), *w),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip_f32_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_uniform("a.weight", &[3, 4], 4, &mut rng);
        store.add_uniform("b.kernel", &[2, 3, 3], 9, &mut rng);
        store.add("c", Tensor::scalar(0.25));
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for id in store.ids() {
            assert_eq!(back.name(id), store.name(id));
            let want = store.get(id).map(|v| v as f32 as f64);
            assert_eq!(back.get(id), &want);
        }
    }

    #[test]
    fn uniform_init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let id = store.add_uniform("w", &[64, 16], 16, &mut rng);
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.25));
    }

    #[test]
    fn rejects_garbage() {
        assert!(ParamStore::read_checkpoint(&b"NOPE\0\0\0\0"[..]).is_err());
    }
}
