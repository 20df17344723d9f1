//! Named parameter storage, binding onto tapes, and binary checkpoints.

use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fileio::{read_bytes, write_bytes, ByteReader};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

const CKPT_MAGIC: &[u8; 8] = b"RSMGW1\0\0";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Write all parameters: magic, u32 count, then per tensor the name, rank,
    /// extents and little-endian `f32` data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.values) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        write_bytes(path, &buf)
    }

    /// Overwrite values from a checkpoint. Names and shapes must match this store.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let bytes = read_bytes(path)?;
        let what = path.display().to_string();
        let mut r = ByteReader::new(&bytes, &what);
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::BadMagic(what));
        }
        let count = r.u32()? as usize;
        if count != self.values.len() {
            return Err(Error::Data(format!(
                "checkpoint has {count} tensors, model expects {}",
                self.values.len()
            )));
        }
        for i in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(nlen)?).into_owned();
            if name != self.names[i] {
                return Err(Error::Data(format!(
                    "checkpoint tensor {i} is `{name}`, expected `{}`",
                    self.names[i]
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != self.values[i].shape() {
                return Err(Error::shape("checkpoint", self.values[i].shape(), &shape));
            }
            let n: usize = shape.iter().product();
            let data = r.f32s(n)?;
            self.values[i] = Tensor::new(&shape, data)?;
        }
        Ok(())
    }
}

/// A tape plus lazily bound parameters. Each parameter becomes one leaf the first
/// time it is requested.
pub struct Session<'p> {
    tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore, trainable: bool) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients indexed by parameter; `None` for parameters not touched by the loss.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.and_then(|v| self.tape.grad(v))).collect()
    }
}

impl Deref for Session<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::randn(&[3, 4], &mut rng));
        store.add("a.b", Tensor::randn(&[4], &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        store.save(&path).unwrap();
        let mut other = store.clone();
        for v in other.values_mut() {
            v.data_mut().fill(0.0);
        }
        other.load_into(&path).unwrap();
        assert_eq!(other.values(), store.values());
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::ones(&[2]));
        let mut s = Session::new(&store, true);
        let a = s.param(id);
        let b = s.param(id);
        assert_eq!(a, b);
        let y = s.mul(a, b).unwrap();
        let l = s.sum(y).unwrap();
        s.backward(l).unwrap();
        assert_eq!(s.param_grads()[0].as_ref().unwrap().data(), &[2.0, 2.0]);
    }
}
