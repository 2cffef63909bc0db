//! Named parameter tensors, Adam, and the binary checkpoint format.
//!
//! Checkpoint layout (little endian): magic `SITEPRM1`, u32 version, u32
//! tensor count, then per tensor: u32 name length, UTF-8 name, u32 rows,
//! u32 cols, rows*cols f64 values row-major.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a tensor initialized uniformly in ±1/√fan_in.
    pub fn add<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor { rows, cols, data })
    }

    /// Register a tensor with explicit values.
    pub fn insert(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows as u32).to_le_bytes())?;
            w.write_all(&(t.cols as u32).to_le_bytes())?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse {
                line: 0,
                message: "not a parameter checkpoint".into(),
            });
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Parse {
                line: 0,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Parse {
                line: 0,
                message: e.to_string(),
            })?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, Tensor { rows, cols, data });
        }
        Ok(store)
    }

    /// Copy values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Shape("checkpoint parameter names differ".into()));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Shape("checkpoint parameter shapes differ".into()));
            }
            mine.data.clone_from(&theirs.data);
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"SITEPRM1";
const VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Tensor>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm is at most `max`.
    pub fn clip_norm(&mut self, max: f64) {
        let n = self.norm();
        if n > max && n > 0.0 {
            let s = max / n;
            for t in &mut self.tensors {
                for v in &mut t.data {
                    *v *= s;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like().tensors,
            v: params.zeros_like().tensors,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.tensors.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.tensors.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.tensors.iter().enumerate() {
            let p = &mut params.tensors[i];
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for {}", params.names[i])));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.add("w", 3, 2, 3, &mut rng);
        s.add("b", 1, 2, 3, &mut rng);
        s
    }

    #[test]
    fn init_is_bounded_and_deterministic() {
        let s = store(1);
        assert_eq!(s, store(1));
        let bound = 1.0 / 3f64.sqrt();
        assert!(s.get(ParamId(0)).data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(2);
        let before = s.clone();
        let mut adam = Adam::new(&s, 3e-4);
        let zero = s.zeros_like();
        adam.step(&mut s, &zero).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(3);
        let before = s.clone();
        let mut g = s.zeros_like();
        for t in &mut g.tensors {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = if i % 2 == 0 { 0.7 } else { -2.5 };
            }
        }
        let mut adam = Adam::new(&s, 3e-4);
        adam.step(&mut s, &g).unwrap();
        for id in s.ids() {
            for ((a, b), gv) in s.get(id).data.iter().zip(&before.get(id).data).zip(&g.get(id).data) {
                let expect = -3e-4 * gv.signum();
                assert!((a - b - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let mut a = store(4);
        let mut b = store(4);
        let mut g = a.zeros_like();
        g.tensors[0].data[0] = 1.0;
        let mut oa = Adam::new(&a, 1e-3);
        let mut ob = Adam::new(&b, 1e-3);
        oa.step(&mut a, &g).unwrap();
        ob.step(&mut b, &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store(5);
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, s);
        assert!(ParamStore::read_checkpoint(&buf[..10]).is_err());
        assert!(ParamStore::read_checkpoint(&b"garbage!garbage!"[..]).is_err());
    }
}
