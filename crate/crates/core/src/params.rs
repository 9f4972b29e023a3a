//! Named parameter sets and the binary checkpoint format.
//!
//! Checkpoints are flat files: the magic string `DRH1`, then per-tensor
//! records of (name length u32, name bytes, rank u32, dims u32 each,
//! little-endian f64 payload), in insertion order.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DRH1";

/// Insertion-ordered collection of named tensors (network weights).
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

/// Tape bindings for a whole [`ParamSet`], by name.
pub struct BoundParams {
    ids: Vec<TensorId>,
    index: BTreeMap<String, usize>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{}'", name))]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Invariant(format!("duplicate parameter '{}'", name)));
        }
        let tensor = Tensor::new(shape, data)?;
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Merges another set under a distinctness check.
    pub fn absorb(&mut self, other: ParamSet) -> Result<()> {
        for (name, t) in other.entries {
            if self.index.contains_key(&name) {
                return Err(Error::Invariant(format!("duplicate parameter '{}'", name)));
            }
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, t));
        }
        Ok(())
    }

    /// Subset whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            if name.starts_with(prefix) {
                out.insert(name, t.shape.clone(), t.data.clone()).unwrap();
            }
        }
        out
    }

    /// Pushes every tensor onto the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = Vec::with_capacity(self.entries.len());
        for (_, t) in &self.entries {
            ids.push(tape.leaf(t.clone().with_grad()));
        }
        BoundParams {
            ids,
            index: self.index.clone(),
        }
    }

    /// Pushes every tensor onto the tape as a frozen constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = Vec::with_capacity(self.entries.len());
        for (_, t) in &self.entries {
            let mut frozen = t.clone();
            frozen.requires_grad = false;
            frozen.grad = None;
            ids.push(tape.leaf(frozen));
        }
        BoundParams {
            ids,
            index: self.index.clone(),
        }
    }

    /// Gradients read back from a tape after backward, aligned with
    /// insertion order; missing gradients are an error naming the tensor.
    pub fn collect_grads(&self, tape: &Tape, bound: &BoundParams) -> Result<Vec<Vec<f64>>> {
        let mut grads = Vec::with_capacity(self.entries.len());
        for (i, (name, _)) in self.entries.iter().enumerate() {
            match tape.grad(bound.ids[i]) {
                Some(g) => grads.push(g.to_vec()),
                None => {
                    return Err(Error::Autodiff(format!(
                        "no gradient for parameter '{}'",
                        name
                    )))
                }
            }
        }
        Ok(grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| Error::Data("checkpoint too short for magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Data(format!(
                "bad checkpoint magic {:?}; expected DRH1",
                magic
            )));
        }
        let mut set = ParamSet::new();
        loop {
            let mut len4 = [0u8; 4];
            match cursor.read_exact(&mut len4) {
                Ok(()) => {}
                Err(_) => break, // clean EOF between records
            }
            let name_len = u32::from_le_bytes(len4) as usize;
            let mut name_bytes = vec![0u8; name_len];
            cursor
                .read_exact(&mut name_bytes)
                .map_err(|_| Error::Data("truncated checkpoint record name".into()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Data("checkpoint name is not utf-8".into()))?;
            let mut rank4 = [0u8; 4];
            cursor
                .read_exact(&mut rank4)
                .map_err(|_| Error::Data("truncated checkpoint rank".into()))?;
            let rank = u32::from_le_bytes(rank4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d4 = [0u8; 4];
                cursor
                    .read_exact(&mut d4)
                    .map_err(|_| Error::Data("truncated checkpoint dims".into()))?;
                shape.push(u32::from_le_bytes(d4) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut v8 = [0u8; 8];
                cursor
                    .read_exact(&mut v8)
                    .map_err(|_| Error::Data(format!("truncated payload for '{}'", name)))?;
                data.push(f64::from_le_bytes(v8));
            }
            set.insert(&name, shape, data)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {}", path.display(), e)))?;
        ParamSet::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut set = ParamSet::new();
        set.insert("gm.b1.l1.W0", vec![2, 3], vec![1.0, -2.5, 0.0, 1e-300, 3.7, f64::MIN])
            .unwrap();
        set.insert("gtn.enc1.k", vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let bytes = set.to_bytes();
        assert_eq!(&bytes[..4], b"DRH1");
        let loaded = ParamSet::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.len(), 2);
        let t = loaded.get("gm.b1.l1.W0").unwrap();
        assert_eq!(t.shape, vec![2, 3]);
        assert_eq!(t.data, set.get("gm.b1.l1.W0").unwrap().data);
        // byte-stable
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        assert!(ParamSet::from_bytes(b"NOPE").is_err());
        assert!(ParamSet::from_bytes(b"DR").is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::new();
        set.insert("a", vec![1], vec![0.0]).unwrap();
        assert!(set.insert("a", vec![1], vec![1.0]).is_err());
    }

    #[test]
    fn bind_and_collect_grads() {
        let mut set = ParamSet::new();
        set.insert("w", vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape);
        let w = bound.id("w");
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        tape.backward(loss).unwrap();
        let grads = set.collect_grads(&tape, &bound).unwrap();
        assert_eq!(grads[0], vec![2.0, 4.0]);
    }

    #[test]
    fn frozen_bind_gets_no_gradient() {
        let mut set = ParamSet::new();
        set.insert("w", vec![1], vec![3.0]).unwrap();
        let mut tape = Tape::new();
        let bound = set.bind_frozen(&mut tape);
        let w = bound.id("w");
        assert!(!tape.tracked(w));
    }
}
