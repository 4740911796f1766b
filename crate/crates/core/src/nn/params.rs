use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const ARCHIVE_MAGIC: [u8; 4] = *b"VCP1";

/// Location of one named tensor inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub slot: Slot,
    pub trainable: bool,
}

/// Ordered list of named tensors. Built deterministically from a model config,
/// so the same config always yields the same offsets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, trainable: bool) -> Slot {
        let slot = Slot {
            offset: self.len,
            rows,
            cols,
        };
        self.len += slot.len();
        self.entries.push(ParamEntry {
            name: name.into(),
            slot,
            trainable,
        });
        slot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.slot.len()).sum()
    }

    /// Per-value trainability flags.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for e in self.entries.iter().filter(|e| e.trainable) {
            mask[e.slot.range()].fill(true);
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl Params {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn mat(&self, s: Slot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.rows, s.cols), &self.values[s.range()]).expect("slot within layout")
    }

    pub fn row(&self, s: Slot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[s.range()])
    }

    pub fn slice_mut(&mut self, s: Slot) -> &mut [f64] {
        &mut self.values[s.range()]
    }

    pub fn fill_uniform<R: Rng>(&mut self, s: Slot, bound: f64, rng: &mut R) {
        for v in self.slice_mut(s) {
            *v = rng.random_range(-bound..bound);
        }
    }

    /// Stable binary archive: magic, entry table, then the values as f64 LE.
    pub fn to_archive(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 8);
        out.extend_from_slice(&ARCHIVE_MAGIC);
        out.extend_from_slice(&(self.layout.entries.len() as u32).to_le_bytes());
        for e in &self.layout.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.slot.rows as u32).to_le_bytes());
            out.extend_from_slice(&(e.slot.cols as u32).to_le_bytes());
            out.push(u8::from(e.trainable));
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_archive(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::Parse("parameter archive: bad magic".into()));
        }
        let n = cur.u32()? as usize;
        let mut layout = Layout::default();
        for _ in 0..n {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| Error::Parse(format!("parameter archive: {e}")))?;
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let trainable = cur.take(1)?[0] != 0;
            layout.add(name, rows, cols, trainable);
        }
        let count = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
        if count != layout.len() {
            return Err(Error::Parse(format!(
                "parameter archive: {count} values for a layout of {}",
                layout.len()
            )));
        }
        let values = cur
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if cur.pos != bytes.len() {
            return Err(Error::Parse("parameter archive: trailing bytes".into()));
        }
        Ok(Self { layout, values })
    }

    /// SHA-256 of the archive bytes, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_archive()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Parse("parameter archive: truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Gradient buffer laid out like the [`Params`] it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub values: Vec<f64>,
}

impl Grads {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn mat_mut(&mut self, s: Slot) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.values[s.range()]).expect("slot within layout")
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.values {
            *v *= k;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales to `max_norm` when the global norm exceeds it; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn archive_round_trip() {
        let mut layout = Layout::default();
        let a = layout.add("a", 2, 3, true);
        layout.add("b", 1, 3, false);
        let mut p = Params::zeros(layout);
        p.fill_uniform(a, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let back = Params::from_archive(&p.to_archive()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.hash(), p.hash());
        assert_eq!(p.layout.trainable_count(), 6);
    }

    #[test]
    fn clip_scales_to_max() {
        let mut g = Grads { values: vec![3.0, 4.0] };
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
        let mut g = Grads { values: vec![0.3, 0.4] };
        g.clip_global_norm(1.0);
        assert_eq!(g.values, vec![0.3, 0.4]);
    }
}
