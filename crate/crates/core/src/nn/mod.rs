//! Minimal f64 layers with explicit backward passes, shared by the
//! conversion model and the speaker embedder.

mod layers;
mod optim;
mod params;

pub use layers::{sigmoid, Dense, Lstm, LstmCache};
pub use optim::Adam;
pub use params::{Grads, Layout, ParamEntry, Params, Slot};

/// Per-dimension affine statistics (`x_norm = (x - mean) / std`).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Column statistics over stacked frames; std is floored at `1e-6`.
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = ndarray::ArrayView2<'a, f32>>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        for f in frames {
            for row in f.outer_iter() {
                n += 1;
                for (j, &v) in row.iter().enumerate() {
                    let v = f64::from(v);
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Self { mean, std }
    }

    /// Per-column mean with one shared scale (the RMS deviation over all
    /// columns), so near-constant columns are not blown up.
    pub fn centered_rows(rows: &[Vec<f64>], dim: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let ss: f64 = rows
            .iter()
            .flat_map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)))
            .sum();
        let scale = (ss / (n * dim.max(1) as f64)).sqrt().max(1e-6);
        Self {
            mean,
            std: vec![scale; dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, x: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn denormalize(&self, x: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}
