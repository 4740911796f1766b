use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::params::{Grads, Layout, Params, Slot};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine map applied row-wise: `y = x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: Slot,
    pub b: Slot,
}

impl Dense {
    pub fn new(layout: &mut Layout, name: &str, input: usize, output: usize) -> Self {
        Self {
            w: layout.add(format!("{name}.weight"), input, output, true),
            b: layout.add(format!("{name}.bias"), 1, output, true),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(&self, p: &mut Params, rng: &mut R) {
        let bound = (6.0 / (self.w.rows + self.w.cols) as f64).sqrt();
        p.fill_uniform(self.w, bound, rng);
        p.slice_mut(self.b).fill(0.0);
    }

    pub fn forward(&self, p: &Params, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&p.mat(self.w)) + p.row(self.b)
    }

    /// Returns `dL/dx`; accumulates weight gradients when `grads` is given.
    pub fn backward(
        &self,
        p: &Params,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: Option<&mut Grads>,
    ) -> Array2<f64> {
        if let Some(g) = grads {
            g.mat_mut(self.w).scaled_add(1.0, &x.t().dot(&dy));
            let db = dy.sum_axis(Axis(0));
            g.mat_mut(self.b).row_mut(0).scaled_add(1.0, &db);
        }
        dy.dot(&p.mat(self.w).t())
    }
}

/// Unidirectional LSTM layer. Gate blocks in the fused matrices are ordered
/// input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub wx: Slot,
    pub wh: Slot,
    pub b: Slot,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Array2<f64>,
    /// Activated gates, `T x 4H`.
    gates: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

impl Lstm {
    pub fn new(layout: &mut Layout, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            wx: layout.add(format!("{name}.weight_ih"), input, 4 * hidden, true),
            wh: layout.add(format!("{name}.weight_hh"), hidden, 4 * hidden, true),
            b: layout.add(format!("{name}.bias"), 1, 4 * hidden, true),
            hidden,
        }
    }

    /// Uniform(±1/sqrt(H)) weights, forget-gate bias 1.
    pub fn init<R: Rng>(&self, p: &mut Params, rng: &mut R) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        p.fill_uniform(self.wx, bound, rng);
        p.fill_uniform(self.wh, bound, rng);
        let h = self.hidden;
        let b = p.slice_mut(self.b);
        b.fill(0.0);
        b[h..2 * h].fill(1.0);
    }

    pub fn forward(&self, p: &Params, x: ArrayView2<f64>) -> (Array2<f64>, LstmCache) {
        let t_len = x.nrows();
        let h = self.hidden;
        let wh = p.mat(self.wh);
        let pre_x = x.dot(&p.mat(self.wx)) + p.row(self.b);
        let mut gates = Array2::zeros((t_len, 4 * h));
        let mut c = Array2::zeros((t_len, h));
        let mut tanh_c = Array2::zeros((t_len, h));
        let mut hs = Array2::zeros((t_len, h));
        let mut h_prev = Array1::<f64>::zeros(h);
        let mut c_prev = Array1::<f64>::zeros(h);
        for t in 0..t_len {
            let z = &pre_x.row(t) + &h_prev.dot(&wh);
            let mut g = gates.row_mut(t);
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let cc = z[2 * h + k].tanh();
                let o = sigmoid(z[3 * h + k]);
                g[k] = i;
                g[h + k] = f;
                g[2 * h + k] = cc;
                g[3 * h + k] = o;
                let ct = f * c_prev[k] + i * cc;
                let tc = ct.tanh();
                c[[t, k]] = ct;
                tanh_c[[t, k]] = tc;
                hs[[t, k]] = o * tc;
            }
            h_prev.assign(&hs.row(t));
            c_prev.assign(&c.row(t));
        }
        let cache = LstmCache {
            x: x.to_owned(),
            gates,
            c,
            tanh_c,
            h: hs.clone(),
        };
        (hs, cache)
    }

    /// Backpropagation through time. Returns `dL/dx`.
    pub fn backward(
        &self,
        p: &Params,
        cache: &LstmCache,
        dh_seq: ArrayView2<f64>,
        grads: Option<&mut Grads>,
    ) -> Array2<f64> {
        let t_len = cache.x.nrows();
        let h = self.hidden;
        let wh = p.mat(self.wh);
        let mut d_pre = Array2::<f64>::zeros((t_len, 4 * h));
        let mut dh_next = Array1::<f64>::zeros(h);
        let mut dc_next = Array1::<f64>::zeros(h);
        for t in (0..t_len).rev() {
            let g = cache.gates.row(t);
            let mut dz = d_pre.row_mut(t);
            for k in 0..h {
                let (i, f, cc, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let tc = cache.tanh_c[[t, k]];
                let c_prev = if t > 0 { cache.c[[t - 1, k]] } else { 0.0 };
                let dh = dh_seq[[t, k]] + dh_next[k];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                dz[k] = dc * cc * i * (1.0 - i);
                dz[h + k] = dc * c_prev * f * (1.0 - f);
                dz[2 * h + k] = dc * i * (1.0 - cc * cc);
                dz[3 * h + k] = d_o * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            dh_next = d_pre.row(t).dot(&wh.t());
        }
        if let Some(gr) = grads {
            gr.mat_mut(self.wx).scaled_add(1.0, &cache.x.t().dot(&d_pre));
            if t_len > 1 {
                let h_prev = cache.h.slice(s![..t_len - 1, ..]);
                let d_rest = d_pre.slice(s![1.., ..]);
                gr.mat_mut(self.wh).scaled_add(1.0, &h_prev.t().dot(&d_rest));
            }
            gr.mat_mut(self.b).row_mut(0).scaled_add(1.0, &d_pre.sum_axis(Axis(0)));
        }
        d_pre.dot(&p.mat(self.wx).t())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut layout = Layout::default();
        let lstm = Lstm::new(&mut layout, "l", 3, 4);
        let mut p = Params::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        lstm.init(&mut p, &mut rng);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &Params, x: &Array2<f64>| (lstm.forward(p, x.view()).0 * &w).sum();

        let (_, cache) = lstm.forward(&p, x.view());
        let mut g = Grads::zeros(p.values.len());
        let dx = lstm.backward(&p, &cache, w.view(), Some(&mut g));

        let eps = 1e-6;
        for idx in (0..p.values.len()).step_by(7) {
            let mut pp = p.clone();
            pp.values[idx] += eps;
            let up = loss(&pp, &x);
            pp.values[idx] -= 2.0 * eps;
            let down = loss(&pp, &x);
            let num = (up - down) / (2.0 * eps);
            assert!(rel_err(g.values[idx], num) < 1e-6, "param {idx}: {} vs {num}", g.values[idx]);
        }
        for ((r, c), &a) in dx.indexed_iter() {
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let up = loss(&p, &xp);
            xp[[r, c]] -= 2.0 * eps;
            let down = loss(&p, &xp);
            let num = (up - down) / (2.0 * eps);
            assert!(rel_err(a, num) < 1e-6, "x[{r},{c}]: {a} vs {num}");
        }
    }

    #[test]
    fn dense_backward_matches_closed_form() {
        let mut layout = Layout::default();
        let d = Dense::new(&mut layout, "d", 2, 3);
        let mut p = Params::zeros(layout);
        d.init(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        let x = ndarray::array![[1.0, 2.0], [-1.0, 0.5]];
        let dy = Array2::ones((2, 3));
        let mut g = Grads::zeros(p.values.len());
        let dx = d.backward(&p, x.view(), dy.view(), Some(&mut g));
        let w = p.mat(d.w);
        assert!((dx[[0, 0]] - w.row(0).sum()).abs() < 1e-12);
        assert_eq!(g.mat_mut(d.b).row(0).to_vec(), vec![2.0, 2.0, 2.0]);
        assert!((g.mat_mut(d.w)[[1, 2]] - 2.5).abs() < 1e-12);
    }
}
