//! One LSTM layer with explicit backpropagation through time.
//!
//! Gate layout in the stacked weight matrices is `[input, forget, cell,
//! output]`, each block `hidden` rows tall.

use ndarray::{Array1, Array2};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LstmParams {
    /// Input weights, `[4H, I]`.
    pub w: Array2<f64>,
    /// Recurrent weights, `[4H, H]`.
    pub u: Array2<f64>,
    /// Bias, `[4H]`.
    pub b: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w: Array2::zeros((4 * hidden, input)),
            u: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    /// Glorot-uniform weights; zero bias except the forget gate at 1.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input, hidden);
        let aw = (6.0 / (input + hidden) as f64).sqrt();
        for v in p.w.iter_mut() {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * aw;
        }
        let au = (6.0 / (2 * hidden) as f64).sqrt();
        for v in p.u.iter_mut() {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * au;
        }
        for j in hidden..2 * hidden {
            p.b[j] = 1.0;
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    pub fn input(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.u.len() + self.b.len()
    }
}

pub(crate) struct LstmCache {
    /// Layer input, `[T, I]`.
    pub xs: Array2<f64>,
    /// Hidden states including h_0 = 0, `[T+1, H]`.
    pub hs: Array2<f64>,
    /// Cell states including c_0 = 0, `[T+1, H]`.
    pub cs: Array2<f64>,
    /// Post-activation gates `[T, 4H]` in i, f, g, o blocks.
    pub gates: Array2<f64>,
    /// tanh(c_t), `[T, H]`.
    pub tanh_c: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Runs the layer over a `[T, I]` sequence, returning the `[T, H]` output
/// sequence and the cache needed for the backward pass.
pub(crate) fn lstm_forward(p: &LstmParams, x: &Array2<f64>) -> (Array2<f64>, LstmCache) {
    let t_len = x.nrows();
    let h = p.hidden();
    debug_assert_eq!(x.ncols(), p.input());

    let mut hs = Array2::<f64>::zeros((t_len + 1, h));
    let mut cs = Array2::<f64>::zeros((t_len + 1, h));
    let mut gates = Array2::<f64>::zeros((t_len, 4 * h));
    let mut tanh_c = Array2::<f64>::zeros((t_len, h));

    for t in 0..t_len {
        let z = p.w.dot(&x.row(t)) + p.u.dot(&hs.row(t)) + &p.b;
        for j in 0..h {
            let i_g = sigmoid(z[j]);
            let f_g = sigmoid(z[h + j]);
            let g_g = z[2 * h + j].tanh();
            let o_g = sigmoid(z[3 * h + j]);
            let c = f_g * cs[[t, j]] + i_g * g_g;
            let tc = c.tanh();
            gates[[t, j]] = i_g;
            gates[[t, h + j]] = f_g;
            gates[[t, 2 * h + j]] = g_g;
            gates[[t, 3 * h + j]] = o_g;
            cs[[t + 1, j]] = c;
            tanh_c[[t, j]] = tc;
            hs[[t + 1, j]] = o_g * tc;
        }
    }

    let out = hs.slice(ndarray::s![1.., ..]).to_owned();
    let cache = LstmCache { xs: x.clone(), hs, cs, gates, tanh_c };
    (out, cache)
}

/// Backpropagates `d_out` (gradient w.r.t. the output sequence) through the
/// layer, accumulating into `grads` and returning the gradient w.r.t. the
/// input sequence.
pub(crate) fn lstm_backward(
    p: &LstmParams,
    cache: &LstmCache,
    d_out: &Array2<f64>,
    grads: &mut LstmParams,
) -> Array2<f64> {
    let t_len = cache.xs.nrows();
    let h = p.hidden();
    let i_len = p.input();
    debug_assert_eq!(d_out.dim(), (t_len, h));

    let mut dx = Array2::<f64>::zeros((t_len, i_len));
    let mut dh_next = Array1::<f64>::zeros(h);
    let mut dc_next = Array1::<f64>::zeros(h);
    let mut dz = Array1::<f64>::zeros(4 * h);

    for t in (0..t_len).rev() {
        for j in 0..h {
            let dh = d_out[[t, j]] + dh_next[j];
            let i_g = cache.gates[[t, j]];
            let f_g = cache.gates[[t, h + j]];
            let g_g = cache.gates[[t, 2 * h + j]];
            let o_g = cache.gates[[t, 3 * h + j]];
            let tc = cache.tanh_c[[t, j]];

            let d_o = dh * tc;
            let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
            let d_i = dc * g_g;
            let d_g = dc * i_g;
            let d_f = dc * cache.cs[[t, j]];

            dz[j] = d_i * i_g * (1.0 - i_g);
            dz[h + j] = d_f * f_g * (1.0 - f_g);
            dz[2 * h + j] = d_g * (1.0 - g_g * g_g);
            dz[3 * h + j] = d_o * o_g * (1.0 - o_g);
            dc_next[j] = dc * f_g;
        }

        for r in 0..4 * h {
            let dzr = dz[r];
            if dzr == 0.0 {
                continue;
            }
            grads.b[r] += dzr;
            for c in 0..i_len {
                grads.w[[r, c]] += dzr * cache.xs[[t, c]];
            }
            for c in 0..h {
                grads.u[[r, c]] += dzr * cache.hs[[t, c]];
            }
        }
        for c in 0..i_len {
            let mut acc = 0.0;
            for r in 0..4 * h {
                acc += p.w[[r, c]] * dz[r];
            }
            dx[[t, c]] = acc;
        }
        for c in 0..h {
            let mut acc = 0.0;
            for r in 0..4 * h {
                acc += p.u[[r, c]] * dz[r];
            }
            dh_next[c] = acc;
        }
    }
    dx
}
