//! The multi-branch regression network: per-branch stacks of three LSTM
//! layers with dropout after each, final hidden states concatenated into a
//! one-hidden-layer MLP with a Leaky ReLU and a single linear output.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::forecaster::lstm::{lstm_backward, lstm_forward, LstmCache, LstmParams};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DenseParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl DenseParams {
    fn zeros(out: usize, inp: usize) -> Self {
        DenseParams { w: Array2::zeros((out, inp)), b: Array1::zeros(out) }
    }

    fn init(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(out, inp);
        let a = (6.0 / (out + inp) as f64).sqrt();
        for v in p.w.iter_mut() {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * a;
        }
        p
    }
}

/// All weights of one model. Branch order is fixed by the config's branch
/// list; each branch is a stack of LSTM layers, sized by `layer_dims`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NetParams {
    pub branches: Vec<Vec<LstmParams>>,
    pub hidden: DenseParams,
    pub output: DenseParams,
}

impl NetParams {
    /// `branch_layer_dims[b]` = `(input_dim, [h1, h2, h3])`.
    pub fn init(
        branch_layer_dims: &[(usize, Vec<usize>)],
        dense_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut branches = Vec::with_capacity(branch_layer_dims.len());
        let mut concat = 0usize;
        for (input, hiddens) in branch_layer_dims {
            let mut layers = Vec::with_capacity(hiddens.len());
            let mut prev = *input;
            for &h in hiddens {
                layers.push(LstmParams::init(prev, h, rng));
                prev = h;
            }
            concat += *hiddens.last().expect("at least one layer");
            branches.push(layers);
        }
        let mut hidden = DenseParams::init(dense_width, concat, rng);
        let mut output = DenseParams::init(1, dense_width, rng);
        // Targets are min-max scaled to [0, 1]; starting the output bias at
        // the range midpoint removes a long bias walk at small step sizes.
        output.b[0] = 0.5;
        hidden.b.fill(0.0);
        NetParams { branches, hidden, output }
    }

    pub fn zeros_like(&self) -> Self {
        NetParams {
            branches: self
                .branches
                .iter()
                .map(|layers| {
                    layers.iter().map(|l| LstmParams::zeros(l.input(), l.hidden())).collect()
                })
                .collect(),
            hidden: DenseParams::zeros(self.hidden.w.nrows(), self.hidden.w.ncols()),
            output: DenseParams::zeros(self.output.w.nrows(), self.output.w.ncols()),
        }
    }

    pub fn n_params(&self) -> usize {
        self.branches
            .iter()
            .flat_map(|ls| ls.iter())
            .map(|l| l.n_params())
            .sum::<usize>()
            + self.hidden.w.len()
            + self.hidden.b.len()
            + self.output.w.len()
            + self.output.b.len()
    }

    /// Flattens every parameter in a fixed traversal order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layers in &self.branches {
            for l in layers {
                out.extend(l.w.iter());
                out.extend(l.u.iter());
                out.extend(l.b.iter());
            }
        }
        out.extend(self.hidden.w.iter());
        out.extend(self.hidden.b.iter());
        out.extend(self.output.w.iter());
        out.extend(self.output.b.iter());
        out
    }

    pub fn assign_from(&mut self, flat: &[f64]) {
        let mut k = 0usize;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[k..k + dst.len()]);
            k += dst.len();
        };
        for layers in &mut self.branches {
            for l in layers {
                take(l.w.as_slice_mut().expect("contiguous"));
                take(l.u.as_slice_mut().expect("contiguous"));
                take(l.b.as_slice_mut().expect("contiguous"));
            }
        }
        take(self.hidden.w.as_slice_mut().expect("contiguous"));
        take(self.hidden.b.as_slice_mut().expect("contiguous"));
        take(self.output.w.as_slice_mut().expect("contiguous"));
        take(self.output.b.as_slice_mut().expect("contiguous"));
        debug_assert_eq!(k, flat.len());
    }

    /// Hidden widths of every recurrent layer, per branch.
    pub fn layer_widths(&self) -> Vec<Vec<usize>> {
        self.branches
            .iter()
            .map(|layers| layers.iter().map(|l| l.hidden()).collect())
            .collect()
    }

    /// Zeroes one branch's weights entirely; test support for branch
    /// isolation checks.
    #[cfg(test)]
    pub fn zero_branch(&mut self, branch: usize) {
        for l in &mut self.branches[branch] {
            l.w.fill(0.0);
            l.u.fill(0.0);
            l.b.fill(0.0);
        }
    }
}

/// Inverted-dropout masks for one sample: full-sequence masks after the
/// first two layers of each branch, a final-hidden mask after the third.
pub(crate) struct DropoutMasks {
    pub seq: Vec<Vec<Array2<f64>>>,
    pub final_h: Vec<Array1<f64>>,
}

impl DropoutMasks {
    pub fn ones(params: &NetParams, t_len: usize) -> Self {
        DropoutMasks {
            seq: params
                .branches
                .iter()
                .map(|layers| {
                    layers[..layers.len() - 1]
                        .iter()
                        .map(|l| Array2::ones((t_len, l.hidden())))
                        .collect()
                })
                .collect(),
            final_h: params
                .branches
                .iter()
                .map(|layers| Array1::ones(layers.last().expect("layers").hidden()))
                .collect(),
        }
    }

    pub fn sample(params: &NetParams, t_len: usize, rate: f64, rng: &mut impl Rng) -> Self {
        if rate <= 0.0 {
            return Self::ones(params, t_len);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mut seq = Vec::with_capacity(params.branches.len());
        let mut final_h = Vec::with_capacity(params.branches.len());
        for layers in &params.branches {
            let mut layer_masks = Vec::with_capacity(layers.len() - 1);
            for l in &layers[..layers.len() - 1] {
                layer_masks.push(Array2::from_shape_fn((t_len, l.hidden()), |_| {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        0.0
                    }
                }));
            }
            seq.push(layer_masks);
            let last = layers.last().expect("layers").hidden();
            final_h.push(Array1::from_shape_fn(last, |_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            }));
        }
        DropoutMasks { seq, final_h }
    }
}

pub(crate) struct SampleCache {
    branch_layers: Vec<Vec<LstmCache>>,
    /// Concatenated (masked) final hidden states.
    concat: Array1<f64>,
    dense_pre: Array1<f64>,
    dense_post: Array1<f64>,
    pub yhat: f64,
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Forward pass over one sample. `inputs[b]` is the `[T, I_b]` feature
/// sequence of branch `b`.
pub(crate) fn forward_sample(
    params: &NetParams,
    inputs: &[Array2<f64>],
    masks: &DropoutMasks,
    leaky_slope: f64,
) -> SampleCache {
    debug_assert_eq!(inputs.len(), params.branches.len());
    let concat_dim: usize = params.branches.iter().map(|ls| ls.last().unwrap().hidden()).sum();
    let mut concat = Array1::zeros(concat_dim);
    let mut branch_layers = Vec::with_capacity(params.branches.len());
    let mut offset = 0usize;

    for (b, layers) in params.branches.iter().enumerate() {
        let mut caches = Vec::with_capacity(layers.len());
        let mut x = inputs[b].clone();
        for (li, layer) in layers.iter().enumerate() {
            let (mut out, cache) = lstm_forward(layer, &x);
            caches.push(cache);
            if li + 1 < layers.len() {
                out *= &masks.seq[b][li];
                x = out;
            } else {
                let h = layer.hidden();
                let t_last = out.nrows() - 1;
                for j in 0..h {
                    concat[offset + j] = out[[t_last, j]] * masks.final_h[b][j];
                }
                offset += h;
            }
        }
        branch_layers.push(caches);
    }

    let dense_pre = params.hidden.w.dot(&concat) + &params.hidden.b;
    let dense_post = dense_pre.mapv(|v| leaky(v, leaky_slope));
    let yhat = params.output.w.row(0).dot(&dense_post) + params.output.b[0];

    SampleCache { branch_layers, concat, dense_pre, dense_post, yhat }
}

/// Backward pass for one sample given dL/dyhat, accumulating into `grads`.
pub(crate) fn backward_sample(
    params: &NetParams,
    cache: &SampleCache,
    masks: &DropoutMasks,
    dy: f64,
    leaky_slope: f64,
    grads: &mut NetParams,
) {
    // Output neuron.
    for (gw, r) in grads.output.w.row_mut(0).iter_mut().zip(cache.dense_post.iter()) {
        *gw += dy * r;
    }
    grads.output.b[0] += dy;

    // Dense hidden layer through the Leaky ReLU.
    let dw = cache.dense_pre.len();
    let mut d_pre = Array1::zeros(dw);
    for j in 0..dw {
        let dr = params.output.w[[0, j]] * dy;
        d_pre[j] = dr * if cache.dense_pre[j] >= 0.0 { 1.0 } else { leaky_slope };
    }
    for j in 0..dw {
        if d_pre[j] == 0.0 {
            continue;
        }
        grads.hidden.b[j] += d_pre[j];
        for (gw, z) in grads.hidden.w.row_mut(j).iter_mut().zip(cache.concat.iter()) {
            *gw += d_pre[j] * z;
        }
    }
    let d_concat = params.hidden.w.t().dot(&d_pre);

    // Branches, slicing the concat gradient.
    let mut offset = 0usize;
    for (b, layers) in params.branches.iter().enumerate() {
        let final_h = layers.last().unwrap().hidden();
        let t_len = cache.branch_layers[b][0].xs.nrows();

        // Final-hidden gradient through the last dropout mask, injected at
        // the last time step of layer 3.
        let mut d_out = Array2::zeros((t_len, final_h));
        for j in 0..final_h {
            d_out[[t_len - 1, j]] = d_concat[offset + j] * masks.final_h[b][j];
        }
        offset += final_h;

        for li in (0..layers.len()).rev() {
            let dx = lstm_backward(
                &layers[li],
                &cache.branch_layers[b][li],
                &d_out,
                &mut grads.branches[b][li],
            );
            if li > 0 {
                // Through the dropout mask between layers li-1 and li.
                d_out = dx * &masks.seq[b][li - 1];
            }
        }
    }
}
