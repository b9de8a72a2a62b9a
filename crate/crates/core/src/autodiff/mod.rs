//! A small reverse-mode gradient engine.
//!
//! Operations are recorded on a [`Tape`] together with their outputs. A
//! single [`Tape::backward`] sweep walks the recorded nodes in reverse and
//! accumulates parameter gradients into a caller-provided flat buffer, using
//! the offsets the parameters were loaded from.

mod kernels;

use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn out_height(&self) -> usize {
        (self.height - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * 9
    }
}

#[derive(Debug)]
enum Op {
    Param { offset: usize },
    Const,
    Conv3x3 { x: Var, w: Var, b: Var, shape: ConvShape },
    Linear { x: Var, w: Var, b: Var, n_in: usize, n_out: usize },
    Silu { x: Var },
    Add { a: Var, b: Var },
    AddChannel { x: Var, v: Var, plane: usize },
    Upsample2x { x: Var, channels: usize, height: usize, width: usize },
    Affine { x: Var, scale: f64 },
    GaussianLogProb { mean: Var, target: Vec<f64>, sigma: f64 },
    ChannelSum { x: Var, channels: usize },
    Dot { x: Var, weights: Vec<f64> },
    SumSquares { x: Var },
    Mse { x: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Loads `params[offset..offset + len]` as a differentiable leaf.
    pub fn param(&mut self, params: &[f64], offset: usize, len: usize) -> Var {
        self.push(Op::Param { offset }, params[offset..offset + len].to_vec())
    }

    pub fn constant(&mut self, data: Vec<f64>) -> Var {
        self.push(Op::Const, data)
    }

    /// 3x3 convolution with zero padding of one pixel.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, shape: ConvShape) -> Var {
        debug_assert_eq!(self.value(x).len(), shape.in_channels * shape.height * shape.width);
        debug_assert_eq!(self.value(w).len(), shape.weight_len());
        debug_assert_eq!(self.value(b).len(), shape.out_channels);
        let out = kernels::conv3x3_forward(self.value(x), self.value(w), self.value(b), &shape);
        self.push(Op::Conv3x3 { x, w, b, shape }, out)
    }

    /// `y = W x + b` with `W` stored row-major as `n_out x n_in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n_in = self.value(x).len();
        let n_out = self.value(b).len();
        debug_assert_eq!(self.value(w).len(), n_in * n_out);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let out = (0..n_out)
            .map(|o| {
                let row = &wv[o * n_in..(o + 1) * n_in];
                bv[o] + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        self.push(Op::Linear { x, w, b, n_in, n_out }, out)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(Op::Silu { x }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).len(), self.value(b).len());
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(Op::Add { a, b }, out)
    }

    /// Adds `v[c]` to every entry of channel `c` of the feature map `x`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let channels = self.value(v).len();
        let plane = self.value(x).len() / channels;
        debug_assert_eq!(plane * channels, self.value(x).len());
        let vv = self.value(v);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vv[i / plane])
            .collect();
        self.push(Op::AddChannel { x, v, plane }, out)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var, channels: usize, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        let (oh, ow) = (height * 2, width * 2);
        let mut out = vec![0.0; channels * oh * ow];
        for c in 0..channels {
            for y in 0..oh {
                for xo in 0..ow {
                    out[(c * oh + y) * ow + xo] = xv[(c * height + y / 2) * width + xo / 2];
                }
            }
        }
        self.push(
            Op::Upsample2x {
                x,
                channels,
                height,
                width,
            },
            out,
        )
    }

    /// `shift + scale * x`; `shift` is a constant.
    pub fn affine(&mut self, x: Var, scale: f64, shift: &[f64]) -> Var {
        debug_assert_eq!(shift.len(), self.value(x).len());
        let out = self
            .value(x)
            .iter()
            .zip(shift)
            .map(|(&v, &s)| s + scale * v)
            .collect();
        self.push(Op::Affine { x, scale }, out)
    }

    /// Elementwise log-density of `target` under `N(mean, sigma^2)`.
    pub fn gaussian_logprob(&mut self, mean: Var, target: &[f64], sigma: f64) -> Var {
        let out = gaussian_logpdf(self.value(mean), target, sigma);
        self.push(
            Op::GaussianLogProb {
                mean,
                target: target.to_vec(),
                sigma,
            },
            out,
        )
    }

    /// Sums a channel-first map over its channels.
    pub fn channel_sum(&mut self, x: Var, channels: usize) -> Var {
        let xv = self.value(x);
        let plane = xv.len() / channels;
        let mut out = vec![0.0; plane];
        for c in 0..channels {
            for (o, v) in out.iter_mut().zip(&xv[c * plane..(c + 1) * plane]) {
                *o += v;
            }
        }
        self.push(Op::ChannelSum { x, channels }, out)
    }

    /// Scalar `sum_i weights_i * x_i` with constant weights.
    pub fn dot(&mut self, x: Var, weights: &[f64]) -> Var {
        debug_assert_eq!(weights.len(), self.value(x).len());
        let s = self.value(x).iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(
            Op::Dot {
                x,
                weights: weights.to_vec(),
            },
            vec![s],
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum();
        self.push(Op::SumSquares { x }, vec![s])
    }

    /// Scalar mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.len(), target.len());
        let s = xv
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / xv.len() as f64;
        self.push(
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            vec![s],
        )
    }

    /// Propagates `seed` (the adjoint of `output`) back through the tape and
    /// adds the parameter gradients into `grads`. A tape can be swept once.
    pub fn backward(&mut self, output: Var, seed: &[f64], grads: &mut [f64]) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("tape has already been swept backward".into()));
        }
        if seed.len() != self.value(output).len() {
            return Err(Error::Dimension(format!(
                "seed has {} entries, output has {}",
                seed.len(),
                self.value(output).len()
            )));
        }
        self.consumed = true;

        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); output.0 + 1];
        adj[output.0] = seed.to_vec();
        for idx in (0..=output.0).rev() {
            let g = std::mem::take(&mut adj[idx]);
            if g.is_empty() {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param { offset } => {
                    let dst = grads
                        .get_mut(*offset..*offset + g.len())
                        .ok_or_else(|| Error::Dimension("gradient buffer too short".into()))?;
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::Const => {}
                Op::Conv3x3 { x, w, b, shape } => {
                    let (dx, dw, db) = kernels::conv3x3_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        shape,
                    );
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *w, dw);
                    accumulate(&mut adj, *b, db);
                }
                Op::Linear { x, w, b, n_in, n_out } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let mut dx = vec![0.0; *n_in];
                    let mut dw = vec![0.0; n_in * n_out];
                    for o in 0..*n_out {
                        let go = g[o];
                        for i in 0..*n_in {
                            dx[i] += wv[o * n_in + i] * go;
                            dw[o * n_in + i] = xv[i] * go;
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *w, dw);
                    accumulate(&mut adj, *b, g);
                }
                Op::Silu { x } => {
                    let dx = self.nodes[x.0]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| {
                            let s = sigmoid(v);
                            gv * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::AddChannel { x, v, plane } => {
                    let dv = g.chunks(*plane).map(|c| c.iter().sum()).collect();
                    accumulate(&mut adj, *v, dv);
                    accumulate(&mut adj, *x, g);
                }
                Op::Upsample2x {
                    x,
                    channels,
                    height,
                    width,
                } => {
                    let (oh, ow) = (height * 2, width * 2);
                    let mut dx = vec![0.0; channels * height * width];
                    for c in 0..*channels {
                        for y in 0..oh {
                            for xo in 0..ow {
                                dx[(c * height + y / 2) * width + xo / 2] += g[(c * oh + y) * ow + xo];
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Affine { x, scale } => {
                    let dx = g.iter().map(|v| v * scale).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::GaussianLogProb {
                    mean,
                    target,
                    sigma,
                } => {
                    let var = sigma * sigma;
                    let dm = self.nodes[mean.0]
                        .value
                        .iter()
                        .zip(target)
                        .zip(&g)
                        .map(|((m, t), gv)| gv * (t - m) / var)
                        .collect();
                    accumulate(&mut adj, *mean, dm);
                }
                Op::ChannelSum { x, channels } => {
                    let dx = (0..*channels).flat_map(|_| g.iter().copied()).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Dot { x, weights } => {
                    let dx = weights.iter().map(|w| w * g[0]).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::SumSquares { x } => {
                    let dx = self.nodes[x.0].value.iter().map(|v| 2.0 * v * g[0]).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Mse { x, target } => {
                    let n = target.len() as f64;
                    let dx = self.nodes[x.0]
                        .value
                        .iter()
                        .zip(target)
                        .map(|(a, b)| 2.0 * (a - b) / n * g[0])
                        .collect();
                    accumulate(&mut adj, *x, dx);
                }
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient after backward".into()));
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Vec<f64>], v: Var, g: Vec<f64>) {
    let slot = &mut adj[v.0];
    if slot.is_empty() {
        *slot = g;
    } else {
        for (a, b) in slot.iter_mut().zip(g) {
            *a += b;
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Elementwise `log N(target | mean, sigma^2)`.
pub fn gaussian_logpdf(mean: &[f64], target: &[f64], sigma: f64) -> Vec<f64> {
    let var = sigma * sigma;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    mean.iter()
        .zip(target)
        .map(|(m, t)| norm - (t - m) * (t - m) / (2.0 * var))
        .collect()
}
