//! Tiny dense MLP with a hand-written reverse pass.
//!
//! Batches are row-major `[batch][features]`. Parameters flatten layer by layer as
//! `weights (out x in, row-major)` followed by `bias`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::io::Blob;

const ROWS_PER_TASK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::None => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::None => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::None => "none",
        }
    }

    fn parse(s: &str) -> Result<Activation> {
        Ok(match s {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "none" => Activation::None,
            other => return Err(Error::Format(format!("unknown activation `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations cached by [`Mlp::forward`] for the matching backward call.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    fingerprint: u64,
    batch: usize,
    /// `values[0]` is the input, `values[l + 1]` the output of layer `l`.
    values: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Mlp> {
        if layers.is_empty() {
            return param_err("an MLP needs at least one layer");
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return param_err(format!("layer {i} parameter shapes do not match its dims"));
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return param_err(format!(
                    "layer {i} input dim does not chain with layer {}",
                    i - 1
                ));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return param_err(format!("layer {i} has non-finite parameters"));
            }
        }
        Ok(Mlp { layers })
    }

    /// Seeded uniform(+-1/sqrt(fan_in)) weights and zero biases. `dims` lists the
    /// input width followed by every layer's output width.
    pub fn init(dims: &[usize], activations: &[Activation], seed: u64) -> Mlp {
        assert_eq!(
            dims.len(),
            activations.len() + 1,
            "one activation per layer"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let bound = 1.0 / (d[0] as f64).sqrt();
                Layer {
                    in_dim: d[0],
                    out_dim: d[1],
                    weights: (0..d[0] * d[1])
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; d[1]],
                    activation,
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zero_last_layer(&mut self) {
        let l = self.layers.last_mut().expect("non-empty");
        l.weights.iter_mut().for_each(|w| *w = 0.0);
        l.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count(), "flat parameter length");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }

    /// Hash of the parameter bits; a trace is only valid for the parameters that
    /// produced it.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn forward(&self, input: &[f64], batch: usize) -> Result<(Vec<f64>, MlpTrace)> {
        if input.len() != batch * self.in_dim() {
            return param_err(format!(
                "MLP input has {} values, expected batch {batch} x {}",
                input.len(),
                self.in_dim()
            ));
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for l in &self.layers {
            let x = values.last().expect("input pushed");
            let mut y = vec![0.0; batch * l.out_dim];
            y.par_chunks_mut(ROWS_PER_TASK * l.out_dim)
                .zip(x.par_chunks(ROWS_PER_TASK * l.in_dim))
                .for_each(|(yc, xc)| {
                    for (yr, xr) in yc
                        .chunks_exact_mut(l.out_dim)
                        .zip(xc.chunks_exact(l.in_dim))
                    {
                        for o in 0..l.out_dim {
                            let w = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                            let s: f64 =
                                w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() + l.bias[o];
                            yr[o] = l.activation.apply(s);
                        }
                    }
                });
            values.push(y);
        }
        let out = values.last().expect("non-empty").clone();
        Ok((
            out,
            MlpTrace {
                fingerprint: self.fingerprint(),
                batch,
                values,
            },
        ))
    }

    /// Reverse pass; returns `(flat parameter gradients, input gradients)`.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if trace.fingerprint != self.fingerprint() || trace.values.len() != self.layers.len() + 1 {
            return Err(Error::Contract(
                "MLP trace does not belong to these parameters".into(),
            ));
        }
        let batch = trace.batch;
        if grad_out.len() != batch * self.out_dim() {
            return param_err("MLP output gradient has the wrong length");
        }
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let x = &trace.values[li];
            let y = &trace.values[li + 1];
            // dL/d(pre-activation)
            g.par_iter_mut()
                .zip(y.par_iter())
                .for_each(|(gv, &yv)| *gv *= l.activation.grad_from_output(yv));
            let np = l.weights.len() + l.bias.len();
            let partials: Vec<Vec<f64>> = g
                .par_chunks(ROWS_PER_TASK * l.out_dim)
                .zip(x.par_chunks(ROWS_PER_TASK * l.in_dim))
                .map(|(gc, xc)| {
                    let mut p = vec![0.0; np];
                    for (gr, xr) in gc.chunks_exact(l.out_dim).zip(xc.chunks_exact(l.in_dim)) {
                        for o in 0..l.out_dim {
                            let go = gr[o];
                            if go == 0.0 {
                                continue;
                            }
                            let row = &mut p[o * l.in_dim..(o + 1) * l.in_dim];
                            row.iter_mut().zip(xr).for_each(|(pw, xv)| *pw += go * xv);
                            p[l.weights.len() + o] += go;
                        }
                    }
                    p
                })
                .collect();
            let mut lg = vec![0.0; np];
            for p in partials {
                lg.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            grads.push(lg);
            let mut gx = vec![0.0; batch * l.in_dim];
            gx.par_chunks_mut(ROWS_PER_TASK * l.in_dim)
                .zip(g.par_chunks(ROWS_PER_TASK * l.out_dim))
                .for_each(|(gxc, gc)| {
                    for (gxr, gr) in gxc
                        .chunks_exact_mut(l.in_dim)
                        .zip(gc.chunks_exact(l.out_dim))
                    {
                        for o in 0..l.out_dim {
                            let go = gr[o];
                            if go == 0.0 {
                                continue;
                            }
                            let w = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                            gxr.iter_mut().zip(w).for_each(|(a, wv)| *a += go * wv);
                        }
                    }
                });
            g = gx;
        }
        grads.reverse();
        Ok((grads.concat(), g))
    }

    pub fn to_blob(&self, kind: &str) -> Blob {
        let mut b = Blob::new(kind);
        b.set_meta("n_layers", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            b.set_meta(&format!("layer{i}.activation"), l.activation.name());
            b.push_f64(
                &format!("layer{i}.weight"),
                &[l.out_dim, l.in_dim],
                &l.weights,
            );
            b.push_f64(&format!("layer{i}.bias"), &[l.out_dim], &l.bias);
        }
        b
    }

    pub fn from_blob(b: &Blob) -> Result<Mlp> {
        let n = b.meta_usize("n_layers")?;
        let layers = (0..n)
            .map(|i| {
                let (shape, weights) = b.f64_array(&format!("layer{i}.weight"))?;
                let (_, bias) = b.f64_array(&format!("layer{i}.bias"))?;
                if shape.len() != 2 {
                    return Err(Error::Format("layer weight must be 2-D".into()));
                }
                Ok(Layer {
                    in_dim: shape[1],
                    out_dim: shape[0],
                    weights,
                    bias,
                    activation: Activation::parse(b.meta_str(&format!("layer{i}.activation"))?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }
}
