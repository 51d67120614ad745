//! Small fully connected networks on a flat parameter vector, plus Adam.
//!
//! Layer `l` stores its weight as a column-major `(out, in)` block followed by
//! its bias. Hidden layers use `tanh`; the output layer is linear. Batches are
//! column-stacked: an input batch is an `(in, N)` matrix.

use nalgebra::{DMatrix, DMatrixView, DVectorView};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

fn layer_len(sizes: &[usize], l: usize) -> usize {
    sizes[l + 1] * sizes[l] + sizes[l + 1]
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. The last layer is scaled by
    /// `out_scale` so fresh networks start near zero output.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "bad layer sizes {sizes:?}");
        let mut params = Vec::new();
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l + 1 == layers { out_scale } else { 1.0 };
            let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
            params.extend((0..fan_in * fan_out).map(|_| scale * dist.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> impl Iterator<Item = (DMatrixView<'_, f64>, DVectorView<'_, f64>)> + '_ {
        let mut off = 0;
        (0..self.sizes.len() - 1).map(move |l| {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let w = DMatrixView::from_slice(&self.params[off..off + o * i], o, i);
            let b = DVectorView::from_slice(&self.params[off + o * i..off + o * i + o], o);
            off += layer_len(&self.sizes, l);
            (w, b)
        })
    }

    /// Activations of every layer, input first.
    pub fn forward(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        assert_eq!(x.nrows(), self.sizes[0]);
        let last = self.sizes.len() - 2;
        let mut acts = vec![x.clone()];
        for (l, (w, b)) in self.layers().enumerate() {
            let mut z = w * acts.last().expect("input present");
            for mut col in z.column_iter_mut() {
                col += &b;
            }
            if l < last {
                z.apply(|a| *a = a.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn output(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x).pop().expect("at least one layer")
    }

    /// Backpropagates `dy = dL/d(output)` through cached activations.
    /// Returns `(dL/dparams, dL/dx)`.
    pub fn backward(&self, acts: &[DMatrix<f64>], dy: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let layers: Vec<_> = self.layers().collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut offs: Vec<usize> = (0..layers.len())
            .scan(0, |o, l| {
                let here = *o;
                *o += layer_len(&self.sizes, l);
                Some(here)
            })
            .collect();
        let mut delta = dy.clone();
        let mut dx = DMatrix::zeros(0, 0);
        for l in (0..layers.len()).rev() {
            let (w, _) = &layers[l];
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let off = offs.pop().expect("one offset per layer");
            let gw = &delta * acts[l].transpose();
            grad[off..off + o * i].copy_from_slice(gw.as_slice());
            for (r, g) in grad[off + o * i..off + o * i + o].iter_mut().enumerate() {
                *g = delta.row(r).sum();
            }
            let mut back = w.transpose() * &delta;
            if l > 0 {
                back.zip_apply(&acts[l], |d, a| *d *= 1.0 - a * a);
                delta = back;
            } else {
                dx = back;
            }
        }
        (grad, dx)
    }

    /// `self <- (1 - tau) self + tau src`.
    pub fn soft_update(&mut self, src: &Mlp, tau: f64) {
        soft_update(&mut self.params, &src.params, tau);
    }
}

pub fn soft_update(dst: &mut [f64], src: &[f64], tau: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (1.0 - tau) * *d + tau * s;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
