use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Power-iteration state for one spectrally normalized weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub param: usize,
    pub u: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of trainable tensors plus spectral-norm buffers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<NamedTensor>,
    spectral: Vec<SpectralState>,
}

/// Graph leaves for every tensor of a [`ParamSet`], in order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.params.push(NamedTensor {
            name: name.into(),
            tensor,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.params[id].tensor
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].tensor
    }

    pub fn name(&self, id: usize) -> &str {
        &self.params[id].name
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn spectral(&self, id: usize) -> &SpectralState {
        &self.spectral[id]
    }

    /// Registers spectral normalization for parameter `param`, initializing
    /// the singular-vector estimates with a random `u` and a short warm-up.
    pub fn add_spectral<R: Rng + ?Sized>(&mut self, param: usize, rng: &mut R) -> usize {
        let rows = self.params[param].tensor.shape()[0];
        let cols = self.params[param].tensor.numel() / rows;
        let u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        let mut state = SpectralState {
            param,
            u: Tensor::from_vec(normalized(u)),
            v: Tensor::zeros(&[cols]),
        };
        for _ in 0..15 {
            power_step(&self.params[param].tensor, &mut state);
        }
        self.spectral.push(state);
        self.spectral.len() - 1
    }

    /// One power-iteration step on every spectrally normalized weight.
    pub fn power_iterate(&mut self) {
        for state in &mut self.spectral {
            power_step(&self.params[state.param].tensor, state);
        }
    }

    /// Adds every tensor to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.param(p.tensor.clone()))
                .collect(),
        }
    }

    /// Adds every tensor to `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.constant(p.tensor.clone()))
                .collect(),
        }
    }

    /// Gradient for each parameter, zero where the sweep never reached it.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, v)| grads.get_or_zeros(*v, p.tensor.shape()))
            .collect()
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() || self.spectral.len() != other.spectral.len() {
            return Err(Error::Layout(format!(
                "expected {} params / {} spectral buffers, found {} / {}",
                self.params.len(),
                self.spectral.len(),
                other.params.len(),
                other.spectral.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name
                || a.tensor.shape() != b.tensor.shape()
                || b.tensor.numel() != a.tensor.numel()
            {
                return Err(Error::Layout(format!(
                    "param {} {:?} does not match {} {:?}",
                    b.name,
                    b.tensor.shape(),
                    a.name,
                    a.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn power_step(w: &Tensor, state: &mut SpectralState) {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let data = w.data();
    let u = state.u.data();
    let mut v = vec![0.0; cols];
    for (r, row) in data.chunks(cols).enumerate() {
        for (vc, wv) in v.iter_mut().zip(row) {
            *vc += u[r] * wv;
        }
    }
    let v = normalized(v);
    let u: Vec<f64> = data
        .chunks(cols)
        .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    state.u = Tensor::from_vec(normalized(u));
    state.v = Tensor::from_vec(v);
}

/// Xavier/Glorot uniform initialization.
pub fn xavier_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("numel")
}

/// Same-padded convolution layer, optionally spectrally normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub spectral: Option<usize>,
}

impl Conv {
    /// `kernel` holds the spatial kernel extents (2 for 2D, 3 for 3D).
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let k: usize = kernel.iter().product();
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let weight = params.push(
            format!("{name}.weight"),
            xavier_uniform(&shape, cin * k, cout * k, rng),
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        let spectral = spectral.then(|| params.add_spectral(weight, rng));
        Self {
            weight,
            bias,
            spectral,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, bound: &Bound, x: Var) -> Var {
        let mut w = bound.var(self.weight);
        if let Some(s) = self.spectral {
            let st = params.spectral(s);
            w = g.spectral_norm(w, st.u.data(), st.v.data());
        }
        g.conv(x, w, bound.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            xavier_uniform(&[fout, fin], fin, fout, rng),
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        g.linear(x, bound.var(self.weight), bound.var(self.bias))
    }
}
