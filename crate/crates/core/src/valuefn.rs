//! Parameterized value function `Φ(s; θ) = wᵀN(s) + ½ sᵀAᵀA s + bᵀs + c`
//! with a two-layer residual network `N` and its exact space-time gradient.

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Deref;

/// Rank of the quadratic term: `γ = min(10, d)`.
pub fn quadratic_rank(d: usize) -> usize {
    d.min(10)
}

/// Trainable weights of the value network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFnParams {
    pub d: usize,
    pub m: usize,
    /// Output weights, length `m`.
    pub w: Vec<f64>,
    /// First layer, `m × (d+1)`.
    pub k0: Mat,
    /// Residual layer, `m × m`.
    pub k1: Mat,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    /// Low-rank quadratic factor, `γ × (d+1)`.
    pub a: Mat,
    pub b: Vec<f64>,
    pub c: f64,
}

/// Names of the parameter tensors, in canonical order.
pub const TENSOR_NAMES: [&str; 8] = ["w", "K0", "K1", "b0", "b1", "A", "b", "c"];

impl ValueFnParams {
    pub fn zeros(d: usize, m: usize) -> Self {
        let gamma = quadratic_rank(d);
        ValueFnParams {
            d,
            m,
            w: vec![0.0; m],
            k0: Mat::zeros(m, d + 1),
            k1: Mat::zeros(m, m),
            b0: vec![0.0; m],
            b1: vec![0.0; m],
            a: Mat::zeros(gamma, d + 1),
            b: vec![0.0; d + 1],
            c: 0.0,
        }
    }

    /// Checks mutual consistency of all shapes and finiteness of all entries.
    pub fn validate(&self) -> Result<()> {
        let (d, m) = (self.d, self.m);
        if d == 0 || m == 0 {
            return Err(Error::Config(format!(
                "value function needs d >= 1 and m >= 1 (d = {d}, m = {m})"
            )));
        }
        let check = |ctx: &'static str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(Error::Config(format!(
                    "{ctx} has shape {got:?}, expected {want:?}"
                )))
            } else {
                Ok(())
            }
        };
        check("w", (self.w.len(), 1), (m, 1))?;
        check("K0", self.k0.shape(), (m, d + 1))?;
        check("K1", self.k1.shape(), (m, m))?;
        check("b0", (self.b0.len(), 1), (m, 1))?;
        check("b1", (self.b1.len(), 1), (m, 1))?;
        check("A", self.a.shape(), (quadratic_rank(d), d + 1))?;
        check("b", (self.b.len(), 1), (d + 1, 1))?;
        if let Some((name, _)) = self
            .named_tensors()
            .into_iter()
            .find(|(_, (_, data))| data.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Config(format!("parameter {name} has non-finite entries")));
        }
        Ok(())
    }

    /// Parameter tensors as `(name, (shape, row-major data))`.
    pub fn named_tensors(&self) -> Vec<(&'static str, ([usize; 2], &[f64]))> {
        vec![
            ("w", ([self.m, 1], self.w.as_slice())),
            ("K0", ([self.k0.rows, self.k0.cols], self.k0.data.as_slice())),
            ("K1", ([self.k1.rows, self.k1.cols], self.k1.data.as_slice())),
            ("b0", ([self.m, 1], self.b0.as_slice())),
            ("b1", ([self.m, 1], self.b1.as_slice())),
            ("A", ([self.a.rows, self.a.cols], self.a.data.as_slice())),
            ("b", ([self.d + 1, 1], self.b.as_slice())),
            ("c", ([1, 1], std::slice::from_ref(&self.c))),
        ]
    }

    /// Mutable views of the tensors in [`TENSOR_NAMES`] order.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.w,
            &mut self.k0.data,
            &mut self.k1.data,
            &mut self.b0,
            &mut self.b1,
            &mut self.a.data,
            &mut self.b,
            std::slice::from_mut(&mut self.c),
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.w,
            &self.k0.data,
            &self.k1.data,
            &self.b0,
            &self.b1,
            &self.a.data,
            &self.b,
            std::slice::from_ref(&self.c),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flattened copy of all parameters, canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrites all parameters from a flat vector in canonical order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("flat parameter vector", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_named(d: usize, m: usize, tensors: &[(String, [usize; 2], Vec<f64>)]) -> Result<Self> {
        let mut p = ValueFnParams::zeros(d, m);
        let expected: Vec<(&str, [usize; 2])> = p
            .named_tensors()
            .into_iter()
            .map(|(n, (s, _))| (n, s))
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (slot, (name, shape)) in p.tensors_mut().into_iter().zip(expected) {
            let (_, got_shape, data) = tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::Config(format!("missing parameter tensor {name}")))?;
            if *got_shape != shape || data.len() != shape[0] * shape[1] {
                return Err(Error::Config(format!(
                    "tensor {name}: declared shape {got_shape:?} with {} values, expected {shape:?}",
                    data.len()
                )));
            }
            slot.copy_from_slice(data);
        }
        p.validate()?;
        Ok(p)
    }

    fn check_input(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.d + 1 {
            return Err(Error::dim("space-time point", self.d + 1, s.len()));
        }
        Ok(())
    }
}

/// A space-time input `s = (x, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimePoint(Vec<f64>);

impl SpaceTimePoint {
    pub fn new(x: &[f64], t: f64) -> Self {
        let mut s = Vec::with_capacity(x.len() + 1);
        s.extend_from_slice(x);
        s.push(t);
        SpaceTimePoint(s)
    }

    pub fn state(&self) -> &[f64] {
        &self.0[..self.0.len() - 1]
    }

    pub fn time(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

impl Deref for SpaceTimePoint {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `σ(x) = log(eˣ + e⁻ˣ)` in overflow-safe form, with `σ'(x) = tanh(x)`.
#[inline]
pub fn activation(x: f64) -> (f64, f64) {
    let ax = x.abs();
    (ax + (-2.0 * ax).exp().ln_1p(), x.tanh())
}

/// Pre-activations kept from the forward pass for gradient reuse.
#[derive(Clone, Debug)]
pub struct ResnetCache {
    pub pre0: Vec<f64>,
    pub a0: Vec<f64>,
    pub pre1: Vec<f64>,
}

/// `a0 = σ(K0 s + b0)`, `N = a0 + σ(K1 a0 + b1)`.
pub fn resnet_forward(s: &[f64], params: &ValueFnParams) -> Result<(Vec<f64>, ResnetCache)> {
    params.check_input(s)?;
    let mut pre0 = params.k0.matvec(s);
    for (p, b) in pre0.iter_mut().zip(&params.b0) {
        *p += b;
    }
    let a0: Vec<f64> = pre0.iter().map(|&v| activation(v).0).collect();
    let mut pre1 = params.k1.matvec(&a0);
    for (p, b) in pre1.iter_mut().zip(&params.b1) {
        *p += b;
    }
    let n = a0
        .iter()
        .zip(&pre1)
        .map(|(a, &p)| a + activation(p).0)
        .collect();
    Ok((n, ResnetCache { pre0, a0, pre1 }))
}

fn quadratic_parts(s: &[f64], params: &ValueFnParams) -> (Vec<f64>, f64) {
    let as_ = params.a.matvec(s);
    let quad = 0.5 * dot(&as_, &as_) + dot(&params.b, s) + params.c;
    (as_, quad)
}

pub fn phi_eval(s: &[f64], params: &ValueFnParams) -> Result<f64> {
    let (n, _) = resnet_forward(s, params)?;
    let (_, quad) = quadratic_parts(s, params);
    Ok(dot(&params.w, &n) + quad)
}

/// Exact `∇ₛΦ`; the first `d` entries are `∇ₓΦ`, the last is `∂ₜΦ`.
pub fn phi_spacetime_grad(s: &[f64], params: &ValueFnParams) -> Result<Vec<f64>> {
    Ok(phi_and_grad(s, params)?.1)
}

/// `Φ(s)` and `∇ₛΦ(s)` from one forward pass.
pub fn phi_and_grad(s: &[f64], params: &ValueFnParams) -> Result<(f64, Vec<f64>)> {
    let (n, cache) = resnet_forward(s, params)?;
    let (as_, quad) = quadratic_parts(s, params);
    let phi = dot(&params.w, &n) + quad;

    // inner = w + K1ᵀ(σ'(pre1) ⊙ w)
    let t1: Vec<f64> = cache
        .pre1
        .iter()
        .zip(&params.w)
        .map(|(&p, w)| p.tanh() * w)
        .collect();
    let mut inner = params.k1.matvec_t(&t1);
    for (v, w) in inner.iter_mut().zip(&params.w) {
        *v += w;
    }
    let g0: Vec<f64> = cache
        .pre0
        .iter()
        .zip(&inner)
        .map(|(&p, v)| p.tanh() * v)
        .collect();
    let mut grad = params.k0.matvec_t(&g0);
    let quad_grad = params.a.matvec_t(&as_);
    for ((g, q), b) in grad.iter_mut().zip(&quad_grad).zip(&params.b) {
        *g += q + b;
    }
    Ok((phi, grad))
}

/// Deterministic initialization: `K0`, `K1` Gaussian with std `1/√fan-in`,
/// `w` and `A` Gaussian with std 0.01, all biases zero.
pub fn init_params(seed: u64, d: usize, m: usize) -> ValueFnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ValueFnParams::zeros(d, m);
    let mut fill = |data: &mut [f64], std: f64| {
        let dist = Normal::new(0.0, std).expect("positive std");
        for v in data {
            *v = dist.sample(&mut rng);
        }
    };
    fill(&mut p.k0.data, 1.0 / ((d + 1) as f64).sqrt());
    fill(&mut p.k1.data, 1.0 / (m as f64).sqrt());
    fill(&mut p.w, INIT_OUTPUT_STD);
    fill(&mut p.a.data, INIT_OUTPUT_STD);
    p
}

const INIT_OUTPUT_STD: f64 = 0.01;
