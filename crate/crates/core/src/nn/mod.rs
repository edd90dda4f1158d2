//! A small feed-forward network stack with hand-written backpropagation.
//!
//! Networks are plain sequences of [`LayerSpec`]s over `[batch, features]`
//! matrices; matrix products go through ndarray's GEMM.

mod checkpoint;
mod classifier;
mod layers;

pub use checkpoint::Checkpoint;
pub use classifier::{Architecture, Classifier};
pub use layers::{sigmoid, softmax_backward, softmax_rows, LayerSpec, Shape3};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;
use layers::Cache;

#[derive(Debug, Clone)]
pub struct Sequential {
    specs: Vec<LayerSpec>,
    params: Vec<Vec<Vec<f32>>>,
}

/// Forward-pass state needed by [`Sequential::backward`].
#[derive(Debug)]
pub struct Tape(Vec<Option<Cache>>);

/// Gradients laid out exactly like the network parameters.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Vec<Vec<f32>>>);

impl Gradients {
    pub fn flat(&self) -> Vec<f32> {
        self.0.iter().flatten().flatten().copied().collect()
    }
}

impl Sequential {
    pub fn new(specs: Vec<LayerSpec>, rng: &mut Rng) -> Result<Self> {
        check_chain(&specs)?;
        let params = specs.iter().map(|s| s.init_params(rng)).collect();
        Ok(Self { specs, params })
    }

    /// Rebuilds a network from stored parameters, validating every shape.
    pub fn from_params(specs: Vec<LayerSpec>, params: Vec<Vec<Vec<f32>>>) -> Result<Self> {
        check_chain(&specs)?;
        if params.len() != specs.len() {
            return Err(Error::consistency("parameter list does not match layer count"));
        }
        for (i, (spec, p)) in specs.iter().zip(&params).enumerate() {
            let shapes = spec.param_shapes();
            if shapes.len() != p.len()
                || shapes.iter().zip(p).any(|((_, s), v)| s.iter().product::<usize>() != v.len())
            {
                return Err(Error::consistency(format!("layer {i}: parameter shapes do not match {spec:?}")));
            }
        }
        Ok(Self { specs, params })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_width(&self) -> usize {
        self.specs[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.specs.last().expect("non-empty").output_width()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(Vec::len).sum()
    }

    pub fn forward(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        let mut it = self.specs.iter().zip(&self.params);
        let (spec, p) = it.next().expect("non-empty");
        let mut h = layers::forward(spec, p, x, false).0;
        for (spec, p) in it {
            h = layers::forward(spec, p, h.view(), false).0;
        }
        h
    }

    pub fn forward_train(&self, x: ArrayView2<'_, f32>) -> (Array2<f32>, Tape) {
        let mut tape = Vec::with_capacity(self.specs.len());
        let mut h = x.to_owned();
        for (spec, p) in self.specs.iter().zip(&self.params) {
            let (y, cache) = layers::forward(spec, p, h.view(), true);
            tape.push(cache);
            h = y;
        }
        (h, Tape(tape))
    }

    /// Backpropagates `grad_out`; the input gradient is only materialized when asked for.
    pub fn backward(&self, tape: Tape, grad_out: Array2<f32>, need_input_grad: bool) -> (Option<Array2<f32>>, Gradients) {
        let mut grads: Vec<Vec<Vec<f32>>> =
            self.params.iter().map(|p| p.iter().map(|t| vec![0.0; t.len()]).collect()).collect();
        let mut g = grad_out;
        let n = self.specs.len();
        for (i, cache) in tape.0.into_iter().enumerate().rev() {
            let cache = cache.expect("tape recorded with keep=true");
            let want = i > 0 || need_input_grad;
            match layers::backward(&self.specs[i], &self.params[i], cache, g, &mut grads[i], want) {
                Some(next) => g = next,
                None => {
                    debug_assert_eq!(i, 0, "gradient chain cut at layer {i} of {n}");
                    return (None, Gradients(grads));
                }
            }
        }
        (Some(g), Gradients(grads))
    }

    pub fn params(&self) -> &[Vec<Vec<f32>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Vec<f32>>] {
        &mut self.params
    }

    /// `(name, shape, values)` per trainable tensor, named `layers.{i}.{weight|bias}`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for (i, (spec, p)) in self.specs.iter().zip(&self.params).enumerate() {
            for ((name, shape), values) in spec.param_shapes().into_iter().zip(p) {
                out.push((format!("layers.{i}.{name}"), shape, values.as_slice()));
            }
        }
        out
    }

    pub(crate) fn write_to(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (name, shape, values) in self.named_tensors() {
            ckpt.insert(format!("{prefix}{name}"), shape, values.to_vec());
        }
    }

    pub(crate) fn read_from(ckpt: &Checkpoint, prefix: &str, specs: Vec<LayerSpec>) -> Result<Self> {
        let mut params = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let mut layer = Vec::new();
            for (name, shape) in spec.param_shapes() {
                let key = format!("{prefix}layers.{i}.{name}");
                let (stored_shape, values) = ckpt.tensor(&key)?;
                if stored_shape != shape.as_slice() {
                    return Err(Error::consistency(format!("{key}: stored shape {stored_shape:?}, expected {shape:?}")));
                }
                layer.push(values.to_vec());
            }
            params.push(layer);
        }
        Self::from_params(specs, params)
    }
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::argument("network needs at least one layer"));
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].output_width() != pair[1].input_width() {
            return Err(Error::consistency(format!(
                "layer {i} emits {} features but layer {} expects {}",
                pair[0].output_width(),
                i + 1,
                pair[1].input_width()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<Vec<f32>>>,
    v: Vec<Vec<Vec<f32>>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, net: &Sequential) -> Self {
        let zeros: Vec<Vec<Vec<f32>>> =
            net.params.iter().map(|p| p.iter().map(|t| vec![0.0; t.len()]).collect()).collect();
        Self { cfg, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, net: &mut Sequential, grads: &Gradients) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let step = lr * c2.sqrt() / c1;
        for (((p, g), m), v) in net.params.iter_mut().flatten().zip(grads.0.iter().flatten()).zip(self.m.iter_mut().flatten()).zip(self.v.iter_mut().flatten()) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::Array2;

    fn micro_net() -> Sequential {
        let specs = vec![
            LayerSpec::Conv2d { input: (4, 4, 1), filters: 2, kernel: 3, padding: 1 },
            LayerSpec::Relu { width: 32 },
            LayerSpec::MaxPool2d { input: (4, 4, 2) },
            LayerSpec::Dense { inputs: 8, outputs: 2 },
        ];
        Sequential::new(specs, &mut seed::rng_for(3, "micro")).unwrap()
    }

    #[test]
    fn rejects_broken_chain() {
        let specs = vec![LayerSpec::Dense { inputs: 4, outputs: 3 }, LayerSpec::Dense { inputs: 4, outputs: 2 }];
        assert!(Sequential::new(specs, &mut seed::rng_for(0, "x")).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = micro_net();
        let x = Array2::from_shape_fn((2, 16), |(i, j)| ((i * 16 + j) as f32 * 0.37).sin().abs());
        // loss = sum(out * c) for fixed c
        let c = Array2::from_shape_fn((2, 2), |(i, j)| 1.0 + i as f32 - 0.5 * j as f32);
        let loss = |x: &Array2<f32>| -> f64 { (&net.forward(x.view()) * &c).sum() as f64 };
        let (_, tape) = net.forward_train(x.view());
        let (gx, _) = net.backward(tape, c.clone(), true);
        let gx = gx.unwrap();
        let h = 1e-3f32;
        for idx in [(0, 0), (0, 5), (1, 10), (1, 15)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            assert!((fd - gx[idx] as f64).abs() < 2e-3, "{idx:?}: fd {fd} vs {}", gx[idx]);
        }
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut net = Sequential::new(vec![LayerSpec::Dense { inputs: 3, outputs: 1 }], &mut seed::rng_for(1, "q")).unwrap();
        let x = Array2::from_shape_fn((8, 3), |(i, j)| (i as f32 - 3.5) * (j as f32 + 1.0) / 4.0);
        let target = x.dot(&ndarray::array![[0.5f32], [-1.0], [2.0]]);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &net);
        let mse = |net: &Sequential| (&net.forward(x.view()) - &target).mapv(|v| v * v).mean().unwrap();
        let before = mse(&net);
        for _ in 0..300 {
            let (y, tape) = net.forward_train(x.view());
            let g = (&y - &target) * (2.0 / 8.0);
            let (_, grads) = net.backward(tape, g, false);
            opt.step(&mut net, &grads);
        }
        assert!(mse(&net) < before * 1e-3);
    }
}
