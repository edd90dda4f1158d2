//! Layer kernels on flat NHWC activations.
//!
//! Every layer consumes and produces a `[batch, features]` matrix. Spatial layers
//! interpret a row as an `h * w * c` image stored height-major, channels last.

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// Spatial geometry `(height, width, channels)`.
pub type Shape3 = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// Square kernel, stride 1, zero padding on every side.
    Conv2d { input: Shape3, filters: usize, kernel: usize, padding: usize },
    /// 2x2 window, stride 2.
    MaxPool2d { input: Shape3 },
    Relu { width: usize },
}

impl LayerSpec {
    pub fn input_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { input: (h, w, c), .. } | LayerSpec::MaxPool2d { input: (h, w, c) } => h * w * c,
            LayerSpec::Relu { width } => width,
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv2d { .. } | LayerSpec::MaxPool2d { .. } => {
                let (h, w, c) = self.output_shape().expect("spatial");
                h * w * c
            }
            LayerSpec::Relu { width } => width,
        }
    }

    /// Output geometry of spatial layers.
    pub fn output_shape(&self) -> Option<Shape3> {
        match *self {
            LayerSpec::Conv2d { input: (h, w, _), filters, kernel, padding } => {
                Some((h + 2 * padding + 1 - kernel, w + 2 * padding + 1 - kernel, filters))
            }
            LayerSpec::MaxPool2d { input: (h, w, c) } => Some((h / 2, w / 2, c)),
            _ => None,
        }
    }

    /// `(name, shape)` of each trainable tensor.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![("weight", vec![inputs, outputs]), ("bias", vec![outputs])],
            LayerSpec::Conv2d { input: (_, _, c), filters, kernel, .. } => {
                vec![("weight", vec![kernel * kernel * c, filters]), ("bias", vec![filters])]
            }
            _ => Vec::new(),
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<Vec<f32>> {
        let (fan_in, fan_out) = match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
            LayerSpec::Conv2d { input: (_, _, c), filters, kernel, .. } => {
                (kernel * kernel * c, kernel * kernel * filters)
            }
            _ => return Vec::new(),
        };
        let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        self.param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                if name == "bias" {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            })
            .collect()
    }
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug)]
pub(crate) enum Cache {
    Input(Array2<f32>),
    Columns(Array2<f32>),
    Argmax(Vec<u32>),
    Output(Array2<f32>),
}

fn mat<'a>(data: &'a [f32], rows: usize, cols: usize) -> ArrayView2<'a, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("parameter shape")
}

pub(crate) fn forward(spec: &LayerSpec, params: &[Vec<f32>], x: ArrayView2<'_, f32>, keep: bool) -> (Array2<f32>, Option<Cache>) {
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            let w = mat(&params[0], inputs, outputs);
            let mut y = x.dot(&w);
            y += &ArrayView2::from_shape((1, outputs), &params[1][..]).expect("bias");
            (y, keep.then(|| Cache::Input(x.to_owned())))
        }
        LayerSpec::Conv2d { input, filters, kernel, padding } => {
            let (oh, ow, _) = spec.output_shape().expect("conv shape");
            let cols = im2col(x, input, kernel, padding, oh, ow);
            let w = mat(&params[0], kernel * kernel * input.2, filters);
            let mut y = cols.dot(&w);
            y += &ArrayView2::from_shape((1, filters), &params[1][..]).expect("bias");
            let batch = x.nrows();
            let y = y.into_shape_with_order((batch, oh * ow * filters)).expect("nhwc");
            (y, keep.then_some(Cache::Columns(cols)))
        }
        LayerSpec::MaxPool2d { input } => {
            let (y, arg) = maxpool(x, input);
            (y, keep.then_some(Cache::Argmax(arg)))
        }
        LayerSpec::Relu { .. } => {
            let y = x.mapv(|v| v.max(0.0));
            let cache = keep.then(|| Cache::Output(y.clone()));
            (y, cache)
        }
    }
}

/// Returns the input gradient (when requested) and accumulates parameter gradients into `grads`.
pub(crate) fn backward(
    spec: &LayerSpec,
    params: &[Vec<f32>],
    cache: Cache,
    grad_out: Array2<f32>,
    grads: &mut [Vec<f32>],
    need_input_grad: bool,
) -> Option<Array2<f32>> {
    match (*spec, cache) {
        (LayerSpec::Dense { inputs, outputs }, Cache::Input(x)) => {
            let mut gw = Array2::<f32>::zeros((inputs, outputs));
            general_mat_mul(1.0, &x.t(), &grad_out, 0.0, &mut gw);
            add_into(&mut grads[0], gw.as_slice().expect("contiguous"));
            add_into(&mut grads[1], grad_out.sum_axis(Axis(0)).as_slice().expect("contiguous"));
            need_input_grad.then(|| grad_out.dot(&mat(&params[0], inputs, outputs).t()))
        }
        (LayerSpec::Conv2d { input, filters, kernel, padding }, Cache::Columns(cols)) => {
            let (oh, ow, _) = spec.output_shape().expect("conv shape");
            let batch = grad_out.nrows();
            let g = grad_out.into_shape_with_order((batch * oh * ow, filters)).expect("nhwc");
            let kk = kernel * kernel * input.2;
            let mut gw = Array2::<f32>::zeros((kk, filters));
            general_mat_mul(1.0, &cols.t(), &g, 0.0, &mut gw);
            add_into(&mut grads[0], gw.as_slice().expect("contiguous"));
            add_into(&mut grads[1], g.sum_axis(Axis(0)).as_slice().expect("contiguous"));
            need_input_grad.then(|| {
                let gcols = g.dot(&mat(&params[0], kk, filters).t());
                col2im(&gcols, batch, input, kernel, padding, oh, ow)
            })
        }
        (LayerSpec::MaxPool2d { input }, Cache::Argmax(arg)) => {
            need_input_grad.then(|| maxpool_backward(&grad_out, &arg, input))
        }
        (LayerSpec::Relu { .. }, Cache::Output(y)) => need_input_grad.then(|| {
            let mut g = grad_out;
            g.zip_mut_with(&y, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
            g
        }),
        (spec, _) => unreachable!("cache does not belong to layer {spec:?}"),
    }
}

fn add_into(acc: &mut [f32], g: &[f32]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn im2col(x: ArrayView2<'_, f32>, (h, w, c): Shape3, k: usize, pad: usize, oh: usize, ow: usize) -> Array2<f32> {
    let batch = x.nrows();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("contiguous");
    let kk = k * k * c;
    let mut cols = Array2::<f32>::zeros((batch * oh * ow, kk));
    let out = cols.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        let img = &xs[b * h * w * c..(b + 1) * h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[((b * oh + oy) * ow + ox) * kk..][..kk];
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let dst = (ky * k + kx) * c;
                        row[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(gcols: &Array2<f32>, batch: usize, (h, w, c): Shape3, k: usize, pad: usize, oh: usize, ow: usize) -> Array2<f32> {
    let kk = k * k * c;
    let gs = gcols.as_slice().expect("contiguous");
    let mut gx = Array2::<f32>::zeros((batch, h * w * c));
    let out = gx.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        let img = &mut out[b * h * w * c..(b + 1) * h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &gs[((b * oh + oy) * ow + ox) * kk..][..kk];
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * c;
                        let src = (ky * k + kx) * c;
                        add_into(&mut img[dst..dst + c], &row[src..src + c]);
                    }
                }
            }
        }
    }
    gx
}

fn maxpool(x: ArrayView2<'_, f32>, (h, w, c): Shape3) -> (Array2<f32>, Vec<u32>) {
    let batch = x.nrows();
    let (oh, ow) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("contiguous");
    let mut y = Array2::<f32>::zeros((batch, oh * ow * c));
    let mut arg = vec![0u32; batch * oh * ow * c];
    let ys = y.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        let base = b * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            let v = xs[base + i];
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    let o = (b * oh * ow) * c + (oy * ow + ox) * c + ch;
                    ys[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    (y, arg)
}

fn maxpool_backward(grad_out: &Array2<f32>, arg: &[u32], (h, w, c): Shape3) -> Array2<f32> {
    let batch = grad_out.nrows();
    let per_out = grad_out.ncols();
    let g = grad_out.as_standard_layout();
    let gs = g.as_slice().expect("contiguous");
    let mut gx = Array2::<f32>::zeros((batch, h * w * c));
    let out = gx.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        for j in 0..per_out {
            let o = b * per_out + j;
            out[b * h * w * c + arg[o] as usize] += gs[o];
        }
    }
    gx
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f32>) -> Array2<f32> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Pulls a probability-space gradient back through softmax:
/// `dL/dz_j = p_j * (g_j - sum_k p_k g_k)`.
pub fn softmax_backward(probs: &Array2<f32>, grad_probs: &Array2<f32>) -> Array2<f32> {
    let dot: Array1<f32> = (probs * grad_probs).sum_axis(Axis(1));
    let mut g = grad_probs - &dot.insert_axis(Axis(1));
    g *= probs;
    g
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn conv_shapes() {
        let spec = LayerSpec::Conv2d { input: (28, 28, 1), filters: 6, kernel: 5, padding: 2 };
        assert_eq!(spec.output_shape(), Some((28, 28, 6)));
        let spec = LayerSpec::Conv2d { input: (14, 14, 6), filters: 16, kernel: 5, padding: 0 };
        assert_eq!(spec.output_shape(), Some((10, 10, 16)));
        assert_eq!(LayerSpec::MaxPool2d { input: (10, 10, 16) }.output_width(), 400);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 3x3 single-channel input, 2x2 kernel, padding 1, two filters
        let spec = LayerSpec::Conv2d { input: (3, 3, 1), filters: 2, kernel: 2, padding: 1 };
        let w: Vec<f32> = vec![1.0, -1.0, 2.0, 0.5, 0.0, 1.0, -1.0, 3.0];
        let b = vec![0.1, -0.2];
        let x = Array2::from_shape_vec((1, 9), (1..=9).map(|v| v as f32).collect()).unwrap();
        let (y, _) = forward(&spec, &[w.clone(), b.clone()], x.view(), false);
        let (oh, ow, f) = spec.output_shape().unwrap();
        assert_eq!((oh, ow, f), (4, 4, 2));
        let px = |iy: isize, ix: isize| -> f32 {
            if (0..3).contains(&iy) && (0..3).contains(&ix) { x[[0, (iy * 3 + ix) as usize]] } else { 0.0 }
        };
        for oy in 0..4 {
            for ox in 0..4 {
                for fi in 0..2 {
                    let mut acc = b[fi];
                    for ky in 0..2 {
                        for kx in 0..2 {
                            acc += w[(ky * 2 + kx) * 2 + fi] * px(oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                        }
                    }
                    assert!((y[[0, (oy * 4 + ox) * 2 + fi]] - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = array![[1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 8.0, 0.0, 0.0, 1.0, 1.0, 9.0, 0.0, 1.0, 2.0]];
        let (y, arg) = maxpool(x.view(), (4, 4, 1));
        assert_eq!(y, array![[5.0, 8.0, 9.0, 2.0]]);
        let g = maxpool_backward(&array![[1.0, 2.0, 3.0, 4.0]], &arg, (4, 4, 1));
        assert_eq!(g[[0, 1]], 1.0);
        assert_eq!(g[[0, 7]], 2.0);
        assert_eq!(g[[0, 12]], 3.0);
        assert_eq!(g.sum(), 10.0);
    }

    #[test]
    fn softmax_rows_on_simplex() {
        let p = softmax_rows(&array![[1000.0f32, 1000.0], [0.0, -50.0]]);
        assert!((p[[0, 0]] - 0.5).abs() < 1e-6);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
