//! Forward evaluation with a tape of cached activations, and the matching
//! vector-Jacobian backward pass.
//!
//! Internally the convolutional pipeline runs NHWC; the public API is NCHW.
//! Convolutions are im2col + GEMM, so the heavy lifting is threaded dgemm.

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::derive_seed;

use super::{ForwardMode, Layer, Network, ParameterVector};

#[derive(Debug, Clone)]
pub(crate) enum Act {
    Conv(Array4<f64>), // [B, H, W, C]
    Flat(Array2<f64>), // [B, D]
}

impl Act {
    fn iter_all(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            Act::Conv(a) => Box::new(a.iter()),
            Act::Flat(a) => Box::new(a.iter()),
        }
    }

    fn conv(&self) -> &Array4<f64> {
        match self {
            Act::Conv(a) => a,
            Act::Flat(_) => panic!("expected conv activation"),
        }
    }

    fn flat(&self) -> &Array2<f64> {
        match self {
            Act::Flat(a) => a,
            Act::Conv(_) => panic!("expected flat activation"),
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    None,
    Im2col(Array2<f64>),
    PoolIdx(Array4<u8>),
    Mask(Act),
}

/// Everything one forward pass produced: per-layer activations, caches for
/// the backward pass, raw pre-softmax scores, and the probability rows.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    acts: Vec<Act>,
    caches: Vec<LayerCache>,
    /// Pre-softmax scores (after `logit_scale`), retrievable for auditing.
    pub logits: Array2<f64>,
    /// Softmax rows; each row is nonnegative and sums to 1.
    pub probs: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_len(&self) -> usize {
        self.probs.len_of(Axis(0))
    }
}

/// Gradients produced by [`Network::backward`]; `input` is NCHW like the
/// forward input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Option<Array4<f64>>,
    pub params: Option<ParameterVector>,
}

impl Network {
    /// Run the network on an NCHW batch. Pure given `(theta, x, mode, seed)`.
    pub fn forward(
        &self,
        theta: &ParameterVector,
        x: &Array4<f64>,
        mode: ForwardMode,
        seed: u64,
    ) -> Result<ForwardTrace> {
        if theta.len() != self.param_len() {
            return Err(Error::Argument(format!(
                "theta has length {}, architecture `{}` expects {}",
                theta.len(),
                self.arch_id,
                self.param_len()
            )));
        }
        let (c, h, w) = self.input_shape;
        let dims = x.dim();
        if dims.1 != c || dims.2 != h || dims.3 != w {
            return Err(Error::Argument(format!(
                "input shape {:?} does not match architecture input {:?}",
                dims, self.input_shape
            )));
        }
        // NCHW -> NHWC
        let nhwc = x.view().permuted_axes([0, 2, 3, 1]).as_standard_layout().to_owned();
        let mut acts: Vec<Act> = vec![Act::Conv(nhwc)];
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        let mut param_cursor = ParamCursor::new(theta);

        for (li, layer) in self.layers.iter().enumerate() {
            let prev = acts.last().expect("nonempty");
            let (out, cache) = match layer {
                Layer::Conv3x3Same { in_ch, out_ch } => {
                    let (weight, bias) = param_cursor.next_pair(9 * in_ch, *out_ch);
                    let input = prev.conv();
                    let (b, hh, ww, _) = input.dim();
                    let cols = im2col_3x3(input);
                    let mut out_mat = cols.dot(&weight);
                    out_mat += &bias;
                    let out = out_mat
                        .into_shape_with_order((b, hh, ww, *out_ch))
                        .expect("conv reshape");
                    (Act::Conv(out), LayerCache::Im2col(cols))
                }
                Layer::Relu => {
                    let out = match prev {
                        Act::Conv(a) => Act::Conv(a.mapv(|v| v.max(0.0))),
                        Act::Flat(a) => Act::Flat(a.mapv(|v| v.max(0.0))),
                    };
                    (out, LayerCache::None)
                }
                Layer::MaxPool2 => {
                    let (out, idx) = maxpool2(prev.conv());
                    (Act::Conv(out), LayerCache::PoolIdx(idx))
                }
                Layer::Flatten => {
                    let a = prev.conv();
                    let (b, hh, ww, cc) = a.dim();
                    let flat = a
                        .view()
                        .into_shape_with_order((b, hh * ww * cc))
                        .expect("flatten view")
                        .to_owned();
                    (Act::Flat(flat), LayerCache::None)
                }
                Layer::Dense { in_dim, out_dim } => {
                    let (weight, bias) = param_cursor.next_pair(*in_dim, *out_dim);
                    let input = prev.flat();
                    let mut out = input.dot(&weight);
                    out += &bias;
                    (Act::Flat(out), LayerCache::None)
                }
                Layer::Dropout { rate } => {
                    if mode.dropout_active() && *rate > 0.0 {
                        let mask = dropout_mask(prev, *rate, seed, li as u64);
                        let out = apply_mask(prev, &mask);
                        (out, LayerCache::Mask(mask))
                    } else {
                        (prev.clone(), LayerCache::None)
                    }
                }
            };
            ensure_finite(&layer_name(layer, li), out.iter_all())?;
            acts.push(out);
            caches.push(cache);
        }

        let raw = acts.last().expect("nonempty").flat();
        let logits = if self.logit_scale == 1.0 { raw.clone() } else { raw * self.logit_scale };
        let probs = softmax_rows(&logits);
        ensure_finite("softmax", probs.iter())?;
        Ok(ForwardTrace { acts, caches, logits, probs })
    }

    /// Probability rows only.
    pub fn forward_probs(
        &self,
        theta: &ParameterVector,
        x: &Array4<f64>,
        mode: ForwardMode,
        seed: u64,
    ) -> Result<Array2<f64>> {
        Ok(self.forward(theta, x, mode, seed)?.probs)
    }

    /// Vector-Jacobian product from a gradient with respect to the
    /// probability rows, through softmax and every layer, down to the input
    /// and/or the flat parameter vector.
    pub fn backward(
        &self,
        theta: &ParameterVector,
        trace: &ForwardTrace,
        dprobs: &Array2<f64>,
        want_input: bool,
        want_params: bool,
    ) -> Result<Gradients> {
        if dprobs.dim() != trace.probs.dim() {
            return Err(Error::Argument("dprobs shape mismatch".into()));
        }
        let mut dcur = Act::Flat(softmax_vjp(&trace.probs, dprobs, self.logit_scale));
        let mut dparams = if want_params { Some(vec![0.0; self.param_len()]) } else { None };

        // Walk parameter offsets once, in forward order, so backward can
        // index them per layer.
        let mut offsets = Vec::with_capacity(self.layers.len());
        {
            let mut cursor = 0usize;
            for layer in &self.layers {
                offsets.push(cursor);
                cursor += match layer {
                    Layer::Conv3x3Same { in_ch, out_ch } => 9 * in_ch * out_ch + out_ch,
                    Layer::Dense { in_dim, out_dim } => in_dim * out_dim + out_dim,
                    _ => 0,
                };
            }
        }

        for li in (0..self.layers.len()).rev() {
            let need_dx = li > 0 || want_input;
            let input_act = &trace.acts[li];
            let output_act = &trace.acts[li + 1];
            dcur = match &self.layers[li] {
                Layer::Conv3x3Same { in_ch, out_ch } => {
                    let dy = dcur.conv();
                    let (b, hh, ww, _) = dy.dim();
                    let dy_mat = dy
                        .view()
                        .into_shape_with_order((b * hh * ww, *out_ch))
                        .expect("conv grad reshape");
                    let cols = match &trace.caches[li] {
                        LayerCache::Im2col(c) => c,
                        _ => unreachable!("conv cache"),
                    };
                    if let Some(grad) = dparams.as_mut() {
                        let dw = cols.t().dot(&dy_mat);
                        let off = offsets[li];
                        let wlen = 9 * in_ch * out_ch;
                        grad[off..off + wlen]
                            .iter_mut()
                            .zip(dw.iter())
                            .for_each(|(g, d)| *g += d);
                        let db = dy_mat.sum_axis(Axis(0));
                        grad[off + wlen..off + wlen + out_ch]
                            .iter_mut()
                            .zip(db.iter())
                            .for_each(|(g, d)| *g += d);
                    }
                    if need_dx {
                        let off = offsets[li];
                        let weight = ArrayView2::from_shape(
                            (9 * in_ch, *out_ch),
                            &theta.as_slice()[off..off + 9 * in_ch * out_ch],
                        )
                        .expect("weight view");
                        let dcols = dy_mat.dot(&weight.t());
                        Act::Conv(col2im_3x3(&dcols, b, hh, ww, *in_ch))
                    } else {
                        Act::Flat(Array2::zeros((0, 0)))
                    }
                }
                Layer::Relu => elementwise_mask_grad(&dcur, output_act),
                Layer::MaxPool2 => {
                    let idx = match &trace.caches[li] {
                        LayerCache::PoolIdx(i) => i,
                        _ => unreachable!("pool cache"),
                    };
                    Act::Conv(maxpool2_backward(dcur.conv(), idx, input_act.conv().dim()))
                }
                Layer::Flatten => {
                    let (b, hh, ww, cc) = input_act.conv().dim();
                    let d = dcur
                        .flat()
                        .view()
                        .into_shape_with_order((b, hh, ww, cc))
                        .expect("unflatten grad")
                        .to_owned();
                    Act::Conv(d)
                }
                Layer::Dense { in_dim, out_dim } => {
                    let dy = dcur.flat();
                    if let Some(grad) = dparams.as_mut() {
                        let dw = input_act.flat().t().dot(dy);
                        let off = offsets[li];
                        let wlen = in_dim * out_dim;
                        grad[off..off + wlen]
                            .iter_mut()
                            .zip(dw.iter())
                            .for_each(|(g, d)| *g += d);
                        let db = dy.sum_axis(Axis(0));
                        grad[off + wlen..off + wlen + out_dim]
                            .iter_mut()
                            .zip(db.iter())
                            .for_each(|(g, d)| *g += d);
                    }
                    if need_dx {
                        let off = offsets[li];
                        let weight = ArrayView2::from_shape(
                            (*in_dim, *out_dim),
                            &theta.as_slice()[off..off + in_dim * out_dim],
                        )
                        .expect("weight view");
                        Act::Flat(dy.dot(&weight.t()))
                    } else {
                        Act::Flat(Array2::zeros((0, 0)))
                    }
                }
                Layer::Dropout { .. } => match &trace.caches[li] {
                    LayerCache::Mask(mask) => apply_mask_to_grad(&dcur, mask),
                    LayerCache::None => dcur,
                    _ => unreachable!("dropout cache"),
                },
            };
        }

        let input = if want_input {
            // NHWC -> NCHW
            let g = dcur.conv().view().permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned();
            ensure_finite("input gradient", g.iter())?;
            Some(g)
        } else {
            None
        };
        let params = dparams.map(|g| {
            ensure_finite("parameter gradient", g.iter()).map(|_| ParameterVector::new(g))
        });
        let params = match params {
            Some(r) => Some(r?),
            None => None,
        };
        Ok(Gradients { input, params })
    }
}

fn layer_name(layer: &Layer, index: usize) -> String {
    let kind = match layer {
        Layer::Conv3x3Same { .. } => "conv",
        Layer::Relu => "relu",
        Layer::MaxPool2 => "maxpool",
        Layer::Flatten => "flatten",
        Layer::Dense { .. } => "dense",
        Layer::Dropout { .. } => "dropout",
    };
    format!("{kind}@{index}")
}

fn ensure_finite<'a>(context: &str, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::numeric(context, format!("non-finite value {v}")));
        }
    }
    Ok(())
}

struct ParamCursor<'a> {
    theta: &'a ParameterVector,
    offset: usize,
}

impl<'a> ParamCursor<'a> {
    fn new(theta: &'a ParameterVector) -> Self {
        ParamCursor { theta, offset: 0 }
    }

    /// Next (weight, bias) pair as views: weight [rows, cols], bias [cols].
    fn next_pair(&mut self, rows: usize, cols: usize) -> (ArrayView2<'a, f64>, Array1<f64>) {
        let wlen = rows * cols;
        let weight =
            ArrayView2::from_shape((rows, cols), &self.theta.as_slice()[self.offset..self.offset + wlen])
                .expect("weight view");
        let bias = Array1::from_iter(
            self.theta.as_slice()[self.offset + wlen..self.offset + wlen + cols].iter().copied(),
        );
        self.offset += wlen + cols;
        (weight, bias)
    }
}

/// Row-major [B*H*W, 9*C] patch matrix for a 3x3 SAME convolution; column
/// order is (ki, kj, c) so channel lanes stay contiguous.
fn im2col_3x3(x: &Array4<f64>) -> Array2<f64> {
    let (b, h, w, c) = x.dim();
    let mut cols = Array2::zeros((b * h * w, 9 * c));
    let xs = x.as_slice().expect("contiguous activation");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    for bi in 0..b {
        for i in 0..h {
            for ki in 0..3usize {
                let ii = i as isize + ki as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                let ii = ii as usize;
                for j in 0..w {
                    let row_off = ((bi * h + i) * w + j) * 9 * c;
                    for kj in 0..3usize {
                        let jj = j as isize + kj as isize - 1;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + ii) * w + jj as usize) * c;
                        let dst = row_off + (ki * 3 + kj) * c;
                        cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_3x3`]: scatter-add patch gradients back to NHWC.
fn col2im_3x3(dcols: &Array2<f64>, b: usize, h: usize, w: usize, c: usize) -> Array4<f64> {
    let mut dx = Array4::zeros((b, h, w, c));
    let ds = dcols.as_slice().expect("contiguous dcols");
    let xs = dx.as_slice_mut().expect("contiguous dx");
    for bi in 0..b {
        for i in 0..h {
            for ki in 0..3usize {
                let ii = i as isize + ki as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                let ii = ii as usize;
                for j in 0..w {
                    let row_off = ((bi * h + i) * w + j) * 9 * c;
                    for kj in 0..3usize {
                        let jj = j as isize + kj as isize - 1;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + ii) * w + jj as usize) * c;
                        let src = row_off + (ki * 3 + kj) * c;
                        for t in 0..c {
                            xs[dst + t] += ds[src + t];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, Array4<u8>) {
    let (b, h, w, c) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((b, oh, ow, c));
    let mut idx = Array4::<u8>::zeros((b, oh, ow, c));
    let xs = x.as_slice().expect("contiguous activation");
    let os = out.as_slice_mut().expect("contiguous out");
    let is = idx.as_slice_mut().expect("contiguous idx");
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let dst = ((bi * oh + i) * ow + j) * c;
                let s00 = ((bi * h + 2 * i) * w + 2 * j) * c;
                os[dst..dst + c].copy_from_slice(&xs[s00..s00 + c]);
                for (code, di, dj) in [(1u8, 0usize, 1usize), (2, 1, 0), (3, 1, 1)] {
                    let src = ((bi * h + 2 * i + di) * w + 2 * j + dj) * c;
                    for t in 0..c {
                        if xs[src + t] > os[dst + t] {
                            os[dst + t] = xs[src + t];
                            is[dst + t] = code;
                        }
                    }
                }
            }
        }
    }
    (out, idx)
}

fn maxpool2_backward(
    dy: &Array4<f64>,
    idx: &Array4<u8>,
    in_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (b, h, w, c) = in_dim;
    let (_, oh, ow, _) = dy.dim();
    let mut dx = Array4::zeros((b, h, w, c));
    let ds = dy.as_slice().expect("contiguous dy");
    let is = idx.as_slice().expect("contiguous idx");
    let xs = dx.as_slice_mut().expect("contiguous dx");
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let src = ((bi * oh + i) * ow + j) * c;
                for t in 0..c {
                    let code = is[src + t] as usize;
                    let (di, dj) = (code / 2, code % 2);
                    let dst = ((bi * h + 2 * i + di) * w + 2 * j + dj) * c + t;
                    xs[dst] += ds[src + t];
                }
            }
        }
    }
    dx
}

fn dropout_mask(act: &Act, rate: f64, seed: u64, layer_index: u64) -> Act {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6472_6f70, layer_index));
    let mut fill = |len: usize| -> Vec<f64> {
        (0..len).map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 }).collect()
    };
    match act {
        Act::Conv(a) => {
            let dim = a.dim();
            Act::Conv(Array4::from_shape_vec(dim, fill(a.len())).expect("mask shape"))
        }
        Act::Flat(a) => {
            let dim = a.dim();
            Act::Flat(Array2::from_shape_vec(dim, fill(a.len())).expect("mask shape"))
        }
    }
}

fn apply_mask(act: &Act, mask: &Act) -> Act {
    match (act, mask) {
        (Act::Conv(a), Act::Conv(m)) => Act::Conv(a * m),
        (Act::Flat(a), Act::Flat(m)) => Act::Flat(a * m),
        _ => unreachable!("mask shape kind"),
    }
}

fn apply_mask_to_grad(grad: &Act, mask: &Act) -> Act {
    apply_mask(grad, mask)
}

/// ReLU backward: pass gradient where the *output* was positive.
fn elementwise_mask_grad(grad: &Act, output: &Act) -> Act {
    match (grad, output) {
        (Act::Conv(g), Act::Conv(o)) => {
            let mut d = g.clone();
            d.zip_mut_with(o, |gv, ov| {
                if *ov <= 0.0 {
                    *gv = 0.0;
                }
            });
            Act::Conv(d)
        }
        (Act::Flat(g), Act::Flat(o)) => {
            let mut d = g.clone();
            d.zip_mut_with(o, |gv, ov| {
                if *ov <= 0.0 {
                    *gv = 0.0;
                }
            });
            Act::Flat(d)
        }
        _ => unreachable!("relu act kind"),
    }
}

/// Row-wise softmax with the log-sum-exp shift by the row max.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// d(loss)/d(logits) from d(loss)/d(probs) for row-wise softmax:
/// `dz_k = scale * p_k * (dp_k - sum_j dp_j p_j)`.
fn softmax_vjp(probs: &Array2<f64>, dprobs: &Array2<f64>, scale: f64) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for ((mut orow, prow), dprow) in
        out.rows_mut().into_iter().zip(probs.rows()).zip(dprobs.rows())
    {
        let dot: f64 = prow.iter().zip(dprow.iter()).map(|(p, d)| p * d).sum();
        for ((o, p), d) in orow.iter_mut().zip(prow.iter()).zip(dprow.iter()) {
            *o = scale * p * (d - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_cnn, build_mlp};
    use crate::numeric::{central_difference_grad, ln_clamped, rel_error_inf};
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;
    use rand::Rng;

    fn random_input(
        rng: &mut ChaCha8Rng,
        n: usize,
        shape: (usize, usize, usize),
    ) -> Array4<f64> {
        let (c, h, w) = shape;
        let mut x = Array4::zeros((n, c, h, w));
        for v in x.iter_mut() {
            *v = rng.random_range(0.1..0.9);
        }
        x
    }

    #[test]
    fn zero_theta_gives_uniform_rows() {
        let net = build_cnn((1, 8, 8), 5, None).unwrap();
        let theta = ParameterVector::zeros(net.param_len());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_input(&mut rng, 3, (1, 8, 8));
        let probs = net.forward_probs(&theta, &x, ForwardMode::EvalFrozen, 0).unwrap();
        for v in probs.iter() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let net = build_cnn((1, 8, 8), 7, None).unwrap();
        let theta = net.init_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(&mut rng, 4, (1, 8, 8));
        let probs = net.forward_probs(&theta, &x, ForwardMode::EvalFrozen, 0).unwrap();
        for row in probs.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn eval_frozen_is_bitwise_repeatable() {
        let net = build_mlp((1, 1, 6), &[8], 3, Some(0.5)).unwrap();
        let theta = net.init_params(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_input(&mut rng, 2, (1, 1, 6));
        let a = net.forward_probs(&theta, &x, ForwardMode::EvalFrozen, 1).unwrap();
        let b = net.forward_probs(&theta, &x, ForwardMode::EvalFrozen, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_stochastic_depends_on_seed_but_is_reproducible() {
        let net = build_mlp((1, 1, 6), &[16], 3, Some(0.5)).unwrap();
        let theta = net.init_params(11);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_input(&mut rng, 2, (1, 1, 6));
        let a1 = net.forward_probs(&theta, &x, ForwardMode::EvalStochastic, 7).unwrap();
        let a2 = net.forward_probs(&theta, &x, ForwardMode::EvalStochastic, 7).unwrap();
        let b = net.forward_probs(&theta, &x, ForwardMode::EvalStochastic, 8).unwrap();
        assert_eq!(a1, a2);
        assert!(a1 != b);
    }

    /// Sum over the batch of -ln p[y]; the gradient entry point used by the
    /// whole crate.
    fn nll_dprobs(probs: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
        let mut loss = 0.0;
        let mut d = Array2::zeros(probs.dim());
        for (i, &y) in labels.iter().enumerate() {
            let p = probs[[i, y]];
            loss -= ln_clamped(p);
            d[[i, y]] = -1.0 / p.max(crate::numeric::PROB_FLOOR);
        }
        (loss, d)
    }

    #[test]
    fn cnn_gradients_match_central_differences() {
        // tiny conv net exercising every layer kind, small enough for a full
        // finite-difference sweep over the parameters
        let net = crate::nn::Network::new(
            "tiny-conv",
            (1, 8, 8),
            4,
            vec![
                Layer::Conv3x3Same { in_ch: 1, out_ch: 2 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv3x3Same { in_ch: 2, out_ch: 3 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Dense { in_dim: 12, out_dim: 6 },
                Layer::Relu,
                Layer::Dense { in_dim: 6, out_dim: 4 },
            ],
        )
        .unwrap();
        let theta = net.init_params(20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_input(&mut rng, 2, (1, 8, 8));
        let labels = [1usize, 3usize];

        let trace = net.forward(&theta, &x, ForwardMode::EvalFrozen, 0).unwrap();
        let (_, dprobs) = nll_dprobs(&trace.probs, &labels);
        let grads = net.backward(&theta, &trace, &dprobs, true, true).unwrap();

        // input gradient oracle
        let flat_x: Vec<f64> = x.iter().copied().collect();
        let loss_of_input = |v: &[f64]| {
            let xa = Array4::from_shape_vec(x.dim(), v.to_vec()).unwrap();
            let probs = net.forward_probs(&theta, &xa, ForwardMode::EvalFrozen, 0).unwrap();
            nll_dprobs(&probs, &labels).0
        };
        let got: Vec<f64> = grads.input.as_ref().unwrap().iter().copied().collect();
        compare_off_kink(&got, loss_of_input, &flat_x, "input grad");

        // parameter gradient oracle
        let loss_of_params = |v: &[f64]| {
            let th = ParameterVector::new(v.to_vec());
            let probs = net.forward_probs(&th, &x, ForwardMode::EvalFrozen, 0).unwrap();
            nll_dprobs(&probs, &labels).0
        };
        let gotp = grads.params.as_ref().unwrap().as_slice().to_vec();
        compare_off_kink(&gotp, loss_of_params, theta.as_slice(), "param grad");
    }

    /// Compare against central differences at two step sizes, scoring only
    /// coordinates where the oracle itself converges (a probe that crosses a
    /// ReLU kink or flips a pool argmax makes finite differences invalid
    /// there, not the backward pass).
    fn compare_off_kink(got: &[f64], mut f: impl FnMut(&[f64]) -> f64, at: &[f64], what: &str) {
        let fd1 = central_difference_grad(&mut f, at, 1e-5);
        let fd2 = central_difference_grad(&mut f, at, 2e-5);
        let scale = fd1.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        let mut checked = 0usize;
        let mut worst = 0.0f64;
        for i in 0..got.len() {
            if (fd1[i] - fd2[i]).abs() / scale > 1e-7 {
                continue; // oracle did not converge here
            }
            checked += 1;
            worst = worst.max((got[i] - fd1[i]).abs() / scale);
        }
        assert!(
            checked * 10 >= got.len() * 9,
            "{what}: oracle converged on only {checked}/{} coordinates",
            got.len()
        );
        assert!(worst < 1e-6, "{what}: rel error {worst} over {checked} coordinates");
    }

    #[test]
    fn dropout_gradients_match_central_differences_under_fixed_seed() {
        let net = build_mlp((1, 1, 5), &[7], 3, Some(0.4)).unwrap();
        let theta = net.init_params(33);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = random_input(&mut rng, 2, (1, 1, 5));
        let labels = [0usize, 2usize];
        let seed = 99;

        let trace = net.forward(&theta, &x, ForwardMode::EvalStochastic, seed).unwrap();
        let (_, dprobs) = nll_dprobs(&trace.probs, &labels);
        let grads = net.backward(&theta, &trace, &dprobs, true, true).unwrap();
        let fd = central_difference_grad(
            |v| {
                let th = ParameterVector::new(v.to_vec());
                let probs =
                    net.forward_probs(&th, &x, ForwardMode::EvalStochastic, seed).unwrap();
                nll_dprobs(&probs, &labels).0
            },
            theta.as_slice(),
            1e-5,
        );
        let gotp = grads.params.as_ref().unwrap().as_slice();
        assert!(rel_error_inf(gotp, &fd) < 1e-6);
    }

    #[test]
    fn logit_scale_multiplies_scores() {
        let net = build_mlp((1, 1, 4), &[6], 3, None).unwrap();
        let scaled = net.with_logit_scale(1000.0);
        let theta = net.init_params(50);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x = random_input(&mut rng, 2, (1, 1, 4));
        let base = net.forward(&theta, &x, ForwardMode::EvalFrozen, 0).unwrap();
        let hot = scaled.forward(&theta, &x, ForwardMode::EvalFrozen, 0).unwrap();
        for (a, b) in base.logits.iter().zip(hot.logits.iter()) {
            assert_abs_diff_eq!(*b, a * 1000.0, epsilon = 1e-9);
        }
        // saturated rows become (numerically) one-hot
        for row in hot.probs.rows() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(max > 1.0 - 1e-9);
        }
    }
}
