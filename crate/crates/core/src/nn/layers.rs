//! Per-sample layer kernels. Activations are planar `[channels, rows, cols]`
//! or flat `[n]`; batching happens one level up.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Maxpool {
        size: usize,
        stride: usize,
    },
    Fc {
        inputs: usize,
        outputs: usize,
    },
    Dropout {
        drop_prob: f64,
    },
    SoftmaxXent,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Conv { .. } => "conv",
            Self::Relu => "relu",
            Self::Maxpool { .. } => "maxpool",
            Self::Fc { .. } => "fc",
            Self::Dropout { .. } => "dropout",
            Self::SoftmaxXent => "softmax-xent",
        }
    }

    /// Weight and bias shapes, for layers that own parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Self::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            Self::Fc { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            Self::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            Self::Fc { inputs, .. } => inputs,
            _ => 0,
        }
    }

    /// Spatial geometry (kernel, stride, padding) for layers that resample.
    pub fn window(&self) -> Option<(usize, usize, usize)> {
        match *self {
            Self::Conv {
                kernel,
                stride,
                padding,
                ..
            } => Some((kernel, stride, padding)),
            Self::Maxpool { size, stride } => Some((size, stride, 0)),
            _ => None,
        }
    }

    /// Output shape for `input`, or a shape-mismatch error naming `index`.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            layer: index,
            kind: self.name(),
            expected,
            got: input.to_vec(),
        };
        match *self {
            Self::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = spatial(input).ok_or_else(|| mismatch(vec![in_channels, 0, 0]))?;
                if c != in_channels
                    || stride == 0
                    || kernel == 0
                    || h + 2 * padding < kernel
                    || w + 2 * padding < kernel
                {
                    return Err(mismatch(vec![in_channels, h, w]));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            Self::Maxpool { size, stride } => {
                let [c, h, w] = spatial(input).ok_or_else(|| mismatch(vec![0, size, size]))?;
                if size == 0 || stride == 0 || h < size || w < size {
                    return Err(mismatch(vec![c, size, size]));
                }
                Ok(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            Self::Fc { inputs, outputs } => {
                if input.iter().product::<usize>() != inputs {
                    return Err(mismatch(vec![inputs]));
                }
                Ok(vec![outputs])
            }
            Self::Dropout { drop_prob } => {
                if !(drop_prob > 0.0 && drop_prob < 1.0) {
                    return Err(Error::Config(format!(
                        "layer {index}: dropout probability {drop_prob} outside (0, 1)"
                    )));
                }
                Ok(input.to_vec())
            }
            Self::Relu | Self::SoftmaxXent => Ok(input.to_vec()),
        }
    }
}

fn spatial(shape: &[usize]) -> Option<[usize; 3]> {
    match *shape {
        [c, h, w] => Some([c, h, w]),
        _ => None,
    }
}

/// Per-layer data retained by a training forward pass.
#[derive(Clone, Debug)]
pub(crate) enum LayerCache<T> {
    Conv { cols: Vec<T> },
    Relu { active: Vec<bool> },
    Pool { argmax: Vec<u32> },
    Fc { input: Vec<T> },
    Dropout { mask: Vec<T> },
    Pass,
}

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], output: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        Self {
            c: input[0],
            h: input[1],
            w: input[2],
            k,
            stride,
            pad,
            oh: output[1],
            ow: output[2],
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for output position `o` along one axis and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let n = g.cols();
    let mut cols = vec![T::zero(); g.rows() * n];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    let src = &x[(c * g.h + iy) * g.w..];
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dst[oy * g.ow + ox] = src[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    let base = (c * g.h + iy) * g.w;
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dx[base + ix] = dx[base + ix] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
    x: &[T],
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(g, x);
    let (o, kk, n) = (bias.len(), g.rows(), g.cols());
    let mut y = vec![T::zero(); o * n];
    for (oc, b) in bias.iter().enumerate() {
        y[oc * n..(oc + 1) * n].fill(*b);
    }
    T::gemm(
        o,
        kk,
        n,
        T::one(),
        weight,
        kk,
        1,
        &cols,
        n,
        1,
        T::one(),
        &mut y,
        n,
        1,
    );
    (y, cols)
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    weight: &[T],
    cols: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    let (o, kk, n) = (dbias.len(), g.rows(), g.cols());
    T::gemm(
        o,
        n,
        kk,
        T::one(),
        dy,
        n,
        1,
        cols,
        1,
        n,
        T::one(),
        dweight,
        kk,
        1,
    );
    for (oc, db) in dbias.iter_mut().enumerate() {
        *db = *db + dy[oc * n..(oc + 1) * n].iter().copied().sum::<T>();
    }
    if !want_dx {
        return None;
    }
    let mut dcols = vec![T::zero(); kk * n];
    T::gemm(
        kk,
        o,
        n,
        T::one(),
        weight,
        1,
        kk,
        dy,
        n,
        1,
        T::zero(),
        &mut dcols,
        n,
        1,
    );
    let mut dx = vec![T::zero(); g.c * g.h * g.w];
    col2im(g, &dcols, &mut dx);
    Some(dx)
}

pub(crate) fn relu_forward<T: Scalar>(x: &mut [T]) -> Vec<bool> {
    x.iter_mut()
        .map(|v| {
            let on = *v > T::zero();
            if !on {
                *v = T::zero();
            }
            on
        })
        .collect()
}

pub(crate) fn relu_backward<T: Scalar>(active: &[bool], dy: &mut [T]) {
    for (d, &on) in dy.iter_mut().zip(active) {
        if !on {
            *d = T::zero();
        }
    }
}

/// Max pooling without padding. Ties resolve to the first position in scan order.
pub(crate) fn pool_forward<T: Scalar>(
    input: &[usize],
    output: &[usize],
    size: usize,
    stride: usize,
    x: &[T],
) -> (Vec<T>, Vec<u32>) {
    let (c, h, w) = (input[0], input[1], input[2]);
    let (oh, ow) = (output[1], output[2]);
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut at = 0usize;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                        if x[i] > best {
                            best = x[i];
                            at = i;
                        }
                    }
                }
                y.push(best);
                arg.push(at as u32);
            }
        }
    }
    (y, arg)
}

pub(crate) fn pool_backward<T: Scalar>(input_len: usize, argmax: &[u32], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &d) in argmax.iter().zip(dy) {
        dx[i as usize] = dx[i as usize] + d;
    }
    dx
}

pub(crate) fn fc_forward<T: Scalar>(weight: &[T], bias: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            row.iter().zip(x).fold(b, |acc, (&w, &v)| acc + w * v)
        })
        .collect()
}

pub(crate) fn fc_backward<T: Scalar>(
    weight: &[T],
    x: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    let n_in = x.len();
    for (o, &d) in dy.iter().enumerate() {
        dbias[o] = dbias[o] + d;
        if d == T::zero() {
            continue;
        }
        for (gw, &v) in dweight[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *gw = *gw + d * v;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); n_in];
        for (o, &d) in dy.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            for (g, &w) in dx.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
                *g = *g + d * w;
            }
        }
        dx
    })
}

/// Train/eval switch for stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: in training each value is zeroed with probability
/// `1 - keep_prob` and survivors are scaled by `1 / keep_prob`; in eval the
/// input passes through unchanged. Returns the applied mask (all ones in eval).
pub fn dropout_apply<T: Scalar, R: Rng + ?Sized>(
    x: &mut [T],
    keep_prob: f64,
    mode: Mode,
    rng: &mut R,
) -> Vec<T> {
    if mode == Mode::Eval || keep_prob >= 1.0 {
        return vec![T::one(); x.len()];
    }
    let scale = T::lit(1.0 / keep_prob);
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.gen_bool(keep_prob) {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    for (v, m) in x.iter_mut().zip(&mask) {
        *v = *v * *m;
    }
    mask
}
