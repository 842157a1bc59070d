use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{self, ConvGeom, LayerCache, LayerSpec, Mode};
use super::{Scalar, TensorBuf};
use crate::error::{Error, Result};
use crate::seed;

/// Samples per gradient-accumulation chunk. Chunks are reduced in index
/// order, so results do not depend on the number of worker threads.
const CHUNK: usize = 4;

/// Layer stack description, stored in architecture files and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// `[channels, rows, cols]`.
    pub input: [usize; 3],
    pub categories: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// Desk-scale reference network: three conv blocks and two
    /// fully-connected layers on 64x64 RGB input.
    pub fn tiny_net(categories: usize, drop_prob: f64) -> Self {
        use LayerSpec::*;
        Self {
            input: [3, 64, 64],
            categories,
            layers: vec![
                Conv {
                    in_channels: 3,
                    out_channels: 16,
                    kernel: 5,
                    stride: 2,
                    padding: 2,
                },
                Relu,
                Maxpool { size: 2, stride: 2 },
                Conv {
                    in_channels: 16,
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Relu,
                Maxpool { size: 2, stride: 2 },
                Conv {
                    in_channels: 32,
                    out_channels: 64,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Relu,
                Maxpool { size: 2, stride: 2 },
                Fc {
                    inputs: 64 * 4 * 4,
                    outputs: 128,
                },
                Relu,
                Dropout { drop_prob },
                Fc {
                    inputs: 128,
                    outputs: categories,
                },
                SoftmaxXent,
            ],
        }
    }

    /// Replaces the probability of every dropout layer.
    pub fn with_drop_prob(mut self, p: f64) -> Self {
        for l in &mut self.layers {
            if let LayerSpec::Dropout { drop_prob } = l {
                *drop_prob = p;
            }
        }
        self
    }

    /// Activation shape after each layer; element 0 is the input shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input.to_vec()];
        for (i, l) in self.layers.iter().enumerate() {
            let next = l.output_shape(i, shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        let last = self.layers.last();
        if !matches!(last, Some(LayerSpec::SoftmaxXent)) {
            return Err(Error::Config(
                "architecture must end with softmax-xent".into(),
            ));
        }
        if self.layers[..self.layers.len() - 1]
            .iter()
            .any(|l| matches!(l, LayerSpec::SoftmaxXent))
        {
            return Err(Error::Config("softmax-xent may only appear last".into()));
        }
        let out = shapes.last().expect("non-empty");
        if out.as_slice() != [self.categories] {
            return Err(Error::ShapeMismatch {
                layer: self.layers.len() - 1,
                kind: "softmax-xent",
                expected: vec![self.categories],
                got: out.clone(),
            });
        }
        Ok(shapes)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let arch: ArchSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        arch.shapes()?;
        Ok(arch)
    }
}

/// A layer stack with parameters. Parameters are stored weight-then-bias
/// for every parameterized layer, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: ArchSpec,
    shapes: Vec<Vec<usize>>,
    /// Index into `params` of each layer's weight, if it has one.
    slots: Vec<Option<usize>>,
    params: Vec<TensorBuf<T>>,
}

/// What a training forward pass leaves behind for `backward`.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    layers: Vec<Vec<LayerCache<T>>>,
    scores: TensorBuf<T>,
}

impl<T> ForwardCache<T> {
    pub fn scores(&self) -> &TensorBuf<T> {
        &self.scores
    }
}

impl<T: Scalar> Network<T> {
    /// Zero-mean Gaussian weights with standard deviation `1/sqrt(fan_in)`,
    /// zero biases.
    pub fn init(arch: ArchSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeroed(arch)?;
        for (spec, slot) in net.arch.layers.iter().zip(&net.slots) {
            if let Some(w) = slot {
                let std = 1.0 / (spec.fan_in() as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                for v in net.params[*w].data_mut() {
                    *v = T::lit(dist.sample(rng));
                }
            }
        }
        Ok(net)
    }

    pub fn zeroed(arch: ArchSpec) -> Result<Self> {
        let shapes = arch.shapes()?;
        let mut params = Vec::new();
        let mut slots = Vec::new();
        for spec in &arch.layers {
            match spec.param_shapes() {
                Some((w, b)) => {
                    slots.push(Some(params.len()));
                    params.push(TensorBuf::zeros(&w));
                    params.push(TensorBuf::zeros(&b));
                }
                None => slots.push(None),
            }
        }
        Ok(Self {
            arch,
            shapes,
            slots,
            params,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn category_count(&self) -> usize {
        self.arch.categories
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input
    }

    /// Activation shape after layer `i` (0-based).
    pub fn output_shape_of(&self, layer: usize) -> &[usize] {
        &self.shapes[layer + 1]
    }

    pub fn params(&self) -> &[TensorBuf<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [TensorBuf<T>] {
        &mut self.params
    }

    /// Replaces all parameters; shapes must match the architecture.
    pub fn set_params(&mut self, params: Vec<TensorBuf<T>>) -> Result<()> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint(
                "parameter shapes do not match the architecture".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            shapes: self.shapes.clone(),
            slots: self.slots.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    fn check_batch(&self, batch: &TensorBuf<T>) -> Result<usize> {
        let want = &self.arch.input;
        match batch.shape() {
            [n, c, h, w] if [*c, *h, *w] == *want => Ok(*n),
            got => Err(Error::ShapeMismatch {
                layer: 0,
                kind: self.arch.layers.first().map_or("input", |l| l.name()),
                expected: want.to_vec(),
                got: got.to_vec(),
            }),
        }
    }

    /// Runs one sample through layers `0..=last`. With `train` set, dropout
    /// draws from the given generator and the per-layer caches are returned.
    fn run_sample(
        &self,
        x: &[T],
        last: usize,
        mut train: Option<&mut ChaCha8Rng>,
    ) -> (Vec<T>, Vec<LayerCache<T>>) {
        let mut cur = x.to_vec();
        let keep = train.is_some();
        let mut caches = Vec::new();
        for (i, spec) in self.arch.layers.iter().enumerate().take(last + 1) {
            let cache = match *spec {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let g = ConvGeom::new(
                        &self.shapes[i],
                        &self.shapes[i + 1],
                        kernel,
                        stride,
                        padding,
                    );
                    let w = self.slots[i].expect("conv has params");
                    let (y, cols) = layers::conv_forward(
                        &g,
                        self.params[w].data(),
                        self.params[w + 1].data(),
                        &cur,
                    );
                    cur = y;
                    LayerCache::Conv { cols }
                }
                LayerSpec::Relu => LayerCache::Relu {
                    active: layers::relu_forward(&mut cur),
                },
                LayerSpec::Maxpool { size, stride } => {
                    let (y, argmax) = layers::pool_forward(
                        &self.shapes[i],
                        &self.shapes[i + 1],
                        size,
                        stride,
                        &cur,
                    );
                    cur = y;
                    LayerCache::Pool { argmax }
                }
                LayerSpec::Fc { .. } => {
                    let w = self.slots[i].expect("fc has params");
                    let y =
                        layers::fc_forward(self.params[w].data(), self.params[w + 1].data(), &cur);
                    LayerCache::Fc {
                        input: std::mem::replace(&mut cur, y),
                    }
                }
                LayerSpec::Dropout { drop_prob } => match train.as_deref_mut() {
                    Some(rng) => LayerCache::Dropout {
                        mask: layers::dropout_apply(&mut cur, 1.0 - drop_prob, Mode::Train, rng),
                    },
                    None => LayerCache::Pass,
                },
                LayerSpec::SoftmaxXent => LayerCache::Pass,
            };
            if keep {
                caches.push(cache);
            }
        }
        (cur, caches)
    }

    /// Eval-mode forward: final-layer scores (pre-softmax), one row per sample.
    /// Deterministic; dropout is a passthrough.
    pub fn forward(&self, batch: &TensorBuf<T>) -> Result<TensorBuf<T>> {
        let n = self.check_batch(batch)?;
        let last = self.arch.layers.len() - 1;
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| self.run_sample(batch.row(i), last, None).0)
            .collect();
        TensorBuf::from_vec(&[n, self.arch.categories], rows.concat())
    }

    /// Eval-mode activations after layer `layer` for every sample.
    pub fn activations(&self, batch: &TensorBuf<T>, layer: usize) -> Result<TensorBuf<T>> {
        let n = self.check_batch(batch)?;
        if layer >= self.arch.layers.len() {
            return Err(Error::Config(format!("no layer {layer}")));
        }
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| self.run_sample(batch.row(i), layer, None).0)
            .collect();
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shapes[layer + 1]);
        TensorBuf::from_vec(&shape, rows.concat())
    }

    /// Training forward. One dropout seed per sample is drawn from `rng` in
    /// sample order, so masks are reproducible for a given generator state.
    pub fn forward_train(
        &self,
        batch: &TensorBuf<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardCache<T>> {
        let n = self.check_batch(batch)?;
        let last = self.arch.layers.len() - 1;
        let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
        let runs: Vec<(Vec<T>, Vec<LayerCache<T>>)> = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut r = seed::rng(s);
                self.run_sample(batch.row(i), last, Some(&mut r))
            })
            .collect();
        let mut scores = Vec::with_capacity(n * self.arch.categories);
        let mut layers = Vec::with_capacity(n);
        for (s, c) in runs {
            scores.extend(s);
            layers.push(c);
        }
        Ok(ForwardCache {
            layers,
            scores: TensorBuf::from_vec(&[n, self.arch.categories], scores)?,
        })
    }

    fn zero_grads(&self) -> Vec<TensorBuf<T>> {
        self.params
            .iter()
            .map(|p| TensorBuf::zeros(p.shape()))
            .collect()
    }

    /// Back-propagates one sample's score gradient into `grads`.
    fn backprop_sample(
        &self,
        caches: &[LayerCache<T>],
        dscores: Vec<T>,
        grads: &mut [TensorBuf<T>],
    ) {
        let mut d = dscores;
        for (i, spec) in self.arch.layers.iter().enumerate().rev() {
            let want_dx = i > 0;
            match (spec, &caches[i]) {
                (
                    LayerSpec::Conv {
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    LayerCache::Conv { cols },
                ) => {
                    let g = ConvGeom::new(
                        &self.shapes[i],
                        &self.shapes[i + 1],
                        *kernel,
                        *stride,
                        *padding,
                    );
                    let w = self.slots[i].expect("conv has params");
                    let (gw, gb) = split_pair(grads, w);
                    match layers::conv_backward(
                        &g,
                        self.params[w].data(),
                        cols,
                        &d,
                        gw.data_mut(),
                        gb.data_mut(),
                        want_dx,
                    ) {
                        Some(dx) => d = dx,
                        None => return,
                    }
                }
                (LayerSpec::Relu, LayerCache::Relu { active }) => {
                    layers::relu_backward(active, &mut d)
                }
                (LayerSpec::Maxpool { .. }, LayerCache::Pool { argmax }) => {
                    let len = self.shapes[i].iter().product();
                    d = layers::pool_backward(len, argmax, &d);
                }
                (LayerSpec::Fc { .. }, LayerCache::Fc { input }) => {
                    let w = self.slots[i].expect("fc has params");
                    let (gw, gb) = split_pair(grads, w);
                    match layers::fc_backward(
                        self.params[w].data(),
                        input,
                        &d,
                        gw.data_mut(),
                        gb.data_mut(),
                        want_dx,
                    ) {
                        Some(dx) => d = dx,
                        None => return,
                    }
                }
                (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => {
                    for (v, m) in d.iter_mut().zip(mask) {
                        *v = *v * *m;
                    }
                }
                _ => {}
            }
        }
    }

    /// Mean softmax cross-entropy over the batch and its gradient with respect
    /// to every parameter.
    pub fn backward(
        &self,
        cache: Option<&ForwardCache<T>>,
        labels: &[u32],
    ) -> Result<(Vec<TensorBuf<T>>, T)> {
        let cache = cache.ok_or(Error::MissingCache)?;
        let n = cache.layers.len();
        let c = self.arch.categories;
        if labels.len() != n {
            return Err(Error::Config(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                categories: c,
            });
        }
        let inv_n = T::one() / T::lit(n as f64);

        let chunks: Vec<(Vec<TensorBuf<T>>, T)> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|idx| {
                let mut grads = self.zero_grads();
                let mut loss = T::zero();
                for &i in idx {
                    let (l, mut d) = softmax_xent(cache.scores.row(i), labels[i] as usize);
                    loss = loss + l;
                    for v in &mut d {
                        *v = *v * inv_n;
                    }
                    self.backprop_sample(&cache.layers[i], d, &mut grads);
                }
                (grads, loss)
            })
            .collect();

        let mut grads = self.zero_grads();
        let mut loss = T::zero();
        for (g, l) in chunks {
            for (acc, part) in grads.iter_mut().zip(&g) {
                acc.add_assign(part);
            }
            loss = loss + l;
        }
        Ok((grads, loss * inv_n))
    }
}

fn split_pair<T>(grads: &mut [TensorBuf<T>], w: usize) -> (&mut TensorBuf<T>, &mut TensorBuf<T>) {
    let (a, b) = grads[w..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of one row and its gradient with respect to the logits.
pub fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let mut p = softmax(logits);
    let loss = -(p[label].max(T::min_positive_value())).ln();
    p[label] = p[label] - T::one();
    (loss, p)
}
