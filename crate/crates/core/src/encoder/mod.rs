//! The dense encoder: an image view in, a same-resolution map of unit-norm
//! embedding vectors out, with exact gradients for every parameter.

pub mod layers;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::math::Real;
use crate::seed;
use layers::{ConvShape, GroupNormCache, Tensor};

/// Network topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// One `kernel×kernel` convolution from RGB straight to the embedding,
    /// then per-pixel normalization.
    SingleConv { kernel: usize },
    /// Four conv–GroupNorm–ReLU stages (the last three stride 2), a decoder
    /// of bilinear ×2 upsampling plus skip concatenation, and a 1×1
    /// projection to the embedding dimension. The full-resolution decoder
    /// stage skips its ReLU.
    UNet { widths: [usize; 4] },
}

impl Architecture {
    pub const BASE_WIDTHS: [usize; 4] = [8, 16, 32, 32];

    pub fn unet(width_multiplier: usize) -> Self {
        let m = width_multiplier.max(1);
        let b = Self::BASE_WIDTHS;
        Architecture::UNet { widths: [b[0] * m, b[1] * m, b[2] * m, b[3] * m] }
    }

    /// Input sides must be multiples of this.
    pub fn downsampling(&self) -> usize {
        match self {
            Architecture::SingleConv { .. } => 1,
            Architecture::UNet { .. } => 8,
        }
    }

    fn convs(&self, embed_dim: usize) -> Vec<ConvShape> {
        match *self {
            Architecture::SingleConv { kernel } => vec![ConvShape { cin: 3, cout: embed_dim, k: kernel, stride: 1 }],
            Architecture::UNet { widths: [w1, w2, w3, w4] } => vec![
                ConvShape { cin: 3, cout: w1, k: 3, stride: 1 },
                ConvShape { cin: w1, cout: w2, k: 3, stride: 2 },
                ConvShape { cin: w2, cout: w3, k: 3, stride: 2 },
                ConvShape { cin: w3, cout: w4, k: 3, stride: 2 },
                ConvShape { cin: w4 + w3, cout: w3, k: 3, stride: 1 },
                ConvShape { cin: w3 + w2, cout: w2, k: 3, stride: 1 },
                ConvShape { cin: w2 + w1, cout: w1, k: 3, stride: 1 },
                ConvShape { cin: w1, cout: embed_dim, k: 1, stride: 1 },
            ],
        }
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self, embed_dim: usize) -> Vec<(String, Vec<usize>)> {
        const BLOCKS: [&str; 7] = ["enc1", "enc2", "enc3", "enc4", "dec3", "dec2", "dec1"];
        let convs = self.convs(embed_dim);
        let mut out = Vec::new();
        match self {
            Architecture::SingleConv { .. } => {
                let s = convs[0];
                out.push(("conv.weight".into(), vec![s.cout, s.cin, s.k, s.k]));
                out.push(("conv.bias".into(), vec![s.cout]));
            }
            Architecture::UNet { .. } => {
                for (name, s) in BLOCKS.iter().zip(&convs) {
                    out.push((format!("{name}.conv.weight"), vec![s.cout, s.cin, s.k, s.k]));
                    out.push((format!("{name}.conv.bias"), vec![s.cout]));
                    out.push((format!("{name}.norm.gamma"), vec![s.cout]));
                    out.push((format!("{name}.norm.beta"), vec![s.cout]));
                }
                let s = convs[7];
                out.push(("proj.weight".into(), vec![s.cout, s.cin, s.k, s.k]));
                out.push(("proj.bias".into(), vec![s.cout]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

/// Weights of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<R> {
    pub arch: Architecture,
    pub embed_dim: usize,
    pub tensors: Vec<ParamTensor<R>>,
}

impl<R: Real> EncoderParams<R> {
    /// All-zero parameters with the right layout.
    pub fn zeros(arch: Architecture, embed_dim: usize) -> Self {
        let tensors = arch
            .layout(embed_dim)
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                ParamTensor { name, shape, data: vec![R::ZERO; n] }
            })
            .collect();
        EncoderParams { arch, embed_dim, tensors }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same parameters in another precision.
    pub fn cast<S: Real>(&self) -> EncoderParams<S> {
        EncoderParams {
            arch: self.arch,
            embed_dim: self.embed_dim,
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| S::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    fn t(&self, i: usize) -> &[R] {
        &self.tensors[i].data
    }
}

/// He-style initialization: conv weights `N(0, 2/fan_in)`, biases and norm
/// shifts zero, norm scales one.
pub fn init_params<R: Real>(rng_seed: u64, embed_dim: usize, arch: Architecture) -> Result<EncoderParams<R>> {
    if embed_dim == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
    }
    if let Architecture::SingleConv { kernel } = arch {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument("convolution kernel must be odd".into()));
        }
    }
    let mut params = EncoderParams::zeros(arch, embed_dim);
    let mut rng = seed::rng(rng_seed);
    for t in &mut params.tensors {
        if t.name.ends_with("weight") {
            let fan_in: usize = t.shape[1..].iter().product();
            let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).expect("positive std");
            for v in &mut t.data {
                *v = R::from_f64(normal.sample(&mut rng));
            }
        } else if t.name.ends_with("gamma") {
            t.data.fill(R::ONE);
        }
    }
    Ok(params)
}

/// Per-pixel embeddings, `D×h×w` planar.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap<R> {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<R>,
    pub normalized: bool,
}

impl<R: Real> EmbeddingMap<R> {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Embedding of pixel `p` (row-major index) as `f64`.
    pub fn vector(&self, p: usize) -> Vec<f64> {
        let hw = self.pixels();
        (0..self.dim).map(|c| self.data[c * hw + p].to_f64()).collect()
    }

    pub fn add_vector(&self, p: usize, out: &mut [f64]) {
        let hw = self.pixels();
        for (c, o) in out.iter_mut().enumerate() {
            *o += self.data[c * hw + p].to_f64();
        }
    }

    /// Pixel-major `hw × D` copy, convenient for clustering.
    pub fn to_rows(&self) -> Vec<f64> {
        let hw = self.pixels();
        let mut rows = vec![0.0; hw * self.dim];
        for c in 0..self.dim {
            for p in 0..hw {
                rows[p * self.dim + c] = self.data[c * hw + p].to_f64();
            }
        }
        rows
    }

    /// Renormalizes every pixel vector.
    pub fn normalize(&self) -> EmbeddingMap<R> {
        let t = Tensor::from_vec(self.dim, self.height, self.width, self.data.clone());
        let (y, _) = layers::l2_normalize_forward(&t);
        EmbeddingMap { dim: self.dim, height: self.height, width: self.width, data: y.data, normalized: true }
    }
}

#[derive(Debug, Clone)]
struct BlockCache<R> {
    input: Tensor<R>,
    gn: GroupNormCache<R>,
    out: Tensor<R>,
}

/// Activations kept from [`forward_cached`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<R> {
    input: Tensor<R>,
    blocks: Vec<BlockCache<R>>,
    output: Tensor<R>,
    norms: Vec<R>,
}

/// Parameter gradients, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<R> {
    pub tensors: Vec<Vec<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn zeros_like(params: &EncoderParams<R>) -> Self {
        Gradients { tensors: params.tensors.iter().map(|t| vec![R::ZERO; t.data.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients<R>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|&v| v == R::ZERO))
    }
}

fn image_tensor<R: Real>(view: &ImageTensor) -> Tensor<R> {
    Tensor::from_vec(3, view.height(), view.width(), view.data().iter().map(|&v| R::from_f64(v as f64)).collect())
}

/// Index of the block that feeds the projection; it has no ReLU so that no
/// pixel reaches the normalization as an all-zero vector.
const LAST_BLOCK: usize = 6;

fn block_forward<R: Real>(params: &EncoderParams<R>, b: usize, shape: ConvShape, input: Tensor<R>) -> BlockCache<R> {
    let conv = layers::conv_forward(&input, shape, params.t(4 * b), params.t(4 * b + 1));
    let groups = layers::group_count(shape.cout);
    let (mut out, gn) = layers::group_norm_forward(&conv, groups, params.t(4 * b + 2), params.t(4 * b + 3));
    if b != LAST_BLOCK {
        layers::relu_forward(&mut out);
    }
    BlockCache { input, gn, out }
}

fn block_backward<R: Real>(
    params: &EncoderParams<R>,
    grads: &mut Gradients<R>,
    b: usize,
    shape: ConvShape,
    cache: &BlockCache<R>,
    mut dout: Tensor<R>,
) -> Tensor<R> {
    if b != LAST_BLOCK {
        layers::relu_backward(&cache.out, &mut dout);
    }
    let groups = layers::group_count(shape.cout);
    let (head, tail) = grads.tensors.split_at_mut(4 * b + 3);
    let dconv = layers::group_norm_backward(&cache.gn, groups, params.t(4 * b + 2), &dout, &mut head[4 * b + 2], &mut tail[0]);
    let (head, tail) = grads.tensors.split_at_mut(4 * b + 1);
    layers::conv_backward(&cache.input, shape, params.t(4 * b), &dconv, &mut head[4 * b], &mut tail[0])
}

fn check_input<R: Real>(params: &EncoderParams<R>, view: &ImageTensor) -> Result<()> {
    let f = params.arch.downsampling();
    if view.height() % f != 0 || view.width() % f != 0 {
        return Err(Error::ShapeMismatch {
            what: "view size must be a multiple of the encoder stride",
            expected: ((view.height() / f).max(1) * f, (view.width() / f).max(1) * f),
            found: (view.height(), view.width()),
        });
    }
    Ok(())
}

/// Embeds `view`; every output pixel vector has unit norm.
pub fn forward<R: Real>(params: &EncoderParams<R>, view: &ImageTensor) -> Result<EmbeddingMap<R>> {
    forward_cached(params, view).map(|(e, _)| e)
}

pub fn forward_cached<R: Real>(params: &EncoderParams<R>, view: &ImageTensor) -> Result<(EmbeddingMap<R>, ForwardCache<R>)> {
    check_input(params, view)?;
    let x = image_tensor::<R>(view);
    let convs = params.arch.convs(params.embed_dim);
    let mut blocks = Vec::new();
    let raw = match params.arch {
        Architecture::SingleConv { .. } => layers::conv_forward(&x, convs[0], params.t(0), params.t(1)),
        Architecture::UNet { .. } => {
            for b in 0..4 {
                let input = if b == 0 { x.clone() } else { blocks.last().map(|c: &BlockCache<R>| c.out.clone()).unwrap() };
                blocks.push(block_forward(params, b, convs[b], input));
            }
            // decoder: dec3 joins enc4 with enc3, dec2 joins dec3 with enc2, dec1 joins dec2 with enc1
            for (b, skip) in [(4usize, 2usize), (5, 1), (6, 0)] {
                let prev = &blocks[b - 1].out;
                let skip_t = &blocks[skip].out;
                let up = layers::upsample_forward(prev, skip_t.h, skip_t.w);
                let input = layers::concat(&up, skip_t);
                blocks.push(block_forward(params, b, convs[b], input));
            }
            layers::conv_forward(&blocks[6].out, convs[7], params.t(28), params.t(29))
        }
    };
    let (output, norms) = layers::l2_normalize_forward(&raw);
    let emb = EmbeddingMap {
        dim: params.embed_dim,
        height: output.h,
        width: output.w,
        data: output.data.clone(),
        normalized: true,
    };
    Ok((emb, ForwardCache { input: x, blocks, output, norms }))
}

/// Parameter gradients of `⟨upstream, forward(view)⟩`.
pub fn backward<R: Real>(params: &EncoderParams<R>, cache: &ForwardCache<R>, upstream: &[R]) -> Result<Gradients<R>> {
    if upstream.len() != cache.output.data.len() {
        return Err(Error::ShapeMismatch {
            what: "upstream embedding gradient",
            expected: (cache.output.c, cache.output.h * cache.output.w),
            found: (upstream.len() / (cache.output.h * cache.output.w).max(1), cache.output.h * cache.output.w),
        });
    }
    let convs = params.arch.convs(params.embed_dim);
    let mut grads = Gradients::zeros_like(params);
    let dout = Tensor::from_vec(cache.output.c, cache.output.h, cache.output.w, upstream.to_vec());
    let draw = layers::l2_normalize_backward(&cache.output, &cache.norms, &dout);
    match params.arch {
        Architecture::SingleConv { .. } => {
            let (head, tail) = grads.tensors.split_at_mut(1);
            layers::conv_backward(&cache.input, convs[0], params.t(0), &draw, &mut head[0], &mut tail[0]);
        }
        Architecture::UNet { .. } => {
            let blocks = &cache.blocks;
            let (head, tail) = grads.tensors.split_at_mut(29);
            let d_dec1 = layers::conv_backward(&blocks[6].out, convs[7], params.t(28), &draw, &mut head[28], &mut tail[0]);

            let mut d_out: Vec<Option<Tensor<R>>> = vec![None; 7];
            d_out[6] = Some(d_dec1);
            let accumulate = |slot: &mut Option<Tensor<R>>, g: Tensor<R>| match slot {
                Some(t) => {
                    for (a, b) in t.data.iter_mut().zip(&g.data) {
                        *a += *b;
                    }
                }
                None => *slot = Some(g),
            };
            for (b, skip) in [(6usize, 0usize), (5, 1), (4, 2)] {
                let d = d_out[b].take().expect("decoder gradient");
                let d_in = block_backward(params, &mut grads, b, convs[b], &blocks[b], d);
                let prev = &blocks[b - 1].out;
                let (d_up, d_skip) = layers::split(d_in, prev.c);
                accumulate(&mut d_out[b - 1], layers::upsample_backward(&d_up, prev.h, prev.w));
                accumulate(&mut d_out[skip], d_skip);
            }
            for b in (0..4).rev() {
                let d = d_out[b].take().expect("encoder gradient");
                let d_in = block_backward(params, &mut grads, b, convs[b], &blocks[b], d);
                if b > 0 {
                    accumulate(&mut d_out[b - 1], d_in);
                }
            }
        }
    }
    Ok(grads)
}
