//! The structure generator, patch discriminators and the frozen perceptual
//! encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Deterministic per-purpose seed so that adding or removing a network never
/// shifts the random stream of another one.
pub fn stream_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tag))
}

/// Named parameter tensors of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every tensor into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Gradients for a binding, zeros where the loss did not reach.
    pub fn gradients(&self, bound: &[Var], grads: &mut Gradients) -> Vec<Tensor> {
        bound
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.channels(), t.height(), t.width())))
            .collect()
    }

    /// Replaces the values, checking names and shapes.
    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::shape(format!("{} tensors for {} parameters", named.len(), self.tensors.len())));
        }
        for ((name, t), (own_name, own)) in named.iter().zip(self.names.iter().zip(self.tensors.iter_mut())) {
            if name != own_name || !t.same_shape(own) {
                return Err(Error::shape(format!("parameter {own_name} {:?} vs {name} {:?}", own.shape(), t.shape())));
            }
            *own = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    geom: ConvGeom,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let fan = cin * kernel * kernel;
        let w = Tensor::from_fn(cout, 1, fan, |_, _, _| normal.sample(rng));
        Self {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(cout, 1, 1)),
            geom: ConvGeom { kernel, stride, pad },
        }
    }

    fn apply(&self, g: &mut Graph, bound: &[Var], x: Var) -> Var {
        g.conv2d(x, bound[self.weight], bound[self.bias], self.geom)
    }
}

/// Weight init scale used by the trainable networks.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub downsamples: usize,
    pub res_blocks: usize,
    pub base_width: usize,
}

impl GeneratorSpec {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels: 3,
            downsamples: 2,
            res_blocks: 4,
            base_width: 16,
        }
    }
}

/// Encoder / residual bottleneck / decoder, output squashed by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    params: ParamSet,
    stem: ConvLayer,
    downs: Vec<ConvLayer>,
    blocks: Vec<(ConvLayer, ConvLayer)>,
    ups: Vec<ConvLayer>,
    head: ConvLayer,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::default();
        let w = spec.base_width;
        let stem = ConvLayer::new(&mut params, "stem", spec.in_channels, w, 7, 1, 3, INIT_STD, rng);
        let mut ch = w;
        let downs = (0..spec.downsamples)
            .map(|i| {
                let l = ConvLayer::new(&mut params, &format!("down{i}"), ch, ch * 2, 3, 2, 1, INIT_STD, rng);
                ch *= 2;
                l
            })
            .collect();
        let blocks = (0..spec.res_blocks)
            .map(|i| {
                (
                    ConvLayer::new(&mut params, &format!("res{i}.a"), ch, ch, 3, 1, 1, INIT_STD, rng),
                    ConvLayer::new(&mut params, &format!("res{i}.b"), ch, ch, 3, 1, 1, INIT_STD, rng),
                )
            })
            .collect();
        let ups = (0..spec.downsamples)
            .map(|i| {
                let l = ConvLayer::new(&mut params, &format!("up{i}"), ch, ch / 2, 3, 1, 1, INIT_STD, rng);
                ch /= 2;
                l
            })
            .collect();
        let head = ConvLayer::new(&mut params, "head", ch, spec.out_channels, 7, 1, 3, INIT_STD, rng);
        Self {
            spec,
            params,
            stem,
            downs,
            blocks,
            ups,
            head,
        }
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward_graph(&self, g: &mut Graph, bound: &[Var], input: Var) -> Result<Var> {
        let (c, h, w) = g.value(input).shape();
        if c != self.spec.in_channels {
            return Err(Error::shape(format!("generator expects {} channels, got {c}", self.spec.in_channels)));
        }
        if h < 4 || w < 4 {
            return Err(Error::shape(format!("generator input {h}x{w} too small")));
        }
        let conv_norm_relu = |g: &mut Graph, layer: &ConvLayer, x: Var| {
            let y = layer.apply(g, bound, x);
            let y = g.instance_norm(y);
            g.relu(y)
        };
        let mut x = conv_norm_relu(g, &self.stem, input);
        let mut sizes = Vec::new();
        for layer in &self.downs {
            let v = g.value(x);
            sizes.push((v.height(), v.width()));
            x = conv_norm_relu(g, layer, x);
        }
        for (a, b) in &self.blocks {
            let y = conv_norm_relu(g, a, x);
            let y = b.apply(g, bound, y);
            let y = g.instance_norm(y);
            x = g.add(x, y);
        }
        for layer in &self.ups {
            let (sh, sw) = sizes.pop().expect("one size per downsample");
            let y = g.upsample(x, sh, sw);
            x = conv_norm_relu(g, layer, y);
        }
        let y = self.head.apply(g, bound, x);
        Ok(g.tanh(y))
    }

    /// Inference pass: the initial color map for a prepared input tensor.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let bound = self.params.bind(&mut g, false);
        let y = self.forward_graph(&mut g, &bound, x)?;
        Ok(g.value(y).clone())
    }
}

/// Runs the generator on the one-hot incomplete map plus its mask channel.
pub fn generator_forward(generator: &Generator, incomplete_onehot: &Tensor, mask_channel: &Tensor) -> Result<Tensor> {
    generator.forward(&incomplete_onehot.concat_channels(mask_channel)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub candidate_channels: usize,
    pub condition_channels: usize,
    pub base_width: usize,
}

impl DiscriminatorSpec {
    /// Number of intermediate feature maps exposed for feature matching.
    pub const FEATURE_LAYERS: usize = 3;
    /// Receptive field of one score element (two stride-2 3×3 convolutions
    /// followed by 1×1 convolutions). Smaller inputs are rejected.
    pub const MIN_SIDE: usize = 7;

    pub fn new(condition_channels: usize) -> Self {
        Self {
            candidate_channels: 3,
            condition_channels,
            base_width: 16,
        }
    }

    /// Side of the score field for an input side.
    pub fn score_side(side: usize) -> usize {
        side.div_ceil(2).div_ceil(2)
    }
}

/// Output of a discriminator pass.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    /// Per-patch probability of "real", in (0, 1).
    pub score: Var,
    /// Feature maps, shallow to deep.
    pub features: Vec<Var>,
}

/// Fully convolutional conditional patch discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    params: ParamSet,
    layers: Vec<ConvLayer>,
    score: ConvLayer,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::default();
        let w = spec.base_width;
        let cin = spec.candidate_channels + spec.condition_channels;
        let layers = vec![
            ConvLayer::new(&mut params, "l0", cin, w, 3, 2, 1, INIT_STD, rng),
            ConvLayer::new(&mut params, "l1", w, 2 * w, 3, 2, 1, INIT_STD, rng),
            ConvLayer::new(&mut params, "l2", 2 * w, 4 * w, 1, 1, 0, INIT_STD, rng),
        ];
        let score = ConvLayer::new(&mut params, "score", 4 * w, 1, 1, 1, 0, INIT_STD, rng);
        Self {
            spec,
            params,
            layers,
            score,
        }
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward_graph(&self, g: &mut Graph, bound: &[Var], candidate: Var, condition: Var) -> Result<DiscOutput> {
        let (cc, h, w) = g.value(candidate).shape();
        let (kc, kh, kw) = g.value(condition).shape();
        if cc != self.spec.candidate_channels || kc != self.spec.condition_channels {
            return Err(Error::shape(format!(
                "discriminator expects {}+{} channels, got {cc}+{kc}",
                self.spec.candidate_channels, self.spec.condition_channels
            )));
        }
        if (h, w) != (kh, kw) {
            return Err(Error::shape(format!("candidate {h}x{w} vs condition {kh}x{kw}")));
        }
        if h < DiscriminatorSpec::MIN_SIDE || w < DiscriminatorSpec::MIN_SIDE {
            return Err(Error::shape(format!(
                "discriminator input {h}x{w} below minimum side {}",
                DiscriminatorSpec::MIN_SIDE
            )));
        }
        let mut x = g.concat(candidate, condition);
        let mut features = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(g, bound, x);
            if i > 0 {
                x = g.instance_norm(x);
            }
            x = g.leaky_relu(x, 0.2);
            features.push(x);
        }
        let logits = self.score.apply(g, bound, x);
        Ok(DiscOutput {
            score: g.sigmoid(logits),
            features,
        })
    }

    /// Scores and features as plain tensors.
    pub fn forward(&self, candidate: &Tensor, condition: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let c = g.constant(candidate.clone());
        let k = g.constant(condition.clone());
        let bound = self.params.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &bound, c, k)?;
        Ok((g.value(out.score).clone(), out.features.iter().map(|&f| g.value(f).clone()).collect()))
    }
}

/// Runs a discriminator on a candidate color map and its condition.
pub fn discriminator_forward(
    disc: &Discriminator,
    candidate: &Tensor,
    condition: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    disc.forward(candidate, condition)
}

/// A frozen feature extractor for the perceptual loss.
pub trait FeatureEncoder: Send + Sync {
    /// Tap outputs, shallow to deep. Parameters are bound as constants.
    fn taps(&self, g: &mut Graph, image: Var) -> Vec<Var>;
    /// One weight per tap.
    fn tap_weights(&self) -> &[f64];
}

/// Per-tap weights of the perceptual loss, shallow to deep.
pub const PERCEPTUAL_WEIGHTS: [f64; 5] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub widths: Vec<usize>,
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 16, 32, 32],
            weights: PERCEPTUAL_WEIGHTS.to_vec(),
            seed: 0x5eed_e4c0,
        }
    }
}

/// Fixed-seed random convolutional pyramid: one 3×3 conv + ReLU per tap,
/// with 2×2 average pooling between taps.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomPyramidEncoder {
    spec: EncoderSpec,
    params: ParamSet,
    layers: Vec<ConvLayer>,
}

impl RandomPyramidEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.widths.len() != spec.weights.len() || spec.widths.is_empty() {
            return Err(Error::Config(format!(
                "encoder has {} taps but {} weights",
                spec.widths.len(),
                spec.weights.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamSet::default();
        let mut cin = 3;
        let layers = spec
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let l = ConvLayer::new(&mut params, &format!("tap{i}"), cin, w, 3, 1, 1, std, &mut rng);
                cin = w;
                l
            })
            .collect();
        Ok(Self { spec, params, layers })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

impl Default for RandomPyramidEncoder {
    fn default() -> Self {
        Self::new(EncoderSpec::default()).expect("default encoder spec is valid")
    }
}

impl FeatureEncoder for RandomPyramidEncoder {
    fn taps(&self, g: &mut Graph, image: Var) -> Vec<Var> {
        let bound = self.params.bind(g, false);
        let mut x = image;
        let mut taps = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.avg_pool(x);
            }
            let y = layer.apply(g, &bound, x);
            x = g.relu(y);
            taps.push(x);
        }
        taps
    }

    fn tap_weights(&self) -> &[f64] {
        &self.spec.weights
    }
}
