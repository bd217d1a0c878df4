//! The noise-prediction policy: per-camera CNN tokenizers with goal FiLM, a
//! proprio token, a transformer encoder exposing every layer's output, and a
//! decoder over noised action chunks with a selectable conditioning block.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Var};
use crate::envs::dataset::{write_file, Reader};
use crate::envs::{NormStats, Observation};
use crate::error::{Error, Result};
use crate::nn::{
    film, Builder, CrossAttnBlock, Dense, DitBlock, Forward, InContextBlock, Init, LayerNorm, ParamId, ParamStore,
    TimestepEmbedder, TransformerBlock, Variant, LN_EPS, MLP_RATIO,
};
use crate::tensor::{cst, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// Stride-2 stem and two residual stages, FiLM after each.
    Resnet,
    /// Three plain stride-2 convolutions, FiLM after each.
    ConvStem,
}

impl TokenizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerKind::Resnet => "resnet",
            TokenizerKind::ConvStem => "conv_stem",
        }
    }
}

impl std::str::FromStr for TokenizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(TokenizerKind::Resnet),
            "conv_stem" => Ok(TokenizerKind::ConvStem),
            _ => Err(Error::invalid(format!("unknown tokenizer '{s}' (expected resnet or conv_stem)"))),
        }
    }
}

/// What sits on top of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Noise-prediction decoder.
    Diffusion,
    /// Direct chunk regression from pooled encoder features.
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub horizon: usize,
    pub diffusion_steps: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub cameras: usize,
    pub image_size: usize,
    pub cnn_channels: usize,
    pub tokenizer: TokenizerKind,
    pub encoder_mlp_ratio: usize,
    pub goal_vocab: usize,
    pub goal_embed: usize,
    pub variant: Variant,
    pub head: HeadKind,
    pub obs_dropout: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            layers: 2,
            width: 64,
            heads: 4,
            horizon: 8,
            diffusion_steps: 100,
            action_dim: 2,
            proprio_dim: 2,
            cameras: 2,
            image_size: 32,
            cnn_channels: 16,
            tokenizer: TokenizerKind::Resnet,
            encoder_mlp_ratio: MLP_RATIO,
            goal_vocab: 1,
            goal_embed: 16,
            variant: Variant::AdalnZero,
            head: HeadKind::Diffusion,
            obs_dropout: 0.2,
        }
    }
}

fn halve(s: usize) -> usize {
    s.div_ceil(2)
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("horizon", self.horizon),
            ("action_dim", self.action_dim),
            ("proprio_dim", self.proprio_dim),
            ("cameras", self.cameras),
            ("image_size", self.image_size),
            ("cnn_channels", self.cnn_channels),
            ("encoder_mlp_ratio", self.encoder_mlp_ratio),
            ("goal_vocab", self.goal_vocab),
            ("goal_embed", self.goal_embed),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!("width {} must be even for the timestep embedding", self.width)));
        }
        if self.diffusion_steps < 2 {
            return Err(Error::Config("diffusion_steps must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.obs_dropout) {
            return Err(Error::Config(format!("obs_dropout {} outside [0, 1]", self.obs_dropout)));
        }
        Ok(())
    }

    /// Side of the token grid each camera produces (three stride-2 reductions).
    pub fn grid_side(&self) -> usize {
        halve(halve(halve(self.image_size)))
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Encoder sequence length: every camera's tokens, then one proprio token.
    pub fn seq_len(&self) -> usize {
        self.cameras * self.tokens_per_image() + 1
    }
}

/// Observations for a batch: images per camera (`B × S × S × 3`, channels-last),
/// normalised proprio (`B × P`) and goal ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsBatch {
    pub images: Vec<Vec<f32>>,
    pub proprio: Vec<f32>,
    pub goals: Vec<usize>,
}

impl ObsBatch {
    pub fn batch(&self) -> usize {
        self.goals.len()
    }

    pub fn from_observations(obs: &[&Observation], goals: &[usize], stats: &NormStats) -> Self {
        let cams = obs.first().map_or(0, |o| o.images.len());
        let images = (0..cams).map(|c| obs.iter().flat_map(|o| o.images[c].iter().copied()).collect()).collect();
        let raw: Vec<f32> = obs.iter().flat_map(|o| o.proprio.iter().copied()).collect();
        ObsBatch { images, proprio: stats.normalize_proprio(&raw), goals: goals.to_vec() }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    cin: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        Conv {
            w: b.tensor(&format!("{name}.w"), &[fan_in, cout], Init::Kaiming(fan_in)),
            b: b.tensor(&format!("{name}.b"), &[cout], Init::Zeros),
            cin,
            kernel,
            stride,
            pad,
        }
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var, batch: usize, side: usize) -> (Var, usize) {
        let geom = ConvGeom {
            batch,
            height: side,
            width: side,
            channels: self.cin,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let cols = f.tape.im2col(x, geom);
        let (w, b) = (f.p(self.w), f.p(self.b));
        (f.tape.linear(cols, w, Some(b)), geom.out_height())
    }
}

/// Goal-conditioned FiLM parameters for one site.
#[derive(Clone, Copy, Debug)]
struct FilmGen {
    proj: Dense,
    channels: usize,
}

impl FilmGen {
    fn new<T: Scalar>(b: &mut Builder<T>, name: &str, embed: usize, channels: usize) -> Self {
        FilmGen { proj: b.dense(name, embed, 2 * channels, Init::Xavier), channels }
    }

    fn apply<T: Scalar>(&self, f: &mut Forward<T>, h: Var, goal: Var) -> Result<Var> {
        let gb = self.proj.forward(f, goal);
        let gamma = f.tape.slice_cols(gb, 0, self.channels);
        let beta = f.tape.slice_cols(gb, self.channels, self.channels);
        film(f, h, gamma, beta)
    }
}

#[derive(Clone, Copy, Debug)]
struct ResStage {
    conv1: Conv,
    conv2: Conv,
    skip: Conv,
    film: FilmGen,
}

#[derive(Clone, Debug)]
enum CameraNet {
    Resnet { stem: Conv, stem_film: FilmGen, stages: Vec<ResStage> },
    ConvStem { layers: Vec<(Conv, FilmGen)> },
}

#[derive(Clone, Debug)]
struct CameraTokenizer {
    net: CameraNet,
    proj: Dense,
}

impl CameraTokenizer {
    fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cfg: &PolicyConfig) -> Self {
        let (c, e) = (cfg.cnn_channels, cfg.goal_embed);
        let net = match cfg.tokenizer {
            TokenizerKind::Resnet => CameraNet::Resnet {
                stem: Conv::new(b, &format!("{name}.stem"), 3, c, 3, 2, 1),
                stem_film: FilmGen::new(b, &format!("{name}.stem_film"), e, c),
                stages: (0..2)
                    .map(|i| ResStage {
                        conv1: Conv::new(b, &format!("{name}.stage{i}.conv1"), c, c, 3, 2, 1),
                        conv2: Conv::new(b, &format!("{name}.stage{i}.conv2"), c, c, 3, 1, 1),
                        skip: Conv::new(b, &format!("{name}.stage{i}.skip"), c, c, 1, 2, 0),
                        film: FilmGen::new(b, &format!("{name}.stage{i}.film"), e, c),
                    })
                    .collect(),
            },
            TokenizerKind::ConvStem => CameraNet::ConvStem {
                layers: (0..3)
                    .map(|i| {
                        let cin = if i == 0 { 3 } else { c };
                        (
                            Conv::new(b, &format!("{name}.conv{i}"), cin, c, 3, 2, 1),
                            FilmGen::new(b, &format!("{name}.film{i}"), e, c),
                        )
                    })
                    .collect(),
            },
        };
        CameraTokenizer { net, proj: b.dense(&format!("{name}.proj"), c, cfg.width, Init::Xavier) }
    }

    /// Maps `B·S·S × 3` pixels to `B·G·G × d` tokens.
    fn forward<T: Scalar>(&self, f: &mut Forward<T>, img: Var, goal: Var, batch: usize, side: usize) -> Result<Var> {
        let h = match &self.net {
            CameraNet::Resnet { stem, stem_film, stages } => {
                let (h, mut s) = stem.forward(f, img, batch, side);
                let h = stem_film.apply(f, h, goal)?;
                let mut h = f.tape.silu(h);
                for st in stages {
                    let (y, s2) = st.conv1.forward(f, h, batch, s);
                    let y = f.tape.silu(y);
                    let (y, _) = st.conv2.forward(f, y, batch, s2);
                    let (skip, _) = st.skip.forward(f, h, batch, s);
                    let z = f.tape.add(y, skip);
                    let z = st.film.apply(f, z, goal)?;
                    h = f.tape.silu(z);
                    s = s2;
                }
                h
            }
            CameraNet::ConvStem { layers } => {
                let (mut h, mut s) = (img, side);
                for (conv, fg) in layers {
                    let (y, s2) = conv.forward(f, h, batch, s);
                    let y = fg.apply(f, y, goal)?;
                    h = f.tape.silu(y);
                    s = s2;
                }
                h
            }
        };
        Ok(self.proj.forward(f, h))
    }
}

#[derive(Clone, Debug)]
enum DecoderBlocks {
    Dit(Vec<DitBlock>),
    Cross(Vec<CrossAttnBlock>),
    InContext { blocks: Vec<InContextBlock>, mem_pos: ParamId },
}

#[derive(Clone, Copy, Debug)]
enum FinalLayer {
    Modulated { modulation: Dense, head: Dense },
    Plain { ln: LayerNorm, head: Dense },
}

#[derive(Clone, Debug)]
struct Decoder {
    in_proj: Dense,
    pos: ParamId,
    time: TimestepEmbedder,
    blocks: DecoderBlocks,
    final_layer: FinalLayer,
}

#[derive(Clone, Copy, Debug)]
struct RegressionHead {
    fc1: Dense,
    fc2: Dense,
}

#[derive(Clone, Debug)]
enum HeadNet {
    Diffusion(Decoder),
    Regression(RegressionHead),
}

#[derive(Clone, Debug)]
struct Arch {
    goal_table: ParamId,
    cameras: Vec<CameraTokenizer>,
    proprio: Dense,
    obs_pos: ParamId,
    encoder: Vec<TransformerBlock>,
    head: HeadNet,
}

fn build_arch<T: Scalar>(cfg: &PolicyConfig, b: &mut Builder<T>) -> Result<Arch> {
    let d = cfg.width;
    let goal_table = b.tensor("goal_embedding", &[cfg.goal_vocab, cfg.goal_embed], Init::Normal(1.0));
    let cameras = (0..cfg.cameras).map(|c| CameraTokenizer::new(b, &format!("camera{c}"), cfg)).collect();
    let proprio = b.dense("proprio", cfg.proprio_dim, d, Init::Xavier);
    let obs_pos = b.tensor("obs_pos", &[cfg.seq_len(), d], Init::Normal(0.02));
    let encoder = (0..cfg.layers)
        .map(|i| TransformerBlock::new(b, &format!("encoder{i}"), d, cfg.heads, cfg.encoder_mlp_ratio * d))
        .collect();
    let head = match cfg.head {
        HeadKind::Regression => HeadNet::Regression(RegressionHead {
            fc1: b.dense("regress.fc1", d, d, Init::Xavier),
            fc2: b.dense("regress.fc2", d, cfg.horizon * cfg.action_dim, Init::Xavier),
        }),
        HeadKind::Diffusion => {
            let in_proj = b.dense("decoder.in", cfg.action_dim, d, Init::Xavier);
            let pos = b.tensor("decoder.pos", &[cfg.horizon, d], Init::Normal(0.02));
            let time = TimestepEmbedder::new(b, "decoder.time", d)?;
            let blocks = match cfg.variant {
                Variant::AdalnZero | Variant::Adaln => DecoderBlocks::Dit(
                    (0..cfg.layers)
                        .map(|i| DitBlock::new(b, &format!("decoder{i}"), d, cfg.heads, cfg.variant == Variant::AdalnZero))
                        .collect(),
                ),
                Variant::CrossAttn => DecoderBlocks::Cross(
                    (0..cfg.layers)
                        .map(|i| CrossAttnBlock::new(b, &format!("decoder{i}"), d, cfg.heads, Init::Xavier))
                        .collect(),
                ),
                Variant::InContext => DecoderBlocks::InContext {
                    blocks: (0..cfg.layers).map(|i| InContextBlock::new(b, &format!("decoder{i}"), d, cfg.heads)).collect(),
                    mem_pos: b.tensor("decoder.mem_pos", &[cfg.seq_len() + 1, d], Init::Normal(0.02)),
                },
            };
            let head_init = if cfg.variant == Variant::AdalnZero { Init::Zeros } else { Init::Xavier };
            let final_layer = if cfg.variant.is_adaln() {
                FinalLayer::Modulated {
                    modulation: b.dense("decoder.final.adaln", d, 2 * d, Init::Xavier),
                    head: b.dense("decoder.final.head", d, cfg.action_dim, head_init),
                }
            } else {
                FinalLayer::Plain {
                    ln: b.layer_norm("decoder.final.ln", d),
                    head: b.dense("decoder.final.head", d, cfg.action_dim, head_init),
                }
            };
            HeadNet::Diffusion(Decoder { in_proj, pos, time, blocks, final_layer })
        }
    };
    Ok(Arch { goal_table, cameras, proprio, obs_pos, encoder, head })
}

/// Per-layer encoder outputs for a batch, computed once and reused across denoising steps.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub batch: usize,
    pub layers: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct PolicyNet<T> {
    pub config: PolicyConfig,
    pub params: ParamStore<T>,
    arch: Arch,
}

impl<T: Scalar> PolicyNet<T> {
    /// Builds and initialises a network; identical seeds give identical parameters.
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = build_arch(&config, &mut Builder::new(&mut params, &mut rng))?;
        Ok(PolicyNet { config, params, arch })
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> PolicyNet<U> {
        PolicyNet { config: self.config.clone(), params: self.params.cast(), arch: self.arch.clone() }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check_obs(&self, obs: &ObsBatch) -> Result<()> {
        let cfg = &self.config;
        let b = obs.batch();
        if b == 0 {
            return Err(Error::invalid("empty observation batch"));
        }
        if obs.images.len() != cfg.cameras {
            return Err(Error::invalid(format!("expected {} cameras, got {}", cfg.cameras, obs.images.len())));
        }
        let pixels = b * cfg.image_size * cfg.image_size * 3;
        if let Some(img) = obs.images.iter().find(|i| i.len() != pixels) {
            return Err(Error::ShapeMismatch { expected: vec![b, cfg.image_size, cfg.image_size, 3], got: vec![img.len()] });
        }
        if obs.proprio.len() != b * cfg.proprio_dim {
            return Err(Error::ShapeMismatch { expected: vec![b, cfg.proprio_dim], got: vec![obs.proprio.len()] });
        }
        if let Some(g) = obs.goals.iter().find(|&&g| g >= cfg.goal_vocab) {
            return Err(Error::invalid(format!("goal {g} out of range (vocabulary {})", cfg.goal_vocab)));
        }
        if obs.proprio.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite proprio input"));
        }
        Ok(())
    }

    /// Observation tokens `B·seq_len × d`. With `dropout`, each proprio dimension
    /// is zeroed with probability `obs_dropout`.
    pub fn tokenize(&self, f: &mut Forward<T>, obs: &ObsBatch, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.check_obs(obs)?;
        let cfg = &self.config;
        let b = obs.batch();
        let s = cfg.image_size;
        let table = f.p(self.arch.goal_table);
        let goal = f.tape.gather(table, &obs.goals);
        let mut parts = Vec::with_capacity(cfg.cameras + 1);
        for (cam, img) in self.arch.cameras.iter().zip(&obs.images) {
            let data = img.iter().map(|&v| cst::<T>(v as f64)).collect();
            let x = f.tape.constant(Tensor::from_vec(&[b * s * s, 3], data));
            parts.push(cam.forward(f, x, goal, b, s)?);
        }
        let mut proprio: Vec<T> = obs.proprio.iter().map(|&v| cst::<T>(v as f64)).collect();
        if let Some(rng) = dropout {
            for v in proprio.iter_mut() {
                if rng.gen::<f64>() < cfg.obs_dropout {
                    *v = T::zero();
                }
            }
        }
        let p = f.tape.constant(Tensor::from_vec(&[b, cfg.proprio_dim], proprio));
        parts.push(self.arch.proprio.forward(f, p));
        let tokens = f.tape.concat_groups(&parts, b);
        let pos = f.p(self.arch.obs_pos);
        Ok(f.tape.add_tiled(tokens, pos))
    }

    /// Runs the encoder and returns `e^(1..L)`. Tokens with `false` in `mask`
    /// are never attended to.
    pub fn encode_tokens(&self, f: &mut Forward<T>, tokens: Var, batch: usize, mask: Option<&[bool]>) -> Vec<Var> {
        let len = self.config.seq_len();
        let mut x = tokens;
        let mut out = Vec::with_capacity(self.arch.encoder.len());
        for blk in &self.arch.encoder {
            x = blk.forward(f, x, batch, len, false, mask.map(<[bool]>::to_vec));
            out.push(x);
        }
        out
    }

    fn check_steps(&self, ks: &[usize], batch: usize) -> Result<()> {
        if ks.len() != batch {
            return Err(Error::ShapeMismatch { expected: vec![batch], got: vec![ks.len()] });
        }
        if let Some(k) = ks.iter().find(|&&k| k >= self.config.diffusion_steps) {
            return Err(Error::invalid(format!("step {k} outside [0, {})", self.config.diffusion_steps)));
        }
        Ok(())
    }

    /// Noise prediction `B·H × A` from encoder outputs and noised chunks `x_k`.
    pub fn decode(
        &self,
        f: &mut Forward<T>,
        e: &[Var],
        x_k: Var,
        ks: &[usize],
        batch: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let HeadNet::Diffusion(dec) = &self.arch.head else {
            return Err(Error::invalid("regression network has no noise decoder"));
        };
        self.check_steps(ks, batch)?;
        let cfg = &self.config;
        let (h, s) = (cfg.horizon, cfg.seq_len());
        let x = dec.in_proj.forward(f, x_k);
        let pos = f.p(dec.pos);
        let mut x = f.tape.add_tiled(x, pos);
        let t = dec.time.forward(f, ks)?;
        let mem_mask = mask.map(|m| std::iter::once(true).chain(m.iter().copied()).collect::<Vec<_>>());
        let mut cond = None;
        let conds = |f: &mut Forward<T>, ei: Var| {
            let pooled = f.tape.group_mean(ei, s, mask.map(<[bool]>::to_vec));
            f.tape.add(pooled, t)
        };
        match &dec.blocks {
            DecoderBlocks::Dit(blocks) => {
                for (blk, &ei) in blocks.iter().zip(e) {
                    let c = conds(f, ei);
                    x = blk.forward(f, x, c, batch, h);
                    cond = Some(c);
                }
            }
            DecoderBlocks::Cross(blocks) => {
                for (blk, &ei) in blocks.iter().zip(e) {
                    let mem = f.tape.concat_groups(&[t, ei], batch);
                    x = blk.forward(f, x, mem, batch, h, s + 1, mem_mask.clone());
                }
            }
            DecoderBlocks::InContext { blocks, mem_pos } => {
                let mp = f.p(*mem_pos);
                for (blk, &ei) in blocks.iter().zip(e) {
                    let mem = f.tape.concat_groups(&[t, ei], batch);
                    let mem = f.tape.add_tiled(mem, mp);
                    let joint = f.tape.concat_groups(&[mem, x], batch);
                    x = blk.forward(f, joint, batch, s + 1, h, mem_mask.clone());
                }
            }
        }
        Ok(match dec.final_layer {
            FinalLayer::Modulated { modulation, head } => {
                let c = match cond {
                    Some(c) => c,
                    None => conds(f, e[e.len() - 1]),
                };
                let m = modulation.forward(f, c);
                let shift = f.tape.slice_cols(m, 0, cfg.width);
                let scale = f.tape.slice_cols(m, cfg.width, cfg.width);
                let y = f.tape.layer_norm(x, LN_EPS);
                let y = f.tape.modulate(y, shift, scale);
                head.forward(f, y)
            }
            FinalLayer::Plain { ln, head } => {
                let y = ln.forward(f, x);
                head.forward(f, y)
            }
        })
    }

    /// Direct chunk prediction `B × H·A` for the regression head.
    pub fn regress(&self, f: &mut Forward<T>, e: &[Var], mask: Option<&[bool]>) -> Result<Var> {
        let HeadNet::Regression(head) = &self.arch.head else {
            return Err(Error::invalid("diffusion network has no regression head"));
        };
        let pooled = f.tape.group_mean(e[e.len() - 1], self.config.seq_len(), mask.map(<[bool]>::to_vec));
        let h = head.fc1.forward(f, pooled);
        let h = f.tape.silu(h);
        Ok(head.fc2.forward(f, h))
    }

    fn check_chunk(&self, x_k: &Tensor<T>, batch: usize) -> Result<()> {
        let want = vec![batch * self.config.horizon, self.config.action_dim];
        if x_k.shape != want {
            return Err(Error::ShapeMismatch { expected: want, got: x_k.shape.clone() });
        }
        if !x_k.all_finite() {
            return Err(Error::invalid("non-finite noised action input"));
        }
        Ok(())
    }

    /// ε prediction for noised chunks `x_k` (`B·H × A`) at steps `ks`.
    pub fn predict_epsilon(
        &self,
        x_k: &Tensor<T>,
        ks: &[usize],
        obs: &ObsBatch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>> {
        self.check_chunk(x_k, obs.batch())?;
        let mut f = Forward::new(&self.params, false);
        let tokens = self.tokenize(&mut f, obs, dropout)?;
        let e = self.encode_tokens(&mut f, tokens, obs.batch(), None);
        let x = f.tape.constant(x_k.clone());
        let out = self.decode(&mut f, &e, x, ks, obs.batch(), None)?;
        Ok(f.tape.into_value(out))
    }

    /// Encoder outputs in evaluation mode.
    pub fn encode(&self, obs: &ObsBatch) -> Result<Encoded<T>> {
        let mut f = Forward::new(&self.params, false);
        let tokens = self.tokenize(&mut f, obs, None)?;
        let e = self.encode_tokens(&mut f, tokens, obs.batch(), None);
        let layers = e.iter().map(|&v| f.tape.value(v).clone()).collect();
        Ok(Encoded { batch: obs.batch(), layers })
    }

    /// ε prediction reusing cached encoder outputs.
    pub fn predict_epsilon_encoded(&self, enc: &Encoded<T>, x_k: &Tensor<T>, ks: &[usize]) -> Result<Tensor<T>> {
        self.check_chunk(x_k, enc.batch)?;
        let mut f = Forward::new(&self.params, false);
        let e: Vec<Var> = enc.layers.iter().map(|t| f.tape.constant(t.clone())).collect();
        let x = f.tape.constant(x_k.clone());
        let out = self.decode(&mut f, &e, x, ks, enc.batch, None)?;
        Ok(f.tape.into_value(out))
    }

    /// Regression-head chunk prediction, `B·H × A`.
    pub fn predict_chunk(&self, obs: &ObsBatch) -> Result<Tensor<T>> {
        let mut f = Forward::new(&self.params, false);
        let tokens = self.tokenize(&mut f, obs, None)?;
        let e = self.encode_tokens(&mut f, tokens, obs.batch(), None);
        let out = self.regress(&mut f, &e, None)?;
        let mut t = f.tape.into_value(out);
        t.shape = vec![obs.batch() * self.config.horizon, self.config.action_dim];
        Ok(t)
    }

    /// Parameter name prefix owned by camera `c`'s tokenizer.
    pub fn camera_prefix(c: usize) -> String {
        format!("camera{c}.")
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DBCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: PolicyConfig,
    stats: NormStats,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// Trained network plus the normalisation it expects and free-form metadata.
///
/// On disk: magic, `u32` version, `u32` header length, JSON header (config,
/// stats, metadata, parameter names and shapes), then every parameter as
/// little-endian `f32` in header order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: PolicyNet<f32>,
    pub stats: NormStats,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.net.config.clone(),
            stats: self.stats.clone(),
            meta: self.meta.clone(),
            params: self
                .net
                .params
                .iter()
                .map(|(_, name, t)| ParamEntry { name: name.to_string(), shape: t.shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 16 + 4 * self.net.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.net.params.iter() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(buf, path);
        if r.bytes(8)? != CHECKPOINT_MAGIC {
            return Err(r.fail("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.bytes(len)?).map_err(|e| r.fail(format!("header: {e}")))?;
        let mut net = PolicyNet::<f32>::init(header.config, 0)?;
        if header.params.len() != net.params.len() {
            return Err(r.fail("parameter list does not match the configured architecture"));
        }
        let mut tensors = Vec::with_capacity(header.params.len());
        for (entry, (_, name, t)) in header.params.iter().zip(net.params.iter()) {
            if entry.name != name || entry.shape != t.shape {
                return Err(r.fail(format!("parameter {} {:?} does not match {name} {:?}", entry.name, entry.shape, t.shape)));
            }
            tensors.push(Tensor::from_vec(&entry.shape, r.f32s(t.len())?));
        }
        if !r.done() {
            return Err(r.fail("trailing bytes after parameters"));
        }
        net.params.load(tensors)?;
        Ok(Checkpoint { net, stats: header.stats, meta: header.meta })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
