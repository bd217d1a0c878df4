//! Network building blocks: parameter storage, dense layers, attention, the
//! timestep embedder and the four decoder conditioning blocks.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnSpec, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{cst, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Scalar count of parameters whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(_, _, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces all tensors, keeping names; shapes must agree.
    pub fn load(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: expected {}, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape != self.tensors[i].shape {
                return Err(Error::ShapeMismatch { expected: self.tensors[i].shape.clone(), got: t.shape.clone() });
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over `(fan_in, fan_out)`.
    Xavier,
    /// He normal with the given fan-in.
    Kaiming(usize),
    Normal(f64),
}

/// Parameter allocation with a seeded initialiser.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Xavier => {
                let (fi, fo) = (shape[0], *shape.last().unwrap());
                let a = (6.0 / (fi + fo) as f64).sqrt();
                (0..n).map(|_| cst(self.rng.gen_range(-a..a))).collect()
            }
            Init::Kaiming(fan_in) => {
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                (0..n).map(|_| cst(d.sample(self.rng))).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| cst(d.sample(self.rng))).collect()
            }
        };
        self.store.insert(name, Tensor::from_vec(shape, data))
    }

    pub fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Dense {
        let w = self.tensor(&format!("{name}.w"), &[fan_in, fan_out], init);
        let b = self.tensor(&format!("{name}.b"), &[fan_out], Init::Zeros);
        Dense { w, b: Some(b) }
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.tensor(&format!("{name}.gamma"), &[width], Init::Ones),
            beta: self.tensor(&format!("{name}.beta"), &[width], Init::Zeros),
        }
    }
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Forward<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// `trainable` marks parameter leaves as requiring gradients.
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Forward { tape: Tape::new(), store, bound: vec![None; store.len()], trainable }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { self.tape.param(t) } else { self.tape.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Gradient per parameter, zero-filled for parameters the graph never touched.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<Vec<T>> {
        self.store
            .iter()
            .map(|(id, _, t)| match self.bound[id.0].and_then(|v| grads.get(v)) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); t.len()],
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Var {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        f.tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Var {
        let n = f.tape.layer_norm(x, LN_EPS);
        let (g, b) = (f.p(self.gamma), f.p(self.beta));
        f.tape.affine_cols(n, g, b)
    }
}

/// Two dense layers with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl Mlp {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize, hidden: usize, out_init: Init) -> Self {
        Mlp {
            fc1: b.dense(&format!("{name}.fc1"), width, hidden, Init::Xavier),
            fc2: b.dense(&format!("{name}.fc2"), hidden, width, out_init),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Var {
        let h = self.fc1.forward(f, x);
        let h = f.tape.gelu(h);
        self.fc2.forward(f, h)
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub qkv: Dense,
    pub out: Dense,
    pub heads: usize,
    pub width: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize, heads: usize, out_init: Init) -> Self {
        SelfAttention {
            qkv: b.dense(&format!("{name}.qkv"), width, 3 * width, Init::Xavier),
            out: b.dense(&format!("{name}.out"), width, width, out_init),
            heads,
            width,
        }
    }

    /// `x` holds `groups` sequences of `len` tokens.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        groups: usize,
        len: usize,
        causal: bool,
        key_mask: Option<Vec<bool>>,
    ) -> Var {
        let d = self.width;
        let qkv = self.qkv.forward(f, x);
        let spec = AttnSpec { groups, q_len: len, kv_len: len, heads: self.heads, causal, key_mask };
        let a = f.tape.attention_cols([(qkv, 0), (qkv, d), (qkv, 2 * d)], d, spec);
        self.out.forward(f, a)
    }
}

/// Multi-head attention with queries from `x` and keys/values from `memory`.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub q: Dense,
    pub kv: Dense,
    pub out: Dense,
    pub heads: usize,
    pub width: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize, heads: usize, out_init: Init) -> Self {
        CrossAttention {
            q: b.dense(&format!("{name}.q"), width, width, Init::Xavier),
            kv: b.dense(&format!("{name}.kv"), width, 2 * width, Init::Xavier),
            out: b.dense(&format!("{name}.out"), width, width, out_init),
            heads,
            width,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        memory: Var,
        groups: usize,
        len: usize,
        mem_len: usize,
        mem_mask: Option<Vec<bool>>,
    ) -> Var {
        let d = self.width;
        let q = self.q.forward(f, x);
        let kv = self.kv.forward(f, memory);
        let spec = AttnSpec { groups, q_len: len, kv_len: mem_len, heads: self.heads, causal: false, key_mask: mem_mask };
        let a = f.tape.attention_cols([(q, 0), (kv, 0), (kv, d)], d, spec);
        self.out.forward(f, a)
    }
}

/// Sinusoidal features of a step index: `[sin(k·f_i)…, cos(k·f_i)…]` with
/// `f_i = 10000^(−2i/width)`.
pub fn sinusoidal_features(k: f64, width: usize) -> Result<Vec<f64>> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(Error::invalid(format!("timestep embedding width must be even, got {width}")));
    }
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = 10000f64.powf(-2.0 * i as f64 / width as f64);
        out[i] = (k * freq).sin();
        out[half + i] = (k * freq).cos();
    }
    Ok(out)
}

/// Sinusoidal features followed by `Dense → SiLU → Dense`.
#[derive(Clone, Copy, Debug)]
pub struct TimestepEmbedder {
    pub fc1: Dense,
    pub fc2: Dense,
    pub width: usize,
}

impl TimestepEmbedder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize) -> Result<Self> {
        if !width.is_multiple_of(2) {
            return Err(Error::invalid(format!("timestep embedding width must be even, got {width}")));
        }
        Ok(TimestepEmbedder {
            fc1: b.dense(&format!("{name}.fc1"), width, width, Init::Xavier),
            fc2: b.dense(&format!("{name}.fc2"), width, width, Init::Xavier),
            width,
        })
    }

    /// Embeds one step index per batch row.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, ks: &[usize]) -> Result<Var> {
        let mut feats = Vec::with_capacity(ks.len() * self.width);
        for &k in ks {
            feats.extend(sinusoidal_features(k as f64, self.width)?.into_iter().map(cst::<T>));
        }
        let x = f.tape.constant(Tensor::from_vec(&[ks.len(), self.width], feats));
        let h = self.fc1.forward(f, x);
        let h = f.tape.silu(h);
        Ok(self.fc2.forward(f, h))
    }
}

/// Channel-wise FiLM `h·(1 + gamma) + beta` over `groups` feature maps.
/// `features` is channels-last; `gamma`/`beta` are `groups × channels`.
pub fn film<T: Scalar>(f: &mut Forward<T>, features: Var, gamma: Var, beta: Var) -> Result<Var> {
    let (fv, gv, bv) = (f.tape.value(features), f.tape.value(gamma), f.tape.value(beta));
    if gv.shape != bv.shape || gv.cols() != fv.cols() {
        return Err(Error::ShapeMismatch { expected: vec![gv.rows(), fv.cols()], got: bv.shape.clone() });
    }
    if gv.rows() == 0 || fv.rows() % gv.rows() != 0 {
        return Err(Error::invalid(format!(
            "feature rows {} not divisible into {} FiLM groups",
            fv.rows(),
            gv.rows()
        )));
    }
    Ok(f.tape.modulate(features, beta, gamma))
}

/// The six adaLN vectors for one decoder block, each `groups × width`.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams {
    pub shift1: Var,
    pub scale1: Var,
    pub gate1: Var,
    pub shift2: Var,
    pub scale2: Var,
    pub gate2: Var,
}

/// Decoder conditioning variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// adaLN with zero-initialised gates and output head.
    AdalnZero,
    /// adaLN with ordinary initialisation everywhere.
    Adaln,
    /// Self-attention, cross-attention to `[time ‖ encoder tokens]`, MLP.
    CrossAttn,
    /// Causal self-attention over `[time ‖ encoder tokens ‖ action tokens]`.
    InContext,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::AdalnZero, Variant::Adaln, Variant::CrossAttn, Variant::InContext];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::AdalnZero => "adaln_zero",
            Variant::Adaln => "adaln",
            Variant::CrossAttn => "cross_attn",
            Variant::InContext => "in_context",
        }
    }

    pub fn is_adaln(&self) -> bool {
        matches!(self, Variant::AdalnZero | Variant::Adaln)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant '{s}' (expected adaln_zero, adaln, cross_attn or in_context)")))
    }
}

/// Maps a conditioning vector to the six modulation vectors with one dense layer.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub proj: Dense,
    pub width: usize,
}

impl Modulation {
    /// With `zero_gates`, the gate columns (weights and bias) start at zero.
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize, zero_gates: bool) -> Self {
        let proj = b.dense(name, width, 6 * width, Init::Xavier);
        if zero_gates {
            let w = b.store.get_mut(proj.w);
            for row in w.data.chunks_mut(6 * width) {
                for gate in [2, 5] {
                    row[gate * width..(gate + 1) * width].fill(T::zero());
                }
            }
        }
        Modulation { proj, width }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, cond: Var) -> ModulationParams {
        let m = self.proj.forward(f, cond);
        let d = self.width;
        let mut part = |i: usize| f.tape.slice_cols(m, i * d, d);
        ModulationParams {
            shift1: part(0),
            scale1: part(1),
            gate1: part(2),
            shift2: part(3),
            scale2: part(4),
            gate2: part(5),
        }
    }
}

/// Pre-LN transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize, heads: usize, mlp_hidden: usize) -> Self {
        TransformerBlock {
            ln1: b.layer_norm(&format!("{name}.ln1"), width),
            attn: SelfAttention::new(b, &format!("{name}.attn"), width, heads, Init::Xavier),
            ln2: b.layer_norm(&format!("{name}.ln2"), width),
            mlp: Mlp::new(b, &format!("{name}.mlp"), width, mlp_hidden, Init::Xavier),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        groups: usize,
        len: usize,
        causal: bool,
        key_mask: Option<Vec<bool>>,
    ) -> Var {
        let h = self.ln1.forward(f, x);
        let h = self.attn.forward(f, h, groups, len, causal, key_mask);
        let x = f.tape.add(x, h);
        let h = self.ln2.forward(f, x);
        let h = self.mlp.forward(f, h);
        f.tape.add(x, h)
    }
}

/// adaLN(-Zero) decoder block; its layer norms carry no affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct DitBlock {
    pub modulation: Modulation,
    pub attn: SelfAttention,
    pub mlp: Mlp,
}

impl DitBlock {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize, heads: usize, zero_gates: bool) -> Self {
        DitBlock {
            modulation: Modulation::new(b, &format!("{name}.adaln"), width, zero_gates),
            attn: SelfAttention::new(b, &format!("{name}.attn"), width, heads, Init::Xavier),
            mlp: Mlp::new(b, &format!("{name}.mlp"), width, MLP_RATIO * width, Init::Xavier),
        }
    }

    /// `cond` is `groups × width`; `x` holds `groups` sequences of `len` tokens.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var, cond: Var, groups: usize, len: usize) -> Var {
        let m = self.modulation.forward(f, cond);
        self.forward_modulated(f, x, &m, groups, len)
    }

    pub fn forward_modulated<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        m: &ModulationParams,
        groups: usize,
        len: usize,
    ) -> Var {
        let h = f.tape.layer_norm(x, LN_EPS);
        let h = f.tape.modulate(h, m.shift1, m.scale1);
        let h = self.attn.forward(f, h, groups, len, false, None);
        let h = f.tape.mul_groups(h, m.gate1);
        let x = f.tape.add(x, h);
        let h = f.tape.layer_norm(x, LN_EPS);
        let h = f.tape.modulate(h, m.shift2, m.scale2);
        let h = self.mlp.forward(f, h);
        let h = f.tape.mul_groups(h, m.gate2);
        f.tape.add(x, h)
    }
}

/// Self-attention, cross-attention and MLP with ungated pre-LN residuals.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnBlock {
    pub ln1: LayerNorm,
    pub self_attn: SelfAttention,
    pub ln2: LayerNorm,
    pub cross: CrossAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttnBlock {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize, heads: usize, out_init: Init) -> Self {
        CrossAttnBlock {
            ln1: b.layer_norm(&format!("{name}.ln1"), width),
            self_attn: SelfAttention::new(b, &format!("{name}.self_attn"), width, heads, out_init),
            ln2: b.layer_norm(&format!("{name}.ln2"), width),
            cross: CrossAttention::new(b, &format!("{name}.cross"), width, heads, out_init),
            ln3: b.layer_norm(&format!("{name}.ln3"), width),
            mlp: Mlp::new(b, &format!("{name}.mlp"), width, MLP_RATIO * width, out_init),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        memory: Var,
        groups: usize,
        len: usize,
        mem_len: usize,
        mem_mask: Option<Vec<bool>>,
    ) -> Var {
        let h = self.ln1.forward(f, x);
        let h = self.self_attn.forward(f, h, groups, len, false, None);
        let x = f.tape.add(x, h);
        let h = self.ln2.forward(f, x);
        let h = self.cross.forward(f, h, memory, groups, len, mem_len, mem_mask);
        let x = f.tape.add(x, h);
        let h = self.ln3.forward(f, x);
        let h = self.mlp.forward(f, h);
        f.tape.add(x, h)
    }
}

/// Causal pre-LN block over `[memory ‖ x]`; only the trailing `x` rows are returned.
#[derive(Clone, Copy, Debug)]
pub struct InContextBlock {
    pub block: TransformerBlock,
}

impl InContextBlock {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize, heads: usize) -> Self {
        InContextBlock { block: TransformerBlock::new(b, name, width, heads, MLP_RATIO * width) }
    }

    /// `joint` holds `groups` sequences of `mem_len + len` tokens, memory first.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        joint: Var,
        groups: usize,
        mem_len: usize,
        len: usize,
        mem_mask: Option<Vec<bool>>,
    ) -> Var {
        let total = mem_len + len;
        let key_mask = mem_mask.map(|m| m.into_iter().chain(std::iter::repeat_n(true, len)).collect());
        let y = self.block.forward(f, joint, groups, total, true, key_mask);
        f.tape.slice_groups(y, total, mem_len, len)
    }
}
