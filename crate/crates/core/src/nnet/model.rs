//! GRU encoder-decoder with additive attention and two output heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{NodeId, Tape};
use crate::dirmath::{softmax_raw, Categorical, DirichletParams};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIAL: usize = 4;

/// Logits are clamped to this magnitude before the exponential concentration head.
pub const CONCENTRATION_LOGIT_CLAMP: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Softmax over the vocabulary: a categorical per position.
    Softmax,
    /// `α = exp(clamp(z))`: Dirichlet concentrations per position.
    Concentration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub head_mode: HeadMode,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            embed_dim: 32,
            hidden_dim: 64,
            head_mode: HeadMode::Softmax,
            max_len: 64,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < NUM_SPECIAL {
            return Err(Error::contract(format!(
                "vocab_size must be at least {NUM_SPECIAL}, got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_len == 0 {
            return Err(Error::contract(
                "embed_dim, hidden_dim and max_len must be positive",
            ));
        }
        Ok(())
    }

    pub fn with_head(&self, head_mode: HeadMode) -> Self {
        Self {
            head_mode,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Names and `[rows, cols]` shapes of every parameter, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, [usize; 2])> {
        let (v, e, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        vec![
            ("src_embed", [v, e]),
            ("tgt_embed", [v, e]),
            ("enc_wx", [e, 3 * h]),
            ("enc_bx", [1, 3 * h]),
            ("enc_uh", [h, 3 * h]),
            ("enc_bh", [1, 3 * h]),
            ("att_wk", [h, h]),
            ("att_wq", [h, h]),
            ("att_v", [h, 1]),
            ("dec_wx", [e + h, 3 * h]),
            ("dec_bx", [1, 3 * h]),
            ("dec_uh", [h, 3 * h]),
            ("dec_bh", [1, 3 * h]),
            ("out_w", [2 * h, v]),
            ("out_b", [1, v]),
        ]
    }
}

const SRC_EMBED: usize = 0;
const TGT_EMBED: usize = 1;
const ENC_WX: usize = 2;
const ENC_BX: usize = 3;
const ENC_UH: usize = 4;
const ENC_BH: usize = 5;
const ATT_WK: usize = 6;
const ATT_WQ: usize = 7;
const ATT_V: usize = 8;
const DEC_WX: usize = 9;
const DEC_BX: usize = 10;
const DEC_UH: usize = 11;
const DEC_BH: usize = 12;
const OUT_W: usize = 13;
const OUT_B: usize = 14;

/// A named dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-position model output.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Categorical(Categorical),
    Dirichlet(DirichletParams),
}

impl HeadOutput {
    /// The predictive categorical (the Dirichlet mean for the concentration head).
    pub fn predictive(&self) -> Categorical {
        match self {
            HeadOutput::Categorical(c) => c.clone(),
            HeadOutput::Dirichlet(d) => crate::dirmath::dirichlet_mean(d),
        }
    }

    pub fn as_categorical(&self) -> Option<&Categorical> {
        match self {
            HeadOutput::Categorical(c) => Some(c),
            HeadOutput::Dirichlet(_) => None,
        }
    }

    pub fn as_dirichlet(&self) -> Option<&DirichletParams> {
        match self {
            HeadOutput::Dirichlet(d) => Some(d),
            HeadOutput::Categorical(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    config: ModelConfig,
    params: Vec<Tensor>,
}

/// Seeded random initialisation. Different seeds give different members.
pub fn init_model(config: &ModelConfig) -> Result<SeqModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = config
        .parameter_shapes()
        .into_iter()
        .map(|(name, [rows, cols])| {
            let mut t = Tensor::zeros(name, &[rows, cols]);
            let is_bias = rows == 1;
            if !is_bias {
                let bound = if name.ends_with("embed") {
                    1.0 / (config.embed_dim as f64).sqrt()
                } else {
                    1.0 / (rows as f64).sqrt()
                };
                t.values
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
            }
            t
        })
        .collect();
    Ok(SeqModel {
        config: config.clone(),
        params,
    })
}

impl SeqModel {
    /// All-zero parameters: every position predicts uniform (softmax) or `α = 1` (concentration).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| Tensor::zeros(name, &shape))
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Assembles a model from loaded tensors, checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&params) {
            if *name != t.name || shape[..] != t.shape[..] || t.values.len() != shape[0] * shape[1]
            {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {name} {:?}",
                    t.name, t.shape, shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_mode(&self) -> HeadMode {
        self.config.head_mode
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize], what: &str) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "{what} token {t} out of range for vocabulary {}",
                self.config.vocab_size
            )));
        }
        if tokens.len() >= self.config.max_len {
            return Err(Error::contract(format!(
                "{what} length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Converts one row of head logits into the head's output type.
    pub fn head_output(&self, logits: &[f64]) -> HeadOutput {
        match self.config.head_mode {
            HeadMode::Softmax => {
                HeadOutput::Categorical(Categorical::from_raw(softmax_raw(logits)))
            }
            HeadMode::Concentration => {
                HeadOutput::Dirichlet(DirichletParams::from_raw(concentrations(logits)))
            }
        }
    }

    /// Outputs at every reference position (the end marker included) under teacher forcing.
    pub fn forward_teacher_forced(
        &self,
        src: &[usize],
        reference: &[usize],
    ) -> Result<Vec<HeadOutput>> {
        self.check_tokens(src, "source")?;
        self.check_tokens(reference, "reference")?;
        let mut g = Graph::new(self, &[src])?;
        let mut prev = BOS;
        let mut out = Vec::with_capacity(reference.len() + 1);
        for l in 0..=reference.len() {
            let logits = g.step(&[prev]);
            out.push(self.head_output(g.tape.value(logits)));
            if l < reference.len() {
                prev = reference[l];
            }
        }
        Ok(out)
    }

    /// Output for the next position given a generated or reference prefix.
    pub fn forward_step(&self, src: &[usize], history: &[usize]) -> Result<HeadOutput> {
        self.check_tokens(src, "source")?;
        self.check_tokens(history, "history")?;
        let mut g = Graph::new(self, &[src])?;
        let mut logits = g.step(&[BOS]);
        for &tok in history {
            logits = g.step(&[tok]);
        }
        Ok(self.head_output(g.tape.value(logits)))
    }

    /// Teacher-forced logits for several `(source, reference)` pairs in one
    /// batched pass; row `i` holds `reference_i.len() + 1` logit vectors.
    pub fn teacher_forced_logits(
        &self,
        pairs: &[(&[usize], &[usize])],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        for (src, reference) in pairs {
            self.check_tokens(src, "source")?;
            self.check_tokens(reference, "reference")?;
        }
        let srcs: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
        let mut g = Graph::new(self, &srcs)?;
        let steps = pairs.iter().map(|p| p.1.len() + 1).max().unwrap_or(0);
        let v = self.config.vocab_size;
        let mut out: Vec<Vec<Vec<f64>>> = pairs
            .iter()
            .map(|p| Vec::with_capacity(p.1.len() + 1))
            .collect();
        let mut prev = vec![BOS; pairs.len()];
        for l in 0..steps {
            let node = g.step(&prev);
            let logits = g.tape.value(node);
            for (b, (_, reference)) in pairs.iter().enumerate() {
                if l <= reference.len() {
                    out[b].push(logits[b * v..(b + 1) * v].to_vec());
                }
                prev[b] = reference.get(l).copied().unwrap_or(PAD);
            }
        }
        Ok(out)
    }

    /// Batched [`SeqModel::forward_teacher_forced`].
    pub fn forward_teacher_forced_batch(
        &self,
        pairs: &[(&[usize], &[usize])],
    ) -> Result<Vec<Vec<HeadOutput>>> {
        Ok(self
            .teacher_forced_logits(pairs)?
            .into_iter()
            .map(|rows| rows.iter().map(|z| self.head_output(z)).collect())
            .collect())
    }
}

/// `exp(clamp(z, ±CONCENTRATION_LOGIT_CLAMP))`.
pub fn concentrations(logits: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .map(|z| {
            z.clamp(-CONCENTRATION_LOGIT_CLAMP, CONCENTRATION_LOGIT_CLAMP)
                .exp()
        })
        .collect()
}

/// An unrolled computation for a batch of source sentences. The encoder runs
/// on construction; every [`Graph::step`] advances the decoder by one token
/// for all rows and returns the `[B, V]` logits node.
pub struct Graph<'m> {
    pub(crate) tape: Tape<'m>,
    params: Vec<NodeId>,
    keys: NodeId,
    values: NodeId,
    lengths: Vec<usize>,
    state: NodeId,
    batch: usize,
}

impl<'m> Graph<'m> {
    /// Encodes `srcs` (each gets an end marker appended; shorter rows are padded).
    pub fn new(model: &'m SeqModel, srcs: &[&[usize]]) -> Result<Self> {
        if srcs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut tape = Tape::new();
        let params: Vec<NodeId> = model
            .params
            .iter()
            .map(|t| tape.leaf_ref(t.shape[0], t.shape[1], &t.values))
            .collect();
        let h = model.config.hidden_dim;
        let b = srcs.len();
        let lengths: Vec<usize> = srcs.iter().map(|s| s.len() + 1).collect();
        let seq = *lengths.iter().max().expect("non-empty batch");
        let mut state = tape.leaf(b, h, vec![0.0; b * h]);
        let mut states = Vec::with_capacity(seq);
        for t in 0..seq {
            let ids: Vec<usize> = srcs
                .iter()
                .map(|s| match t.cmp(&s.len()) {
                    std::cmp::Ordering::Less => s[t],
                    std::cmp::Ordering::Equal => EOS,
                    std::cmp::Ordering::Greater => PAD,
                })
                .collect();
            let x = tape.embed(params[SRC_EMBED], &ids);
            let xw = tape.matmul(x, params[ENC_WX]);
            let xw = tape.add_bias(xw, params[ENC_BX]);
            let hu = tape.matmul(state, params[ENC_UH]);
            let hu = tape.add_bias(hu, params[ENC_BH]);
            state = tape.gru(xw, hu, state);
            states.push(state);
        }
        let values = tape.stack_time(&states);
        let keys = tape.matmul(values, params[ATT_WK]);
        let dec_state = tape.leaf(b, h, vec![0.0; b * h]);
        Ok(Self {
            tape,
            params,
            keys,
            values,
            lengths,
            state: dec_state,
            batch: b,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Feeds `prev` (one token per row) and returns the logits node for the next position.
    pub fn step(&mut self, prev: &[usize]) -> NodeId {
        assert_eq!(prev.len(), self.batch);
        let p = &self.params;
        let t = &mut self.tape;
        let query = t.matmul(self.state, p[ATT_WQ]);
        let ctx = t.attention(self.keys, query, p[ATT_V], self.values, &self.lengths);
        let emb = t.embed(p[TGT_EMBED], prev);
        let input = t.concat_cols(&[emb, ctx]);
        let xw = t.matmul(input, p[DEC_WX]);
        let xw = t.add_bias(xw, p[DEC_BX]);
        let hu = t.matmul(self.state, p[DEC_UH]);
        let hu = t.add_bias(hu, p[DEC_BH]);
        self.state = t.gru(xw, hu, self.state);
        let feat = t.concat_cols(&[self.state, ctx]);
        let logits = t.matmul(feat, p[OUT_W]);
        t.add_bias(logits, p[OUT_B])
    }

    pub fn logits(&self, node: NodeId) -> &[f64] {
        self.tape.value(node)
    }

    pub fn tape_mut(&mut self) -> &mut Tape<'m> {
        &mut self.tape
    }

    /// Parameter gradients after a reverse sweep from `root`, aligned with `model.params()`.
    pub fn parameter_gradients(&self, root: NodeId) -> Result<Vec<Vec<f64>>> {
        let mut grads = self.tape.backward(root)?;
        Ok(self
            .params
            .iter()
            .map(|&id| {
                grads
                    .take(id)
                    .unwrap_or_else(|| vec![0.0; self.tape.value(id).len()])
            })
            .collect())
    }
}
