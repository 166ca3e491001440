//! Beam-of-one decoding: single models, product-of-expectations ensembles and
//! the two-model guided uncertainty decode (one model picks tokens, the other
//! emits Dirichlets on the same history).
//!
//! Batched variants decode many sources at once; rows never interact, so the
//! batched result for a sentence is bit-for-bit the single-sentence result.

use crate::dirmath::{softmax_raw, temper_raw, Categorical, DirichletParams, TokenPosteriorSet};
use crate::error::{Error, Result};
use crate::nnet::{concentrations, Graph, HeadMode, HeadOutput, SeqModel, BOS, EOS, PAD};

/// Output of a greedy decode.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Emitted tokens, end marker excluded.
    pub tokens: Vec<usize>,
    /// One output per predicted position; includes the end-marker step when
    /// the decode terminated normally.
    pub outputs: Vec<HeadOutput>,
    /// The end marker was never produced within `max_len` steps.
    pub truncated: bool,
}

impl DecodeResult {
    /// Number of predicted positions (tokens plus the end marker if emitted).
    pub fn predicted_len(&self) -> usize {
        self.outputs.len()
    }
}

/// Argmax over everything but the padding token; the lowest index wins ties.
fn pick(probs: &[f64]) -> usize {
    let mut best = if PAD == 0 { 1 } else { 0 };
    for (i, &p) in probs.iter().enumerate() {
        if i != PAD && p > probs[best] {
            best = i;
        }
    }
    best
}

fn check_sources(model: &SeqModel, srcs: &[&[usize]]) -> Result<()> {
    let vocab = model.config().vocab_size;
    let max_len = model.config().max_len;
    for s in srcs {
        if s.len() >= max_len {
            return Err(Error::contract(format!(
                "source length {} exceeds max_len {max_len}",
                s.len()
            )));
        }
        if let Some(&t) = s.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!(
                "source token {t} outside vocabulary of {vocab}"
            )));
        }
    }
    Ok(())
}

/// Per-row decode state shared by the batched drivers.
struct Rows {
    tokens: Vec<Vec<usize>>,
    done: Vec<bool>,
    prev: Vec<usize>,
}

impl Rows {
    fn new(n: usize) -> Self {
        Self {
            tokens: vec![Vec::new(); n],
            done: vec![false; n],
            prev: vec![BOS; n],
        }
    }

    fn active(&self) -> bool {
        self.done.iter().any(|d| !d)
    }

    fn advance(&mut self, row: usize, token: usize) {
        if token == EOS {
            self.done[row] = true;
        } else {
            self.tokens[row].push(token);
        }
        self.prev[row] = token;
    }
}

/// Greedy decode of one source. Concentration-headed models decode from their
/// predictive mean `α / α0`.
pub fn greedy_decode(model: &SeqModel, src: &[usize]) -> Result<DecodeResult> {
    Ok(greedy_decode_batch(model, &[src])?.remove(0))
}

pub fn greedy_decode_batch(model: &SeqModel, srcs: &[&[usize]]) -> Result<Vec<DecodeResult>> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    check_sources(model, srcs)?;
    let v = model.config().vocab_size;
    let max_len = model.config().max_len;
    let mut g = Graph::new(model, srcs)?;
    let mut rows = Rows::new(srcs.len());
    let mut outputs: Vec<Vec<HeadOutput>> = vec![Vec::new(); srcs.len()];
    for _ in 0..max_len {
        if !rows.active() {
            break;
        }
        let node = g.step(&rows.prev);
        let logits = g.logits(node);
        for b in 0..srcs.len() {
            if rows.done[b] {
                continue;
            }
            let out = model.head_output(&logits[b * v..(b + 1) * v]);
            let token = pick(out.predictive().probs());
            outputs[b].push(out);
            rows.advance(b, token);
        }
    }
    Ok(finish(rows, outputs))
}

fn finish(rows: Rows, outputs: Vec<Vec<HeadOutput>>) -> Vec<DecodeResult> {
    rows.tokens
        .into_iter()
        .zip(outputs)
        .zip(rows.done)
        .map(|((tokens, outputs), done)| DecodeResult {
            tokens,
            outputs,
            truncated: !done,
        })
        .collect()
}

fn check_ensemble(ensemble: &[SeqModel]) -> Result<()> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::contract("empty ensemble"))?;
    for m in ensemble {
        if m.head_mode() != HeadMode::Softmax {
            return Err(Error::contract("ensemble members must have softmax heads"));
        }
        if m.config().vocab_size != first.config().vocab_size
            || m.config().max_len != first.config().max_len
        {
            return Err(Error::contract(
                "ensemble members disagree on vocabulary or max_len",
            ));
        }
    }
    Ok(())
}

/// Product-of-expectations decode: member outputs are tempered at
/// `temperature`, averaged, and the argmax is fed back to every member.
/// Also returns the tempered member set at each predicted position.
pub fn ensemble_greedy_decode(
    ensemble: &[SeqModel],
    src: &[usize],
    temperature: f64,
) -> Result<(DecodeResult, Vec<TokenPosteriorSet>)> {
    Ok(ensemble_greedy_decode_batch(ensemble, &[src], temperature)?.remove(0))
}

pub fn ensemble_greedy_decode_batch(
    ensemble: &[SeqModel],
    srcs: &[&[usize]],
    temperature: f64,
) -> Result<Vec<(DecodeResult, Vec<TokenPosteriorSet>)>> {
    check_ensemble(ensemble)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    check_sources(&ensemble[0], srcs)?;
    let v = ensemble[0].config().vocab_size;
    let max_len = ensemble[0].config().max_len;
    let mut graphs: Vec<Graph> = ensemble
        .iter()
        .map(|m| Graph::new(m, srcs))
        .collect::<Result<_>>()?;
    let mut rows = Rows::new(srcs.len());
    let mut outputs: Vec<Vec<HeadOutput>> = vec![Vec::new(); srcs.len()];
    let mut sets: Vec<Vec<TokenPosteriorSet>> = vec![Vec::new(); srcs.len()];
    let inv_m = 1.0 / ensemble.len() as f64;
    for _ in 0..max_len {
        if !rows.active() {
            break;
        }
        let nodes: Vec<_> = graphs.iter_mut().map(|g| g.step(&rows.prev)).collect();
        for b in 0..srcs.len() {
            if rows.done[b] {
                continue;
            }
            let members: Vec<Vec<f64>> = graphs
                .iter()
                .zip(&nodes)
                .map(|(g, &n)| {
                    let p = softmax_raw(&g.logits(n)[b * v..(b + 1) * v]);
                    if temperature == 1.0 {
                        p
                    } else {
                        temper_raw(&p, temperature)
                    }
                })
                .collect();
            let mut mean = vec![0.0; v];
            for m in &members {
                mean.iter_mut().zip(m).for_each(|(a, x)| *a += x);
            }
            mean.iter_mut().for_each(|a| *a *= inv_m);
            let token = pick(&mean);
            outputs[b].push(HeadOutput::Categorical(Categorical::from_raw(mean)));
            sets[b].push(TokenPosteriorSet::new(
                members.into_iter().map(Categorical::from_raw).collect(),
            )?);
            rows.advance(b, token);
        }
    }
    Ok(finish(rows, outputs).into_iter().zip(sets).collect())
}

/// Tokens from `predictor`; per-position Dirichlets from `uq_model` fed the
/// same generated history.
pub fn gua_decode(
    predictor: &SeqModel,
    uq_model: &SeqModel,
    src: &[usize],
) -> Result<(DecodeResult, Vec<DirichletParams>)> {
    Ok(gua_decode_batch(predictor, uq_model, &[src])?.remove(0))
}

pub fn gua_decode_batch(
    predictor: &SeqModel,
    uq_model: &SeqModel,
    srcs: &[&[usize]],
) -> Result<Vec<(DecodeResult, Vec<DirichletParams>)>> {
    if predictor.head_mode() != HeadMode::Softmax || uq_model.head_mode() != HeadMode::Concentration
    {
        return Err(Error::contract(
            "guided decoding needs a softmax predictor and a concentration-head uncertainty model",
        ));
    }
    if predictor.config().vocab_size != uq_model.config().vocab_size {
        return Err(Error::contract(
            "predictor and uncertainty model disagree on vocabulary",
        ));
    }
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    check_sources(predictor, srcs)?;
    check_sources(uq_model, srcs)?;
    let v = predictor.config().vocab_size;
    let max_len = predictor.config().max_len;
    let mut gp = Graph::new(predictor, srcs)?;
    let mut gu = Graph::new(uq_model, srcs)?;
    let mut rows = Rows::new(srcs.len());
    let mut outputs: Vec<Vec<HeadOutput>> = vec![Vec::new(); srcs.len()];
    let mut alphas: Vec<Vec<DirichletParams>> = vec![Vec::new(); srcs.len()];
    for step in 0..max_len {
        if !rows.active() {
            break;
        }
        let np = gp.step(&rows.prev);
        // The uncertainty model may have a shorter max_len; stop feeding it then.
        let nu = (step < uq_model.config().max_len).then(|| gu.step(&rows.prev));
        for b in 0..srcs.len() {
            if rows.done[b] {
                continue;
            }
            let probs = softmax_raw(&gp.logits(np)[b * v..(b + 1) * v]);
            let token = pick(&probs);
            outputs[b].push(HeadOutput::Categorical(Categorical::from_raw(probs)));
            if let Some(nu) = nu {
                alphas[b].push(DirichletParams::from_raw(concentrations(
                    &gu.logits(nu)[b * v..(b + 1) * v],
                )));
            }
            rows.advance(b, token);
        }
    }
    Ok(finish(rows, outputs).into_iter().zip(alphas).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{train_member, TrainConfig};
    use crate::nnet::{init_model, ModelConfig};
    use crate::synthdata::SentencePair;

    fn cfg(head: HeadMode) -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            embed_dim: 4,
            hidden_dim: 6,
            head_mode: head,
            max_len: 12,
            seed: 5,
        }
    }

    #[test]
    fn zero_model_emits_lowest_non_pad_token() {
        let m = SeqModel::zeros(&cfg(HeadMode::Softmax)).unwrap();
        let r = greedy_decode(&m, &[4, 5]).unwrap();
        assert!(r.truncated);
        assert_eq!(r.tokens, vec![BOS; 12]);
        assert_eq!(r.outputs.len(), 12);
    }

    #[test]
    fn batch_matches_single_and_is_deterministic() {
        let m = init_model(&cfg(HeadMode::Softmax)).unwrap();
        let srcs: Vec<&[usize]> = vec![&[4, 5, 6], &[7], &[9, 8, 7, 6, 5, 4]];
        let batch = greedy_decode_batch(&m, &srcs).unwrap();
        for (s, r) in srcs.iter().zip(&batch) {
            assert_eq!(&greedy_decode(&m, s).unwrap(), r);
            assert_eq!(r.outputs.len(), r.tokens.len() + usize::from(!r.truncated));
        }
        assert!(greedy_decode(&m, &[4; 12]).is_err());
        assert!(greedy_decode(&m, &[10]).is_err());
    }

    #[test]
    fn outputs_match_forward_step() {
        let m = init_model(&cfg(HeadMode::Softmax)).unwrap();
        let src = [4, 6, 8];
        let r = greedy_decode(&m, &src).unwrap();
        for (l, out) in r.outputs.iter().enumerate().take(5) {
            assert_eq!(out, &m.forward_step(&src, &r.tokens[..l]).unwrap());
        }
    }

    #[test]
    fn ensemble_of_copies_equals_single() {
        let m = init_model(&cfg(HeadMode::Softmax)).unwrap();
        let src = [4, 5, 9, 7];
        let single = greedy_decode(&m, &src).unwrap();
        let (ens, sets) =
            ensemble_greedy_decode(&[m.clone(), m.clone(), m.clone()], &src, 3.0).unwrap();
        assert_eq!(ens.tokens, single.tokens);
        assert_eq!(sets.len(), ens.outputs.len());
        let (one, _) = ensemble_greedy_decode(std::slice::from_ref(&m), &src, 3.0).unwrap();
        assert_eq!(one.tokens, single.tokens);
        let other = init_model(&cfg(HeadMode::Concentration)).unwrap();
        assert!(ensemble_greedy_decode(&[m, other], &src, 3.0).is_err());
    }

    #[test]
    fn gua_tokens_match_predictor() {
        let p = init_model(&cfg(HeadMode::Softmax).with_seed(1)).unwrap();
        let u = init_model(&cfg(HeadMode::Concentration).with_seed(2)).unwrap();
        let srcs: Vec<&[usize]> = vec![&[4, 5, 6], &[8, 8], &[9]];
        for (s, (r, alphas)) in srcs.iter().zip(gua_decode_batch(&p, &u, &srcs).unwrap()) {
            let g = greedy_decode(&p, s).unwrap();
            assert_eq!(r.tokens, g.tokens);
            assert_eq!(r.outputs, g.outputs);
            assert_eq!(alphas.len(), r.outputs.len());
            for (l, a) in alphas.iter().enumerate().take(4) {
                let expect = u.forward_step(s, &r.tokens[..l]).unwrap();
                assert_eq!(expect.as_dirichlet().unwrap(), a);
            }
        }
        assert!(gua_decode(&u, &p, &[4]).is_err());
    }

    #[test]
    fn memorised_pair_is_reproduced() {
        let pair = SentencePair {
            source: vec![4, 5, 7, 6],
            reference: vec![4, 5, 6, 8],
        };
        let tc = TrainConfig {
            epochs: 150,
            batch_size: 1,
            learning_rate: 0.02,
            model: ModelConfig {
                embed_dim: 8,
                hidden_dim: 16,
                ..cfg(HeadMode::Softmax)
            },
            ..TrainConfig::default()
        };
        let m = train_member(std::slice::from_ref(&pair), &tc, 3)
            .unwrap()
            .model;
        let r = greedy_decode(&m, &pair.source).unwrap();
        assert_eq!(r.tokens, pair.reference);
        assert!(!r.truncated);
    }
}
