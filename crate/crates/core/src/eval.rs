//! GLEU scoring, oracle-rejection curves and rank correlation.
//!
//! Corpus GLEU pools n-gram numerators, denominators and lengths over all
//! sentences. A rejection curve replaces the hypotheses of the highest-ranked
//! sentences by their references and rescores the pooled corpus.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::{Aggregate, Measure, SequenceUncertainty};

pub const MAX_ORDER: usize = 4;
pub const SMOOTHING: f64 = 1e-12;
pub const DEFAULT_GRID_STEP: f64 = 0.02;

/// Pooled GLEU sufficient statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GleuStats {
    pub numerator: [f64; MAX_ORDER],
    pub denominator: [f64; MAX_ORDER],
    pub ref_len: f64,
    pub hyp_len: f64,
}

impl GleuStats {
    fn add(&mut self, other: &GleuStats, sign: f64) {
        for n in 0..MAX_ORDER {
            self.numerator[n] += sign * other.numerator[n];
            self.denominator[n] += sign * other.denominator[n];
        }
        self.ref_len += sign * other.ref_len;
        self.hyp_len += sign * other.hyp_len;
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len <= 0.0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..MAX_ORDER {
            let num = self.numerator[n].max(0.0);
            let den = self.denominator[n].max(0.0);
            log_p += ((num + SMOOTHING) / (den + SMOOTHING)).ln();
        }
        let bp = (1.0 - self.ref_len / self.hyp_len).exp().min(1.0);
        (bp * (log_p / MAX_ORDER as f64).exp()).clamp(0.0, 1.0)
    }
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

pub fn gleu_stats(source: &[usize], reference: &[usize], hypothesis: &[usize]) -> GleuStats {
    let mut stats = GleuStats {
        ref_len: reference.len() as f64,
        hyp_len: hypothesis.len() as f64,
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hypothesis, n);
        let r = ngram_counts(reference, n);
        let s = ngram_counts(source, n);
        let mut num = 0usize;
        let mut den = 0usize;
        for (g, &ch) in &h {
            let cr = r.get(g).copied().unwrap_or(0);
            let cs = s.get(g).copied().unwrap_or(0);
            let penalty = ch.min(cs).saturating_sub(cr);
            num += ch.min(cr).saturating_sub(penalty);
            den += ch;
        }
        stats.numerator[n - 1] = num as f64;
        stats.denominator[n - 1] = den as f64;
    }
    stats
}

/// Single-reference GLEU of one hypothesis; 0 for an empty hypothesis.
pub fn gleu_sentence(source: &[usize], reference: &[usize], hypothesis: &[usize]) -> f64 {
    gleu_stats(source, reference, hypothesis).score()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSentence {
    pub source: Vec<usize>,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub gleu: f64,
    /// Hypothesis length.
    pub length: usize,
    pub uncertainties: Option<SequenceUncertainty>,
}

impl ScoredSentence {
    pub fn new(
        source: Vec<usize>,
        reference: Vec<usize>,
        hypothesis: Vec<usize>,
        uncertainties: Option<SequenceUncertainty>,
    ) -> Self {
        let gleu = gleu_sentence(&source, &reference, &hypothesis);
        let length = hypothesis.len();
        Self {
            source,
            reference,
            hypothesis,
            gleu,
            length,
            uncertainties,
        }
    }

    fn stats(&self) -> GleuStats {
        gleu_stats(&self.source, &self.reference, &self.hypothesis)
    }

    fn oracle_stats(&self) -> GleuStats {
        gleu_stats(&self.source, &self.reference, &self.reference)
    }
}

fn pooled(sentences: &[ScoredSentence]) -> GleuStats {
    let mut total = GleuStats::default();
    for s in sentences {
        total.add(&s.stats(), 1.0);
    }
    total
}

pub fn gleu_corpus(sentences: &[ScoredSentence]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::contract("corpus GLEU of an empty set"));
    }
    Ok(pooled(sentences).score())
}

/// `L · (1 − GLEU)` with `L` the reference length.
pub fn manual_score(s: &ScoredSentence) -> f64 {
    s.reference.len() as f64 * (1.0 - s.gleu)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingMetric {
    Length,
    Tu,
    Du,
    Ku,
    Manual,
}

impl RankingMetric {
    pub const ALL: [RankingMetric; 5] = [Self::Length, Self::Tu, Self::Du, Self::Ku, Self::Manual];

    pub fn name(self) -> &'static str {
        match self {
            Self::Length => "length",
            Self::Tu => "tu",
            Self::Du => "du",
            Self::Ku => "ku",
            Self::Manual => "manual",
        }
    }

    /// Per-sentence ranking score; higher means rejected earlier.
    pub fn scores(self, sentences: &[ScoredSentence], aggregate: Aggregate) -> Result<Vec<f64>> {
        sentences
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let measure = match self {
                    Self::Length => return Ok(s.length as f64),
                    Self::Manual => return Ok(manual_score(s)),
                    Self::Tu => Measure::Total,
                    Self::Du => Measure::Data,
                    Self::Ku => Measure::Knowledge,
                };
                s.uncertainties
                    .map(|u| u.get(measure, aggregate))
                    .ok_or_else(|| {
                        Error::contract(format!(
                            "sentence {i} has no uncertainties for {} ranking",
                            self.name()
                        ))
                    })
            })
            .collect()
    }
}

impl std::fmt::Display for RankingMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RankingMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::contract(format!("unknown ranking metric '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionCurve {
    pub fractions: Vec<f64>,
    pub scores: Vec<f64>,
    pub auc: f64,
}

fn grid_steps(grid_step: f64) -> Result<usize> {
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::contract(format!(
            "grid step {grid_step} outside (0, 1]"
        )));
    }
    let n = (1.0 / grid_step).round();
    if (n * grid_step - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "grid step {grid_step} does not divide 1"
        )));
    }
    Ok(n as usize)
}

fn trapezoid(fractions: &[f64], scores: &[f64]) -> f64 {
    fractions
        .windows(2)
        .zip(scores.windows(2))
        .map(|(f, s)| (f[1] - f[0]) * (s[0] + s[1]) / 2.0)
        .sum()
}

/// Indices sorted by descending score; equal scores keep input order.
fn rejection_order(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::contract(format!("ranking score {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

fn check_inputs(sentences: &[ScoredSentence], scores: &[f64]) -> Result<()> {
    if sentences.is_empty() {
        return Err(Error::contract("rejection curve of an empty set"));
    }
    if sentences.len() != scores.len() {
        return Err(Error::contract(format!(
            "{} ranking scores for {} sentences",
            scores.len(),
            sentences.len()
        )));
    }
    Ok(())
}

/// Number of sentences rejected at grid point `i` of `steps`: `⌈i·N/steps⌉`.
fn rejected_count(i: usize, n: usize, steps: usize) -> usize {
    (i * n).div_ceil(steps)
}

pub fn rejection_curve(
    sentences: &[ScoredSentence],
    ranking_scores: &[f64],
    grid_step: f64,
) -> Result<RejectionCurve> {
    check_inputs(sentences, ranking_scores)?;
    let steps = grid_steps(grid_step)?;
    let order = rejection_order(ranking_scores)?;
    let n = sentences.len();
    let mut stats = pooled(sentences);
    let mut done = 0;
    let mut fractions = Vec::with_capacity(steps + 1);
    let mut scores = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let k = rejected_count(i, n, steps);
        while done < k {
            let s = &sentences[order[done]];
            stats.add(&s.stats(), -1.0);
            stats.add(&s.oracle_stats(), 1.0);
            done += 1;
        }
        fractions.push(i as f64 / steps as f64);
        // With everything replaced the corpus is the references themselves.
        scores.push(if k == n { 1.0 } else { stats.score() });
    }
    let auc = trapezoid(&fractions, &scores);
    Ok(RejectionCurve {
        fractions,
        scores,
        auc,
    })
}

/// Corpus GLEU after rejecting `⌈fraction·N⌉` sentences.
pub fn rejection_at(
    sentences: &[ScoredSentence],
    ranking_scores: &[f64],
    fraction: f64,
) -> Result<f64> {
    check_inputs(sentences, ranking_scores)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract(format!(
            "rejection fraction {fraction} outside [0, 1]"
        )));
    }
    let order = rejection_order(ranking_scores)?;
    let n = sentences.len();
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if k >= n {
        return Ok(1.0);
    }
    let mut stats = pooled(sentences);
    for &i in &order[..k] {
        stats.add(&sentences[i].stats(), -1.0);
        stats.add(&sentences[i].oracle_stats(), 1.0);
    }
    Ok(stats.score())
}

/// Expected random-rejection curve, modelled as the straight line from the
/// base corpus GLEU to 1.
pub fn random_rejection_curve(
    sentences: &[ScoredSentence],
    grid_step: f64,
) -> Result<RejectionCurve> {
    let base = gleu_corpus(sentences)?;
    let steps = grid_steps(grid_step)?;
    let fractions: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let scores: Vec<f64> = fractions.iter().map(|f| base + (1.0 - base) * f).collect();
    let auc = trapezoid(&fractions, &scores);
    Ok(RejectionCurve {
        fractions,
        scores,
        auc,
    })
}

pub fn random_rejection_auc(sentences: &[ScoredSentence], grid_step: f64) -> Result<f64> {
    Ok(random_rejection_curve(sentences, grid_step)?.auc)
}

/// `(AUC − AUC_random) / (AUC_manual − AUC_random)`.
pub fn auc_rr(
    curve: &RejectionCurve,
    manual_curve: &RejectionCurve,
    random_auc: f64,
) -> Result<f64> {
    if curve.fractions.len() != manual_curve.fractions.len()
        || curve
            .fractions
            .iter()
            .zip(&manual_curve.fractions)
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(Error::contract("rejection curves are on different grids"));
    }
    let denom = manual_curve.auc - random_auc;
    if denom.abs() < 1e-12 {
        return Err(Error::contract(
            "manual and random rejection areas coincide",
        ));
    }
    Ok((curve.auc - random_auc) / denom)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rank(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::contract(format!(
            "rank correlation needs equal non-zero lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::contract("rank correlation input contains NaN"));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain(
            "rank correlation undefined for a constant list".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One line of the annotations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: usize,
    pub src: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp: String,
    pub gleu: f64,
    pub tu_sum: Option<f64>,
    pub du_sum: Option<f64>,
    pub ku_sum: Option<f64>,
    pub tu_rate: Option<f64>,
    pub du_rate: Option<f64>,
    pub ku_rate: Option<f64>,
    pub length: usize,
}

impl Annotation {
    pub fn new(id: usize, s: &ScoredSentence, words: impl Fn(&[usize]) -> Vec<String>) -> Self {
        let u = s.uncertainties;
        Self {
            id,
            src: words(&s.source).join(" "),
            reference: words(&s.reference).join(" "),
            hyp: words(&s.hypothesis).join(" "),
            gleu: s.gleu,
            tu_sum: u.map(|u| u.total_sum),
            du_sum: u.map(|u| u.data_sum),
            ku_sum: u.map(|u| u.knowledge_sum),
            tu_rate: u.map(|u| u.total_rate),
            du_rate: u.map(|u| u.data_rate),
            ku_rate: u.map(|u| u.knowledge_rate),
            length: s.length,
        }
    }

    fn uncertainties(&self) -> Option<SequenceUncertainty> {
        Some(SequenceUncertainty {
            total_sum: self.tu_sum?,
            data_sum: self.du_sum?,
            knowledge_sum: self.ku_sum?,
            // The predicted length is not stored; the end marker is assumed.
            length: self.length + 1,
            total_rate: self.tu_rate?,
            data_rate: self.du_rate?,
            knowledge_rate: self.ku_rate?,
        })
    }
}

pub fn write_annotations(path: &Path, records: &[Annotation]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("annotation serialises"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Annotation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(records)
}

/// Rebuilds scored sentences from annotations. Words are interned into
/// arbitrary ids; GLEU only needs token equality. The stored `gleu` is
/// recomputed and must agree.
pub fn sentences_from_annotations(records: &[Annotation]) -> Result<Vec<ScoredSentence>> {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut intern = |s: &str| -> Vec<usize> {
        s.split_whitespace()
            .map(|w| {
                let next = ids.len();
                *ids.entry(w.to_string()).or_insert(next)
            })
            .collect()
    };
    records
        .iter()
        .map(|r| {
            let s = ScoredSentence::new(
                intern(&r.src),
                intern(&r.reference),
                intern(&r.hyp),
                r.uncertainties(),
            );
            if (s.gleu - r.gleu).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "annotation {} stores gleu {} but its text scores {}",
                    r.id, r.gleu, s.gleu
                )));
            }
            Ok(s)
        })
        .collect()
}

/// `fraction,score` table with a trailing comment carrying the areas.
pub fn curve_csv(curve: &RejectionCurve, auc_rr: Option<f64>) -> String {
    let mut out = String::from("fraction,score\n");
    for (f, s) in curve.fractions.iter().zip(&curve.scores) {
        let _ = writeln!(out, "{f:.4},{s:.6}");
    }
    match auc_rr {
        Some(rr) => {
            let _ = writeln!(out, "# auc={:.6},auc_rr={rr:.6}", curve.auc);
        }
        None => {
            let _ = writeln!(out, "# auc={:.6}", curve.auc);
        }
    }
    out
}

pub fn write_curve_csv(path: &Path, curve: &RejectionCurve, auc_rr: Option<f64>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(curve_csv(curve, auc_rr).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Minimal SVG line plot of several labelled curves.
pub fn curves_svg(curves: &[(&str, &RejectionCurve)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 40.0;
    const COLOURS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f",
    ];
    let lo = curves
        .iter()
        .flat_map(|(_, c)| c.scores.iter().copied())
        .fold(1.0_f64, f64::min)
        .min(0.99);
    let x = |f: f64| M + f * (W - 2.0 * M);
    let y = |s: f64| H - M - (s - lo) / (1.0 - lo) * (H - 2.0 * M);
    let mut out =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n");
    let _ = writeln!(
        out,
        "<rect x=\"{M}\" y=\"{M}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        W - 2.0 * M,
        H - 2.0 * M
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">rejected fraction</text>",
        W / 2.0 - 40.0,
        H - 10.0
    );
    let _ = writeln!(
        out,
        "<text x=\"4\" y=\"{}\" font-size=\"12\">{lo:.2}</text>",
        H - M
    );
    let _ = writeln!(
        out,
        "<text x=\"4\" y=\"{}\" font-size=\"12\">1.00</text>",
        M + 4.0
    );
    for (i, (label, c)) in curves.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let pts: Vec<String> = c
            .fractions
            .iter()
            .zip(&c.scores)
            .map(|(&f, &s)| format!("{:.1},{:.1}", x(f), y(s)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{colour}\">{label}</text>",
            M + 8.0,
            M + 16.0 + 14.0 * i as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gleu_basics() {
        let s = [4, 5, 6, 7, 8];
        assert_eq!(gleu_sentence(&s, &s, &s), 1.0);
        assert_eq!(gleu_sentence(&s, &s, &[]), 0.0);
        assert_eq!(gleu_sentence(&[9, 9], &s, &s), 1.0);
        let g = gleu_sentence(&s, &[4, 5, 10, 7, 8], &s);
        assert!(g > 0.0 && g < 1.0);
    }

    #[test]
    fn manual_examples() {
        let mut s = ScoredSentence::new(vec![1], vec![4; 10], vec![], None);
        assert_eq!(manual_score(&s), 10.0);
        s.reference = vec![4; 14];
        s.gleu = 0.5;
        assert_eq!(manual_score(&s), 7.0);
    }

    #[test]
    fn rejected_counts_round_up() {
        assert_eq!(rejected_count(0, 5, 50), 0);
        assert_eq!(rejected_count(1, 5, 50), 1);
        assert_eq!(rejected_count(10, 5, 50), 1);
        assert_eq!(rejected_count(11, 5, 50), 2);
        assert_eq!(rejected_count(50, 5, 50), 5);
        assert_eq!(rejected_count(5, 100, 50), 10);
    }

    #[test]
    fn grid_validation() {
        assert_eq!(grid_steps(0.02).unwrap(), 50);
        assert_eq!(grid_steps(0.1).unwrap(), 10);
        assert!(grid_steps(0.03).is_err());
        assert!(grid_steps(0.0).is_err());
    }

    #[test]
    fn metric_names_round_trip() {
        for m in RankingMetric::ALL {
            assert_eq!(m.name().parse::<RankingMetric>().unwrap(), m);
        }
        assert!("entropy".parse::<RankingMetric>().is_err());
    }
}
