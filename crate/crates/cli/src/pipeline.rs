//! Pipeline stages shared by the commands and the acceptance suite.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use endd::decode::{ensemble_greedy_decode_batch, greedy_decode_batch, gua_decode_batch};
use endd::distill::{
    train_distilled, train_distribution_distilled, train_member, DistObjective, Trained,
};
use endd::eval::{
    auc_rr, gleu_corpus, manual_score, random_rejection_curve, rejection_at, rejection_curve,
    Annotation, RankingMetric, ScoredSentence,
};
use endd::nnet::{checkpoint, SeqModel};
use endd::synthdata::{
    corpus_stats, generate_corpus, ood_config, read_corpus, write_corpus, CorpusStats,
    SentencePair, Vocabulary,
};
use endd::uncertainty::{
    sequence_uncertainty, token_uncertainty_dirichlet, token_uncertainty_ensemble, Aggregate,
    Measure, SequenceUncertainty, TokenUncertainty,
};

use crate::config::{EvalSettings, PipelineConfig};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_ID_FILE: &str = "test_id.jsonl";
pub const TEST_OOD_FILE: &str = "test_ood.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Data {
    pub train: Vec<SentencePair>,
    pub test_id: Vec<SentencePair>,
    pub test_ood: Vec<SentencePair>,
}

/// Training corpus from `grammar.seed`; the test corpora use the next seed,
/// the out-of-domain one through the shifted grammar.
pub fn generate_data(cfg: &PipelineConfig) -> Result<Data> {
    let train = generate_corpus(&cfg.grammar, cfg.corpus.train)?;
    let mut test_grammar = cfg.grammar.clone();
    test_grammar.seed = cfg.grammar.seed.wrapping_add(1);
    let test_id = generate_corpus(&test_grammar, cfg.corpus.test_id)?;
    let test_ood = generate_corpus(&ood_config(&test_grammar), cfg.corpus.test_ood)?;
    Ok(Data {
        train,
        test_id,
        test_ood,
    })
}

pub fn write_data(dir: &Path, data: &Data) -> Result<()> {
    let vocab = Vocabulary::standard();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    vocab.write(&dir.join(VOCAB_FILE))?;
    write_corpus(&dir.join(TRAIN_FILE), &data.train, &vocab)?;
    write_corpus(&dir.join(TEST_ID_FILE), &data.test_id, &vocab)?;
    write_corpus(&dir.join(TEST_OOD_FILE), &data.test_ood, &vocab)?;
    Ok(())
}

pub fn read_vocab(dir: &Path) -> Result<Vocabulary> {
    let path = dir.join(VOCAB_FILE);
    if !path.exists() {
        bail!(
            "vocabulary {} not found; run gen-data first",
            path.display()
        );
    }
    Ok(Vocabulary::read(&path)?)
}

pub fn read_split(dir: &Path, file: &str) -> Result<Vec<SentencePair>> {
    let vocab = read_vocab(dir)?;
    let path = dir.join(file);
    if !path.exists() {
        bail!("corpus {} not found; run gen-data first", path.display());
    }
    Ok(read_corpus(&path, &vocab)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRow {
    pub name: &'static str,
    pub domain: &'static str,
    pub stats: CorpusStats,
}

pub fn corpus_rows(data: &Data) -> Vec<CorpusRow> {
    vec![
        CorpusRow {
            name: "train",
            domain: "ID",
            stats: corpus_stats(&data.train),
        },
        CorpusRow {
            name: "test-id",
            domain: "ID",
            stats: corpus_stats(&data.test_id),
        },
        CorpusRow {
            name: "test-ood",
            domain: "OOD",
            stats: corpus_stats(&data.test_ood),
        },
    ]
}

pub fn member_checkpoint(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("member_{index}.ckpt"))
}

pub fn student_checkpoint(dir: &Path, kind: Student) -> PathBuf {
    dir.join(format!("{}.ckpt", kind.name()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Student {
    Dist,
    Nll,
    Kl,
}

impl Student {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dist => "dist",
            Self::Nll => "nll",
            Self::Kl => "kl",
        }
    }

    pub fn from_objective(o: DistObjective) -> Self {
        match o {
            DistObjective::Nll => Self::Nll,
            DistObjective::Kl => Self::Kl,
        }
    }
}

pub fn train_ensemble(cfg: &PipelineConfig, train: &[SentencePair]) -> Result<Vec<Trained>> {
    (0..cfg.ensemble_size)
        .map(|i| {
            train_member(train, &cfg.train, cfg.member_seed(i))
                .with_context(|| format!("training member {i}"))
        })
        .collect()
}

pub fn train_student(
    cfg: &PipelineConfig,
    ensemble: &[SeqModel],
    train: &[SentencePair],
    kind: Student,
) -> Result<Trained> {
    let tc = cfg.student_train();
    let out = match kind {
        Student::Dist => train_distilled(ensemble, train, &tc),
        Student::Nll => train_distribution_distilled(ensemble, train, &tc, DistObjective::Nll),
        Student::Kl => train_distribution_distilled(ensemble, train, &tc, DistObjective::Kl),
    };
    out.with_context(|| format!("training {} student", kind.name()))
}

pub fn load_checkpoint(path: &Path) -> Result<SeqModel> {
    if !path.exists() {
        bail!("checkpoint {} not found", path.display());
    }
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn load_ensemble(dir: &Path, size: usize) -> Result<Vec<SeqModel>> {
    (0..size)
        .map(|i| load_checkpoint(&member_checkpoint(dir, i)))
        .collect()
}

/// Trained models available to evaluation; absent entries are simply `None`.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub members: Vec<SeqModel>,
    pub dist: Option<SeqModel>,
    pub nll: Option<SeqModel>,
    pub kl: Option<SeqModel>,
}

impl Models {
    fn student(&self, kind: Student) -> Result<&SeqModel> {
        let m = match kind {
            Student::Dist => &self.dist,
            Student::Nll => &self.nll,
            Student::Kl => &self.kl,
        };
        m.as_ref()
            .ok_or_else(|| anyhow!("{} model is not available", kind.name()))
    }

    fn ensemble(&self) -> Result<&[SeqModel]> {
        if self.members.is_empty() {
            bail!("ensemble members are not available");
        }
        Ok(&self.members)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum System {
    Ind,
    Ens,
    Dist,
    Nll,
    Kl,
    Gua,
}

impl System {
    pub const ALL: [System; 6] = [
        Self::Ind,
        Self::Ens,
        Self::Dist,
        Self::Nll,
        Self::Kl,
        Self::Gua,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ind => "ind",
            Self::Ens => "ens",
            Self::Dist => "dist",
            Self::Nll => "nll",
            Self::Kl => "kl",
            Self::Gua => "gua",
        }
    }

    pub fn has_uncertainty(self) -> bool {
        matches!(self, Self::Ens | Self::Nll | Self::Kl | Self::Gua)
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s.to_ascii_lowercase())
            .ok_or_else(|| anyhow!("unknown system '{s}' (expected ind|ens|dist|nll|kl|gua)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TestSet {
    Id,
    Ood,
    Mix,
}

impl TestSet {
    pub const ALL: [TestSet; 3] = [Self::Id, Self::Ood, Self::Mix];

    pub fn name(self) -> &'static str {
        match self {
            Self::Id => "id",
            Self::Ood => "ood",
            Self::Mix => "mix",
        }
    }
}

impl fmt::Display for TestSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestSet {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s.to_ascii_lowercase())
            .ok_or_else(|| anyhow!("unknown test set '{s}' (expected id|ood|mix)"))
    }
}

/// Decoded outputs of one system on one test set. `runs` has one entry per
/// ensemble member for `ind` and a single entry otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub system: System,
    pub testset: TestSet,
    pub runs: Vec<Vec<ScoredSentence>>,
}

impl Evaluation {
    pub fn sentences(&self) -> &[ScoredSentence] {
        &self.runs[0]
    }

    /// Concatenation of an in-domain and an out-of-domain evaluation.
    pub fn mix(id: &Evaluation, ood: &Evaluation) -> Result<Evaluation> {
        if id.system != ood.system || id.runs.len() != ood.runs.len() {
            bail!("cannot mix evaluations of different systems");
        }
        let runs = id
            .runs
            .iter()
            .zip(&ood.runs)
            .map(|(a, b)| a.iter().chain(b).cloned().collect())
            .collect();
        Ok(Evaluation {
            system: id.system,
            testset: TestSet::Mix,
            runs,
        })
    }
}

fn score(
    pair: &SentencePair,
    hypothesis: Vec<usize>,
    u: Option<SequenceUncertainty>,
) -> ScoredSentence {
    ScoredSentence::new(pair.source.clone(), pair.reference.clone(), hypothesis, u)
}

fn sequence_from_tokens(tokens: &[TokenUncertainty]) -> Result<Option<SequenceUncertainty>> {
    Ok(Some(sequence_uncertainty(tokens)?))
}

/// Decodes `pairs` with `system`, in chunks of `settings.batch_size`.
pub fn decode_system(
    system: System,
    models: &Models,
    pairs: &[SentencePair],
    settings: &EvalSettings,
) -> Result<Vec<Vec<ScoredSentence>>> {
    let chunks: Vec<&[SentencePair]> = pairs.chunks(settings.batch_size).collect();
    let srcs_of =
        |c: &[SentencePair]| -> Vec<Vec<usize>> { c.iter().map(|p| p.source.clone()).collect() };
    let single = |m: &SeqModel, with_unc: bool| -> Result<Vec<ScoredSentence>> {
        let mut out = Vec::with_capacity(pairs.len());
        for c in &chunks {
            let srcs = srcs_of(c);
            let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
            for (p, r) in c.iter().zip(greedy_decode_batch(m, &refs)?) {
                let u = if with_unc {
                    let toks: Vec<TokenUncertainty> = r
                        .outputs
                        .iter()
                        .enumerate()
                        .map(|(i, o)| {
                            token_uncertainty_dirichlet(
                                o.as_dirichlet().expect("concentration head"),
                                i,
                            )
                        })
                        .collect();
                    sequence_from_tokens(&toks)?
                } else {
                    None
                };
                out.push(score(p, r.tokens, u));
            }
        }
        Ok(out)
    };
    match system {
        System::Ind => models
            .ensemble()?
            .iter()
            .map(|m| single(m, false))
            .collect(),
        System::Dist => Ok(vec![single(models.student(Student::Dist)?, false)?]),
        System::Nll => Ok(vec![single(models.student(Student::Nll)?, true)?]),
        System::Kl => Ok(vec![single(models.student(Student::Kl)?, true)?]),
        System::Ens => {
            let ens = models.ensemble()?;
            let mut out = Vec::with_capacity(pairs.len());
            for c in &chunks {
                let srcs = srcs_of(c);
                let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
                for (p, (r, sets)) in c.iter().zip(ensemble_greedy_decode_batch(
                    ens,
                    &refs,
                    settings.temperature,
                )?) {
                    let toks: Vec<TokenUncertainty> = sets
                        .iter()
                        .enumerate()
                        .map(|(i, s)| token_uncertainty_ensemble(s, i))
                        .collect();
                    out.push(score(p, r.tokens, sequence_from_tokens(&toks)?));
                }
            }
            Ok(vec![out])
        }
        System::Gua => {
            let predictor = models.student(Student::Dist)?;
            let uq = models.student(Student::from_objective(settings.gua_uncertainty_model))?;
            let mut out = Vec::with_capacity(pairs.len());
            for c in &chunks {
                let srcs = srcs_of(c);
                let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
                for (p, (r, ds)) in c.iter().zip(gua_decode_batch(predictor, uq, &refs)?) {
                    let toks: Vec<TokenUncertainty> = ds
                        .iter()
                        .enumerate()
                        .map(|(i, d)| token_uncertainty_dirichlet(d, i))
                        .collect();
                    out.push(score(p, r.tokens, sequence_from_tokens(&toks)?));
                }
            }
            Ok(vec![out])
        }
    }
}

/// Evaluates one system on the requested test set; `mix` decodes both splits
/// and concatenates them (in-domain first).
pub fn evaluate(
    system: System,
    testset: TestSet,
    models: &Models,
    test_id: &[SentencePair],
    test_ood: &[SentencePair],
    settings: &EvalSettings,
) -> Result<Evaluation> {
    let run = |pairs: &[SentencePair], t: TestSet| -> Result<Evaluation> {
        Ok(Evaluation {
            system,
            testset: t,
            runs: decode_system(system, models, pairs, settings)
                .with_context(|| format!("evaluating {system} on {t}"))?,
        })
    };
    match testset {
        TestSet::Id => run(test_id, TestSet::Id),
        TestSet::Ood => run(test_ood, TestSet::Ood),
        TestSet::Mix => Evaluation::mix(&run(test_id, TestSet::Id)?, &run(test_ood, TestSet::Ood)?),
    }
}

/// Means over sentences of the six sequence-level quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintySummary {
    pub total_sum: f64,
    pub data_sum: f64,
    pub knowledge_sum: f64,
    pub total_rate: f64,
    pub data_rate: f64,
    pub knowledge_rate: f64,
}

impl UncertaintySummary {
    pub fn get(&self, measure: Measure, aggregate: Aggregate) -> f64 {
        match (measure, aggregate) {
            (Measure::Total, Aggregate::Sum) => self.total_sum,
            (Measure::Data, Aggregate::Sum) => self.data_sum,
            (Measure::Knowledge, Aggregate::Sum) => self.knowledge_sum,
            (Measure::Total, Aggregate::Rate) => self.total_rate,
            (Measure::Data, Aggregate::Rate) => self.data_rate,
            (Measure::Knowledge, Aggregate::Rate) => self.knowledge_rate,
        }
    }
}

pub fn summarise_uncertainty(sentences: &[ScoredSentence]) -> Option<UncertaintySummary> {
    let us: Vec<SequenceUncertainty> = sentences
        .iter()
        .map(|s| s.uncertainties)
        .collect::<Option<_>>()?;
    if us.is_empty() {
        return None;
    }
    let n = us.len() as f64;
    let mean = |f: fn(&SequenceUncertainty) -> f64| us.iter().map(f).sum::<f64>() / n;
    Some(UncertaintySummary {
        total_sum: mean(|u| u.total_sum),
        data_sum: mean(|u| u.data_sum),
        knowledge_sum: mean(|u| u.knowledge_sum),
        total_rate: mean(|u| u.total_rate),
        data_rate: mean(|u| u.data_rate),
        knowledge_rate: mean(|u| u.knowledge_rate),
    })
}

/// Rankings compared in the relative-area table.
pub const AUC_RANKINGS: [RankingMetric; 4] = [
    RankingMetric::Length,
    RankingMetric::Tu,
    RankingMetric::Du,
    RankingMetric::Ku,
];

/// Rankings compared at a single rejection fraction.
pub const REJECTION_RANKINGS: [RankingMetric; 3] =
    [RankingMetric::Tu, RankingMetric::Du, RankingMetric::Ku];

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub system: System,
    pub testset: TestSet,
    /// Corpus GLEU; the member mean for `ind`.
    pub gleu: f64,
    /// Member standard deviation (`ind` only).
    pub gleu_sd: Option<f64>,
    pub member_gleu: Vec<f64>,
    pub uncertainty: Option<UncertaintySummary>,
    /// Relative areas for [`AUC_RANKINGS`] (systems with uncertainties;
    /// `length` is reported for every single-run system).
    pub auc_rr: Vec<(RankingMetric, f64)>,
    /// GLEU at the rejection fraction: no rejection, each ranking, manual.
    pub rejection: Option<RejectionSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionSummary {
    pub fraction: f64,
    pub none: f64,
    pub by_ranking: Vec<(RankingMetric, f64)>,
    pub manual: f64,
}

impl Metrics {
    pub fn auc_rr_of(&self, m: RankingMetric) -> Option<f64> {
        self.auc_rr.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }
}

impl RejectionSummary {
    pub fn of(&self, m: RankingMetric) -> Option<f64> {
        self.by_ranking
            .iter()
            .find(|(k, _)| *k == m)
            .map(|(_, v)| *v)
    }
}

pub fn compute_metrics(ev: &Evaluation, settings: &EvalSettings) -> Result<Metrics> {
    let member_gleu: Vec<f64> = ev
        .runs
        .iter()
        .map(|r| gleu_corpus(r))
        .collect::<endd::Result<_>>()?;
    let n = member_gleu.len() as f64;
    let gleu = member_gleu.iter().sum::<f64>() / n;
    let gleu_sd = (ev.system == System::Ind).then(|| {
        if member_gleu.len() < 2 {
            0.0
        } else {
            (member_gleu.iter().map(|g| (g - gleu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        }
    });
    let mut metrics = Metrics {
        system: ev.system,
        testset: ev.testset,
        gleu,
        gleu_sd,
        member_gleu,
        uncertainty: None,
        auc_rr: Vec::new(),
        rejection: None,
    };
    if ev.system == System::Ind {
        return Ok(metrics);
    }
    let sents = ev.sentences();
    metrics.uncertainty = summarise_uncertainty(sents);
    let manual: Vec<f64> = sents.iter().map(manual_score).collect();
    let manual_curve = rejection_curve(sents, &manual, settings.grid_step)?;
    let random = random_rejection_curve(sents, settings.grid_step)?;
    let rankings: Vec<RankingMetric> = if metrics.uncertainty.is_some() {
        AUC_RANKINGS.to_vec()
    } else {
        vec![RankingMetric::Length]
    };
    for m in rankings {
        let scores = m.scores(sents, settings.aggregate)?;
        let curve = rejection_curve(sents, &scores, settings.grid_step)?;
        // A corpus where manual and random coincide (e.g. perfect output) has
        // no defined relative area.
        if let Ok(rr) = auc_rr(&curve, &manual_curve, random.auc) {
            metrics.auc_rr.push((m, rr));
        }
    }
    if metrics.uncertainty.is_some() {
        let f = settings.rejection_fraction;
        let by_ranking = REJECTION_RANKINGS
            .iter()
            .map(|&m| {
                Ok((
                    m,
                    rejection_at(sents, &m.scores(sents, settings.aggregate)?, f)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        metrics.rejection = Some(RejectionSummary {
            fraction: f,
            none: gleu,
            by_ranking,
            manual: rejection_at(sents, &manual, f)?,
        });
    }
    Ok(metrics)
}

pub fn annotations(ev_run: &[ScoredSentence], vocab: &Vocabulary) -> Vec<Annotation> {
    ev_run
        .iter()
        .enumerate()
        .map(|(i, s)| Annotation::new(i, s, |ids| vocab.decode(ids)))
        .collect()
}

/// File stem of the annotations for run `index` of an evaluation.
pub fn annotation_stem(ev: &Evaluation, index: usize) -> String {
    if ev.system == System::Ind {
        format!("ind{index}_{}", ev.testset)
    } else {
        format!("{}_{}", ev.system, ev.testset)
    }
}
