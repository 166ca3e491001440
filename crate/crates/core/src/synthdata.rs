//! Synthetic grammatical-error-correction corpora.
//!
//! References come from a slot-template grammar with number agreement
//! (determiner/noun, subject/verb) and noun-dependent prepositions, so most
//! corrections are predictable from context while confusable determiners and
//! deletions leave genuine ambiguity. Sources are references passed through
//! [`corrupt`]. [`ood_config`] produces a shifted domain: disjoint templates,
//! shorter sentences, more corruption and words the in-domain grammar never
//! emits.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{NUM_SPECIAL, UNK};

pub type Sentence = Vec<usize>;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<s>", "</s>", "<unk>"];

const DET_SG: [&str; 2] = ["a", "this"];
const DET_PL: [&str; 2] = ["some", "these"];
const DET_ANY: &str = "the";
/// (singular, plural, preposition taking this noun as a location)
const NOUNS: [(&str, &str, &str); 7] = [
    ("cat", "cats", "near"),
    ("dog", "dogs", "near"),
    ("student", "students", "near"),
    ("book", "books", "on"),
    ("table", "tables", "on"),
    ("car", "cars", "in"),
    ("house", "houses", "in"),
];
const VERBS: [(&str, &str); 4] = [
    ("sees", "see"),
    ("likes", "like"),
    ("reads", "read"),
    ("finds", "find"),
];
const ADJECTIVES: [&str; 4] = ["big", "small", "old", "new"];
const PREPOSITIONS: [&str; 3] = ["in", "on", "near"];
const CONJUNCTIONS: [&str; 2] = ["and", "but"];
const PRONOUNS_SG: [&str; 2] = ["he", "she"];
const PRONOUNS_PL: [&str; 2] = ["they", "we"];
const ADVERBS: [&str; 4] = ["often", "never", "quickly", "today"];
const OOD_NOUN: (&str, &str) = ("friend", "friends");

const ADJECTIVE_PROB: f64 = 0.4;
const MAX_RESAMPLE: usize = 1000;

/// Token strings; the index of a string is its id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::contract(format!("vocabulary entry {i} must be {s}")));
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Special markers followed by every word of the built-in lexicon.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut words: Vec<&str> = Vec::new();
        words.extend(DET_SG);
        words.extend(DET_PL);
        words.push(DET_ANY);
        for (s, p, _) in NOUNS {
            words.push(s);
            words.push(p);
        }
        for (s, p) in VERBS {
            words.push(s);
            words.push(p);
        }
        words.extend(ADJECTIVES);
        words.extend(PREPOSITIONS);
        words.extend(CONJUNCTIONS);
        words.extend(PRONOUNS_SG);
        words.extend(PRONOUNS_PL);
        words.extend(ADVERBS);
        words.push(OOD_NOUN.0);
        words.push(OOD_NOUN.1);
        tokens.extend(words.into_iter().map(String::from));
        Self::new(tokens).expect("built-in lexicon is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the unknown marker.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map(String::as_str)
            .unwrap_or(SPECIAL_TOKENS[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Sentence {
        words.iter().map(|w| self.id_or_unk(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(String::from).collect())
    }
}

/// One grammar slot. Agreement is resolved during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    /// Noun phrase that fixes the number of the next verb.
    Subject,
    /// Verb agreeing with the most recent subject or pronoun.
    Verb,
    /// Noun phrase of random number.
    Object,
    /// Preposition chosen by the noun that follows, then a noun phrase.
    Location,
    Conjunction,
    /// Personal pronoun that fixes the number of the next verb.
    Pronoun,
    Adverb,
    /// Noun phrase headed by a noun absent from the in-domain templates.
    Companion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub slots: Vec<Slot>,
    pub weight: f64,
}

impl Template {
    fn new(name: &str, slots: &[Slot], weight: f64) -> Self {
        Self {
            name: name.to_string(),
            slots: slots.to_vec(),
            weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRates {
    pub substitute: f64,
    pub delete: f64,
    pub insert: f64,
    pub swap: f64,
}

impl CorruptionRates {
    pub fn zero() -> Self {
        Self {
            substitute: 0.0,
            delete: 0.0,
            insert: 0.0,
            swap: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.substitute + self.delete + self.insert + self.swap
    }

    fn scaled(&self, factor: f64) -> Self {
        Self {
            substitute: self.substitute * factor,
            delete: self.delete * factor,
            insert: self.insert * factor,
            swap: self.swap * factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub vocab_size: usize,
    pub templates: Vec<Template>,
    /// Inclusive bounds on reference length; its midpoint is the target mean.
    pub length_range: (usize, usize),
    pub corruption_rates: CorruptionRates,
    pub confusion_sets: BTreeMap<String, Vec<String>>,
    pub seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        use Slot::*;
        let templates = vec![
            Template::new("svo", &[Subject, Verb, Object], 0.10),
            Template::new("svo_loc", &[Subject, Verb, Object, Location], 0.20),
            Template::new(
                "svo_conj_svo",
                &[Subject, Verb, Object, Conjunction, Subject, Verb, Object],
                0.35,
            ),
            Template::new(
                "svo_loc_conj_svo",
                &[
                    Subject,
                    Verb,
                    Object,
                    Location,
                    Conjunction,
                    Subject,
                    Verb,
                    Object,
                ],
                0.20,
            ),
            Template::new(
                "svo_loc_conj_svo_loc",
                &[
                    Subject,
                    Verb,
                    Object,
                    Location,
                    Conjunction,
                    Subject,
                    Verb,
                    Object,
                    Location,
                ],
                0.15,
            ),
        ];
        Self {
            vocab_size: Vocabulary::standard().len(),
            templates,
            length_range: (5, 21),
            corruption_rates: CorruptionRates {
                substitute: 0.08,
                delete: 0.02,
                insert: 0.02,
                swap: 0.02,
            },
            confusion_sets: standard_confusions(),
            seed: 1,
        }
    }
}

fn standard_confusions() -> BTreeMap<String, Vec<String>> {
    let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut pair = |a: &str, b: &str| {
        m.entry(a.to_string()).or_default().push(b.to_string());
        m.entry(b.to_string()).or_default().push(a.to_string());
    };
    pair("a", "some");
    pair("this", "these");
    pair("a", "the");
    for (s, p, _) in NOUNS {
        pair(s, p);
    }
    for (s, p) in VERBS {
        pair(s, p);
    }
    pair("in", "on");
    pair("on", "near");
    pair("near", "in");
    pair("he", "they");
    pair("she", "we");
    pair(OOD_NOUN.0, OOD_NOUN.1);
    m
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        let vocab = Vocabulary::standard();
        if self.vocab_size != vocab.len() {
            return Err(Error::contract(format!(
                "grammar vocabulary has {} entries, config says {}",
                vocab.len(),
                self.vocab_size
            )));
        }
        let r = &self.corruption_rates;
        for (name, v) in [
            ("substitute", r.substitute),
            ("delete", r.delete),
            ("insert", r.insert),
            ("swap", r.swap),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!(
                    "corruption rate {name} = {v} outside [0, 1]"
                )));
            }
        }
        if r.total() >= 1.0 {
            return Err(Error::contract(
                "per-token corruption probability must be below 1",
            ));
        }
        if self.templates.is_empty()
            || self
                .templates
                .iter()
                .any(|t| t.slots.is_empty() || !(t.weight > 0.0))
        {
            return Err(Error::contract(
                "templates must be non-empty with positive weights",
            ));
        }
        if self.length_range.0 == 0 || self.length_range.0 > self.length_range.1 {
            return Err(Error::contract("invalid length range"));
        }
        for (w, alts) in &self.confusion_sets {
            for t in std::iter::once(w).chain(alts) {
                if vocab.id(t).is_none() {
                    return Err(Error::contract(format!(
                        "confusion set word {t} not in vocabulary"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn target_mean_length(&self) -> f64 {
        (self.length_range.0 + self.length_range.1) as f64 / 2.0
    }

    /// Word ids each template slot can emit; used to check domain disjointness.
    pub fn emittable_words(&self, vocab: &Vocabulary) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .templates
            .iter()
            .flat_map(|t| t.slots.iter())
            .flat_map(|s| slot_words(*s))
            .filter_map(|w| vocab.id(w))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn slot_words(slot: Slot) -> Vec<&'static str> {
    let np = || {
        let mut w: Vec<&str> = DET_SG.iter().chain(DET_PL.iter()).copied().collect();
        w.push(DET_ANY);
        w.extend(ADJECTIVES);
        w
    };
    match slot {
        Slot::Subject | Slot::Object => {
            let mut w = np();
            for (s, p, _) in NOUNS {
                w.push(s);
                w.push(p);
            }
            w
        }
        Slot::Location => {
            let mut w = np();
            w.extend(PREPOSITIONS);
            for (s, p, _) in NOUNS {
                w.push(s);
                w.push(p);
            }
            w
        }
        Slot::Verb => VERBS.iter().flat_map(|(s, p)| [*s, *p]).collect(),
        Slot::Conjunction => CONJUNCTIONS.to_vec(),
        Slot::Pronoun => PRONOUNS_SG
            .iter()
            .chain(PRONOUNS_PL.iter())
            .copied()
            .collect(),
        Slot::Adverb => ADVERBS.to_vec(),
        Slot::Companion => {
            let mut w = np();
            w.push(OOD_NOUN.0);
            w.push(OOD_NOUN.1);
            w
        }
    }
}

/// Shifted domain derived from `base`: the out-of-domain template library,
/// a shorter length range, 1.5× the corruption rates and a different seed.
pub fn ood_config(base: &GrammarConfig) -> GrammarConfig {
    use Slot::*;
    let templates = vec![
        Template::new("pron_v_o", &[Pronoun, Verb, Object], 0.30),
        Template::new("pron_adv_v_comp", &[Pronoun, Adverb, Verb, Companion], 0.30),
        Template::new(
            "pron_v_comp_loc",
            &[Pronoun, Verb, Companion, Location],
            0.20,
        ),
        Template::new("s_adv_v_comp", &[Subject, Adverb, Verb, Companion], 0.20),
    ];
    let rates = base.corruption_rates.scaled(1.5);
    GrammarConfig {
        vocab_size: base.vocab_size,
        templates,
        length_range: (3, 9),
        corruption_rates: if rates.total() < 1.0 {
            rates
        } else {
            base.corruption_rates
        },
        confusion_sets: base.confusion_sets.clone(),
        seed: base.seed.wrapping_add(0x00d0_0d00),
    }
}

/// A corrupted source and its grammatical reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Sentence,
    pub reference: Sentence,
}

struct Generator<'a> {
    vocab: &'a Vocabulary,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn pick<'w>(&mut self, words: &[&'w str]) -> &'w str {
        words[self.rng.random_range(0..words.len())]
    }

    fn noun_phrase(&mut self, out: &mut Vec<&'static str>, plural: bool, noun: &'static str) {
        let det = if self.rng.random_bool(0.3) {
            DET_ANY
        } else if plural {
            self.pick(&DET_PL)
        } else {
            self.pick(&DET_SG)
        };
        out.push(det);
        if self.rng.random_bool(ADJECTIVE_PROB) {
            out.push(self.pick(&ADJECTIVES));
        }
        out.push(noun);
    }

    fn sentence(&mut self, template: &Template) -> Sentence {
        let mut words: Vec<&'static str> = Vec::new();
        let mut plural_subject = false;
        for &slot in &template.slots {
            match slot {
                Slot::Subject | Slot::Object => {
                    let plural = self.rng.random_bool(0.5);
                    let (s, p, _) = NOUNS[self.rng.random_range(0..NOUNS.len())];
                    self.noun_phrase(&mut words, plural, if plural { p } else { s });
                    if slot == Slot::Subject {
                        plural_subject = plural;
                    }
                }
                Slot::Location => {
                    let plural = self.rng.random_bool(0.5);
                    let (s, p, prep) = NOUNS[self.rng.random_range(0..NOUNS.len())];
                    words.push(prep);
                    self.noun_phrase(&mut words, plural, if plural { p } else { s });
                }
                Slot::Companion => {
                    let plural = self.rng.random_bool(0.5);
                    self.noun_phrase(
                        &mut words,
                        plural,
                        if plural { OOD_NOUN.1 } else { OOD_NOUN.0 },
                    );
                }
                Slot::Verb => {
                    let (s, p) = VERBS[self.rng.random_range(0..VERBS.len())];
                    words.push(if plural_subject { p } else { s });
                }
                Slot::Pronoun => {
                    plural_subject = self.rng.random_bool(0.5);
                    words.push(if plural_subject {
                        self.pick(&PRONOUNS_PL)
                    } else {
                        self.pick(&PRONOUNS_SG)
                    });
                }
                Slot::Adverb => words.push(self.pick(&ADVERBS)),
                Slot::Conjunction => words.push(self.pick(&CONJUNCTIONS)),
            }
        }
        self.vocab.encode(&words)
    }
}

/// Deterministic corpus of `n` pairs.
pub fn generate_corpus(config: &GrammarConfig, n: usize) -> Result<Vec<SentencePair>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::contract("corpus size must be at least 1"));
    }
    let vocab = Vocabulary::standard();
    let confusions = ConfusionTable::new(config, &vocab);
    let mut gen = Generator {
        vocab: &vocab,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let total_weight: f64 = config.templates.iter().map(|t| t.weight).sum();
    let (lo, hi) = config.length_range;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut reference = Vec::new();
        for _ in 0..MAX_RESAMPLE {
            let mut u = gen.rng.random::<f64>() * total_weight;
            let mut chosen = &config.templates[config.templates.len() - 1];
            for t in &config.templates {
                if u < t.weight {
                    chosen = t;
                    break;
                }
                u -= t.weight;
            }
            reference = gen.sentence(chosen);
            if (lo..=hi).contains(&reference.len()) {
                break;
            }
        }
        let source = corrupt_with(
            &reference,
            &config.corruption_rates,
            &confusions,
            &mut gen.rng,
        )
        .0;
        out.push(SentencePair { source, reference });
    }
    Ok(out)
}

/// Confusable alternatives by token id.
pub struct ConfusionTable(BTreeMap<usize, Vec<usize>>);

impl ConfusionTable {
    pub fn new(config: &GrammarConfig, vocab: &Vocabulary) -> Self {
        Self(
            config
                .confusion_sets
                .iter()
                .filter_map(|(w, alts)| {
                    Some((
                        vocab.id(w)?,
                        alts.iter().filter_map(|a| vocab.id(a)).collect(),
                    ))
                })
                .collect(),
        )
    }

    fn get(&self, id: usize) -> &[usize] {
        self.0.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Edit applied at a reference position by [`corrupt`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Substitute,
    Delete,
    Insert,
    Swap,
}

/// Learner-style corruption: at most one edit starts at each reference position.
pub fn corrupt<R: Rng + ?Sized>(
    reference: &[usize],
    config: &GrammarConfig,
    rng: &mut R,
) -> Sentence {
    let vocab = Vocabulary::standard();
    let table = ConfusionTable::new(config, &vocab);
    corrupt_with(reference, &config.corruption_rates, &table, rng).0
}

/// As [`corrupt`], also returning the edit chosen at each reference position.
pub fn corrupt_with<R: Rng + ?Sized>(
    reference: &[usize],
    rates: &CorruptionRates,
    confusions: &ConfusionTable,
    rng: &mut R,
) -> (Sentence, Vec<Option<Corruption>>) {
    let mut out = Vec::with_capacity(reference.len() + 2);
    let mut edits = vec![None; reference.len()];
    let mut i = 0;
    while i < reference.len() {
        let tok = reference[i];
        let alts = confusions.get(tok);
        let u: f64 = rng.random();
        let mut edge = rates.substitute;
        if u < edge {
            if alts.is_empty() {
                out.push(tok);
            } else {
                out.push(alts[rng.random_range(0..alts.len())]);
                edits[i] = Some(Corruption::Substitute);
            }
            i += 1;
            continue;
        }
        edge += rates.delete;
        if u < edge {
            edits[i] = Some(Corruption::Delete);
            i += 1;
            continue;
        }
        edge += rates.insert;
        if u < edge {
            out.push(tok);
            out.push(if alts.is_empty() {
                tok
            } else {
                alts[rng.random_range(0..alts.len())]
            });
            edits[i] = Some(Corruption::Insert);
            i += 1;
            continue;
        }
        edge += rates.swap;
        if u < edge && i + 1 < reference.len() && reference[i + 1] != tok {
            out.push(reference[i + 1]);
            out.push(tok);
            edits[i] = Some(Corruption::Swap);
            i += 2;
            continue;
        }
        out.push(tok);
        i += 1;
    }
    if out.is_empty() {
        out.push(reference[0]);
    }
    (out, edits)
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    src: Vec<String>,
    #[serde(rename = "ref")]
    reference: Vec<String>,
}

/// Writes one JSON object per line: `{"src": [...], "ref": [...]}`.
pub fn write_corpus(path: &Path, pairs: &[SentencePair], vocab: &Vocabulary) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in pairs {
        let rec = CorpusRecord {
            src: vocab.decode(&p.source),
            reference: vocab.decode(&p.reference),
        };
        let line = serde_json::to_string(&rec).expect("corpus record serialises");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<SentencePair>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.src.is_empty() || rec.reference.is_empty() {
            return Err(parse_err("empty src or ref".into()));
        }
        out.push(SentencePair {
            source: vocab.encode(&rec.src),
            reference: vocab.encode(&rec.reference),
        });
    }
    if out.is_empty() {
        log::warn!("{}: corpus is empty", path.display());
    }
    Ok(out)
}

/// Sentence count and mean reference length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub sentences: usize,
    pub mean_length: f64,
}

pub fn corpus_stats(pairs: &[SentencePair]) -> CorpusStats {
    let total: usize = pairs.iter().map(|p| p.reference.len()).sum();
    CorpusStats {
        sentences: pairs.len(),
        mean_length: if pairs.is_empty() {
            0.0
        } else {
            total as f64 / pairs.len() as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocabulary_has_fifty_entries() {
        let v = Vocabulary::standard();
        assert_eq!(v.len(), 50);
        assert_eq!(v.id("<s>"), Some(1));
        assert_eq!(v.id_or_unk("zebra"), UNK);
        assert!(Vocabulary::new(vec!["x".into()]).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GrammarConfig::default();
        assert_eq!(
            generate_corpus(&cfg, 50).unwrap(),
            generate_corpus(&cfg, 50).unwrap()
        );
        let other = GrammarConfig {
            seed: 2,
            ..cfg.clone()
        };
        assert_ne!(
            generate_corpus(&cfg, 50).unwrap(),
            generate_corpus(&other, 50).unwrap()
        );
    }

    #[test]
    fn zero_rates_copy_references() {
        let cfg = GrammarConfig {
            corruption_rates: CorruptionRates::zero(),
            ..GrammarConfig::default()
        };
        for p in generate_corpus(&cfg, 200).unwrap() {
            assert_eq!(p.source, p.reference);
        }
    }

    #[test]
    fn in_domain_mean_length_near_thirteen() {
        let cfg = GrammarConfig::default();
        let stats = corpus_stats(&generate_corpus(&cfg, 20_000).unwrap());
        assert!(
            (11.0..=15.0).contains(&stats.mean_length),
            "{}",
            stats.mean_length
        );
        assert!((stats.mean_length - cfg.target_mean_length()).abs() <= 2.0);
    }

    #[test]
    fn ood_shift_properties() {
        let id = GrammarConfig::default();
        let ood = ood_config(&id);
        ood.validate().unwrap();
        for t in &ood.templates {
            assert!(id
                .templates
                .iter()
                .all(|u| u.name != t.name && u.slots != t.slots));
        }
        let vocab = Vocabulary::standard();
        let id_words = id.emittable_words(&vocab);
        let ood_words = ood.emittable_words(&vocab);
        let unseen = ood_words.iter().filter(|w| !id_words.contains(w)).count();
        assert_eq!(unseen, 10);
        assert!(unseen as f64 / vocab.len() as f64 >= 0.2);
        let ood_stats = corpus_stats(&generate_corpus(&ood, 5_000).unwrap());
        let id_stats = corpus_stats(&generate_corpus(&id, 5_000).unwrap());
        assert!(ood_stats.mean_length < id_stats.mean_length);
        assert!((ood_stats.mean_length - ood.target_mean_length()).abs() <= 2.0);
        assert!(ood.corruption_rates.total() > id.corruption_rates.total());
    }

    #[test]
    fn references_use_only_template_words() {
        let cfg = GrammarConfig::default();
        let vocab = Vocabulary::standard();
        let allowed = cfg.emittable_words(&vocab);
        for p in generate_corpus(&cfg, 500).unwrap() {
            assert!(p.reference.iter().all(|t| allowed.contains(t)));
        }
    }

    #[test]
    fn corruption_edge_cases() {
        let cfg = GrammarConfig::default();
        let vocab = Vocabulary::standard();
        let table = ConfusionTable::new(&cfg, &vocab);
        let reference = vocab.encode(&["the", "cat", "sees", "a", "dog"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = CorruptionRates::zero();
        assert_eq!(
            corrupt_with(&reference, &zero, &table, &mut rng).0,
            reference
        );

        // Singleton confusion sets with substitution rate 1 fully determine the output.
        let mut single = BTreeMap::new();
        single.insert("cat".to_string(), vec!["cats".to_string()]);
        single.insert("sees".to_string(), vec!["see".to_string()]);
        let cfg1 = GrammarConfig {
            confusion_sets: single,
            ..cfg.clone()
        };
        let table1 = ConfusionTable::new(&cfg1, &vocab);
        let all_sub = CorruptionRates {
            substitute: 0.999_999,
            ..zero
        };
        let (out, _) = corrupt_with(&vocab.encode(&["cat", "sees"]), &all_sub, &table1, &mut rng);
        assert_eq!(out, vocab.encode(&["cats", "see"]));
    }

    #[test]
    fn corruption_rate_is_binomial() {
        let cfg = GrammarConfig::default();
        let vocab = Vocabulary::standard();
        let table = ConfusionTable::new(&cfg, &vocab);
        let rates = CorruptionRates {
            delete: 0.15,
            ..CorruptionRates::zero()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corpus = generate_corpus(&cfg, 1_000).unwrap();
        let mut edited = 0;
        let mut total = 0;
        for p in corpus.iter().take(800) {
            let (_, edits) = corrupt_with(&p.reference, &rates, &table, &mut rng);
            edited += edits.iter().filter(|e| e.is_some()).count();
            total += edits.len();
        }
        assert!(total >= 10_000);
        let frac = edited as f64 / total as f64;
        assert!((frac - 0.15).abs() < 0.02, "{frac}");
    }

    #[test]
    fn identity_corrector_is_imperfect() {
        let corpus = generate_corpus(&GrammarConfig::default(), 100).unwrap();
        assert!(corpus.iter().any(|p| p.source != p.reference));
        assert!(corpus
            .iter()
            .all(|p| !p.source.is_empty() && !p.reference.is_empty()));
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::standard();
        let corpus = generate_corpus(&GrammarConfig::default(), 30).unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&path, &corpus, &vocab).unwrap();
        assert_eq!(read_corpus(&path, &vocab).unwrap(), corpus);

        let vpath = dir.path().join("vocab.txt");
        vocab.write(&vpath).unwrap();
        assert_eq!(Vocabulary::read(&vpath).unwrap(), vocab);

        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(read_corpus(&empty, &vocab).unwrap().is_empty());

        let bad = dir.path().join("bad.jsonl");
        fs::write(
            &bad,
            "{\"src\":[\"a\"],\"ref\":[\"a\"]}\n{\"src\":[\"a\"]}\n",
        )
        .unwrap();
        match read_corpus(&bad, &vocab) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(read_corpus(&dir.path().join("nope"), &vocab).is_err());
    }
}
