//! Token- and sequence-level uncertainty for ensembles and Dirichlet models.
//!
//! Sequence quantities sum token quantities over the predicted positions of a
//! single decoded output (end marker included); rates divide by that length.

use serde::{Deserialize, Serialize};

use crate::dirmath::{
    ensemble_uncertainties, mutual_information, DirichletParams, TokenPosteriorSet,
    UncertaintyTriple,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenUncertainty {
    pub position: usize,
    pub triple: UncertaintyTriple,
}

pub fn token_uncertainty_ensemble(set: &TokenPosteriorSet, position: usize) -> TokenUncertainty {
    TokenUncertainty {
        position,
        triple: ensemble_uncertainties(set),
    }
}

pub fn token_uncertainty_dirichlet(d: &DirichletParams, position: usize) -> TokenUncertainty {
    TokenUncertainty {
        position,
        triple: mutual_information(d),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceUncertainty {
    pub total_sum: f64,
    pub data_sum: f64,
    pub knowledge_sum: f64,
    pub length: usize,
    pub total_rate: f64,
    pub data_rate: f64,
    pub knowledge_rate: f64,
}

impl SequenceUncertainty {
    fn from_sums(total: f64, data: f64, length: usize) -> Self {
        let knowledge = total - data;
        let n = length as f64;
        Self {
            total_sum: total,
            data_sum: data,
            knowledge_sum: knowledge,
            length,
            total_rate: total / n,
            data_rate: data / n,
            knowledge_rate: knowledge / n,
        }
    }

    /// The requested measure as a sum or a per-token rate.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Total,
    Data,
    Knowledge,
}

/// Sentence-level aggregation used for ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Sum,
    Rate,
}

/// Sums (left to right) and rates over one decoded sequence.
pub fn sequence_uncertainty(tokens: &[TokenUncertainty]) -> Result<SequenceUncertainty> {
    if tokens.is_empty() {
        return Err(Error::contract(
            "sequence uncertainty needs at least one token",
        ));
    }
    let mut total = 0.0;
    let mut data = 0.0;
    for t in tokens {
        total += t.triple.total;
        data += t.triple.data;
    }
    Ok(SequenceUncertainty::from_sums(total, data, tokens.len()))
}

/// Monte-Carlo average over `S` sampled outputs, each already reduced by
/// [`sequence_uncertainty`]. With one sample this is the identity.
pub fn average_sequence_uncertainty(
    samples: &[SequenceUncertainty],
) -> Result<SequenceUncertainty> {
    if samples.is_empty() {
        return Err(Error::contract("no sequence samples"));
    }
    if samples.len() == 1 {
        return Ok(samples[0]);
    }
    let s = samples.len() as f64;
    let mean = |f: fn(&SequenceUncertainty) -> f64| samples.iter().map(f).sum::<f64>() / s;
    let total = mean(|u| u.total_sum);
    let data = mean(|u| u.data_sum);
    let length = samples.iter().map(|u| u.length).sum::<usize>() as f64 / s;
    let mut out = SequenceUncertainty::from_sums(total, data, length.round().max(1.0) as usize);
    out.total_rate = mean(|u| u.total_rate);
    out.data_rate = mean(|u| u.data_rate);
    out.knowledge_rate = mean(|u| u.knowledge_rate);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirmath::Categorical;

    fn cat(v: &[f64]) -> Categorical {
        Categorical::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ensemble_token_examples() {
        let same = TokenPosteriorSet::new(vec![cat(&[0.3, 0.7]); 3]).unwrap();
        assert!(token_uncertainty_ensemble(&same, 0).triple.knowledge.abs() < 1e-12);
        let split = TokenPosteriorSet::new(vec![cat(&[1.0, 0.0]), cat(&[0.0, 1.0])]).unwrap();
        let u = token_uncertainty_ensemble(&split, 4);
        assert_eq!(u.position, 4);
        assert!((u.triple.knowledge - 2f64.ln()).abs() < 1e-12);

        let members = [
            [0.1, 0.2, 0.7],
            [0.3, 0.3, 0.4],
            [0.6, 0.2, 0.2],
            [0.25, 0.5, 0.25],
            [0.05, 0.05, 0.9],
        ];
        let set = TokenPosteriorSet::new(members.iter().map(|m| cat(m)).collect()).unwrap();
        let h = |p: &[f64]| -> f64 { -p.iter().map(|x| x * x.ln()).sum::<f64>() };
        let mean: Vec<f64> = (0..3)
            .map(|c| members.iter().map(|m| m[c]).sum::<f64>() / 5.0)
            .collect();
        let tu = h(&mean);
        let du = members.iter().map(|m| h(m)).sum::<f64>() / 5.0;
        let u = token_uncertainty_ensemble(&set, 0).triple;
        assert!((u.total - tu).abs() < 1e-12 && (u.data - du).abs() < 1e-12);
        assert!((u.knowledge - (tu - du)).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_token_examples() {
        let sharp = DirichletParams::new(vec![1000.0, 1000.0]).unwrap();
        assert!(token_uncertainty_dirichlet(&sharp, 0).triple.knowledge < 1e-3);
        let flat = DirichletParams::new(vec![1.0, 1.0]).unwrap();
        assert!((token_uncertainty_dirichlet(&flat, 0).triple.total - 2f64.ln()).abs() < 1e-12);
    }

    fn tok(total: f64, data: f64) -> TokenUncertainty {
        TokenUncertainty {
            position: 0,
            triple: UncertaintyTriple::from_total_and_data(total, data),
        }
    }

    #[test]
    fn sequence_examples() {
        let one = sequence_uncertainty(&[tok(0.9, 0.4)]).unwrap();
        assert_eq!((one.total_sum, one.data_sum, one.length), (0.9, 0.4, 1));
        let same = sequence_uncertainty(&[tok(0.5, 0.2); 7]).unwrap();
        assert!((same.total_rate - 0.5).abs() < 1e-12 && (same.data_rate - 0.2).abs() < 1e-12);
        let three = sequence_uncertainty(&[tok(0.1, 0.05), tok(1.3, 0.2), tok(0.7, 0.7)]).unwrap();
        assert_eq!(three.total_sum, 0.1 + 1.3 + 0.7);
        assert_eq!(three.data_sum, 0.05 + 0.2 + 0.7);
        assert!((three.knowledge_sum - (three.total_sum - three.data_sum)).abs() < 1e-12);
        assert!((three.knowledge_rate - three.knowledge_sum / 3.0).abs() < 1e-12);
        assert_eq!(three.get(Measure::Data, Aggregate::Rate), three.data_rate);
        assert!(sequence_uncertainty(&[]).is_err());
        assert_eq!(average_sequence_uncertainty(&[three]).unwrap(), three);
    }
}
