use super::utterance::Corpus;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const STD_FLOOR: f64 = 1e-8;

/// Per-column mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(tensors: impl Iterator<Item = &'a Tensor>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let rows: Vec<&Tensor> = tensors.collect();
        for t in &rows {
            for r in 0..t.rows() {
                for (c, v) in t.row(r).iter().enumerate() {
                    sum[c] += v;
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        for t in &rows {
            for r in 0..t.rows() {
                for (c, v) in t.row(r).iter().enumerate() {
                    sq[c] += (v - mean[c]) * (v - mean[c]);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / n.max(1) as f64).sqrt().max(STD_FLOOR))
            .collect();
        FeatureStats { mean, std }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let cols = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % cols]) / self.std[i % cols])
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        let cols = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % cols] + self.mean[i % cols])
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }
}

/// Z-scoring statistics fitted on a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mfcc: FeatureStats,
    pub ema: FeatureStats,
}

impl Normalizer {
    pub fn fit(corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid(
                "cannot fit normalization on an empty corpus",
            ));
        }
        Ok(Normalizer {
            mfcc: FeatureStats::fit(corpus.utterances.iter().map(|u| &u.mfcc), super::MFCC_DIM),
            ema: FeatureStats::fit(corpus.utterances.iter().map(|u| &u.ema), super::EMA_DIM),
        })
    }

    pub fn identity() -> Self {
        Normalizer {
            mfcc: FeatureStats::identity(super::MFCC_DIM),
            ema: FeatureStats::identity(super::EMA_DIM),
        }
    }

    pub fn apply(&self, corpus: &Corpus) -> Corpus {
        let mut out = corpus.clone();
        for u in &mut out.utterances {
            u.mfcc = self.mfcc.apply(&u.mfcc);
            u.ema = self.ema.apply(&u.ema);
        }
        out
    }
}
