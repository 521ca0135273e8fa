use super::channel::{EMA_DIM, MFCC_DIM};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One recording: aligned acoustic features, articulator positions and
/// frame-level phoneme labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub subject: String,
    /// `[frames × 13]`
    pub mfcc: Tensor,
    /// `[frames × 12]`, canonical channel order.
    pub ema: Tensor,
    pub labels: Vec<usize>,
    pub phoneme_table: Vec<String>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.mfcc.shape() != [n, MFCC_DIM] {
            return Err(Error::invalid(format!(
                "utterance {}: mfcc shape {:?}, expected [{n}, {MFCC_DIM}]",
                self.id,
                self.mfcc.shape()
            )));
        }
        if self.ema.shape() != [n, EMA_DIM] {
            return Err(Error::invalid(format!(
                "utterance {}: ema shape {:?}, expected [{n}, {EMA_DIM}]",
                self.id,
                self.ema.shape()
            )));
        }
        if let Some((t, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.phoneme_table.len())
        {
            return Err(Error::LabelOutOfRange {
                frame: t,
                label: l,
                classes: self.phoneme_table.len(),
            });
        }
        Ok(())
    }
}

/// A set of utterances sharing one phoneme table.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub phonemes: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let phonemes = utterances
            .first()
            .map(|u| u.phoneme_table.clone())
            .unwrap_or_default();
        for u in &utterances {
            u.validate()?;
            if u.phoneme_table != phonemes {
                return Err(Error::invalid(format!(
                    "utterance {} has a different phoneme table",
                    u.id
                )));
            }
        }
        Ok(Corpus {
            phonemes,
            utterances,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::frames).sum()
    }

    pub fn phoneme_index(&self, symbol: &str) -> Option<usize> {
        self.phonemes.iter().position(|p| p == symbol)
    }
}
