use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::channel::{EMA_DIM, MFCC_DIM};
use super::utterance::{Corpus, Utterance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::Padding;

/// Padded mini-batch. Sequences are stacked row-wise: row `b·T + t` holds
/// frame `t` of utterance `b`, and padded cells are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B·T × 13]`
    pub mfcc: Tensor,
    /// `[B·T × 12]`
    pub ema: Tensor,
    /// `B·T` labels; padded frames carry 0.
    pub labels: Vec<usize>,
    pub padding: Padding,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::invalid("cannot batch zero utterances"));
        }
        let b = utts.len();
        let t = utts.iter().map(|u| u.frames()).max().unwrap_or(0);
        let mut mfcc = vec![0.0; b * t * MFCC_DIM];
        let mut ema = vec![0.0; b * t * EMA_DIM];
        let mut labels = vec![0; b * t];
        let mut valid = vec![false; b * t];
        for (i, u) in utts.iter().enumerate() {
            let n = u.frames();
            let r0 = i * t;
            mfcc[r0 * MFCC_DIM..(r0 + n) * MFCC_DIM].copy_from_slice(u.mfcc.data());
            ema[r0 * EMA_DIM..(r0 + n) * EMA_DIM].copy_from_slice(u.ema.data());
            labels[r0..r0 + n].copy_from_slice(&u.labels);
            valid[r0..r0 + n].iter_mut().for_each(|v| *v = true);
        }
        Ok(Batch {
            mfcc: Tensor::new(vec![b * t, MFCC_DIM], mfcc)?,
            ema: Tensor::new(vec![b * t, EMA_DIM], ema)?,
            labels,
            padding: Padding::new(b, t, valid)?,
            ids: utts.iter().map(|u| u.id.clone()).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.padding.batch
    }

    pub fn max_len(&self) -> usize {
        self.padding.seq_len
    }

    pub fn mask(&self) -> Tensor {
        self.padding.mask_tensor()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// Shuffle utterance order with this seed; `None` keeps corpus order.
    pub shuffle_seed: Option<u64>,
    /// Group utterances of similar length before batching.
    pub bucket_by_length: bool,
}

pub fn make_batches(corpus: &Corpus, opts: BatchOptions) -> Result<Vec<Batch>> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot batch an empty corpus"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = opts.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
    if let Some(rng) = rng.as_mut() {
        order.shuffle(rng);
    }
    if opts.bucket_by_length {
        order.sort_by_key(|&i| corpus.utterances[i].frames());
    }
    let mut chunks: Vec<&[usize]> = order.chunks(opts.batch_size).collect();
    if opts.bucket_by_length {
        if let Some(rng) = rng.as_mut() {
            chunks.shuffle(rng);
        }
    }
    chunks
        .into_iter()
        .map(|c| {
            let utts: Vec<&Utterance> = c.iter().map(|&i| &corpus.utterances[i]).collect();
            Batch::from_utterances(&utts)
        })
        .collect()
}
