//! The end-to-end model: AAI predicts articulators, AWP predicts per-frame
//! articulator weights, and FPC classifies phonemes from the weighted
//! articulators. During training the predicted articulators are swapped for
//! ground truth by a straight-through substitution, so the classifier sees
//! true positions while its gradient still reaches the AAI network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::KvConfig;
use crate::data::{Batch, Normalizer, EMA_DIM, MFCC_DIM};
use crate::error::{Error, Result};
use crate::nn::{
    min_max_normalize_with, ste_replace, Bound, DenseLayer, EncoderConfig, MinMaxMode,
    NormalizedWeights, Padding, ParamStore, TransformerEncoder,
};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    /// Number of phoneme classes, at least 2.
    pub classes: usize,
    pub dropout_p: f64,
    pub min_max: MinMaxMode,
    /// AAI and AWP share one encoder trunk and differ only in their heads.
    pub share_trunk: bool,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl PipelineConfig {
    pub fn new(classes: usize) -> Self {
        PipelineConfig {
            encoder: EncoderConfig::default(),
            classes,
            dropout_p: 0.5,
            min_max: MinMaxMode::PerFrame,
            share_trunk: false,
            init_seed: 0,
        }
    }

    /// Reads architecture keys; `dropout_p` is left for the training config.
    pub fn from_kv(kv: &mut KvConfig, classes: usize) -> Result<Self> {
        let d = EncoderConfig::default();
        let mut cfg = PipelineConfig::new(classes);
        cfg.encoder = EncoderConfig {
            layers: kv.take_or("layers", d.layers)?,
            d_model: kv.take_or("d_model", d.d_model)?,
            heads: kv.take_or("heads", d.heads)?,
            d_ff: kv.take_or("d_ff", d.d_ff)?,
            max_len: kv.take_or("max_len", d.max_len)?,
        };
        cfg.min_max = kv.take_or("min_max", cfg.min_max)?;
        cfg.share_trunk = kv.take_or("share_trunk", cfg.share_trunk)?;
        cfg.init_seed = kv.take_or("init_seed", cfg.init_seed)?;
        Ok(cfg)
    }

    /// Inverse of [`PipelineConfig::from_kv`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        vec![
            ("layers", e.layers.to_string()),
            ("d_model", e.d_model.to_string()),
            ("heads", e.heads.to_string()),
            ("d_ff", e.d_ff.to_string()),
            ("max_len", e.max_len.to_string()),
            ("min_max", self.min_max.to_string()),
            ("share_trunk", self.share_trunk.to_string()),
            ("init_seed", self.init_seed.to_string()),
        ]
    }
}

/// Weights for the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub aai: f64,
    pub fpc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { aai: 1.0, fpc: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub params: ParamStore,
    pub normalizer: Normalizer,
    cfg: PipelineConfig,
    aai_encoder: TransformerEncoder,
    aai_head: DenseLayer,
    /// `None` when the AWP reuses the AAI trunk.
    awp_encoder: Option<TransformerEncoder>,
    awp_head: DenseLayer,
    fpc_encoder: TransformerEncoder,
    fpc_head: DenseLayer,
    awp_bypass: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// `[rows × 12]` AAI prediction.
    pub ema_pred: Var,
    pub weights: NormalizedWeights,
    /// Articulators fed to FPC (ground truth via STE when supplied) times weights.
    pub weighted_ema: Var,
    /// `[rows × K]`
    pub logits: Var,
    /// Degenerate min-max frames among the real (unpadded) frames.
    pub degenerate_frame_count: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l_aai: Var,
    pub l_fpc: Var,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        if cfg.classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 phoneme classes, got {}",
                cfg.classes
            )));
        }
        if !(0.0..1.0).contains(&cfg.dropout_p) {
            return Err(Error::invalid(format!(
                "dropout probability {} not in [0, 1)",
                cfg.dropout_p
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let e = cfg.encoder;
        let d = e.d_model;
        let aai_encoder =
            TransformerEncoder::new(&mut store, "aai.encoder", MFCC_DIM, e, &mut rng)?;
        let aai_head = DenseLayer::new(&mut store, "aai.head", d, EMA_DIM, &mut rng)?;
        let awp_encoder = if cfg.share_trunk {
            None
        } else {
            Some(TransformerEncoder::new(
                &mut store,
                "awp.encoder",
                MFCC_DIM,
                e,
                &mut rng,
            )?)
        };
        let awp_head = DenseLayer::new(&mut store, "awp.head", d, EMA_DIM, &mut rng)?;
        let fpc_encoder = TransformerEncoder::new(&mut store, "fpc.encoder", EMA_DIM, e, &mut rng)?;
        let fpc_head = DenseLayer::new(&mut store, "fpc.head", d, cfg.classes, &mut rng)?;
        Ok(Pipeline {
            params: store,
            normalizer: Normalizer::identity(),
            cfg,
            aai_encoder,
            aai_head,
            awp_encoder,
            awp_head,
            fpc_encoder,
            fpc_head,
            awp_bypass: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn classes(&self) -> usize {
        self.cfg.classes
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        self.cfg.dropout_p = p;
        Ok(())
    }

    /// Replaces the AWP output with fixed per-channel weights (ablation and
    /// test hook); `None` restores the network.
    pub fn set_awp_bypass(&mut self, weights: Option<Vec<f64>>) -> Result<()> {
        if let Some(w) = &weights {
            if w.len() != EMA_DIM {
                return Err(Error::invalid(format!(
                    "bypass needs {EMA_DIM} weights, got {}",
                    w.len()
                )));
            }
        }
        self.awp_bypass = weights;
        Ok(())
    }

    /// Zeroes the AAI head weights so the prediction is its bias alone.
    pub fn zero_aai_head(&mut self) {
        self.aai_head.zero_weight(&mut self.params);
    }

    pub fn aai_head(&self) -> &DenseLayer {
        &self.aai_head
    }

    /// Parameter names of the AAI network (its trunk and head).
    pub fn aai_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("aai."))
            .map(str::to_string)
            .collect()
    }

    pub fn fpc_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("fpc."))
            .map(str::to_string)
            .collect()
    }

    fn check_mfcc(&self, g: &Graph, mfcc: Var, pad: &Padding) -> Result<()> {
        let t = g.value(mfcc);
        if t.rank() != 2 || t.cols() != MFCC_DIM || t.rows() != pad.rows() {
            return Err(Error::Shape {
                op: "pipeline input",
                lhs: t.shape().to_vec(),
                rhs: vec![pad.rows(), MFCC_DIM],
            });
        }
        Ok(())
    }

    /// AAI: `[rows × 13]` acoustics to `[rows × 12]` articulators.
    pub fn aai_forward(&self, g: &mut Graph, p: &Bound, mfcc: Var, pad: &Padding) -> Result<Var> {
        self.check_mfcc(g, mfcc, pad)?;
        let h = self.aai_encoder.forward(g, p, mfcc, pad)?;
        self.aai_head.forward(g, p, h)
    }

    /// AWP: raw 12-dim head output, dropout, then min-max normalization.
    pub fn awp_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        mfcc: Var,
        pad: &Padding,
        training: bool,
        rng: &mut R,
    ) -> Result<NormalizedWeights> {
        self.check_mfcc(g, mfcc, pad)?;
        let encoder = self.awp_encoder.as_ref().unwrap_or(&self.aai_encoder);
        let h = encoder.forward(g, p, mfcc, pad)?;
        self.awp_from_hidden(g, p, h, pad, training, rng)
    }

    fn awp_from_hidden<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        hidden: Var,
        pad: &Padding,
        training: bool,
        rng: &mut R,
    ) -> Result<NormalizedWeights> {
        if let Some(w) = &self.awp_bypass {
            let data = (0..pad.rows()).flat_map(|_| w.iter().copied()).collect();
            let weights = g.constant(Tensor::new(vec![pad.rows(), EMA_DIM], data)?);
            return Ok(NormalizedWeights {
                weights,
                degenerate: vec![false; pad.rows()],
            });
        }
        let raw = self.awp_head.forward(g, p, hidden)?;
        let raw = g.dropout(raw, self.cfg.dropout_p, training, rng)?;
        min_max_normalize_with(g, raw, self.cfg.min_max, pad)
    }

    /// Full forward pass. With `gt_ema` the classifier sees ground-truth
    /// articulators (straight-through); without it, the AAI prediction.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        mfcc: &Tensor,
        gt_ema: Option<&Tensor>,
        pad: &Padding,
        training: bool,
        rng: &mut R,
    ) -> Result<PipelineOutput> {
        if training && gt_ema.is_none() {
            return Err(Error::invalid(
                "training forward requires ground-truth articulators",
            ));
        }
        let x = g.constant(mfcc.clone());
        self.check_mfcc(g, x, pad)?;
        let aai_hidden = self.aai_encoder.forward(g, p, x, pad)?;
        let ema_pred = self.aai_head.forward(g, p, aai_hidden)?;
        let awp_hidden = match &self.awp_encoder {
            Some(enc) => enc.forward(g, p, x, pad)?,
            None => aai_hidden,
        };
        let weights = self.awp_from_hidden(g, p, awp_hidden, pad, training, rng)?;

        let articulators = match gt_ema {
            Some(gt) => {
                let gt = g.constant(gt.clone());
                ste_replace(g, ema_pred, gt)?
            }
            None => ema_pred,
        };
        let weighted_ema = g.mul(weights.weights, articulators)?;
        let h = self.fpc_encoder.forward(g, p, weighted_ema, pad)?;
        let logits = self.fpc_head.forward(g, p, h)?;
        let degenerate_frame_count = weights
            .degenerate
            .iter()
            .zip(&pad.valid)
            .filter(|(&d, &v)| d && v)
            .count();
        Ok(PipelineOutput {
            ema_pred,
            weights,
            weighted_ema,
            logits,
            degenerate_frame_count,
        })
    }

    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        use_gt: bool,
        training: bool,
        rng: &mut R,
    ) -> Result<PipelineOutput> {
        let gt = use_gt.then_some(&batch.ema);
        self.forward(g, p, &batch.mfcc, gt, &batch.padding, training, rng)
    }

    /// `total = λ_aai · MSE(ema_pred, gt) + λ_fpc · CE(logits, labels)`, both
    /// masked means over real frames.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &PipelineOutput,
        gt_ema: &Tensor,
        labels: &[usize],
        mask: &Tensor,
        weights: LossWeights,
    ) -> Result<LossTerms> {
        if weights.aai < 0.0 || weights.fpc < 0.0 || !(weights.aai + weights.fpc > 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be ≥ 0 and not both zero, got {weights:?}"
            )));
        }
        let gt = g.constant(gt_ema.clone());
        let l_aai = g.mse_loss(out.ema_pred, gt, mask)?;
        let l_fpc = g.cross_entropy_loss(out.logits, labels, mask)?;
        let a = g.scale(l_aai, weights.aai);
        let f = g.scale(l_fpc, weights.fpc);
        let total = g.add(a, f)?;
        Ok(LossTerms {
            total,
            l_aai,
            l_fpc,
        })
    }
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests;
