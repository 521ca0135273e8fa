use rand::Rng;

use super::dense::DenseLayer;
use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{AttnLayout, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which rows of a stacked `[batch·seq_len × feat]` input are real frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padding {
    pub batch: usize,
    pub seq_len: usize,
    pub valid: Vec<bool>,
}

impl Padding {
    pub fn new(batch: usize, seq_len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * seq_len {
            return Err(Error::invalid(format!(
                "padding mask has {} entries, expected {}",
                valid.len(),
                batch * seq_len
            )));
        }
        Ok(Padding {
            batch,
            seq_len,
            valid,
        })
    }

    pub fn unpadded(frames: usize) -> Self {
        Padding {
            batch: 1,
            seq_len: frames,
            valid: vec![true; frames],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    /// Mask as a `{0, 1}` vector for masked losses.
    pub fn mask_tensor(&self) -> Tensor {
        Tensor::vector(
            self.valid
                .iter()
                .map(|&v| if v { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            d_model: 64,
            heads: 2,
            d_ff: 128,
            max_len: 1024,
        }
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Block {
    q: DenseLayer,
    k: DenseLayer,
    v: DenseLayer,
    o: DenseLayer,
    ff1: DenseLayer,
    ff2: DenseLayer,
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

/// Post-norm transformer encoder with sinusoidal positions.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    input: DenseLayer,
    blocks: Vec<Block>,
    positions: Tensor,
    cfg: EncoderConfig,
}

fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
    Ok((
        store.register(format!("{name}.gamma"), Tensor::full(vec![d], 1.0))?,
        store.register(format!("{name}.beta"), Tensor::zeros(vec![d]))?,
    ))
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(…)`.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("table shape")
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by {} heads",
                cfg.d_model, cfg.heads
            )));
        }
        let d = cfg.d_model;
        let input = DenseLayer::new(store, &format!("{name}.input"), in_dim, d, rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = format!("{name}.layer{l}");
            blocks.push(Block {
                q: DenseLayer::new(store, &format!("{n}.attn.q"), d, d, rng)?,
                // a key bias shifts every logit of a query equally, which softmax ignores
                k: DenseLayer::without_bias(store, &format!("{n}.attn.k"), d, d, rng)?,
                v: DenseLayer::new(store, &format!("{n}.attn.v"), d, d, rng)?,
                o: DenseLayer::new(store, &format!("{n}.attn.o"), d, d, rng)?,
                ff1: DenseLayer::new(store, &format!("{n}.ff1"), d, cfg.d_ff, rng)?,
                ff2: DenseLayer::new(store, &format!("{n}.ff2"), cfg.d_ff, d, rng)?,
                ln1: layer_norm_params(store, &format!("{n}.ln1"), d)?,
                ln2: layer_norm_params(store, &format!("{n}.ln2"), d)?,
            });
        }
        Ok(TransformerEncoder {
            input,
            blocks,
            positions: sinusoidal_table(cfg.max_len, d),
            cfg,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn in_dim(&self) -> usize {
        self.input.in_dim
    }

    /// `x` is `[batch·seq_len × in_dim]`; returns `[batch·seq_len × d_model]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, pad: &Padding) -> Result<Var> {
        let tx = g.value(x);
        if tx.rank() != 2 || tx.cols() != self.input.in_dim || tx.rows() != pad.rows() {
            return Err(Error::Shape {
                op: "encoder_forward",
                lhs: tx.shape().to_vec(),
                rhs: vec![pad.rows(), self.input.in_dim],
            });
        }
        if pad.seq_len > self.cfg.max_len {
            return Err(Error::invalid(format!(
                "sequence of {} frames exceeds positional table of {}",
                pad.seq_len, self.cfg.max_len
            )));
        }
        let d = self.cfg.d_model;
        let mut pos = Vec::with_capacity(pad.rows() * d);
        for _ in 0..pad.batch {
            pos.extend_from_slice(&self.positions.data()[..pad.seq_len * d]);
        }
        let pos = g.constant(Tensor::new(vec![pad.rows(), d], pos)?);
        let h = self.input.forward(g, p, x)?;
        let mut h = g.add(h, pos)?;

        let layout = AttnLayout {
            batch: pad.batch,
            seq_len: pad.seq_len,
            heads: self.cfg.heads,
        };
        for b in &self.blocks {
            let q = b.q.forward(g, p, h)?;
            let k = b.k.forward(g, p, h)?;
            let v = b.v.forward(g, p, h)?;
            let a = g.attention(q, k, v, layout, &pad.valid)?;
            let a = b.o.forward(g, p, a)?;
            let r = g.add(h, a)?;
            h = g.layer_norm(r, p.var(b.ln1.0), p.var(b.ln1.1), LN_EPS)?;

            let f = b.ff1.forward(g, p, h)?;
            let f = g.relu(f);
            let f = b.ff2.forward(g, p, f)?;
            let r = g.add(h, f)?;
            h = g.layer_norm(r, p.var(b.ln2.0), p.var(b.ln2.1), LN_EPS)?;
        }
        Ok(h)
    }
}
