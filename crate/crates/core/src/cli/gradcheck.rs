//! Finite-difference verification of every differentiable operation, the
//! network blocks and the assembled pipeline.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, AttnLayout, CustomBackward, Graph, Tensor, Var};
use crate::data::{EMA_DIM, MFCC_DIM};
use crate::error::{Error, Result};
use crate::nn::{
    min_max_normalize_with, ste_replace, Bound, DenseLayer, EncoderConfig, MinMaxMode, Padding,
    ParamStore, TransformerEncoder,
};
use crate::pipeline::{LossWeights, Pipeline, PipelineConfig};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckSize {
    /// Extents ≤ 5; the pipeline uses one layer of width 8 on 4 frames.
    Micro,
    /// Larger extents, two utterances with padding.
    Small,
}

impl FromStr for CheckSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(CheckSize::Micro),
            "small" => Ok(CheckSize::Small),
            o => Err(Error::invalid(format!(
                "size `{o}` (expected micro or small)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance || (self.tolerance == 0.0 && self.max_rel_error == 0.0)
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {:>10.3e}  tol {:<7.0e} {:>6} coords  {}",
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.coordinates,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Identity forward whose backward is off by 1%; the test hook for showing
/// that a wrong gradient is caught.
struct Skewed;

impl CustomBackward for Skewed {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * 1.01).collect())]
    }
}

struct Dims {
    rows: usize,
    cols: usize,
    inner: usize,
    attn_batch: usize,
    attn_len: usize,
    encoder: EncoderConfig,
    pipeline_lens: Vec<usize>,
}

impl Dims {
    fn new(size: CheckSize) -> Self {
        match size {
            CheckSize::Micro => Dims {
                rows: 4,
                cols: 5,
                inner: 3,
                attn_batch: 2,
                attn_len: 3,
                encoder: EncoderConfig {
                    layers: 1,
                    d_model: 8,
                    heads: 2,
                    d_ff: 8,
                    max_len: 16,
                },
                pipeline_lens: vec![4],
            },
            CheckSize::Small => Dims {
                rows: 8,
                cols: 7,
                inner: 6,
                attn_batch: 2,
                attn_len: 5,
                encoder: EncoderConfig {
                    layers: 2,
                    d_model: 12,
                    heads: 3,
                    d_ff: 16,
                    max_len: 16,
                },
                pipeline_lens: vec![5, 3],
            },
        }
    }
}

type Loss<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a>;

struct Case<'a> {
    name: &'static str,
    tolerance: f64,
    params: Vec<Tensor>,
    f: Loss<'a>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.signum() * (0.1 + v.abs()));
    t
}

/// Reduces `out` to `Σ out ⊙ r` so every output element carries a distinct
/// upstream gradient; `skew` routes through the corrupted backward.
fn project(g: &mut Graph, out: Var, r: &Tensor, skew: bool) -> Result<Var> {
    let out = if skew {
        let v = g.value(out).clone();
        g.custom(&[out], v, Box::new(Skewed))
    } else {
        out
    };
    let r = g.constant(r.clone());
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

fn cases<'a>(d: &'a Dims, rng: &mut ChaCha8Rng, skew: &'a str) -> Result<Vec<Case<'a>>> {
    let (n, c, k) = (d.rows, d.cols, d.inner);
    let mut out: Vec<Case> = Vec::new();
    let mut push = |name: &'static str, tolerance, params: Vec<Tensor>, r: Tensor, f: Loss<'a>| {
        let s = skew == name;
        out.push(Case {
            name,
            tolerance,
            params,
            f: Box::new(move |g, v| {
                let y = f(g, v)?;
                project(g, y, &r, s)
            }),
        });
    };
    let op = OP_TOLERANCE;

    push(
        "matmul",
        op,
        vec![uniform(rng, &[n, c]), uniform(rng, &[c, k])],
        uniform(rng, &[n, k]),
        Box::new(|g, v| g.matmul(v[0], v[1])),
    );
    push(
        "transpose",
        op,
        vec![uniform(rng, &[n, c])],
        uniform(rng, &[c, n]),
        Box::new(|g, v| g.transpose(v[0])),
    );
    let bin = [[n, c].to_vec(), vec![c], vec![1]];
    for (i, shape) in bin.iter().enumerate() {
        let names = [
            ["add", "add_row", "add_scalar"],
            ["sub", "sub_row", "sub_scalar"],
            ["mul", "mul_row", "mul_scalar"],
        ];
        for (j, row) in names.iter().enumerate() {
            let params = vec![uniform(rng, &[n, c]), uniform(rng, shape)];
            let r = uniform(rng, &[n, c]);
            let f: Loss = match j {
                0 => Box::new(|g, v| g.add(v[0], v[1])),
                1 => Box::new(|g, v| g.sub(v[0], v[1])),
                _ => Box::new(|g, v| g.mul(v[0], v[1])),
            };
            push(row[i], op, params, r, f);
        }
    }
    push(
        "scale",
        op,
        vec![uniform(rng, &[n, c])],
        uniform(rng, &[n, c]),
        Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
    );
    push(
        "relu",
        op,
        vec![away_from_zero(rng, &[n, c])],
        uniform(rng, &[n, c]),
        Box::new(|g, v| Ok(g.relu(v[0]))),
    );
    push(
        "sum",
        op,
        vec![uniform(rng, &[n, c])],
        uniform(rng, &[]),
        Box::new(|g, v| Ok(g.sum(v[0]))),
    );
    push(
        "softmax_rows",
        op,
        vec![uniform(rng, &[n, c])],
        uniform(rng, &[n, c]),
        Box::new(|g, v| g.softmax(v[0], 1)),
    );
    push(
        "softmax_cols",
        op,
        vec![uniform(rng, &[n, c])],
        uniform(rng, &[n, c]),
        Box::new(|g, v| g.softmax(v[0], 0)),
    );
    push(
        "layer_norm",
        op,
        vec![
            uniform(rng, &[n, c]),
            uniform(rng, &[c]),
            uniform(rng, &[c]),
        ],
        uniform(rng, &[n, c]),
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
    );
    push(
        "dropout",
        op,
        vec![uniform(rng, &[n, c])],
        uniform(rng, &[n, c]),
        Box::new(|g, v| {
            // same mask on every evaluation
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            g.dropout(v[0], 0.3, true, &mut rng)
        }),
    );

    let mut row_mask = vec![1.0; n];
    row_mask[n - 1] = 0.0;
    let mask = Tensor::vector(row_mask);
    let m1 = mask.clone();
    push(
        "mse_loss",
        op,
        vec![uniform(rng, &[n, c]), uniform(rng, &[n, c])],
        uniform(rng, &[]),
        Box::new(move |g, v| g.mse_loss(v[0], v[1], &m1)),
    );
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let m2 = mask.clone();
    push(
        "cross_entropy_loss",
        op,
        vec![uniform(rng, &[n, c])],
        uniform(rng, &[]),
        Box::new(move |g, v| g.cross_entropy_loss(v[0], &labels, &m2)),
    );

    let (b, t) = (d.attn_batch, d.attn_len);
    let width = 4;
    let layout = AttnLayout {
        batch: b,
        seq_len: t,
        heads: 2,
    };
    let key_mask: Vec<bool> = (0..b * t).map(|i| i % t != t - 1 || i < t).collect();
    push(
        "attention",
        op,
        (0..3).map(|_| uniform(rng, &[b * t, width])).collect(),
        uniform(rng, &[b * t, width]),
        Box::new(move |g, v| g.attention(v[0], v[1], v[2], layout, &key_mask)),
    );

    let pad = Padding::new(2, 3, vec![true, true, true, true, true, false])?;
    for (name, mode) in [
        ("min_max_per_frame", MinMaxMode::PerFrame),
        ("min_max_per_channel", MinMaxMode::PerChannel),
    ] {
        let pad = pad.clone();
        push(
            name,
            op,
            vec![uniform(rng, &[6, EMA_DIM])],
            uniform(rng, &[6, EMA_DIM]),
            Box::new(move |g, v| Ok(min_max_normalize_with(g, v[0], mode, &pad)?.weights)),
        );
    }

    let mut store = ParamStore::new();
    let dense = DenseLayer::new(&mut store, "dense", c, k, rng)?;
    let dense_params = store.values().to_vec();
    let x = uniform(rng, &[n, c]);
    push(
        "dense",
        op,
        [vec![x], dense_params].concat(),
        uniform(rng, &[n, k]),
        Box::new(move |g, v| dense.forward(g, &Bound::from_vars(v[1..].to_vec()), v[0])),
    );

    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "enc", c, d.encoder, rng)?;
    let enc_pad = Padding::new(2, 3, vec![true, true, true, true, true, false])?;
    let x = uniform(rng, &[6, c]);
    let r = uniform(rng, &[6, d.encoder.d_model]);
    push(
        "encoder",
        COMPOSITE_TOLERANCE,
        store.values().to_vec(),
        r,
        Box::new(move |g, v| {
            let x = g.constant(x.clone());
            enc.forward(g, &Bound::from_vars(v.to_vec()), x, &enc_pad)
        }),
    );
    Ok(out)
}

fn pipeline_case(d: &Dims, rng: &mut ChaCha8Rng, skew: bool) -> Result<CheckResult> {
    let mut cfg = PipelineConfig::new(3);
    cfg.encoder = d.encoder;
    cfg.encoder.d_ff = 2 * d.encoder.d_model;
    cfg.dropout_p = 0.0;
    let pl = Pipeline::new(cfg)?;
    let t = *d.pipeline_lens.iter().max().unwrap();
    let b = d.pipeline_lens.len();
    let valid: Vec<bool> = d
        .pipeline_lens
        .iter()
        .flat_map(|&l| (0..t).map(move |i| i < l))
        .collect();
    let pad = Padding::new(b, t, valid)?;
    let mfcc = uniform(rng, &[b * t, MFCC_DIM]);
    let ema = uniform(rng, &[b * t, EMA_DIM]);
    let labels: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..3)).collect();
    let mask = pad.mask_tensor();
    let r = grad_check(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            // the ground-truth substitution has a surrogate gradient by design,
            // so the finite-difference check runs the prediction path
            let mut out = pl.forward(g, &p, &mfcc, None, &pad, false, &mut rng)?;
            if skew {
                let v = g.value(out.logits).clone();
                out.logits = g.custom(&[out.logits], v, Box::new(Skewed));
            }
            Ok(pl
                .loss(g, &out, &ema, &labels, &mask, LossWeights::default())?
                .total)
        },
        pl.params.values(),
        EPS,
    )?;
    Ok(CheckResult {
        name: "pipeline".into(),
        max_rel_error: r.max_rel_error,
        tolerance: COMPOSITE_TOLERANCE,
        coordinates: r.coordinates,
    })
}

/// The straight-through rule is checked for exactness rather than against
/// finite differences: the backward must return the upstream gradient as is.
fn ste_case(rng: &mut ChaCha8Rng, skew: bool) -> Result<CheckResult> {
    let mut g = Graph::new();
    let pred = g.param(uniform(rng, &[4, EMA_DIM]));
    let gt_t = uniform(rng, &[4, EMA_DIM]);
    let gt = g.constant(gt_t.clone());
    let s = ste_replace(&mut g, pred, gt)?;
    let r = uniform(rng, &[4, EMA_DIM]);
    let loss = project(&mut g, s, &r, skew)?;
    g.backward(loss)?;
    let grad = g.grad(pred).unwrap_or(&[]).to_vec();
    let mut err = if g.value(s) == &gt_t {
        0.0
    } else {
        f64::INFINITY
    };
    for (a, e) in grad.iter().zip(r.data()) {
        err = f64::max(err, (a - e).abs());
    }
    Ok(CheckResult {
        name: "ste".into(),
        max_rel_error: err,
        tolerance: 0.0,
        coordinates: grad.len(),
    })
}

/// Runs every check. `corrupt` names one check whose backward is skewed.
pub fn run_suite(size: CheckSize, corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    let d = Dims::new(size);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let skew = corrupt.unwrap_or("");
    let mut results = Vec::new();
    for case in cases(&d, &mut rng, skew)? {
        let r = grad_check(&case.f, &case.params, EPS)?;
        results.push(CheckResult {
            name: case.name.into(),
            max_rel_error: r.max_rel_error,
            tolerance: case.tolerance,
            coordinates: r.coordinates,
        });
    }
    results.push(ste_case(&mut rng, skew == "ste")?);
    results.push(pipeline_case(&d, &mut rng, skew == "pipeline")?);
    if !skew.is_empty() && !results.iter().any(|r| r.name == skew) {
        return Err(Error::invalid(format!("no check named `{skew}`")));
    }
    Ok(results)
}
