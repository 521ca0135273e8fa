use super::encoder::Padding;
use crate::autodiff::{CustomBackward, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ranges at or below this are treated as constant.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Axis along which min-max normalization runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MinMaxMode {
    /// Each frame's channels are mapped to `[0, 1]`.
    #[default]
    PerFrame,
    /// Each channel is mapped to `[0, 1]` over the real frames of its utterance.
    PerChannel,
}

impl std::str::FromStr for MinMaxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_frame" => Ok(MinMaxMode::PerFrame),
            "per_channel" => Ok(MinMaxMode::PerChannel),
            other => Err(Error::Config(format!(
                "min-max mode `{other}` (expected per_frame or per_channel)"
            ))),
        }
    }
}

impl std::fmt::Display for MinMaxMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MinMaxMode::PerFrame => "per_frame",
            MinMaxMode::PerChannel => "per_channel",
        })
    }
}

/// Articulator weights in `[0, 1]` plus the frames where the fallback fired.
#[derive(Clone, Debug)]
pub struct NormalizedWeights {
    pub weights: Var,
    /// One flag per row; `true` when the row (or, per channel, some column of
    /// its utterance) was constant and set to 0.5.
    pub degenerate: Vec<bool>,
}

struct Group {
    indices: Vec<usize>,
    argmin: usize,
    argmax: usize,
    range: f64,
    degenerate: bool,
}

struct MinMaxRule {
    groups: Vec<Group>,
}

impl CustomBackward for MinMaxRule {
    fn backward(&self, _: &[&Tensor], output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let w = output.data();
        let mut grad = vec![0.0; w.len()];
        for grp in self.groups.iter().filter(|grp| !grp.degenerate) {
            // w_c = (r_c − m) / (M − m)
            let inv = 1.0 / grp.range;
            let mut to_min = 0.0;
            let mut to_max = 0.0;
            for &i in &grp.indices {
                grad[i] += g[i] * inv;
                to_min += g[i] * (w[i] - 1.0) * inv;
                to_max -= g[i] * w[i] * inv;
            }
            grad[grp.argmin] += to_min;
            grad[grp.argmax] += to_max;
        }
        vec![Some(grad)]
    }
}

/// Normalizes each index set independently; returns the output and one
/// degenerate flag per set.
fn normalize_groups(g: &mut Graph, raw: Var, index_sets: Vec<Vec<usize>>) -> (Var, Vec<bool>) {
    let r = g.value(raw).data();
    let mut out = vec![0.5; r.len()];
    let mut groups = Vec::with_capacity(index_sets.len());
    for indices in index_sets {
        let Some(&first) = indices.first() else {
            groups.push(Group {
                indices,
                argmin: 0,
                argmax: 0,
                range: 0.0,
                degenerate: true,
            });
            continue;
        };
        let (mut argmin, mut argmax) = (first, first);
        for &i in &indices[1..] {
            // strict comparisons keep the lowest channel on ties
            if r[i] < r[argmin] {
                argmin = i;
            }
            if r[i] > r[argmax] {
                argmax = i;
            }
        }
        let range = r[argmax] - r[argmin];
        let degenerate = range <= DEGENERATE_RANGE;
        if !degenerate {
            for &i in &indices {
                out[i] = (r[i] - r[argmin]) / range;
            }
            // exact endpoints regardless of rounding
            out[argmin] = 0.0;
            out[argmax] = 1.0;
        }
        groups.push(Group {
            indices,
            argmin,
            argmax,
            range,
            degenerate,
        });
    }
    let shape = g.value(raw).shape().to_vec();
    let out = Tensor::new(shape, out).expect("same shape");
    let flags = groups.iter().map(|grp| grp.degenerate).collect();
    (
        g.custom(&[raw], out, Box::new(MinMaxRule { groups })),
        flags,
    )
}

/// Per-frame min-max normalization across the channels (last axis) of `raw`.
pub fn min_max_normalize(g: &mut Graph, raw: Var) -> NormalizedWeights {
    let t = g.value(raw);
    let (rows, cols) = (t.rows(), t.cols());
    let sets = (0..rows)
        .map(|r| (r * cols..(r + 1) * cols).collect())
        .collect();
    let (weights, degenerate) = normalize_groups(g, raw, sets);
    NormalizedWeights {
        weights,
        degenerate,
    }
}

/// Min-max normalization in either mode. Padded rows are left at 0.5 and
/// receive no gradient in per-channel mode.
pub fn min_max_normalize_with(
    g: &mut Graph,
    raw: Var,
    mode: MinMaxMode,
    pad: &Padding,
) -> Result<NormalizedWeights> {
    let t = g.value(raw);
    if t.rank() != 2 || t.rows() != pad.rows() {
        return Err(Error::Shape {
            op: "min_max_normalize",
            lhs: t.shape().to_vec(),
            rhs: vec![pad.rows()],
        });
    }
    match mode {
        MinMaxMode::PerFrame => Ok(min_max_normalize(g, raw)),
        MinMaxMode::PerChannel => {
            let cols = t.cols();
            let mut sets = Vec::with_capacity(pad.batch * cols);
            for b in 0..pad.batch {
                let rows: Vec<usize> = (b * pad.seq_len..(b + 1) * pad.seq_len)
                    .filter(|&r| pad.valid[r])
                    .collect();
                for c in 0..cols {
                    sets.push(rows.iter().map(|r| r * cols + c).collect());
                }
            }
            let (weights, flags) = normalize_groups(g, raw, sets);
            let mut degenerate = vec![false; pad.rows()];
            for (gi, _) in flags.iter().enumerate().filter(|(_, &d)| d) {
                let b = gi / cols;
                for r in b * pad.seq_len..(b + 1) * pad.seq_len {
                    degenerate[r] = pad.valid[r];
                }
            }
            Ok(NormalizedWeights {
                weights,
                degenerate,
            })
        }
    }
}
