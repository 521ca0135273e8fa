//! Synthetic corpus with planted critical articulators.
//!
//! For every phoneme a small set of channels is critical: while that phoneme
//! is active they glide toward fixed targets. All other channels wander.
//! Acoustics are a fixed linear projection of the critical channels only, so
//! the channels that matter for each phoneme are known exactly.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::channel::{format_channels, ArticulatorChannel, EMA_DIM, MFCC_DIM};
use super::utterance::{Corpus, Utterance};
use crate::autodiff::Tensor;
use crate::config::KvConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedPhoneme {
    pub symbol: String,
    /// Critical channels and their target positions in `[-1, 1]`.
    pub critical: Vec<(ArticulatorChannel, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub phonemes: Vec<PlantedPhoneme>,
    /// Smoothing constant for critical channels, in `(0, 1)`.
    pub alpha: f64,
    /// `[13 × 12]` acoustic projection.
    pub projection: Tensor,
    /// Acoustic noise scale.
    pub sigma_a: f64,
    /// Step scale of the non-critical random walk.
    pub sigma_w: f64,
    /// Per-frame jitter of critical channels.
    pub sigma_c: f64,
    /// Non-critical channels reflect off `±wander_bound`.
    pub wander_bound: f64,
    pub seg_min: usize,
    pub seg_max: usize,
    pub seed: u64,
    pub subject: String,
}

fn default_planting() -> Vec<PlantedPhoneme> {
    use ArticulatorChannel::*;
    let p = |s: &str, c: &[(ArticulatorChannel, f64)]| PlantedPhoneme {
        symbol: s.to_string(),
        critical: c.to_vec(),
    };
    vec![
        p("t", &[(TtY, 0.9), (TtX, 0.6)]),
        p("p", &[(UlY, -0.9), (LlY, 0.7)]),
        p("m", &[(LlY, 0.9), (JawY, -0.6)]),
        p("k", &[(TdY, 0.9), (TbY, 0.6)]),
        p("g", &[(TdX, 0.9), (TdY, -0.6)]),
        p("s", &[(TtX, -0.9), (JawY, 0.6)]),
        p("f", &[(LlX, 0.9), (UlX, -0.6)]),
        p("l", &[(TbX, 0.9), (TtY, -0.6)]),
    ]
}

/// Dense Gaussian projection drawn from stream 0 of `seed`.
pub fn random_projection(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..MFCC_DIM * EMA_DIM)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(vec![MFCC_DIM, EMA_DIM], data).expect("projection shape")
}

impl SyntheticSpec {
    /// Eight phonemes with two planted channels each, segments of 5–15
    /// frames, `α = 0.7`, `σ_a = 0.05`, `σ_w = 0.15`.
    pub fn default_with_seed(seed: u64) -> Self {
        SyntheticSpec {
            phonemes: default_planting(),
            alpha: 0.7,
            projection: random_projection(seed),
            sigma_a: 0.05,
            sigma_w: 0.15,
            sigma_c: 0.02,
            wander_bound: 1.5,
            seg_min: 5,
            seg_max: 15,
            seed,
            subject: "synth".to_string(),
        }
    }

    pub fn symbols(&self) -> Vec<String> {
        self.phonemes.iter().map(|p| p.symbol.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("key `{key}`: {why}")));
        if self.phonemes.len() < 2 {
            return bad("phonemes", "need at least 2 phonemes".into());
        }
        for (i, p) in self.phonemes.iter().enumerate() {
            let key = format!("critical.{}", p.symbol);
            if p.symbol.is_empty() || p.symbol.contains([',', ' ']) {
                return bad("phonemes", format!("invalid symbol `{}`", p.symbol));
            }
            if self.phonemes[..i].iter().any(|q| q.symbol == p.symbol) {
                return bad("phonemes", format!("duplicate symbol `{}`", p.symbol));
            }
            if p.critical.is_empty() {
                return bad(
                    &key,
                    "every phoneme needs at least one critical channel".into(),
                );
            }
            for (j, (c, target)) in p.critical.iter().enumerate() {
                if p.critical[..j].iter().any(|(d, _)| d == c) {
                    return bad(&key, format!("channel {c} listed twice"));
                }
                if !(-1.0..=1.0).contains(target) {
                    return bad(&key, format!("target {target} outside [-1, 1]"));
                }
                let col_norm: f64 = (0..MFCC_DIM)
                    .map(|r| self.projection.at(r, c.index()).powi(2))
                    .sum();
                if col_norm == 0.0 {
                    return bad(&key, format!("projection column for {c} is zero"));
                }
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", format!("{} not in (0, 1)", self.alpha));
        }
        for (k, v) in [
            ("sigma_a", self.sigma_a),
            ("sigma_w", self.sigma_w),
            ("sigma_c", self.sigma_c),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, format!("{v} must be a finite value ≥ 0"));
            }
        }
        if !(self.wander_bound > 0.0) {
            return bad("wander_bound", "must be > 0".into());
        }
        if self.seg_min == 0 || self.seg_min > self.seg_max {
            return bad(
                "seg_min",
                format!("segment range {}..={} invalid", self.seg_min, self.seg_max),
            );
        }
        if self.projection.shape() != [MFCC_DIM, EMA_DIM] {
            return bad("projection", format!("shape {:?}", self.projection.shape()));
        }
        Ok(())
    }

    /// Reads spec keys from `kv`, starting from the defaults.
    ///
    /// Keys: `seed`, `phonemes` (comma list), `critical.<symbol>`
    /// (`CHANNEL:target` pairs, space-separated), `alpha`, `sigma_a`,
    /// `sigma_w`, `sigma_c`, `wander_bound`, `seg_min`, `seg_max`, `subject`.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let seed = kv.take_or("seed", 0u64)?;
        let mut spec = Self::default_with_seed(seed);
        let planted = kv.take_prefixed("critical.");
        if let Some(list) = kv.take_raw("phonemes") {
            let symbols: Vec<&str> = list.split(',').map(str::trim).collect();
            spec.phonemes = symbols
                .iter()
                .map(|s| PlantedPhoneme {
                    symbol: s.to_string(),
                    critical: Vec::new(),
                })
                .collect();
        }
        for (sym, value) in planted {
            let key = format!("critical.{sym}");
            let entry = spec
                .phonemes
                .iter_mut()
                .find(|p| p.symbol == sym)
                .ok_or_else(|| Error::Config(format!("key `{key}`: phoneme not in inventory")))?;
            entry.critical =
                parse_planting(&value).map_err(|e| Error::Config(format!("key `{key}`: {e}")))?;
        }
        spec.alpha = kv.take_or("alpha", spec.alpha)?;
        spec.sigma_a = kv.take_or("sigma_a", spec.sigma_a)?;
        spec.sigma_w = kv.take_or("sigma_w", spec.sigma_w)?;
        spec.sigma_c = kv.take_or("sigma_c", spec.sigma_c)?;
        spec.wander_bound = kv.take_or("wander_bound", spec.wander_bound)?;
        spec.seg_min = kv.take_or("seg_min", spec.seg_min)?;
        spec.seg_max = kv.take_or("seg_max", spec.seg_max)?;
        spec.subject = kv.take_or("subject", spec.subject.clone())?;
        spec.validate()?;
        Ok(spec)
    }

    /// Serializes the spec in the `from_kv` syntax (projection excluded; it
    /// is a function of the seed).
    pub fn to_kv_string(&self) -> String {
        let mut pairs = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("phonemes".to_string(), self.symbols().join(",")),
        ];
        for p in &self.phonemes {
            let v = p
                .critical
                .iter()
                .map(|(c, t)| format!("{c}:{t}"))
                .collect::<Vec<_>>()
                .join(" ");
            pairs.push((format!("critical.{}", p.symbol), v));
        }
        for (k, v) in [
            ("alpha", self.alpha),
            ("sigma_a", self.sigma_a),
            ("sigma_w", self.sigma_w),
            ("sigma_c", self.sigma_c),
            ("wander_bound", self.wander_bound),
        ] {
            pairs.push((k.to_string(), v.to_string()));
        }
        pairs.push(("seg_min".into(), self.seg_min.to_string()));
        pairs.push(("seg_max".into(), self.seg_max.to_string()));
        pairs.push(("subject".into(), self.subject.clone()));
        crate::config::render(pairs)
    }
}

fn parse_planting(s: &str) -> Result<Vec<(ArticulatorChannel, f64)>> {
    s.split_whitespace()
        .map(|item| {
            let (c, t) = item
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("`{item}` is not CHANNEL:target")))?;
            let t: f64 = t
                .parse()
                .map_err(|e| Error::invalid(format!("target `{t}`: {e}")))?;
            Ok((c.parse()?, t))
        })
        .collect()
}

/// Planted critical channels of `phoneme`, most salient (largest |target|)
/// first; equal salience keeps the spec's listing order.
pub fn planted_oracle(spec: &SyntheticSpec, phoneme: &str) -> Result<Vec<ArticulatorChannel>> {
    let p = spec
        .phonemes
        .iter()
        .find(|p| p.symbol == phoneme)
        .ok_or_else(|| Error::UnknownPhoneme(phoneme.to_string()))?;
    let mut crit = p.critical.clone();
    crit.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    Ok(crit.into_iter().map(|(c, _)| c).collect())
}

/// One line per phoneme: `symbol,CH1 CH2`.
pub fn format_oracle(spec: &SyntheticSpec) -> Result<String> {
    let mut s = String::from("phoneme,planted\n");
    for p in &spec.phonemes {
        s.push_str(&format!(
            "{},{}\n",
            p.symbol,
            format_channels(&planted_oracle(spec, &p.symbol)?)
        ));
    }
    Ok(s)
}

pub fn parse_oracle(text: &str) -> Result<Vec<(String, Vec<ArticulatorChannel>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (sym, chans) = line.split_once(',').ok_or_else(|| {
            Error::invalid(format!("oracle line {}: expected `symbol,channels`", i + 1))
        })?;
        let chans = chans
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        out.push((sym.to_string(), chans));
    }
    Ok(out)
}

fn reflect(mut x: f64, bound: f64) -> f64 {
    // fold back into [-bound, bound]
    for _ in 0..8 {
        if x > bound {
            x = 2.0 * bound - x;
        } else if x < -bound {
            x = -2.0 * bound - x;
        } else {
            return x;
        }
    }
    x.clamp(-bound, bound)
}

fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates one utterance from its global index; a pure function of
/// `(spec, index, phones_per_utt)`.
pub fn generate_utterance(spec: &SyntheticSpec, index: usize, phones_per_utt: usize) -> Utterance {
    let mut rng = utterance_rng(spec.seed, index);
    let k = spec.phonemes.len();
    let mut seq = Vec::with_capacity(phones_per_utt);
    for i in 0..phones_per_utt {
        let ph = if i == 0 {
            rng.random_range(0..k)
        } else {
            // no immediate repeats, so phones and label runs coincide
            let prev = seq[i - 1];
            let j = rng.random_range(0..k - 1);
            if j >= prev {
                j + 1
            } else {
                j
            }
        };
        seq.push(ph);
    }
    let lengths: Vec<usize> = seq
        .iter()
        .map(|_| rng.random_range(spec.seg_min..=spec.seg_max))
        .collect();
    let frames: usize = lengths.iter().sum();

    let mut x: [f64; EMA_DIM] =
        std::array::from_fn(|_| rng.random_range(-0.5..0.5) * spec.wander_bound);
    let mut mfcc = Vec::with_capacity(frames * MFCC_DIM);
    let mut ema = Vec::with_capacity(frames * EMA_DIM);
    let mut labels = Vec::with_capacity(frames);
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    for (&ph, &len) in seq.iter().zip(&lengths) {
        let mut target = [None; EMA_DIM];
        for &(c, t) in &spec.phonemes[ph].critical {
            target[c.index()] = Some(t);
        }
        for _ in 0..len {
            for c in 0..EMA_DIM {
                x[c] = match target[c] {
                    Some(t) => spec.alpha * x[c] + (1.0 - spec.alpha) * t + spec.sigma_c * normal(),
                    None => reflect(x[c] + spec.sigma_w * normal(), spec.wander_bound),
                };
            }
            for r in 0..MFCC_DIM {
                let mut v = 0.0;
                for c in 0..EMA_DIM {
                    if target[c].is_some() {
                        v += spec.projection.at(r, c) * x[c];
                    }
                }
                mfcc.push(v + spec.sigma_a * normal());
            }
            ema.extend_from_slice(&x);
            labels.push(ph);
        }
    }
    Utterance {
        id: format!("utt{index:05}"),
        subject: spec.subject.clone(),
        mfcc: Tensor::new(vec![frames, MFCC_DIM], mfcc).expect("mfcc shape"),
        ema: Tensor::new(vec![frames, EMA_DIM], ema).expect("ema shape"),
        labels,
        phoneme_table: spec.symbols(),
    }
}

/// Utterances with global indices `range`. Disjoint ranges give disjoint
/// train/test splits drawn from the same speaker.
pub fn generate_range(
    spec: &SyntheticSpec,
    range: Range<usize>,
    phones_per_utt: usize,
) -> Result<Corpus> {
    if range.is_empty() || phones_per_utt == 0 {
        return Err(Error::invalid(
            "utterance and phone counts must be positive",
        ));
    }
    spec.validate()?;
    Corpus::new(
        range
            .map(|i| generate_utterance(spec, i, phones_per_utt))
            .collect(),
    )
}

pub fn generate_corpus(
    spec: &SyntheticSpec,
    n_utterances: usize,
    phones_per_utt: usize,
) -> Result<Corpus> {
    generate_range(spec, 0..n_utterances, phones_per_utt)
}
