//! Which articulators does the trained weight predictor favour for each
//! phoneme? Weights are gathered per label segment, pooled per phoneme and
//! ranked.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::data::{make_batches, ArticulatorChannel, BatchOptions, Corpus, Utterance, EMA_DIM};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;

pub const SUMMARY_NAME: &str = "summary.csv";
pub const SCORES_NAME: &str = "scores.csv";

/// A maximal run of one label, as a half-open frame range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Span {
    pub label: usize,
    pub frames: Range<usize>,
}

pub fn label_runs(labels: &[usize]) -> Vec<Span> {
    let mut out: Vec<Span> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == l => s.frames.end = t + 1,
            _ => out.push(Span {
                label: l,
                frames: t..t + 1,
            }),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentWeights {
    pub phoneme: String,
    pub utterance: String,
    pub frames: Range<usize>,
    /// `[len × 12]`
    pub weights: Tensor,
}

/// Cuts an utterance's `[frames × 12]` weight matrix at label boundaries.
pub fn extract_segments(utt: &Utterance, weights: &Tensor) -> Result<Vec<SegmentWeights>> {
    if weights.shape() != [utt.frames(), EMA_DIM] {
        return Err(Error::Shape {
            op: "extract_segments",
            lhs: weights.shape().to_vec(),
            rhs: vec![utt.frames(), EMA_DIM],
        });
    }
    label_runs(&utt.labels)
        .into_iter()
        .map(|s| {
            let rows = weights.data()[s.frames.start * EMA_DIM..s.frames.end * EMA_DIM].to_vec();
            Ok(SegmentWeights {
                phoneme: utt.phoneme_table[s.label].clone(),
                utterance: utt.id.clone(),
                weights: Tensor::new(vec![s.frames.len(), EMA_DIM], rows)?,
                frames: s.frames,
            })
        })
        .collect()
}

/// Linear resampling of a `[n × c]` trajectory to `len` rows; endpoints are
/// kept and a single row is repeated.
pub fn resample(traj: &Tensor, len: usize) -> Result<Tensor> {
    if len < 2 {
        return Err(Error::invalid(format!(
            "resample length must be ≥ 2, got {len}"
        )));
    }
    let (n, c) = (traj.rows(), traj.cols());
    if n == 0 {
        return Err(Error::invalid("cannot resample an empty trajectory"));
    }
    let mut out = Vec::with_capacity(len * c);
    for i in 0..len {
        let pos = i as f64 * (n - 1) as f64 / (len - 1) as f64;
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let f = pos - lo as f64;
        for j in 0..c {
            let (a, b) = (traj.at(lo, j), traj.at(hi, j));
            out.push(if f == 0.0 { a } else { a + f * (b - a) });
        }
    }
    Tensor::new(vec![len, c], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeSummary {
    pub symbol: String,
    /// Mean weight per channel over every frame carrying this label.
    pub means: [f64; EMA_DIM],
    /// `[R × 12]` average of the resampled segment trajectories.
    pub trajectory: Tensor,
    pub segments: usize,
    pub frames: usize,
}

impl PhonemeSummary {
    pub fn top_k(&self, k: usize) -> Result<Vec<ArticulatorChannel>> {
        top_k_channels(&self.means, k)
    }

    /// `/m/ : LL_y Jaw_y UL_x`
    pub fn top_label(&self, k: usize) -> Result<String> {
        Ok(format!(
            "/{}/ : {}",
            self.symbol,
            crate::data::format_channels(&self.top_k(k)?)
        ))
    }
}

/// Channels by descending value, ties in canonical order.
pub fn top_k_channels(means: &[f64; EMA_DIM], k: usize) -> Result<Vec<ArticulatorChannel>> {
    if !(1..=EMA_DIM).contains(&k) {
        return Err(Error::invalid(format!("k must be in 1..=12, got {k}")));
    }
    let mut idx: Vec<usize> = (0..EMA_DIM).collect();
    idx.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    Ok(idx[..k]
        .iter()
        .map(|&i| ArticulatorChannel::ALL[i])
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticalityReport {
    /// Reported phonemes in phoneme-table order.
    pub phonemes: Vec<PhonemeSummary>,
    /// Table entries with no frames in the corpus.
    pub skipped: Vec<String>,
    pub resample_len: usize,
}

impl CriticalityReport {
    pub fn get(&self, symbol: &str) -> Result<&PhonemeSummary> {
        self.phonemes
            .iter()
            .find(|p| p.symbol == symbol)
            .ok_or_else(|| Error::UnknownPhoneme(symbol.to_string()))
    }

    pub fn top_k(&self, symbol: &str, k: usize) -> Result<Vec<ArticulatorChannel>> {
        self.get(symbol)?.top_k(k)
    }
}

impl CriticalityReport {
    /// Population variance across phonemes of each channel's mean weight.
    pub fn channel_variance(&self) -> [f64; EMA_DIM] {
        let n = self.phonemes.len() as f64;
        let mut out = [0.0; EMA_DIM];
        if self.phonemes.is_empty() {
            return out;
        }
        for (ch, o) in out.iter_mut().enumerate() {
            let mean = self.phonemes.iter().map(|p| p.means[ch]).sum::<f64>() / n;
            *o = self
                .phonemes
                .iter()
                .map(|p| (p.means[ch] - mean).powi(2))
                .sum::<f64>()
                / n;
        }
        out
    }

    /// Average of [`CriticalityReport::channel_variance`] over channels; higher
    /// means the weights discriminate more between phonemes.
    pub fn mean_channel_variance(&self) -> f64 {
        self.channel_variance().iter().sum::<f64>() / EMA_DIM as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReportOptions {
    pub resample_len: usize,
    /// Feed ground-truth articulators to the classifier during the forward pass.
    pub use_ste: bool,
    pub batch_size: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            resample_len: 10,
            use_ste: true,
            batch_size: 8,
        }
    }
}

/// Eval-mode AWP output for each utterance of a raw corpus, `[frames × 12]`.
pub fn frame_weights(
    pipeline: &Pipeline,
    corpus: &Corpus,
    use_ste: bool,
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    if corpus.phonemes.len() != pipeline.classes() {
        return Err(Error::invalid(format!(
            "corpus has {} phonemes, model has {} classes",
            corpus.phonemes.len(),
            pipeline.classes()
        )));
    }
    let batches = make_batches(
        &pipeline.normalizer.apply(corpus),
        BatchOptions {
            batch_size,
            shuffle_seed: None,
            bucket_by_length: false,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(corpus.len());
    for b in &batches {
        let mut g = Graph::new();
        let p = pipeline.params.bind(&mut g);
        let o = pipeline.forward_batch(&mut g, &p, b, use_ste, false, &mut rng)?;
        let w = g.value(o.weights.weights);
        let t = b.max_len();
        for i in 0..b.size() {
            let n = corpus.utterances[out.len()].frames();
            let rows = w.data()[i * t * EMA_DIM..(i * t + n) * EMA_DIM].to_vec();
            out.push(Tensor::new(vec![n, EMA_DIM], rows)?);
        }
    }
    Ok(out)
}

/// Aggregates per-utterance weight matrices into a report.
pub fn report_from_weights(
    corpus: &Corpus,
    weights: &[Tensor],
    resample_len: usize,
) -> Result<CriticalityReport> {
    if weights.len() != corpus.len() {
        return Err(Error::invalid(format!(
            "{} weight matrices for {} utterances",
            weights.len(),
            corpus.len()
        )));
    }
    let k = corpus.phonemes.len();
    let mut sums = vec![[0.0; EMA_DIM]; k];
    let mut frames = vec![0usize; k];
    let mut traj = vec![vec![0.0; resample_len * EMA_DIM]; k];
    let mut segs = vec![0usize; k];
    for (utt, w) in corpus.utterances.iter().zip(weights) {
        for seg in extract_segments(utt, w)? {
            let l = utt.labels[seg.frames.start];
            for r in 0..seg.weights.rows() {
                for (s, v) in sums[l].iter_mut().zip(seg.weights.row(r)) {
                    *s += v;
                }
            }
            frames[l] += seg.frames.len();
            let rs = resample(&seg.weights, resample_len)?;
            for (a, v) in traj[l].iter_mut().zip(rs.data()) {
                *a += v;
            }
            segs[l] += 1;
        }
    }
    let mut report = CriticalityReport {
        phonemes: Vec::new(),
        skipped: Vec::new(),
        resample_len,
    };
    for (l, symbol) in corpus.phonemes.iter().enumerate() {
        if segs[l] == 0 {
            report.skipped.push(symbol.clone());
            continue;
        }
        let n = segs[l] as f64;
        report.phonemes.push(PhonemeSummary {
            symbol: symbol.clone(),
            means: sums[l].map(|s| s / frames[l] as f64),
            trajectory: Tensor::new(
                vec![resample_len, EMA_DIM],
                traj[l].iter().map(|v| v / n).collect(),
            )?,
            segments: segs[l],
            frames: frames[l],
        });
    }
    Ok(report)
}

pub fn build_report(
    pipeline: &Pipeline,
    corpus: &Corpus,
    opts: ReportOptions,
) -> Result<CriticalityReport> {
    if opts.resample_len < 2 {
        return Err(Error::invalid(format!(
            "resample length must be ≥ 2, got {}",
            opts.resample_len
        )));
    }
    let w = frame_weights(pipeline, corpus, opts.use_ste, opts.batch_size)?;
    report_from_weights(corpus, &w, opts.resample_len)
}

fn channel_header() -> String {
    ArticulatorChannel::ALL
        .iter()
        .map(|c| c.name())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn format_summary(report: &CriticalityReport) -> Result<String> {
    let mut s = format!("phoneme,{},segments,top3\n", channel_header());
    for p in &report.phonemes {
        let means: Vec<String> = p.means.iter().map(f64::to_string).collect();
        s.push_str(&format!(
            "{},{},{},{}\n",
            p.symbol,
            means.join(","),
            p.segments,
            p.top_label(3)?
        ));
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub symbol: String,
    pub means: [f64; EMA_DIM],
    pub segments: usize,
    pub top3: Vec<ArticulatorChannel>,
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    let expect = format!("phoneme,{},segments,top3", channel_header());
    if lines.next() != Some(expect.as_str()) {
        return Err(Error::invalid("summary: unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::invalid(format!("summary line {}: {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != EMA_DIM + 3 {
                return Err(bad("wrong field count"));
            }
            let mut means = [0.0; EMA_DIM];
            for (m, s) in means.iter_mut().zip(&f[1..=EMA_DIM]) {
                *m = s.parse().map_err(|_| bad("bad mean"))?;
            }
            let top = f[EMA_DIM + 2]
                .split_once(" : ")
                .ok_or_else(|| bad("bad top-3 field"))?
                .1
                .split_whitespace()
                .map(|c| c.parse().map_err(|_| bad("bad channel")))
                .collect::<Result<Vec<_>>>()?;
            Ok(SummaryRow {
                symbol: f[0].to_string(),
                means,
                segments: f[EMA_DIM + 1]
                    .parse()
                    .map_err(|_| bad("bad segment count"))?,
                top3: top,
            })
        })
        .collect()
}

pub fn format_heatmap(p: &PhonemeSummary) -> String {
    let mut s = channel_header();
    s.push('\n');
    for r in 0..p.trajectory.rows() {
        let row: Vec<String> = p.trajectory.row(r).iter().map(f64::to_string).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// File-name-safe form of a phoneme symbol.
pub fn heatmap_name(symbol: &str) -> String {
    let safe: String = symbol
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("heatmap_{safe}.csv")
}

/// Writes `summary.csv` and one heatmap per phoneme; returns the paths.
pub fn export(report: &CriticalityReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![(dir.join(SUMMARY_NAME), format_summary(report)?)];
    for p in &report.phonemes {
        files.push((dir.join(heatmap_name(&p.symbol)), format_heatmap(p)));
    }
    let mut names: Vec<&PathBuf> = files.iter().map(|(p, _)| p).collect();
    names.sort();
    names.dedup();
    if names.len() != files.len() {
        return Err(Error::invalid(
            "two phoneme symbols map to the same heatmap file name",
        ));
    }
    for (path, text) in &files {
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Agreement between the predicted ranking and the planted channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeScore {
    pub symbol: String,
    /// Planted channels, strongest first.
    pub planted: Vec<ArticulatorChannel>,
    pub predicted: Vec<ArticulatorChannel>,
    /// Planted channels found in `predicted`.
    pub hits: usize,
}

impl PhonemeScore {
    pub fn all_hit(&self) -> bool {
        self.hits == self.planted.len()
    }

    pub fn strongest_hit(&self) -> bool {
        self.planted
            .first()
            .is_some_and(|c| self.predicted.contains(c))
    }
}

/// Scores every oracle phoneme against the report's top-`k`.
pub fn score(
    report: &CriticalityReport,
    oracle: &[(String, Vec<ArticulatorChannel>)],
    k: usize,
) -> Result<Vec<PhonemeScore>> {
    let oracle_symbols: Vec<&str> = oracle.iter().map(|(s, _)| s.as_str()).collect();
    let mut report_symbols: Vec<&str> = report.phonemes.iter().map(|p| p.symbol.as_str()).collect();
    report_symbols.extend(report.skipped.iter().map(String::as_str));
    let mut a = oracle_symbols.clone();
    a.sort_unstable();
    report_symbols.sort_unstable();
    if a != report_symbols {
        return Err(Error::invalid(format!(
            "oracle phonemes {oracle_symbols:?} do not match the corpus phoneme table"
        )));
    }
    oracle
        .iter()
        .filter(|(s, _)| !report.skipped.contains(s))
        .map(|(s, planted)| {
            let predicted = report.top_k(s, k)?;
            let hits = planted.iter().filter(|c| predicted.contains(c)).count();
            Ok(PhonemeScore {
                symbol: s.clone(),
                planted: planted.clone(),
                predicted,
                hits,
            })
        })
        .collect()
}

pub fn format_scores(scores: &[PhonemeScore]) -> String {
    let fmt = crate::data::format_channels;
    let mut s = String::from("phoneme,planted,predicted,hits\n");
    for p in scores {
        s.push_str(&format!(
            "{},{},{},{}\n",
            p.symbol,
            fmt(&p.planted),
            fmt(&p.predicted),
            p.hits
        ));
    }
    s
}
