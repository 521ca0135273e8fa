//! Joint training of the three networks with Adam.

mod adam;
mod checkpoint;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::config::{render, KvConfig};
use crate::data::{make_batches, Batch, BatchOptions, Corpus, Normalizer, EMA_DIM};
use crate::error::{Error, Result};
use crate::pipeline::{argmax_rows, LossWeights, Pipeline, PipelineConfig};

pub const METRICS_HEADER: &str = "epoch,l_aai,l_fpc,total,train_acc,eval_acc";
pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const METRICS_NAME: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub dropout_p: f64,
    pub seed: u64,
    /// When set, a checkpoint is written here after every `eval_every` epochs.
    pub checkpoint_dir: Option<PathBuf>,
    /// Held-out accuracy is computed every this many epochs.
    pub eval_every: usize,
    /// Global gradient-norm clipping threshold.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            dropout_p: 0.5,
            seed: 0,
            checkpoint_dir: None,
            eval_every: 1,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        let (a, f) = (self.loss.aai, self.loss.fpc);
        if a < 0.0 || f < 0.0 || !(a + f > 0.0) {
            return Err(Error::Config(format!(
                "lambda_aai and lambda_fpc must be ≥ 0 and not both zero, got {a} and {f}"
            )));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: kv.take_or("epochs", d.epochs)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            adam: AdamConfig {
                lr: kv.take_or("learning_rate", d.adam.lr)?,
                beta1: kv.take_or("beta1", d.adam.beta1)?,
                beta2: kv.take_or("beta2", d.adam.beta2)?,
                eps: kv.take_or("eps", d.adam.eps)?,
            },
            loss: LossWeights {
                aai: kv.take_or("lambda_aai", d.loss.aai)?,
                fpc: kv.take_or("lambda_fpc", d.loss.fpc)?,
            },
            dropout_p: kv.take_or("dropout_p", d.dropout_p)?,
            seed: kv.take_or("seed", d.seed)?,
            checkpoint_dir: kv.take::<PathBuf>("checkpoint_dir")?,
            eval_every: kv.take_or("eval_every", d.eval_every)?,
            clip: kv.take("clip")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("eps", self.adam.eps.to_string()),
            ("lambda_aai", self.loss.aai.to_string()),
            ("lambda_fpc", self.loss.fpc.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ];
        if let Some(d) = &self.checkpoint_dir {
            v.push(("checkpoint_dir", d.display().to_string()));
        }
        if let Some(c) = self.clip {
            v.push(("clip", c.to_string()));
        }
        v
    }
}

/// Renders the model and training settings in the config-file syntax.
pub fn config_echo(model: &PipelineConfig, train: &TrainConfig) -> String {
    render(model.to_pairs().into_iter().chain(train.to_pairs()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub l_aai: f64,
    pub l_fpc: f64,
    pub total: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let eval = self.eval_acc.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.l_aai, self.l_fpc, self.total, self.train_acc, eval
        )
    }
}

pub fn format_metrics(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_metrics(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        None if text.is_empty() => return Ok(Vec::new()),
        _ => return Err(Error::invalid("metrics: missing header")),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::invalid(format!("metrics line {}: {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                l_aai: num(f[1])?,
                l_fpc: num(f[2])?,
                total: num(f[3])?,
                train_acc: num(f[4])?,
                eval_acc: if f[5].is_empty() {
                    None
                } else {
                    Some(num(f[5])?)
                },
            })
        })
        .collect()
}

/// Held-out metrics; accuracies are over real frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Classifier fed ground-truth articulators (STE path).
    pub accuracy: f64,
    /// Classifier fed the AAI prediction.
    pub accuracy_no_ste: f64,
    /// AAI error per channel, in the corpus's original units.
    pub rmse: [f64; EMA_DIM],
    /// Fraction of frames whose weights fell back to the constant case.
    pub degenerate_rate: f64,
    pub frames: usize,
}

fn correct(logits: &Tensor, batch: &Batch) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(&batch.labels)
        .zip(&batch.padding.valid)
        .filter(|((p, l), &v)| v && p == l)
        .count()
}

/// Eval-mode metrics on a raw (unnormalized) corpus.
pub fn evaluate(pipeline: &Pipeline, corpus: &Corpus, batch_size: usize) -> Result<EvalMetrics> {
    if corpus.is_empty() {
        return Err(Error::invalid("evaluate: empty corpus"));
    }
    if corpus.phonemes.len() != pipeline.classes() {
        return Err(Error::invalid(format!(
            "evaluate: corpus has {} phonemes, model has {} classes",
            corpus.phonemes.len(),
            pipeline.classes()
        )));
    }
    let opts = BatchOptions {
        batch_size,
        shuffle_seed: None,
        bucket_by_length: false,
    };
    let raw = make_batches(corpus, opts)?;
    let norm = make_batches(&pipeline.normalizer.apply(corpus), opts)?;
    // dropout is off in eval mode, so the generator is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut hit, mut hit_no_ste, mut frames, mut degenerate) = (0, 0, 0, 0);
    let mut sq = [0.0; EMA_DIM];
    for (b, rb) in norm.iter().zip(&raw) {
        let mut g = Graph::new();
        let p = pipeline.params.bind(&mut g);
        let out = pipeline.forward_batch(&mut g, &p, b, true, false, &mut rng)?;
        hit += correct(g.value(out.logits), b);
        degenerate += out.degenerate_frame_count;
        let pred = pipeline.normalizer.ema.invert(g.value(out.ema_pred));
        for r in 0..b.padding.rows() {
            if b.padding.valid[r] {
                for (c, s) in sq.iter_mut().enumerate() {
                    let d = pred.at(r, c) - rb.ema.at(r, c);
                    *s += d * d;
                }
            }
        }
        frames += b.padding.valid_count();

        let mut g = Graph::new();
        let p = pipeline.params.bind(&mut g);
        let out = pipeline.forward_batch(&mut g, &p, b, false, false, &mut rng)?;
        hit_no_ste += correct(g.value(out.logits), b);
    }
    let n = frames as f64;
    Ok(EvalMetrics {
        accuracy: hit as f64 / n,
        accuracy_no_ste: hit_no_ste as f64 / n,
        rmse: sq.map(|s| (s / n).sqrt()),
        degenerate_rate: degenerate as f64 / n,
        frames,
    })
}

/// Owns the pipeline and optimizer state across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pipeline: Pipeline,
    adam: Adam,
    cfg: TrainConfig,
    phonemes: Vec<String>,
    epochs_done: usize,
    log: Vec<EpochMetrics>,
}

impl Trainer {
    /// Starts a fresh run; the normalizer is fitted on `train`.
    pub fn new(mut pipeline: Pipeline, cfg: TrainConfig, train: &Corpus) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("train: empty corpus"));
        }
        if train.phonemes.len() != pipeline.classes() {
            return Err(Error::invalid(format!(
                "train: corpus has {} phonemes, model has {} classes",
                train.phonemes.len(),
                pipeline.classes()
            )));
        }
        pipeline.set_dropout(cfg.dropout_p)?;
        pipeline.normalizer = Normalizer::fit(train)?;
        Ok(Trainer {
            adam: Adam::new(pipeline.params.values()),
            pipeline,
            cfg,
            phonemes: train.phonemes.clone(),
            epochs_done: 0,
            log: Vec::new(),
        })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn into_pipeline(self) -> Pipeline {
        self.pipeline
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn phonemes(&self) -> &[String] {
        &self.phonemes
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn log(&self) -> &[EpochMetrics] {
        &self.log
    }

    /// Changes the target epoch count, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.cfg.epochs = epochs;
    }

    /// Trains until `config().epochs` epochs have been completed.
    pub fn run(&mut self, train: &Corpus, eval: Option<&Corpus>) -> Result<&[EpochMetrics]> {
        self.run_with(train, eval, |_| {})
    }

    /// As [`Trainer::run`], calling `on_epoch` after each epoch.
    pub fn run_with(
        &mut self,
        train: &Corpus,
        eval: Option<&Corpus>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<&[EpochMetrics]> {
        self.check_corpus(train)?;
        if let Some(e) = eval {
            self.check_corpus(e)?;
        }
        let train_n = self.pipeline.normalizer.apply(train);
        while self.epochs_done < self.cfg.epochs {
            let m = self.epoch(&train_n, eval)?;
            on_epoch(&m);
            self.log.push(m);
            if let Some(dir) = &self.cfg.checkpoint_dir {
                if self.epochs_done % self.cfg.eval_every == 0 {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    let path = dir.join(format!("epoch_{:04}.ckpt", self.epochs_done));
                    self.checkpoint().save(&path)?;
                }
            }
        }
        Ok(&self.log)
    }

    fn check_corpus(&self, c: &Corpus) -> Result<()> {
        if c.phonemes != self.phonemes {
            return Err(Error::invalid(format!(
                "phoneme table {:?} does not match the model's {:?}",
                c.phonemes, self.phonemes
            )));
        }
        Ok(())
    }

    /// Epoch randomness is derived from (seed, epoch) alone, so a run resumed
    /// from a checkpoint at an epoch boundary replays exactly.
    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epochs_done as u64 + 1);
        rng
    }

    fn epoch(&mut self, train: &Corpus, eval: Option<&Corpus>) -> Result<EpochMetrics> {
        let epoch = self.epochs_done + 1;
        let mut rng = self.epoch_rng();
        let batches = make_batches(
            train,
            BatchOptions {
                batch_size: self.cfg.batch_size,
                shuffle_seed: Some(rng.random()),
                bucket_by_length: false,
            },
        )?;
        let (mut s_aai, mut s_fpc, mut s_total, mut hit, mut frames) = (0.0, 0.0, 0.0, 0, 0);
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let p = self.pipeline.params.bind(&mut g);
            let out = self
                .pipeline
                .forward_batch(&mut g, &p, batch, true, true, &mut rng)?;
            let l = self.pipeline.loss(
                &mut g,
                &out,
                &batch.ema,
                &batch.labels,
                &batch.mask(),
                self.cfg.loss,
            )?;
            let total = g.value(l.total).item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            g.backward(l.total)?;
            let mut grads = p.grads(&g);
            if let Some(c) = self.cfg.clip {
                clip_global_norm(&mut grads, c);
            }
            let store = &mut self.pipeline.params;
            let names: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();
            self.adam
                .update(&self.cfg.adam, store.values_mut(), &grads, |i| {
                    names[i].clone()
                })?;

            let n = batch.padding.valid_count();
            s_aai += g.value(l.l_aai).item() * n as f64;
            s_fpc += g.value(l.l_fpc).item() * n as f64;
            s_total += total * n as f64;
            hit += correct(g.value(out.logits), batch);
            frames += n;
        }
        self.epochs_done = epoch;
        let eval_acc = match eval {
            Some(c) if epoch % self.cfg.eval_every == 0 || epoch == self.cfg.epochs => {
                Some(evaluate(&self.pipeline, c, self.cfg.batch_size)?.accuracy)
            }
            _ => None,
        };
        let n = frames as f64;
        Ok(EpochMetrics {
            epoch,
            l_aai: s_aai / n,
            l_fpc: s_fpc / n,
            total: s_total / n,
            train_acc: hit as f64 / n,
            eval_acc,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.pipeline.params;
        Checkpoint {
            config: config_echo(self.pipeline.config(), &self.cfg),
            phonemes: self.phonemes.clone(),
            epochs_done: self.epochs_done as u64,
            params: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam_step: self.adam.step,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            normalizer: self.pipeline.normalizer.clone(),
            metrics: format_metrics(&self.log),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut kv = KvConfig::parse(&ck.config)?;
        let model = PipelineConfig::from_kv(&mut kv, ck.phonemes.len())?;
        let cfg = TrainConfig::from_kv(&mut kv)?;
        kv.finish()?;
        let mut pipeline = Pipeline::new(model)?;
        pipeline.set_dropout(cfg.dropout_p)?;
        let store = &mut pipeline.params;
        if ck.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter blocks, model has {}",
                ck.params.len(),
                store.len()
            )));
        }
        let mut adam = Adam::new(store.values());
        for (i, (name, t)) in ck.params.iter().enumerate() {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
            let slot = store.ids().position(|x| x == id).unwrap();
            adam.m[slot] = ck.adam_m[i].clone();
            adam.v[slot] = ck.adam_v[i].clone();
        }
        adam.step = ck.adam_step;
        pipeline.normalizer = ck.normalizer.clone();
        Ok(Trainer {
            pipeline,
            adam,
            cfg,
            phonemes: ck.phonemes.clone(),
            epochs_done: ck.epochs_done as usize,
            log: parse_metrics(&ck.metrics)?,
        })
    }

    /// Writes `checkpoint.bin`, `metrics.csv` and `config.txt` into `dir`.
    pub fn save_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint().save(&dir.join(CHECKPOINT_NAME))?;
        let write = |name: &str, s: &str| {
            let path = dir.join(name);
            std::fs::write(&path, s).map_err(|e| Error::io(&path, e))
        };
        write(METRICS_NAME, &format_metrics(&self.log))?;
        write(
            "config.txt",
            &config_echo(self.pipeline.config(), &self.cfg),
        )
    }
}

/// Fits the normalizer, trains for `cfg.epochs` and returns the model and log.
pub fn train(
    pipeline: Pipeline,
    corpus: &Corpus,
    cfg: TrainConfig,
) -> Result<(Pipeline, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(pipeline, cfg, corpus)?;
    t.run(corpus, None)?;
    let log = t.log.clone();
    Ok((t.into_pipeline(), log))
}

/// Loads a trained model from a checkpoint file.
pub fn load_pipeline(path: &Path) -> Result<(Pipeline, Vec<String>)> {
    let ck = Checkpoint::load(path)?;
    let t = Trainer::from_checkpoint(&ck)?;
    Ok((t.pipeline, t.phonemes))
}
