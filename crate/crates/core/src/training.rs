//! Cross-entropy loss, Adam, the batch training loop and checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::Reader;
use crate::codec::MuLawCode;
use crate::corpus::{Corpus, CorpusConfig, SEQ_LEN};
use crate::error::{out_of_range, Error, Result};
use crate::network::{backward, run_batch, NetworkDims, Real, Weights};

/// Softmax cross-entropy of one logit row against `target`, in log-sum-exp
/// form. When `grad` is given it receives `softmax(logits) - onehot(target)`.
pub fn softmax_cross_entropy_into<F: Real>(
    logits: &[F],
    target: usize,
    grad: Option<&mut [F]>,
) -> Result<F> {
    if target >= logits.len() {
        return Err(out_of_range("target code", target, "below the output size"));
    }
    let mut max = F::neg_infinity();
    for &l in logits {
        if !l.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        max = max.max(l);
    }
    let sum = logits.iter().fold(F::zero(), |acc, &l| acc + (l - max).exp());
    let lse = max + sum.ln();
    if let Some(g) = grad {
        for (gk, &l) in g.iter_mut().zip(logits) {
            *gk = (l - lse).exp();
        }
        g[target] -= F::one();
    }
    Ok(lse - logits[target])
}

pub fn softmax_cross_entropy<F: Real>(logits: &[F], target: MuLawCode) -> Result<(F, Vec<F>)> {
    let mut grad = vec![F::zero(); logits.len()];
    let loss = softmax_cross_entropy_into(logits, target.index(), Some(&mut grad))?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, flattened in [`Weights::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        AdamState {
            config,
            t: 0,
            m: vec![F::zero(); param_count],
            v: vec![F::zero(); param_count],
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<F: Real>(weights: &mut Weights<F>, grads: &Weights<F>, state: &mut AdamState<F>) -> Result<()> {
    let count = weights.param_count();
    if grads.dims != weights.dims || grads.param_count() != count {
        return Err(Error::Shape("gradient shape differs from weights".into()));
    }
    if state.m.len() != count || state.v.len() != count {
        return Err(Error::Shape(format!(
            "optimizer state holds {} moments for {count} parameters",
            state.m.len()
        )));
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let b1 = F::lit(c.beta1);
    let b2 = F::lit(c.beta2);
    let one = F::one();
    let corr1 = F::lit(1.0 - c.beta1.powi(t));
    let corr2 = F::lit(1.0 - c.beta2.powi(t));
    let lr = F::lit(c.lr);
    let eps = F::lit(c.eps);
    let mut k = 0;
    for (w, g) in weights.tensors_mut().into_iter().zip(grads.tensors()) {
        for (wi, &gi) in w.iter_mut().zip(g) {
            let m = b1 * state.m[k] + (one - b1) * gi;
            let v = b2 * state.v[k] + (one - b2) * gi * gi;
            state.m[k] = m;
            state.v[k] = v;
            let m_hat = m / corr1;
            let v_hat = v / corr2;
            *wi -= lr * m_hat / (v_hat.sqrt() + eps);
            k += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of optimizer steps (one batch each).
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Sequences per forward/backward pass; gradients of the chunks are
    /// combined into the batch mean. Does not change the result beyond
    /// floating-point summation order.
    pub chunk_size: usize,
    pub adam: AdamConfig,
    pub dims: NetworkDims,
    /// Emit a checkpoint event every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1_000,
            batch_size: 256,
            seq_len: SEQ_LEN,
            chunk_size: 64,
            adam: AdamConfig::default(),
            dims: NetworkDims::default(),
            checkpoint_every: 0,
            log_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.batch_size == 0 {
            return Err(out_of_range("batch_size", 0, ">= 1"));
        }
        if self.seq_len == 0 {
            return Err(out_of_range("seq_len", 0, ">= 1"));
        }
        if self.chunk_size == 0 {
            return Err(out_of_range("chunk_size", 0, ">= 1"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(out_of_range("lr", self.adam.lr, "> 0"));
        }
        for (what, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(out_of_range(what, b, "[0, 1)"));
            }
        }
        if !(self.adam.eps > 0.0) {
            return Err(out_of_range("eps", self.adam.eps, "> 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub mean_loss: f64,
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,mean_loss\n");
    for r in history {
        out.push_str(&format!("{},{}\n", r.step, r.mean_loss));
    }
    out
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSYNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: Weights<f32>,
    pub adam: AdamState<f32>,
    pub corpus: Option<CorpusConfig>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn fresh(dims: NetworkDims, adam: AdamConfig, seed: u64) -> Result<Self> {
        let weights = Weights::init(dims, seed)?;
        let adam = AdamState::new(adam, weights.param_count());
        Ok(Checkpoint {
            weights,
            adam,
            corpus: None,
            step: 0,
            seed,
        })
    }

    pub fn dims(&self) -> NetworkDims {
        self.weights.dims
    }

    /// Layout (little-endian):
    ///
    /// ```text
    /// magic "CSYNCKPT" | version u32
    /// input_size, hidden_size, num_layers, output_size: u32
    /// step u64 | seed u64
    /// adam t u64 | lr, beta1, beta2, eps: f64
    /// corpus config JSON: u32 length + UTF-8 (length 0 = none)
    /// weights: f32 arrays in tensor order
    ///   w_in (H x I), b_in (H), per layer: w (3H x H), u (3H x H), b (3H),
    ///   w_out (O x H), b_out (O); gate blocks stacked z, r, h
    /// adam m: f32, same order and length as the weights
    /// adam v: f32, same order and length as the weights
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.weights.validate()?;
        let d = self.dims();
        let count = self.weights.param_count();
        if self.adam.m.len() != count || self.adam.v.len() != count {
            return Err(Error::Shape("optimizer state does not match weights".into()));
        }
        let mut out = Vec::with_capacity(64 + 12 * count);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [d.input_size, d.hidden_size, d.num_layers, d.output_size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let a = &self.adam;
        out.extend_from_slice(&a.t.to_le_bytes());
        for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let json = match &self.corpus {
            Some(c) => serde_json::to_vec(c)?,
            None => Vec::new(),
        };
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for t in self.weights.tensors() {
            put(t);
        }
        put(&a.m);
        put(&a.v);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(8).map_err(|_| Error::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let dims = NetworkDims {
            input_size: r.u32()? as usize,
            hidden_size: r.u32()? as usize,
            num_layers: r.u32()? as usize,
            output_size: r.u32()? as usize,
        };
        dims.validate()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let t = r.u64()?;
        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let json_len = r.u32()? as usize;
        let json = r.take(json_len)?;
        let corpus = if json.is_empty() {
            None
        } else {
            Some(serde_json::from_slice(json)?)
        };
        let mut weights = Weights::<f32>::zeros(dims);
        for t in weights.tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&r.f32_vec(len)?);
        }
        let count = weights.param_count();
        let m = r.f32_vec(count)?;
        let v = r.f32_vec(count)?;
        r.finish()?;
        Ok(Checkpoint {
            weights,
            adam: AdamState { config, t, m, v },
            corpus,
            step,
            seed,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug)]
pub enum TrainEvent<'a> {
    Loss(LossRecord),
    Checkpoint(&'a Checkpoint),
    /// Emitted with the last finite state before training aborts.
    Diverged(&'a Checkpoint),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
}

/// Trains from a fresh initialization.
pub fn train(config: &TrainConfig, corpus: &Corpus, on_event: impl FnMut(TrainEvent<'_>)) -> Result<TrainOutcome> {
    config.validate()?;
    let mut start = Checkpoint::fresh(config.dims, config.adam, config.seed)?;
    start.corpus = Some(corpus.config.clone());
    resume(config, corpus, start, on_event)
}

/// Continues training `start` for `config.steps` more steps. Batches are
/// drawn from a stream seeded by `(seed, start.step)`, so a run split into
/// pieces draws different batches than an uninterrupted one.
pub fn resume(
    config: &TrainConfig,
    corpus: &Corpus,
    start: Checkpoint,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.cells.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if start.dims() != config.dims {
        return Err(Error::Shape(format!(
            "checkpoint dims {:?} differ from configured {:?}",
            start.dims(),
            config.dims
        )));
    }
    let mut ckpt = start;
    ckpt.adam.config = config.adam;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5_EED0_FBA7_C4E5 ^ ckpt.step.rotate_left(32));
    let mut history = Vec::with_capacity(config.steps as usize);
    let batch_n = config.batch_size as f64;

    for _ in 0..config.steps {
        let batch = corpus.draw_batch(config.batch_size, config.seq_len, &mut rng)?;
        let mut grads = Weights::<f32>::zeros(config.dims);
        let mut loss = 0.0f64;
        let mut failed = false;
        for chunk in batch.chunks(config.chunk_size) {
            let frac = chunk.len() as f64 / batch_n;
            let pass = run_batch(&ckpt.weights, chunk, None)
                .and_then(|(trace, l)| backward(&ckpt.weights, &trace).map(|g| (g, l)));
            match pass {
                Ok((g, l)) => {
                    grads.add_scaled(&g, frac as f32)?;
                    loss += f64::from(l) * frac;
                }
                Err(Error::NonFinite(_)) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failed || !loss.is_finite() || grads.tensors().iter().any(|t| t.iter().any(|g| !g.is_finite())) {
            on_event(TrainEvent::Diverged(&ckpt));
            return Err(Error::Diverged { step: ckpt.step });
        }
        let record = LossRecord {
            step: ckpt.step,
            mean_loss: loss,
        };
        history.push(record);
        if config.log_every > 0 && ckpt.step.is_multiple_of(config.log_every) {
            tracing::info!(step = ckpt.step, loss, "training");
        }
        on_event(TrainEvent::Loss(record));
        adam_step(&mut ckpt.weights, &grads, &mut ckpt.adam)?;
        ckpt.step += 1;
        if config.checkpoint_every > 0 && ckpt.step.is_multiple_of(config.checkpoint_every) {
            on_event(TrainEvent::Checkpoint(&ckpt));
        }
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        history,
    })
}
