//! Training objectives, optimizer, schedules and the training loop.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, CostMatrix};
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::model::{
    forward_batch, Batch, ForwardOptions, ModelConfig, ModelParams, StepInputPolicy,
};
use crate::synthgen::SyntheticDataset;
use crate::tensor::{gaussian_vec, Real, RngStream, UnitVector};

const P_EPOCH: u64 = 0x45;
const P_STEP: u64 = 0x53;
const P_VAL: u64 = 0x56;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Amer,
    SingleQuery,
}

impl TrainMode {
    fn code(self) -> u8 {
        match self {
            TrainMode::Amer => 0,
            TrainMode::SingleQuery => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TrainMode::Amer),
            1 => Some(TrainMode::SingleQuery),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackMode {
    ScheduledSampling,
    AlwaysPredicted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub feedback: FeedbackMode,
    /// Stop gradients at fed-back predictions.
    pub detach_feedback: bool,
    pub batch_size: usize,
    pub temperature: f64,
    pub lr: f64,
    /// Total optimizer steps. Ignored when `epochs` is set.
    pub steps: usize,
    pub epochs: Option<usize>,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Cap of the scheduled-sampling ramp.
    pub sampling_cap: f64,
    pub negatives_per_positive: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Amer,
            feedback: FeedbackMode::ScheduledSampling,
            detach_feedback: false,
            batch_size: 128,
            temperature: 0.05,
            lr: 1e-3,
            steps: 8000,
            epochs: None,
            warmup_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            sampling_cap: 0.8,
            negatives_per_positive: 1,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.temperature > 0.0) {
            return bad(format!(
                "train.temperature must be > 0, got {}",
                self.temperature
            ));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "train.batch_size must be >= 2, got {}",
                self.batch_size
            ));
        }
        if !(0.0..=0.5).contains(&self.warmup_fraction) {
            return bad(format!(
                "train.warmup_fraction must lie in [0, 0.5], got {}",
                self.warmup_fraction
            ));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("train.lr and train.weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.sampling_cap) {
            return bad("train.sampling_cap must lie in [0, 1]".into());
        }
        if self.checkpoint_every == 0 {
            return bad("train.checkpoint_every must be >= 1".into());
        }
        Ok(())
    }

    /// Resolves `epochs` against the training set size.
    pub fn total_steps(&self, n_train: usize) -> usize {
        match self.epochs {
            Some(e) => e * (n_train / self.batch_size).max(1),
            None => self.steps,
        }
    }
}

/// Linear warmup from 0 to `peak`, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_fraction: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let warmup = warmup_fraction * total as f64;
    let s = step as f64;
    if s < warmup {
        peak * s / warmup
    } else {
        peak * (total as f64 - s) / (total as f64 - warmup)
    }
}

pub fn sampling_p(step: usize, total: usize, cap: f64) -> f64 {
    assert!(total > 0, "sampling_p needs total > 0");
    cap.min(step as f64 / total as f64)
}

/// `−log softmax(logits)[pos]` plus the softmax itself.
fn log_softmax_at(logits: &[f64], pos: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[pos] - max);
    (loss, exps.into_iter().map(|e| e / z).collect())
}

pub fn infonce(
    q: &UnitVector,
    positive: &UnitVector,
    docs: &[UnitVector],
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let pos = docs
        .iter()
        .position(|d| d == positive)
        .ok_or(Error::PositiveNotInBatch)?;
    let logits = docs
        .iter()
        .map(|d| crate::tensor::cosine_sim(q, d).map(|s| s / tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_softmax_at(&logits, pos).0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLossBreakdown {
    /// Sum over examples.
    pub total: f64,
    /// Per example: prediction index → target slot.
    pub matchings: Vec<Vec<usize>>,
    pub denominator: usize,
}

/// Which target slot each query row is scored against.
enum Positives<'a> {
    Matched,
    Given(&'a [usize]),
}

struct PoolLoss<F> {
    total: f64,
    matchings: Vec<Vec<usize>>,
    /// Gradient w.r.t. query rows, `n_q × d`.
    d_queries: Option<Vec<F>>,
}

/// Shared core of the matched and single-positive losses.
///
/// `queries` holds `b × t` rows (example-major). `docs` starts with the
/// `b × m` targets (example-major) followed by the negatives.
#[allow(clippy::too_many_arguments)]
fn pool_loss<F: Real>(
    queries: &[F],
    b: usize,
    t: usize,
    docs: &[F],
    n_docs: usize,
    m: usize,
    d: usize,
    tau: f64,
    positives: Positives<'_>,
    want_grad: bool,
) -> Result<PoolLoss<F>> {
    let n_q = b * t;
    let mut sims = vec![F::zero(); n_q * n_docs];
    F::gemm(
        n_q,
        d,
        n_docs,
        F::one(),
        queries,
        d as isize,
        1,
        docs,
        1,
        d as isize,
        F::zero(),
        &mut sims,
        n_docs as isize,
        1,
    );
    let mut total = 0.0;
    let mut matchings = Vec::with_capacity(b);
    let mut d_sims = if want_grad {
        vec![F::zero(); sims.len()]
    } else {
        Vec::new()
    };
    for ex in 0..b {
        let slots: Vec<usize> = match positives {
            Positives::Matched => {
                let mut cost = Vec::with_capacity(t * m);
                for i in 0..t {
                    let row = &sims[(ex * t + i) * n_docs..];
                    cost.extend((0..m).map(|j| -row[ex * m + j].as_f64()));
                }
                hungarian(&CostMatrix::new(m, cost)?).assignment
            }
            Positives::Given(p) => vec![p[ex]],
        };
        for (i, &slot) in slots.iter().enumerate() {
            let r = ex * t + i;
            let logits: Vec<f64> = sims[r * n_docs..(r + 1) * n_docs]
                .iter()
                .map(|s| s.as_f64() / tau)
                .collect();
            let pos = ex * m + slot;
            let (loss, probs) = log_softmax_at(&logits, pos);
            total += loss;
            if want_grad {
                let g = &mut d_sims[r * n_docs..(r + 1) * n_docs];
                for (j, p) in probs.iter().enumerate() {
                    let onehot = if j == pos { 1.0 } else { 0.0 };
                    g[j] = F::from_f64((p - onehot) / tau);
                }
            }
        }
        matchings.push(slots);
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let d_queries = want_grad.then(|| {
        let mut dq = vec![F::zero(); n_q * d];
        F::gemm(
            n_q,
            n_docs,
            d,
            F::one(),
            &d_sims,
            n_docs as isize,
            1,
            docs,
            d as isize,
            1,
            F::zero(),
            &mut dq,
            d as isize,
            1,
        );
        dq
    });
    Ok(PoolLoss {
        total,
        matchings,
        d_queries,
    })
}

fn flatten<F: Real>(vs: impl IntoIterator<Item = impl AsRef<[f32]>>) -> Vec<F> {
    vs.into_iter()
        .flat_map(|v| {
            v.as_ref()
                .iter()
                .map(|&x| F::from_f64(x as f64))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn check_shapes(
    preds: &[Vec<UnitVector>],
    targets: &[Vec<UnitVector>],
    negatives: &[UnitVector],
) -> Result<(usize, usize)> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction sets for {} target sets",
            preds.len(),
            targets.len()
        )));
    }
    let m = targets[0].len();
    let d = targets[0].first().map_or(0, |t| t.dim());
    let all = preds.iter().chain(targets).flatten().chain(negatives);
    if m == 0 || targets.iter().any(|t| t.len() != m) || all.clone().any(|v| v.dim() != d) {
        return Err(Error::ShapeMismatch(
            "ragged targets or mixed dimensions".into(),
        ));
    }
    Ok((m, d))
}

/// Matched InfoNCE summed over examples; every query competes against all
/// targets and negatives in the batch.
pub fn batch_loss(
    preds: &[Vec<UnitVector>],
    targets: &[Vec<UnitVector>],
    negatives: &[UnitVector],
    tau: f64,
) -> Result<BatchLossBreakdown> {
    let (m, d) = check_shapes(preds, targets, negatives)?;
    if preds.iter().any(|p| p.len() != m) {
        return Err(Error::ShapeMismatch(
            "each example needs exactly m predictions".into(),
        ));
    }
    let b = preds.len();
    let queries: Vec<f64> = flatten(preds.iter().flatten().map(|u| u.as_slice()));
    let docs: Vec<f64> = flatten(
        targets
            .iter()
            .flatten()
            .chain(negatives)
            .map(|u| u.as_slice()),
    );
    let n_docs = b * m + negatives.len();
    let out = pool_loss(
        &queries,
        b,
        m,
        &docs,
        n_docs,
        m,
        d,
        tau,
        Positives::Matched,
        false,
    )?;
    Ok(BatchLossBreakdown {
        total: out.total,
        matchings: out.matchings,
        denominator: n_docs,
    })
}

/// InfoNCE of one prediction per example against one uniformly drawn target.
pub fn single_query_loss(
    preds: &[UnitVector],
    targets: &[Vec<UnitVector>],
    negatives: &[UnitVector],
    tau: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let wrapped: Vec<Vec<UnitVector>> = preds.iter().map(|p| vec![p.clone()]).collect();
    let (m, d) = check_shapes(&wrapped, targets, negatives)?;
    let b = preds.len();
    let picks: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
    let queries: Vec<f64> = flatten(preds.iter().map(|u| u.as_slice()));
    let docs: Vec<f64> = flatten(
        targets
            .iter()
            .flatten()
            .chain(negatives)
            .map(|u| u.as_slice()),
    );
    let n_docs = b * m + negatives.len();
    Ok(pool_loss(
        &queries,
        b,
        1,
        &docs,
        n_docs,
        m,
        d,
        tau,
        Positives::Given(&picks),
        false,
    )?
    .total)
}

/// Fresh unit Gaussian negatives.
pub fn random_negatives<F: Real>(n: usize, d: usize, rng: &mut impl Rng) -> Vec<F> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let g = gaussian_vec(rng, d);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        out.extend(g.iter().map(|x| F::from_f64(x / norm)));
    }
    out
}

/// Training examples with targets normalized once.
pub struct PreparedSplit {
    pub dim: usize,
    pub m: usize,
    inputs: Vec<Vec<f32>>,
    targets: Vec<Vec<Vec<f32>>>,
}

impl PreparedSplit {
    pub fn new(ds: &SyntheticDataset) -> Result<Self> {
        let mut inputs = Vec::with_capacity(ds.len());
        let mut targets = Vec::with_capacity(ds.len());
        for r in &ds.records {
            inputs.push(r.input.clone());
            targets.push(
                r.unit_targets()?
                    .into_iter()
                    .map(UnitVector::into_inner)
                    .collect(),
            );
        }
        Ok(PreparedSplit {
            dim: ds.dim,
            m: ds.m,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Loss and gradient of one batch under the given mode and policy.
pub struct StepResult<F> {
    pub loss: f64,
    pub grad: Option<Vec<F>>,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_step<F: Real>(
    params: &ModelParams<F>,
    split: &PreparedSplit,
    rows: &[usize],
    mode: TrainMode,
    policy: StepInputPolicy,
    cfg: &TrainConfig,
    stream: RngStream,
    want_grad: bool,
) -> Result<StepResult<F>> {
    let (d, m, b) = (split.dim, split.m, rows.len());
    let mut rng = stream.rng();
    let inputs = Batch::from_rows(
        &rows.iter().map(|&r| &split.inputs[r]).collect::<Vec<_>>(),
        d,
    )?;
    let views: Vec<Vec<&[f32]>> = rows
        .iter()
        .map(|&r| split.targets[r].iter().map(|t| t.as_slice()).collect())
        .collect();
    let n_neg = b * m * cfg.negatives_per_positive;
    let mut docs: Vec<F> = flatten(rows.iter().flat_map(|&r| split.targets[r].iter()));
    docs.extend(random_negatives::<F>(n_neg, d, &mut rng));
    let n_docs = b * m + n_neg;

    let steps = match mode {
        TrainMode::Amer => m,
        TrainMode::SingleQuery => 1,
    };
    let picks: Vec<usize> = match mode {
        TrainMode::Amer => Vec::new(),
        TrainMode::SingleQuery => (0..b).map(|_| rng.random_range(0..m)).collect(),
    };
    let fwd = forward_batch(
        params,
        &inputs,
        &views,
        steps,
        policy,
        &mut rng,
        ForwardOptions {
            record: want_grad,
            detach_feedback: cfg.detach_feedback,
        },
    )?;
    // Example-major query rows.
    let mut queries = vec![F::zero(); b * steps * d];
    for (t, out) in fwd.outputs.iter().enumerate() {
        for r in 0..b {
            let dst = (r * steps + t) * d;
            queries[dst..dst + d].copy_from_slice(out.row(r));
        }
    }
    let positives = match mode {
        TrainMode::Amer => Positives::Matched,
        TrainMode::SingleQuery => Positives::Given(&picks),
    };
    let pl = pool_loss(
        &queries,
        b,
        steps,
        &docs,
        n_docs,
        m,
        d,
        cfg.temperature,
        positives,
        want_grad,
    )?;
    let grad = match pl.d_queries {
        Some(dq) => {
            let mut d_out: Vec<Batch<F>> = (0..steps).map(|_| Batch::zeros(b, d)).collect();
            for (t, batch) in d_out.iter_mut().enumerate() {
                for r in 0..b {
                    let src = (r * steps + t) * d;
                    batch.row_mut(r).copy_from_slice(&dq[src..src + d]);
                }
            }
            Some(params.backward(fwd.tape.as_ref(), &d_out)?)
        }
        None => None,
    };
    Ok(StepResult {
        loss: pl.total,
        grad,
    })
}

/// Decoupled weight decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ModelParams<f32>, cfg: &TrainConfig) -> Self {
        let mut decay = vec![false; params.values.len()];
        for t in params.layout().tensors() {
            if t.is_matrix() {
                decay[t.offset..t.offset + t.len()].fill(true);
            }
        }
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; params.values.len()],
            v: vec![0.0; params.values.len()],
            t: 0,
            decay,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] as f64;
            let m = self.beta1 * self.m[i] as f64 + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[i] as f64 + (1.0 - self.beta2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            if lr == 0.0 {
                continue;
            }
            let mut p = params[i] as f64;
            if self.decay[i] {
                p -= lr * self.weight_decay * p;
            }
            p -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            params[i] = p as f32;
        }
    }
}

/// A trained model plus everything needed to resume or audit it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub mode: TrainMode,
    pub step: u64,
    /// The run configuration, verbatim.
    pub config_text: String,
    pub params: ModelParams<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
}

const CKPT_MAGIC: &[u8] = b"AMERCKPT";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        let c = &self.params.config;
        for v in [c.dim, c.hidden, c.layers, c.heads, c.ffn_mult, c.max_len] {
            w.u32(v as u32);
        }
        w.u8(c.proj_bias as u8);
        w.u64(c.seed);
        w.u8(self.mode.code());
        w.u64(self.step);
        w.str(&self.config_text);
        let tensors = self.params.layout().tensors();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.str(&t.name);
            w.u32(t.shape.len() as u32);
            for &s in &t.shape {
                w.u32(s as u32);
            }
            w.f32s(&self.params.values[t.offset..t.offset + t.len()]);
        }
        w.u64(self.adam_m.len() as u64);
        w.f32s(&self.adam_m);
        w.f32s(&self.adam_v);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(CKPT_MAGIC)?;
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(r.error(&format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            dim: dims[0],
            hidden: dims[1],
            layers: dims[2],
            heads: dims[3],
            ffn_mult: dims[4],
            max_len: dims[5],
            proj_bias: r.u8()? != 0,
            seed: r.u64()?,
        };
        config.validate()?;
        let mode = TrainMode::from_code(r.u8()?).ok_or_else(|| r.error("unknown training mode"))?;
        let step = r.u64()?;
        let config_text = r.str()?;
        let layout = crate::model::Layout::new(&config);
        let n = r.u32()? as usize;
        if n != layout.tensors().len() {
            return Err(r.error("tensor count does not match the model config"));
        }
        let mut values = vec![0.0f32; layout.num_params()];
        for t in layout.tensors() {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if name != t.name || shape != t.shape {
                return Err(r.error(&format!("unexpected tensor {name} {shape:?}")));
            }
            let data = r.f32s(t.len())?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(r.error(&format!("non-finite values in {name}")));
            }
            values[t.offset..t.offset + t.len()].copy_from_slice(&data);
        }
        let n_moments = r.u64()? as usize;
        if n_moments != values.len() {
            return Err(r.error("optimizer state size mismatch"));
        }
        let adam_m = r.f32s(n_moments)?;
        let adam_v = r.f32s(n_moments)?;
        r.finish()?;
        Ok(Checkpoint {
            mode,
            step,
            config_text,
            params: ModelParams::from_values(config, values)?,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// Optimizer steps completed.
    pub step: usize,
    /// Mean loss per example of the batch just trained on.
    pub loss: Option<f64>,
    /// Mean validation loss per example, on evaluation steps only.
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub p: f64,
}

pub fn format_log(rows: &[LogRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::from("step,loss,val_loss,lr,p\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6e},{:.4}\n",
            r.step,
            opt(r.loss),
            opt(r.val_loss),
            r.lr,
            r.p
        ));
    }
    s
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_val_loss: Option<f64>,
    pub log: Vec<LogRow>,
}

fn policy_at(cfg: &TrainConfig, step: usize, total: usize) -> (StepInputPolicy, f64) {
    match (cfg.mode, cfg.feedback) {
        (TrainMode::SingleQuery, _) => (StepInputPolicy::TeacherForced, 0.0),
        (TrainMode::Amer, FeedbackMode::AlwaysPredicted) => (StepInputPolicy::AlwaysPredicted, 1.0),
        (TrainMode::Amer, FeedbackMode::ScheduledSampling) => {
            let p = sampling_p(step, total, cfg.sampling_cap);
            (StepInputPolicy::ScheduledSampling(p), p)
        }
    }
}

/// Mean loss per validation example, with fixed randomness so that
/// evaluations at different steps are comparable.
pub fn validation_loss(
    params: &ModelParams<f32>,
    val: &PreparedSplit,
    cfg: &TrainConfig,
    policy: StepInputPolicy,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let stream = RngStream::new(cfg.seed, 0).derive(P_VAL, 0);
    let mut total = 0.0;
    let idx: Vec<usize> = (0..val.len()).collect();
    for (i, rows) in idx.chunks(cfg.batch_size).enumerate() {
        let s = batch_step(
            params,
            val,
            rows,
            cfg.mode,
            policy,
            cfg,
            stream.derive(0, i as u64),
            false,
        )?;
        total += s.loss;
    }
    Ok(total / val.len() as f64)
}

/// Trains from `init` and returns the checkpoint with the lowest
/// validation loss. Validation runs before the first step, every
/// `checkpoint_every` steps and after the last step, under the sampling
/// policy in force at that step.
pub fn train(
    init: ModelParams<f32>,
    train_split: &SyntheticDataset,
    val_split: &SyntheticDataset,
    cfg: &TrainConfig,
    config_text: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_data = PreparedSplit::new(train_split)?;
    let val_data = PreparedSplit::new(val_split)?;
    if train_data.len() < cfg.batch_size {
        return Err(Error::CorpusTooSmall {
            requested: cfg.batch_size,
            targets: train_data.len(),
        });
    }
    if init.config.dim != train_data.dim {
        return Err(Error::DimMismatch {
            expected: init.config.dim,
            got: train_data.dim,
        });
    }
    let total = cfg.total_steps(train_data.len());
    let mut params = init;
    let mut adam = AdamW::new(&params, cfg);
    let snapshot = |params: &ModelParams<f32>, adam: &AdamW, step: usize| Checkpoint {
        mode: cfg.mode,
        step: step as u64,
        config_text: config_text.to_string(),
        params: params.clone(),
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
    };
    let mut log = Vec::with_capacity(total + 1);
    if total == 0 {
        return Ok(TrainOutcome {
            best: snapshot(&params, &adam, 0),
            best_val_loss: None,
            log,
        });
    }

    let root = RngStream::new(cfg.seed, 0);
    let batches_per_epoch = train_data.len() / cfg.batch_size;
    let mut order: Vec<usize> = Vec::new();

    let (policy0, p0) = policy_at(cfg, 0, total);
    let v0 = validation_loss(&params, &val_data, cfg, policy0)?;
    log.push(LogRow {
        step: 0,
        loss: None,
        val_loss: Some(v0),
        lr: 0.0,
        p: p0,
    });
    let mut best = snapshot(&params, &adam, 0);
    let mut best_val = v0;

    for step in 0..total {
        let epoch = step / batches_per_epoch;
        let slot = step % batches_per_epoch;
        if slot == 0 {
            order = (0..train_data.len()).collect();
            rand::seq::SliceRandom::shuffle(
                &mut order[..],
                &mut root.derive(P_EPOCH, epoch as u64).rng(),
            );
        }
        let rows = &order[slot * cfg.batch_size..(slot + 1) * cfg.batch_size];
        let (policy, p) = policy_at(cfg, step, total);
        let lr = lr_at(step, total, cfg.lr, cfg.warmup_fraction);
        let s = batch_step(
            &params,
            &train_data,
            rows,
            cfg.mode,
            policy,
            cfg,
            root.derive(P_STEP, step as u64),
            true,
        )?;
        if !s.loss.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        let grad = s.grad.expect("gradient requested");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedLoss { step });
        }
        adam.step(&mut params.values, &grad, lr);
        let done = step + 1;
        let mut row = LogRow {
            step: done,
            loss: Some(s.loss / rows.len() as f64),
            val_loss: None,
            lr,
            p,
        };
        if done % cfg.checkpoint_every == 0 || done == total {
            let (vp, _) = policy_at(cfg, done.min(total), total);
            let v = validation_loss(&params, &val_data, cfg, vp)?;
            if !v.is_finite() {
                return Err(Error::DivergedLoss { step });
            }
            log::info!(
                "step {done}/{total} loss {:.4} val {:.4}",
                s.loss / rows.len() as f64,
                v
            );
            row.val_loss = Some(v);
            if v < best_val {
                best_val = v;
                best = snapshot(&params, &adam, done);
            }
        }
        log.push(row);
    }
    Ok(TrainOutcome {
        best,
        best_val_loss: Some(best_val),
        log,
    })
}
