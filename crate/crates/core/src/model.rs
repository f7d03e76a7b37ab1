//! Autoregressive multi-embedding query encoder.
//!
//! A pre-LayerNorm causal transformer over a short sequence of vectors.
//! Position 0 holds the projected query input; position `t > 0` holds either
//! a (shuffled) ground-truth target or the model's own previous output. Each
//! position emits one unit-norm query embedding.
//!
//! Generation is incremental with a key/value cache, and the backward pass
//! walks positions in reverse so gradients can flow through fed-back
//! predictions. The code is generic over [`Real`]: training runs in `f32`,
//! gradient checks in `f64`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian_vec, Real, RngStream, UnitVector};

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding dimension.
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// MLP width as a multiple of `hidden`.
    pub ffn_mult: usize,
    /// Longest sequence the position table covers.
    pub max_len: usize,
    /// Bias terms on the input and output projections.
    pub proj_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            hidden: 128,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_len: 6,
            proj_bias: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden ({}) must be divisible by model.heads ({})",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn ffn(&self) -> usize {
        self.hidden * self.ffn_mult
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matrices get weight decay; vectors (biases, norms) do not.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2 && self.name != "pos"
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug)]
struct Offsets {
    in_w: usize,
    in_b: Option<usize>,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: Option<usize>,
}

/// Names, shapes and flat offsets of every trainable tensor.
#[derive(Clone, Debug)]
pub struct Layout {
    tensors: Vec<TensorInfo>,
    total: usize,
    offsets: Offsets,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, h, f) = (cfg.dim, cfg.hidden, cfg.ffn());
        let mut tensors = Vec::new();
        let mut total = 0usize;
        let mut add = |name: String, shape: Vec<usize>| -> usize {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorInfo {
                name,
                shape,
                offset,
            });
            offset
        };
        let in_w = add("in.w".into(), vec![h, d]);
        let in_b = cfg.proj_bias.then(|| add("in.b".into(), vec![h]));
        let pos = add("pos".into(), vec![cfg.max_len, h]);
        let layers = (0..cfg.layers)
            .map(|l| LayerOffsets {
                ln1_g: add(format!("l{l}.ln1.g"), vec![h]),
                ln1_b: add(format!("l{l}.ln1.b"), vec![h]),
                qkv_w: add(format!("l{l}.qkv.w"), vec![3 * h, h]),
                qkv_b: add(format!("l{l}.qkv.b"), vec![3 * h]),
                proj_w: add(format!("l{l}.proj.w"), vec![h, h]),
                proj_b: add(format!("l{l}.proj.b"), vec![h]),
                ln2_g: add(format!("l{l}.ln2.g"), vec![h]),
                ln2_b: add(format!("l{l}.ln2.b"), vec![h]),
                fc1_w: add(format!("l{l}.fc1.w"), vec![f, h]),
                fc1_b: add(format!("l{l}.fc1.b"), vec![f]),
                fc2_w: add(format!("l{l}.fc2.w"), vec![h, f]),
                fc2_b: add(format!("l{l}.fc2.b"), vec![h]),
            })
            .collect();
        let lnf_g = add("lnf.g".into(), vec![h]);
        let lnf_b = add("lnf.b".into(), vec![h]);
        let out_w = add("out.w".into(), vec![d, h]);
        let out_b = cfg.proj_bias.then(|| add("out.b".into(), vec![d]));
        Layout {
            tensors,
            total,
            offsets: Offsets {
                in_w,
                in_b,
                pos,
                layers,
                lnf_g,
                lnf_b,
                out_w,
                out_b,
            },
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.total
    }
}

/// Everything trained: a flat parameter vector plus its layout.
#[derive(Clone, Debug)]
pub struct ModelParams<F: Real> {
    pub config: ModelConfig,
    layout: Layout,
    pub values: Vec<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn from_values(config: ModelConfig, values: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if values.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(ModelParams {
            config,
            layout,
            values,
        })
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .map(|v| G::from_f64(v.as_f64()))
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.values[t.offset..t.offset + t.len()])
    }
}

/// Gaussian weights with std `1/√fan_in`, zero biases, unit norm gains.
/// Position embeddings use std 0.02.
pub fn init_model<F: Real>(config: &ModelConfig, stream: RngStream) -> Result<ModelParams<F>> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut values = vec![F::zero(); layout.total];
    let mut rng = stream.rng();
    for t in &layout.tensors {
        let slot = &mut values[t.offset..t.offset + t.len()];
        let std = if t.name == "pos" {
            0.02
        } else if t.shape.len() == 2 {
            1.0 / (t.shape[1] as f64).sqrt()
        } else if t.name.ends_with(".g") {
            slot.fill(F::one());
            continue;
        } else {
            continue;
        };
        for (v, g) in slot.iter_mut().zip(gaussian_vec(&mut rng, t.len())) {
            *v = F::from_f64(g * std);
        }
    }
    Ok(ModelParams {
        config: config.clone(),
        layout,
        values,
    })
}

/// What each non-initial position consumes during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepInputPolicy {
    /// Always the (shuffled) ground-truth targets.
    TeacherForced,
    /// The model's own previous output with probability `p`, per step and
    /// per example; otherwise the next shuffled target.
    ScheduledSampling(f64),
    AlwaysPredicted,
}

impl StepInputPolicy {
    fn feeds_prediction(&self, u: f64) -> bool {
        match *self {
            StepInputPolicy::TeacherForced => false,
            StepInputPolicy::ScheduledSampling(p) => u < p,
            StepInputPolicy::AlwaysPredicted => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let StepInputPolicy::ScheduledSampling(p) = *self {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "sampling probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// A batch of `rows` vectors of width `dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<F>,
}

impl<F: Real> Batch<F> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Batch {
            rows,
            dim,
            data: vec![F::zero(); rows * dim],
        }
    }

    pub fn from_rows<T: AsRef<[f32]>>(rows: &[T], dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend(r.iter().map(|&v| F::from_f64(v as f64)));
        }
        Ok(Batch {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

struct LayerCache<F> {
    ln1_xhat: Vec<F>,
    ln1_rstd: Vec<F>,
    a1: Vec<F>,
    /// Queries for this position (keys/values live in the shared cache).
    q: Vec<F>,
    /// Attention weights, `rows × heads × (t + 1)`.
    probs: Vec<F>,
    ctx: Vec<F>,
    ln2_xhat: Vec<F>,
    ln2_rstd: Vec<F>,
    a2: Vec<F>,
    act: Vec<F>,
    act_grad: Vec<F>,
}

struct StepCache<F> {
    input: Vec<F>,
    /// Rows whose input is the previous step's output.
    fed_back: Vec<bool>,
    layers: Vec<LayerCache<F>>,
    lnf_xhat: Vec<F>,
    lnf_rstd: Vec<F>,
    zf: Vec<F>,
    raw_norm: Vec<F>,
}

/// Activations recorded by a forward pass, consumed by [`backward`].
pub struct Tape<F> {
    rows: usize,
    steps: Vec<StepCache<F>>,
    keys: Vec<Vec<Vec<F>>>,
    values: Vec<Vec<Vec<F>>>,
    detach_feedback: bool,
}

/// Result of a batched forward pass.
pub struct Forward<F> {
    /// One batch of unit-norm embeddings per position.
    pub outputs: Vec<Batch<F>>,
    pub tape: Option<Tape<F>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub record: bool,
    /// Stop gradients at fed-back predictions.
    pub detach_feedback: bool,
}

/// `y[rows × out] = x[rows × in] · Wᵀ + b`, `W` stored `out × in`.
fn linear<F: Real>(
    x: &[F],
    rows: usize,
    n_in: usize,
    w: &[F],
    b: Option<&[F]>,
    n_out: usize,
) -> Vec<F> {
    let mut y = vec![F::zero(); rows * n_out];
    if let Some(b) = b {
        for r in y.chunks_exact_mut(n_out) {
            r.copy_from_slice(b);
        }
    }
    F::gemm(
        rows,
        n_in,
        n_out,
        F::one(),
        x,
        n_in as isize,
        1,
        w,
        1,
        n_in as isize,
        F::one(),
        &mut y,
        n_out as isize,
        1,
    );
    y
}

/// Accumulates `dW += dyᵀ x`, `db += Σ dy`; returns `dx = dy · W`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<F: Real>(
    dy: &[F],
    x: &[F],
    rows: usize,
    n_in: usize,
    n_out: usize,
    w: &[F],
    dw: &mut [F],
    db: Option<&mut [F]>,
    want_dx: bool,
) -> Vec<F> {
    F::gemm(
        n_out,
        rows,
        n_in,
        F::one(),
        dy,
        1,
        n_out as isize,
        x,
        n_in as isize,
        1,
        F::one(),
        dw,
        n_in as isize,
        1,
    );
    if let Some(db) = db {
        for r in dy.chunks_exact(n_out) {
            for (acc, &v) in db.iter_mut().zip(r) {
                *acc = *acc + v;
            }
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![F::zero(); rows * n_in];
    F::gemm(
        rows,
        n_out,
        n_in,
        F::one(),
        dy,
        n_out as isize,
        1,
        w,
        n_in as isize,
        1,
        F::zero(),
        &mut dx,
        n_in as isize,
        1,
    );
    dx
}

/// Returns `(y, xhat, rstd)`.
fn layer_norm<F: Real>(x: &[F], width: usize, g: &[F], b: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / width;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_w = 1.0 / width as f64;
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = xr.iter().map(|v| v.as_f64()).sum::<f64>() * inv_w;
        let var = xr.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() * inv_w;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = F::from_f64(rs);
        for i in 0..width {
            let xh = F::from_f64((xr[i].as_f64() - mean) * rs);
            xhat[r * width + i] = xh;
            y[r * width + i] = g[i] * xh + b[i];
        }
    }
    (y, xhat, rstd)
}

fn layer_norm_backward<F: Real>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    width: usize,
    g: &[F],
    dg: &mut [F],
    db: &mut [F],
) -> Vec<F> {
    let rows = rstd.len();
    let mut dx = vec![F::zero(); dy.len()];
    let inv_w = 1.0 / width as f64;
    for r in 0..rows {
        let s = r * width;
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for i in 0..width {
            let dyi = dy[s + i];
            dg[i] = dg[i] + dyi * xhat[s + i];
            db[i] = db[i] + dyi;
            let dxh = (dyi * g[i]).as_f64();
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhat[s + i].as_f64();
        }
        let rs = rstd[r].as_f64();
        for i in 0..width {
            let dxh = (dy[s + i] * g[i]).as_f64();
            let v = rs * (dxh - sum_dxh * inv_w - xhat[s + i].as_f64() * sum_dxh_xh * inv_w);
            dx[s + i] = F::from_f64(v);
        }
    }
    dx
}

fn add_assign<F: Real>(acc: &mut [F], v: &[F]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

impl<F: Real> ModelParams<F> {
    fn slice(&self, offset: usize, len: usize) -> &[F] {
        &self.values[offset..offset + len]
    }

    /// Runs `steps` positions for a batch.
    ///
    /// `next_inputs(t, outputs_so_far)` returns, for position `t >= 1`, the
    /// input rows and a per-row flag telling whether the row is the
    /// previous output (for gradient routing).
    pub(crate) fn run(
        &self,
        query: &Batch<F>,
        steps: usize,
        opts: ForwardOptions,
        mut next_inputs: impl FnMut(usize, &Batch<F>) -> (Batch<F>, Vec<bool>),
    ) -> Result<Forward<F>> {
        let cfg = &self.config;
        let (d, h, f, nh) = (cfg.dim, cfg.hidden, cfg.ffn(), cfg.heads);
        let hd = h / nh;
        if query.dim != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: query.dim,
            });
        }
        if steps > cfg.max_len {
            return Err(Error::TooLong {
                requested: steps,
                max: cfg.max_len,
            });
        }
        let rows = query.rows;
        let off = &self.layout.offsets;
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());

        let mut keys: Vec<Vec<Vec<F>>> = vec![Vec::with_capacity(steps); cfg.layers];
        let mut vals: Vec<Vec<Vec<F>>> = vec![Vec::with_capacity(steps); cfg.layers];
        let mut outputs: Vec<Batch<F>> = Vec::with_capacity(steps);
        let mut caches = Vec::with_capacity(if opts.record { steps } else { 0 });

        for t in 0..steps {
            let (input, fed_back) = if t == 0 {
                (query.clone(), vec![false; rows])
            } else {
                let (b, fb) = next_inputs(t, &outputs[t - 1]);
                if b.dim != d || b.rows != rows {
                    return Err(Error::DimMismatch {
                        expected: d,
                        got: b.dim,
                    });
                }
                (b, fb)
            };
            let mut z = linear(
                &input.data,
                rows,
                d,
                self.slice(off.in_w, h * d),
                off.in_b.map(|o| self.slice(o, h)),
                h,
            );
            let pos = self.slice(off.pos + t * h, h);
            for r in z.chunks_exact_mut(h) {
                add_assign(r, pos);
            }

            let mut layer_caches = Vec::with_capacity(cfg.layers);
            for (l, lo) in off.layers.iter().enumerate() {
                let (a1, ln1_xhat, ln1_rstd) =
                    layer_norm(&z, h, self.slice(lo.ln1_g, h), self.slice(lo.ln1_b, h));
                let qkv = linear(
                    &a1,
                    rows,
                    h,
                    self.slice(lo.qkv_w, 3 * h * h),
                    Some(self.slice(lo.qkv_b, 3 * h)),
                    3 * h,
                );
                let mut q = vec![F::zero(); rows * h];
                let mut k = vec![F::zero(); rows * h];
                let mut v = vec![F::zero(); rows * h];
                for r in 0..rows {
                    let src = &qkv[r * 3 * h..(r + 1) * 3 * h];
                    q[r * h..(r + 1) * h].copy_from_slice(&src[..h]);
                    k[r * h..(r + 1) * h].copy_from_slice(&src[h..2 * h]);
                    v[r * h..(r + 1) * h].copy_from_slice(&src[2 * h..]);
                }
                keys[l].push(k);
                vals[l].push(v);

                let span = t + 1;
                let mut probs = vec![F::zero(); rows * nh * span];
                let mut ctx = vec![F::zero(); rows * h];
                for r in 0..rows {
                    for head in 0..nh {
                        let hs = r * h + head * hd;
                        let qh = &q[hs..hs + hd];
                        let p = &mut probs[(r * nh + head) * span..(r * nh + head + 1) * span];
                        let mut max = F::neg_infinity();
                        for j in 0..span {
                            let kh = &keys[l][j][hs..hs + hd];
                            let s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<F>() * scale;
                            p[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                        let mut denom = F::zero();
                        for pj in p.iter_mut() {
                            *pj = (*pj - max).exp();
                            denom = denom + *pj;
                        }
                        for pj in p.iter_mut() {
                            *pj = *pj / denom;
                        }
                        let c = &mut ctx[hs..hs + hd];
                        for j in 0..span {
                            let vh = &vals[l][j][hs..hs + hd];
                            for (ci, &vi) in c.iter_mut().zip(vh) {
                                *ci = *ci + p[j] * vi;
                            }
                        }
                    }
                }
                let attn = linear(
                    &ctx,
                    rows,
                    h,
                    self.slice(lo.proj_w, h * h),
                    Some(self.slice(lo.proj_b, h)),
                    h,
                );
                add_assign(&mut z, &attn);

                let (a2, ln2_xhat, ln2_rstd) =
                    layer_norm(&z, h, self.slice(lo.ln2_g, h), self.slice(lo.ln2_b, h));
                let pre = linear(
                    &a2,
                    rows,
                    h,
                    self.slice(lo.fc1_w, f * h),
                    Some(self.slice(lo.fc1_b, f)),
                    f,
                );
                let mut act = vec![F::zero(); pre.len()];
                let mut act_grad = if opts.record {
                    vec![F::zero(); pre.len()]
                } else {
                    Vec::new()
                };
                for (i, &u) in pre.iter().enumerate() {
                    let (v, g) = u.gelu_with_grad();
                    act[i] = v;
                    if opts.record {
                        act_grad[i] = g;
                    }
                }
                let mlp = linear(
                    &act,
                    rows,
                    f,
                    self.slice(lo.fc2_w, h * f),
                    Some(self.slice(lo.fc2_b, h)),
                    h,
                );
                add_assign(&mut z, &mlp);

                if opts.record {
                    layer_caches.push(LayerCache {
                        ln1_xhat,
                        ln1_rstd,
                        a1,
                        q,
                        probs,
                        ctx,
                        ln2_xhat,
                        ln2_rstd,
                        a2,
                        act,
                        act_grad,
                    });
                }
            }

            let (zf, lnf_xhat, lnf_rstd) =
                layer_norm(&z, h, self.slice(off.lnf_g, h), self.slice(off.lnf_b, h));
            let mut out = linear(
                &zf,
                rows,
                h,
                self.slice(off.out_w, d * h),
                off.out_b.map(|o| self.slice(o, d)),
                d,
            );
            let mut raw_norm = vec![F::zero(); rows];
            for (r, row) in out.chunks_exact_mut(d).enumerate() {
                let n = row
                    .iter()
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt()
                    .max(NORM_FLOOR);
                raw_norm[r] = F::from_f64(n);
                for v in row.iter_mut() {
                    *v = F::from_f64(v.as_f64() / n);
                }
            }
            outputs.push(Batch {
                rows,
                dim: d,
                data: out,
            });
            if opts.record {
                caches.push(StepCache {
                    input: input.data,
                    fed_back,
                    layers: layer_caches,
                    lnf_xhat,
                    lnf_rstd,
                    zf,
                    raw_norm,
                });
            }
        }

        let tape = opts.record.then_some(Tape {
            rows,
            steps: caches,
            keys,
            values: vals,
            detach_feedback: opts.detach_feedback,
        });
        Ok(Forward { outputs, tape })
    }

    /// Exact gradient of a scalar loss with respect to every parameter.
    ///
    /// `d_outputs[t]` is the loss gradient with respect to the unit-norm
    /// outputs of position `t`.
    pub fn backward(&self, tape: Option<&Tape<F>>, d_outputs: &[Batch<F>]) -> Result<Vec<F>> {
        let tape = tape.ok_or(Error::NoRecordedForward)?;
        let cfg = &self.config;
        let (d, h, f, nh) = (cfg.dim, cfg.hidden, cfg.ffn(), cfg.heads);
        let hd = h / nh;
        let rows = tape.rows;
        let steps = tape.steps.len();
        if d_outputs.len() != steps {
            return Err(Error::CountMismatch {
                expected: steps,
                got: d_outputs.len(),
            });
        }
        let off = &self.layout.offsets;
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());
        let mut grad = vec![F::zero(); self.values.len()];

        let mut d_keys: Vec<Vec<Vec<F>>> = vec![vec![vec![F::zero(); rows * h]; steps]; cfg.layers];
        let mut d_vals = d_keys.clone();
        // Extra gradient on each position's output arriving from feedback.
        let mut d_feedback: Vec<Vec<F>> = vec![vec![F::zero(); rows * d]; steps];

        for t in (0..steps).rev() {
            let sc = &tape.steps[t];
            let o = &d_outputs[t];
            if o.rows != rows || o.dim != d {
                return Err(Error::ShapeMismatch("output gradient batch shape".into()));
            }
            // Through the unit normalization: dr = (g − o (o·g)) / |r|.
            let outputs = self.output_rows(sc, d);
            let mut dr = vec![F::zero(); rows * d];
            for r in 0..rows {
                let g: Vec<f64> = (0..d)
                    .map(|i| (o.data[r * d + i] + d_feedback[t][r * d + i]).as_f64())
                    .collect();
                let u = &outputs[r * d..(r + 1) * d];
                let proj: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
                let n = sc.raw_norm[r].as_f64();
                for i in 0..d {
                    dr[r * d + i] = F::from_f64((g[i] - u[i] * proj) / n);
                }
            }
            let (dw, rest) = split_grad(&mut grad, off.out_w, d * h);
            let dzf = linear_backward(
                &dr,
                &sc.zf,
                rows,
                h,
                d,
                self.slice(off.out_w, d * h),
                dw,
                off.out_b
                    .map(|o| &mut rest[o - off.out_w - d * h..o - off.out_w - d * h + d]),
                true,
            );
            let mut dz = {
                let (dg, db) = two_slices(&mut grad, off.lnf_g, off.lnf_b, h);
                layer_norm_backward(
                    &dzf,
                    &sc.lnf_xhat,
                    &sc.lnf_rstd,
                    h,
                    self.slice(off.lnf_g, h),
                    dg,
                    db,
                )
            };

            for l in (0..cfg.layers).rev() {
                let lo = off.layers[l];
                let lc = &sc.layers[l];
                // MLP sub-block.
                let (dw2, db2) = weight_and_bias(&mut grad, lo.fc2_w, h * f, lo.fc2_b, h);
                let mut dact = linear_backward(
                    &dz,
                    &lc.act,
                    rows,
                    f,
                    h,
                    self.slice(lo.fc2_w, h * f),
                    dw2,
                    Some(db2),
                    true,
                );
                for (g, &s) in dact.iter_mut().zip(&lc.act_grad) {
                    *g = *g * s;
                }
                let (dw1, db1) = weight_and_bias(&mut grad, lo.fc1_w, f * h, lo.fc1_b, f);
                let da2 = linear_backward(
                    &dact,
                    &lc.a2,
                    rows,
                    h,
                    f,
                    self.slice(lo.fc1_w, f * h),
                    dw1,
                    Some(db1),
                    true,
                );
                let (dg, db) = two_slices(&mut grad, lo.ln2_g, lo.ln2_b, h);
                let dz_ln2 = layer_norm_backward(
                    &da2,
                    &lc.ln2_xhat,
                    &lc.ln2_rstd,
                    h,
                    self.slice(lo.ln2_g, h),
                    dg,
                    db,
                );
                add_assign(&mut dz, &dz_ln2);

                // Attention sub-block.
                let (dwp, dbp) = weight_and_bias(&mut grad, lo.proj_w, h * h, lo.proj_b, h);
                let dctx = linear_backward(
                    &dz,
                    &lc.ctx,
                    rows,
                    h,
                    h,
                    self.slice(lo.proj_w, h * h),
                    dwp,
                    Some(dbp),
                    true,
                );
                let span = t + 1;
                let mut dq = vec![F::zero(); rows * h];
                for r in 0..rows {
                    for head in 0..nh {
                        let hs = r * h + head * hd;
                        let p = &lc.probs[(r * nh + head) * span..(r * nh + head + 1) * span];
                        let dc = &dctx[hs..hs + hd];
                        let mut dp = vec![F::zero(); span];
                        for j in 0..span {
                            let vh = &tape.values[l][j][hs..hs + hd];
                            dp[j] = dc.iter().zip(vh).map(|(&a, &b)| a * b).sum();
                            let dv = &mut d_vals[l][j][hs..hs + hd];
                            for (g, &c) in dv.iter_mut().zip(dc) {
                                *g = *g + p[j] * c;
                            }
                        }
                        let dot_pdp: F = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                        let qh = &lc.q[hs..hs + hd];
                        for j in 0..span {
                            let ds = p[j] * (dp[j] - dot_pdp) * scale;
                            let kh = &tape.keys[l][j][hs..hs + hd];
                            for (g, &k) in dq[hs..hs + hd].iter_mut().zip(kh) {
                                *g = *g + ds * k;
                            }
                            let dk = &mut d_keys[l][j][hs..hs + hd];
                            for (g, &qv) in dk.iter_mut().zip(qh) {
                                *g = *g + ds * qv;
                            }
                        }
                    }
                }
                let mut dqkv = vec![F::zero(); rows * 3 * h];
                for r in 0..rows {
                    let dst = &mut dqkv[r * 3 * h..(r + 1) * 3 * h];
                    dst[..h].copy_from_slice(&dq[r * h..(r + 1) * h]);
                    dst[h..2 * h].copy_from_slice(&d_keys[l][t][r * h..(r + 1) * h]);
                    dst[2 * h..].copy_from_slice(&d_vals[l][t][r * h..(r + 1) * h]);
                }
                let (dwq, dbq) = weight_and_bias(&mut grad, lo.qkv_w, 3 * h * h, lo.qkv_b, 3 * h);
                let da1 = linear_backward(
                    &dqkv,
                    &lc.a1,
                    rows,
                    h,
                    3 * h,
                    self.slice(lo.qkv_w, 3 * h * h),
                    dwq,
                    Some(dbq),
                    true,
                );
                let (dg, db) = two_slices(&mut grad, lo.ln1_g, lo.ln1_b, h);
                let dz_ln1 = layer_norm_backward(
                    &da1,
                    &lc.ln1_xhat,
                    &lc.ln1_rstd,
                    h,
                    self.slice(lo.ln1_g, h),
                    dg,
                    db,
                );
                add_assign(&mut dz, &dz_ln1);
            }

            for r in dz.chunks_exact(h) {
                add_assign(&mut grad[off.pos + t * h..off.pos + (t + 1) * h], r);
            }
            let feeds = t > 0 && !tape.detach_feedback && sc.fed_back.iter().any(|&b| b);
            let (dwi, rest) = split_grad(&mut grad, off.in_w, h * d);
            let de = linear_backward(
                &dz,
                &sc.input,
                rows,
                d,
                h,
                self.slice(off.in_w, h * d),
                dwi,
                off.in_b
                    .map(|o| &mut rest[o - off.in_w - h * d..o - off.in_w - h * d + h]),
                feeds,
            );
            if feeds {
                for (r, &fb) in sc.fed_back.iter().enumerate() {
                    if fb {
                        add_assign(
                            &mut d_feedback[t - 1][r * d..(r + 1) * d],
                            &de[r * d..(r + 1) * d],
                        );
                    }
                }
            }
        }
        Ok(grad)
    }

    fn output_rows(&self, sc: &StepCache<F>, d: usize) -> Vec<f64> {
        // Recompute the normalized output from the cached final activations.
        let off = &self.layout.offsets;
        let h = self.config.hidden;
        let rows = sc.raw_norm.len();
        let raw = linear(
            &sc.zf,
            rows,
            h,
            self.slice(off.out_w, d * h),
            off.out_b.map(|o| self.slice(o, d)),
            d,
        );
        raw.chunks_exact(d)
            .zip(&sc.raw_norm)
            .flat_map(|(row, &n)| {
                let n = n.as_f64();
                row.iter().map(move |v| v.as_f64() / n)
            })
            .collect()
    }
}

fn split_grad<F>(grad: &mut [F], offset: usize, len: usize) -> (&mut [F], &mut [F]) {
    let (_, tail) = grad.split_at_mut(offset);
    tail.split_at_mut(len)
}

/// Disjoint `(weight, bias)` gradient slices, bias stored after weight.
fn weight_and_bias<F>(
    grad: &mut [F],
    w_off: usize,
    w_len: usize,
    b_off: usize,
    b_len: usize,
) -> (&mut [F], &mut [F]) {
    debug_assert!(b_off >= w_off + w_len);
    let (w, rest) = split_grad(grad, w_off, w_len);
    let b_start = b_off - w_off - w_len;
    (w, &mut rest[b_start..b_start + b_len])
}

/// Disjoint gain/bias slices of width `h`, `b_off > g_off`.
fn two_slices<F>(grad: &mut [F], g_off: usize, b_off: usize, h: usize) -> (&mut [F], &mut [F]) {
    weight_and_bias(grad, g_off, h, b_off, h)
}

/// Draws the per-example target order and the per-step feedback coins.
///
/// The same number of draws is made for every policy, so two policies
/// given equal streams see identical randomness.
pub(crate) struct SequencePlan {
    /// `order[r][t]`: target slot fed at position `t + 1` of example `r`.
    pub order: Vec<Vec<usize>>,
    /// `coins[t - 1][r]`: uniform draw for position `t`.
    pub coins: Vec<Vec<f64>>,
}

impl SequencePlan {
    pub fn draw(rows: usize, m: usize, steps: usize, rng: &mut impl Rng) -> Self {
        let order = (0..rows)
            .map(|_| {
                let mut o: Vec<usize> = (0..m).collect();
                o.shuffle(rng);
                o
            })
            .collect();
        let coins = (1..steps.max(1))
            .map(|_| (0..rows).map(|_| rng.random::<f64>()).collect())
            .collect();
        SequencePlan { order, coins }
    }
}

/// Batched training forward pass.
///
/// `targets[r]` holds the `m` unit targets of example `r` in canonical
/// order; the pass shuffles them per example before teacher forcing.
pub fn forward_batch<F: Real>(
    params: &ModelParams<F>,
    inputs: &Batch<F>,
    targets: &[Vec<&[f32]>],
    steps: usize,
    policy: StepInputPolicy,
    rng: &mut impl Rng,
    opts: ForwardOptions,
) -> Result<Forward<F>> {
    policy.validate()?;
    let rows = inputs.rows;
    let d = params.config.dim;
    if targets.len() != rows {
        return Err(Error::CountMismatch {
            expected: rows,
            got: targets.len(),
        });
    }
    let m = targets.first().map_or(0, |t| t.len());
    if targets.iter().any(|t| t.len() != m) {
        return Err(Error::ShapeMismatch(
            "examples have different target counts".into(),
        ));
    }
    if steps > 1 && m + 1 < steps {
        return Err(Error::CountMismatch {
            expected: steps - 1,
            got: m,
        });
    }
    let plan = SequencePlan::draw(rows, m, steps, rng);
    params.run(inputs, steps, opts, |t, prev| {
        let mut next = Batch::zeros(rows, d);
        let mut fed = vec![false; rows];
        for r in 0..rows {
            if policy.feeds_prediction(plan.coins[t - 1][r]) {
                next.row_mut(r).copy_from_slice(prev.row(r));
                fed[r] = true;
            } else {
                let src = targets[r][plan.order[r][t - 1]];
                for (dst, &v) in next.row_mut(r).iter_mut().zip(src) {
                    *dst = F::from_f64(v as f64);
                }
            }
        }
        (next, fed)
    })
}

/// Single-example forward pass returning unit embeddings.
pub fn forward_sequence<F: Real>(
    params: &ModelParams<F>,
    input: &[f32],
    targets: &[UnitVector],
    policy: StepInputPolicy,
    stream: RngStream,
) -> Result<Vec<UnitVector>> {
    let d = params.config.dim;
    if targets.iter().any(|t| t.dim() != d) {
        return Err(Error::DimMismatch {
            expected: d,
            got: targets
                .iter()
                .map(|t| t.dim())
                .find(|&x| x != d)
                .unwrap_or(d),
        });
    }
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let batch = Batch::from_rows(&[input], d)?;
    let views = vec![targets.iter().map(|t| t.as_slice()).collect::<Vec<_>>()];
    let fwd = forward_batch(
        params,
        &batch,
        &views,
        targets.len(),
        policy,
        &mut stream.rng(),
        ForwardOptions::default(),
    )?;
    Ok(to_unit_vectors(&fwd.outputs, 0))
}

fn to_unit_vectors<F: Real>(outputs: &[Batch<F>], row: usize) -> Vec<UnitVector> {
    outputs
        .iter()
        .map(|b| {
            UnitVector::from_normalized(b.row(row).iter().map(|v| v.as_f64() as f32).collect())
        })
        .collect()
}

/// Free-running generation of `m_pred` embeddings per input row.
pub fn decode_batch<F: Real>(
    params: &ModelParams<F>,
    inputs: &Batch<F>,
    m_pred: usize,
) -> Result<Vec<Vec<UnitVector>>> {
    if m_pred == 0 {
        return Err(Error::Config("m_pred must be >= 1".into()));
    }
    let rows = inputs.rows;
    let fwd = params.run(inputs, m_pred, ForwardOptions::default(), |_, prev| {
        (prev.clone(), vec![true; rows])
    })?;
    Ok((0..rows)
        .map(|r| to_unit_vectors(&fwd.outputs, r))
        .collect())
}

pub fn decode<F: Real>(
    params: &ModelParams<F>,
    input: &[f32],
    m_pred: usize,
) -> Result<Vec<UnitVector>> {
    let batch = Batch::from_rows(&[input], params.config.dim)?;
    Ok(decode_batch(params, &batch, m_pred)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, normalize};

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 6,
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            max_len: 4,
            proj_bias: true,
            seed: 0,
        }
    }

    fn rand_units(stream: RngStream, n: usize, d: usize) -> Vec<UnitVector> {
        let mut rng = stream.rng();
        (0..n)
            .map(|_| {
                let v: Vec<f32> = gaussian_vec(&mut rng, d)
                    .iter()
                    .map(|&x| x as f32)
                    .collect();
                normalize(&v).unwrap()
            })
            .collect()
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let cfg = ModelConfig {
            dim: 64,
            hidden: 128,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_len: 6,
            proj_bias: true,
            seed: 0,
        };
        let (d, h, f) = (64, 128, 512);
        let per_layer = 2 * h + 3 * h * h + 3 * h + h * h + h + 2 * h + f * h + f + h * f + h;
        let expected = h * d + h + 6 * h + 2 * per_layer + 2 * h + d * h + d;
        let p: ModelParams<f32> = init_model(&cfg, RngStream::new(0, 0)).unwrap();
        assert_eq!(p.layout().num_params(), expected);
        assert_eq!(p.values.len(), expected);
        assert!(p.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let a: ModelParams<f32> = init_model(&tiny(), RngStream::new(4, 0)).unwrap();
        let b: ModelParams<f32> = init_model(&tiny(), RngStream::new(4, 0)).unwrap();
        assert_eq!(a.values, b.values);
        let bad = ModelConfig {
            layers: 0,
            ..tiny()
        };
        assert!(matches!(
            init_model::<f32>(&bad, RngStream::new(0, 0)),
            Err(Error::Config(_))
        ));
        let bad = ModelConfig { heads: 3, ..tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_step_and_unit_norm_outputs() {
        let p: ModelParams<f64> = init_model(&tiny(), RngStream::new(1, 0)).unwrap();
        let x = [0.5f32, -1.0, 2.0, 0.0, 1.0, 0.3];
        let t = rand_units(RngStream::new(2, 0), 1, 6);
        let out = forward_sequence(
            &p,
            &x,
            &t,
            StepInputPolicy::TeacherForced,
            RngStream::new(0, 0),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        for u in decode(&p, &x, 4).unwrap() {
            assert!((u.norm() - 1.0).abs() < 1e-6);
        }
        assert!(matches!(decode(&p, &x, 5), Err(Error::TooLong { .. })));
    }

    #[test]
    fn policy_degeneracies() {
        let p: ModelParams<f64> = init_model(&tiny(), RngStream::new(1, 0)).unwrap();
        let x = [0.5f32, -1.0, 2.0, 0.0, 1.0, 0.3];
        let t = rand_units(RngStream::new(3, 0), 3, 6);
        let s = RngStream::new(9, 9);
        let run = |pol| forward_sequence(&p, &x, &t, pol, s).unwrap();
        assert_eq!(
            run(StepInputPolicy::TeacherForced),
            run(StepInputPolicy::ScheduledSampling(0.0))
        );
        assert_eq!(
            run(StepInputPolicy::AlwaysPredicted),
            run(StepInputPolicy::ScheduledSampling(1.0))
        );
        assert_eq!(
            run(StepInputPolicy::AlwaysPredicted),
            decode(&p, &x, 3).unwrap()
        );
        let other = rand_units(RngStream::new(4, 0), 3, 6);
        assert_eq!(
            forward_sequence(&p, &x, &other, StepInputPolicy::AlwaysPredicted, s).unwrap(),
            run(StepInputPolicy::AlwaysPredicted)
        );
        assert!(StepInputPolicy::ScheduledSampling(1.5).validate().is_err());
    }

    #[test]
    fn causality_under_teacher_forcing() {
        let p: ModelParams<f64> = init_model(&tiny(), RngStream::new(1, 0)).unwrap();
        let x = [0.5f32, -1.0, 2.0, 0.0, 1.0, 0.3];
        let t = rand_units(RngStream::new(3, 0), 3, 6);
        let s = RngStream::new(5, 0);
        let base = forward_sequence(&p, &x, &t, StepInputPolicy::TeacherForced, s).unwrap();
        // The plan decides which target feeds position 2; perturbing the
        // slot fed last must leave the first two outputs untouched.
        let plan = SequencePlan::draw(1, 3, 3, &mut s.rng());
        let last_slot = plan.order[0][1];
        let mut t2 = t.clone();
        t2[last_slot] = rand_units(RngStream::new(6, 0), 1, 6).remove(0);
        let pert = forward_sequence(&p, &x, &t2, StepInputPolicy::TeacherForced, s).unwrap();
        assert_eq!(base[..2], pert[..2]);
        assert_ne!(base[2], pert[2]);
    }

    /// Loss `Σ_t <w_t, o_t>` for fixed random directions, as a probe.
    fn probe_loss(p: &ModelParams<f64>, policy: StepInputPolicy, detach: bool) -> (f64, Vec<f64>) {
        let rows = 3;
        let d = p.config.dim;
        let mut rng = RngStream::new(77, 0).rng();
        let inputs: Vec<Vec<f32>> = (0..rows)
            .map(|_| {
                gaussian_vec(&mut rng, d)
                    .iter()
                    .map(|&v| v as f32)
                    .collect()
            })
            .collect();
        let targets: Vec<Vec<UnitVector>> = (0..rows)
            .map(|r| rand_units(RngStream::new(r as u64, 1), 3, d))
            .collect();
        let views: Vec<Vec<&[f32]>> = targets
            .iter()
            .map(|ts| ts.iter().map(|t| t.as_slice()).collect())
            .collect();
        let w: Vec<Batch<f64>> = (0..3)
            .map(|_| Batch {
                rows,
                dim: d,
                data: gaussian_vec(&mut rng, rows * d),
            })
            .collect();
        let fwd = forward_batch(
            p,
            &Batch::from_rows(&inputs, d).unwrap(),
            &views,
            3,
            policy,
            &mut RngStream::new(5, 5).rng(),
            ForwardOptions {
                record: true,
                detach_feedback: detach,
            },
        )
        .unwrap();
        let loss = fwd
            .outputs
            .iter()
            .zip(&w)
            .map(|(o, w)| o.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let grad = p.backward(fwd.tape.as_ref(), &w).unwrap();
        (loss, grad)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p: ModelParams<f64> = init_model(&tiny(), RngStream::new(2, 0)).unwrap();
        for policy in [
            StepInputPolicy::TeacherForced,
            StepInputPolicy::ScheduledSampling(0.5),
            StepInputPolicy::AlwaysPredicted,
        ] {
            let (_, grad) = probe_loss(&p, policy, false);
            let err = grad_check(
                |theta| {
                    let q = ModelParams::from_values(p.config.clone(), theta.to_vec()).unwrap();
                    probe_loss(&q, policy, false).0
                },
                &grad,
                &p.values,
                1e-5,
                300,
                RngStream::new(3, 0),
            )
            .unwrap();
            assert!(err < 1e-4, "{policy:?}: {err}");
        }
    }

    #[test]
    fn detached_feedback_drops_the_feedback_path() {
        let p: ModelParams<f64> = init_model(&tiny(), RngStream::new(2, 0)).unwrap();
        let (la, ga) = probe_loss(&p, StepInputPolicy::AlwaysPredicted, false);
        let (lb, gb) = probe_loss(&p, StepInputPolicy::AlwaysPredicted, true);
        assert_eq!(la, lb);
        assert_ne!(ga, gb);
        let (_, gt) = probe_loss(&p, StepInputPolicy::TeacherForced, false);
        let (_, gtd) = probe_loss(&p, StepInputPolicy::TeacherForced, true);
        assert_eq!(gt, gtd);
    }

    #[test]
    fn backward_requires_a_tape() {
        let p: ModelParams<f64> = init_model(&tiny(), RngStream::new(2, 0)).unwrap();
        assert!(matches!(
            p.backward(None, &[]),
            Err(Error::NoRecordedForward)
        ));
    }
}
