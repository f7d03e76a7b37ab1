//! Synthetic multi-target retrieval data.
//!
//! Every query is an input vector `x` drawn from one of five distributions.
//! Its `m` targets are `T_1(x) .. T_m(x)` for a fixed family of transforms
//! (rotations, or two-layer GeLU MLPs). The retrieval corpus holds every
//! normalized target plus Gaussian distractors.
//!
//! Query ids are global: the training pool (train then validation) comes
//! first, test queries follow. Target `slot` of query `q` has corpus id
//! `q * m + slot`.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::tensor::{
    gaussian_vec, gelu, norm, normalize, normalize_f64, sample_rotation, Matrix, RngStream,
    UnitVector,
};

pub const NUM_TRANSFORMS: usize = 5;

/// Frobenius threshold (relative to `d`) for accepting MLP init rotations.
pub const FROBENIUS_TOL: f64 = 0.05;
pub const MAX_ORTHO_ATTEMPTS: usize = 1000;

const DATASET_MAGIC: &[u8; 4] = b"AMER";
const CORPUS_MAGIC: &[u8; 8] = b"AMERCORP";
const TRANSFORM_MAGIC: &[u8; 8] = b"AMERXFRM";
const FORMAT_VERSION: u32 = 1;

// Stream purposes.
const P_TRANSFORM: u64 = 1;
const P_COVARIANCE: u64 = 2;
const P_TRAIN_INPUT: u64 = 3;
const P_TEST_INPUT: u64 = 4;
const P_DISTRACTOR: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    StandardGaussian,
    HighVarGaussian,
    CorrelatedGaussian,
    UniformCube,
    LaplacePlusGaussian,
}

impl InputKind {
    pub const ALL: [InputKind; 5] = [
        InputKind::StandardGaussian,
        InputKind::HighVarGaussian,
        InputKind::CorrelatedGaussian,
        InputKind::UniformCube,
        InputKind::LaplacePlusGaussian,
    ];
}

/// An input distribution with its parameters resolved.
#[derive(Clone, Debug)]
pub enum InputDistribution {
    StandardGaussian,
    /// `N(0, variance · I)`.
    HighVarGaussian {
        variance: f64,
    },
    /// `N(0, 0.5·AAᵀ + 0.1·I)`, stored as its lower Cholesky factor.
    CorrelatedGaussian {
        cholesky: Matrix,
    },
    UniformCube {
        bound: f64,
    },
    /// Laplace(0, scale) plus `N(0, noise_variance)` per coordinate.
    LaplacePlusGaussian {
        scale: f64,
        noise_variance: f64,
    },
}

impl InputDistribution {
    /// Resolves `kind` with the standard parameters. The correlated
    /// covariance draws its random factor `A` from `stream`.
    pub fn new(kind: InputKind, d: usize, stream: RngStream) -> Result<Self> {
        Ok(match kind {
            InputKind::StandardGaussian => InputDistribution::StandardGaussian,
            InputKind::HighVarGaussian => InputDistribution::HighVarGaussian { variance: 4.0 },
            InputKind::CorrelatedGaussian => InputDistribution::CorrelatedGaussian {
                cholesky: correlated_cholesky(d, stream)?,
            },
            InputKind::UniformCube => InputDistribution::UniformCube { bound: 2.0 },
            InputKind::LaplacePlusGaussian => InputDistribution::LaplacePlusGaussian {
                scale: 1.0,
                noise_variance: 0.1,
            },
        })
    }

    pub fn kind(&self) -> InputKind {
        match self {
            InputDistribution::StandardGaussian => InputKind::StandardGaussian,
            InputDistribution::HighVarGaussian { .. } => InputKind::HighVarGaussian,
            InputDistribution::CorrelatedGaussian { .. } => InputKind::CorrelatedGaussian,
            InputDistribution::UniformCube { .. } => InputKind::UniformCube,
            InputDistribution::LaplacePlusGaussian { .. } => InputKind::LaplacePlusGaussian,
        }
    }

    pub fn sample(&self, d: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            InputDistribution::StandardGaussian => gaussian_vec(rng, d),
            InputDistribution::HighVarGaussian { variance } => {
                let s = variance.sqrt();
                (0..d)
                    .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            InputDistribution::CorrelatedGaussian { cholesky } => {
                let z = gaussian_vec(rng, d);
                cholesky.matvec(&z).expect("cholesky factor is d x d")
            }
            InputDistribution::UniformCube { bound } => {
                (0..d).map(|_| rng.random_range(-bound..=*bound)).collect()
            }
            InputDistribution::LaplacePlusGaussian {
                scale,
                noise_variance,
            } => {
                let s = noise_variance.sqrt();
                (0..d)
                    .map(|_| {
                        // Inverse CDF of the Laplace distribution.
                        let u: f64 = rng.random::<f64>() - 0.5;
                        let lap = -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
                        lap + s * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect()
            }
        }
    }
}

/// Lower Cholesky factor of `0.5·AAᵀ + 0.1·I` for Gaussian `A`.
fn correlated_cholesky(d: usize, stream: RngStream) -> Result<Matrix> {
    let mut rng = stream.rng();
    let a = nalgebra::DMatrix::from_row_slice(d, d, &gaussian_vec(&mut rng, d * d));
    let cov = &a * a.transpose() * 0.5 + nalgebra::DMatrix::<f64>::identity(d, d) * 0.1;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Config("correlated covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            data.push(l[(i, j)]);
        }
    }
    Matrix::new(d, d, data)
}

/// `n` i.i.d. raw draws; draw `i` uses its own stream so the result does not
/// depend on evaluation order.
pub fn sample_inputs(
    dist: &InputDistribution,
    n: usize,
    d: usize,
    stream: RngStream,
) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| dist.sample(d, &mut stream.derive(0, i as u64).rng()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Linear,
    Mlp,
}

impl TransformKind {
    fn code(self) -> u8 {
        match self {
            TransformKind::Linear => 0,
            TransformKind::Mlp => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TransformKind::Linear),
            1 => Some(TransformKind::Mlp),
            _ => None,
        }
    }
}

/// One target-generating map. Linear: `T x`. Mlp: `W2 · gelu(W1 · x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// 1-based position in the family.
    pub index: usize,
    pub weights: Vec<Matrix>,
}

impl TransformSpec {
    pub fn dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            TransformKind::Linear => self.weights[0].matvec(x),
            TransformKind::Mlp => {
                let hidden = gelu(&self.weights[0].matvec(x)?);
                self.weights[1].matvec(&hidden)
            }
        }
    }
}

pub fn apply_transform(spec: &TransformSpec, x: &[f64]) -> Result<Vec<f64>> {
    spec.apply(x)
}

/// Linear: `[I, M_a, M_b, −M_a, −M_b]`. Mlp: MLPs whose two weight
/// matrices both start from `M_a, M_b, M_c, −M_b, −M_c`, where `M_b` and
/// `M_c` are resampled until Frobenius-orthogonal to earlier picks.
pub fn make_transforms(
    kind: TransformKind,
    d: usize,
    stream: RngStream,
) -> Result<Vec<TransformSpec>> {
    if d < 2 {
        return Err(Error::Config(format!("transforms need d >= 2, got {d}")));
    }
    let bases: Vec<Matrix> = match kind {
        TransformKind::Linear => {
            let ma = sample_rotation(d, stream.derive(P_TRANSFORM, 0))?;
            let mb = sample_rotation(d, stream.derive(P_TRANSFORM, 1))?;
            vec![
                Matrix::identity(d),
                ma.clone(),
                mb.clone(),
                ma.neg(),
                mb.neg(),
            ]
        }
        TransformKind::Mlp => {
            let mut accepted = vec![sample_rotation(d, stream.derive(P_TRANSFORM, 0))?];
            let mut draw = 1u64;
            while accepted.len() < 3 {
                let mut found = None;
                for _ in 0..MAX_ORTHO_ATTEMPTS {
                    let cand = sample_rotation(d, stream.derive(P_TRANSFORM, draw))?;
                    draw += 1;
                    let ok = accepted.iter().all(|a| {
                        a.frobenius_inner(&cand).unwrap().abs() / (d as f64) < FROBENIUS_TOL
                    });
                    if ok {
                        found = Some(cand);
                        break;
                    }
                }
                accepted.push(found.ok_or(Error::OrthogonalizationFailed {
                    attempts: MAX_ORTHO_ATTEMPTS,
                })?);
            }
            let (ma, mb, mc) = (&accepted[0], &accepted[1], &accepted[2]);
            vec![ma.clone(), mb.clone(), mc.clone(), mb.neg(), mc.neg()]
        }
    };
    Ok(bases
        .into_iter()
        .enumerate()
        .map(|(i, m)| TransformSpec {
            kind,
            index: i + 1,
            weights: match kind {
                TransformKind::Linear => vec![m],
                TransformKind::Mlp => vec![m.clone(), m],
            },
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    #[serde(alias = "single")]
    SingleInDist,
    #[serde(alias = "multi")]
    MultiInDist,
    Ood,
}

impl Setting {
    fn code(self) -> u8 {
        match self {
            Setting::SingleInDist => 0,
            Setting::MultiInDist => 1,
            Setting::Ood => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Setting::SingleInDist),
            1 => Some(Setting::MultiInDist),
            2 => Some(Setting::Ood),
            _ => None,
        }
    }

    /// Distributions queries are drawn from, cycled by query position.
    pub fn distributions(self, split: Split) -> &'static [InputKind] {
        match (self, split) {
            (Setting::SingleInDist, _) => &InputKind::ALL[..1],
            (Setting::MultiInDist, _) => &InputKind::ALL,
            (Setting::Ood, Split::Test) => &InputKind::ALL[4..],
            (Setting::Ood, _) => &InputKind::ALL[..4],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Raw input vector (inputs are not normalized unless configured).
    pub input: Vec<f32>,
    /// Raw targets `T_i(x)`, not normalized.
    pub targets: Vec<Vec<f32>>,
    pub target_ids: Vec<u64>,
}

impl Record {
    pub fn unit_targets(&self) -> Result<Vec<UnitVector>> {
        self.targets.iter().map(|t| normalize(t)).collect()
    }
}

/// One split of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub setting: Setting,
    pub transform: TransformKind,
    pub split: Split,
    pub dim: usize,
    pub m: usize,
    pub seed: u64,
    pub records: Vec<Record>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.dim as u32);
        w.u32(self.m as u32);
        w.u64(self.records.len() as u64);
        w.u8(self.setting.code());
        w.u8(self.transform.code());
        w.u8(self.split.code());
        w.u64(self.seed);
        for r in &self.records {
            w.f32s(&r.input);
            for (t, &id) in r.targets.iter().zip(&r.target_ids) {
                w.f32s(t);
                w.u64(id);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.error(&format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let m = r.u32()? as usize;
        let n = r.u64()? as usize;
        let setting = Setting::from_code(r.u8()?).ok_or_else(|| r.error("bad setting code"))?;
        let transform =
            TransformKind::from_code(r.u8()?).ok_or_else(|| r.error("bad transform code"))?;
        let split = Split::from_code(r.u8()?).ok_or_else(|| r.error("bad split code"))?;
        let seed = r.u64()?;
        if dim == 0 || m == 0 {
            return Err(r.error("zero dimension or target count"));
        }
        let mut records = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let input = r.f32s(dim)?;
            let mut targets = Vec::with_capacity(m);
            let mut target_ids = Vec::with_capacity(m);
            for _ in 0..m {
                targets.push(r.f32s(dim)?);
                target_ids.push(r.u64()?);
            }
            records.push(Record {
                input,
                targets,
                target_ids,
            });
        }
        r.finish()?;
        Ok(SyntheticDataset {
            setting,
            transform,
            split,
            dim,
            m,
            seed,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    TargetOf { query: u64, slot: u8 },
    RandomDistractor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    dim: usize,
    data: Vec<f32>,
    provenance: Vec<Provenance>,
}

impl Corpus {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn entry(&self, id: usize) -> &[f32] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CORPUS_MAGIC);
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        w.f32s(&self.data);
        for p in &self.provenance {
            match *p {
                Provenance::TargetOf { query, slot } => {
                    w.u8(0);
                    w.u64(query);
                    w.u8(slot);
                }
                Provenance::RandomDistractor => {
                    w.u8(1);
                    w.u64(0);
                    w.u8(0);
                }
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(CORPUS_MAGIC)?;
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let data = r.f32s(
            dim.checked_mul(n)
                .ok_or_else(|| r.error("corpus size overflow"))?,
        )?;
        let mut provenance = Vec::with_capacity(n);
        for _ in 0..n {
            let tag = r.u8()?;
            let query = r.u64()?;
            let slot = r.u8()?;
            provenance.push(match tag {
                0 => Provenance::TargetOf { query, slot },
                1 => Provenance::RandomDistractor,
                _ => return Err(r.error("bad provenance tag")),
            });
        }
        r.finish()?;
        Ok(Corpus {
            dim,
            data,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Normalized targets in corpus-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetPool {
    pub dim: usize,
    pub m: usize,
    pub vectors: Vec<UnitVector>,
}

/// Train, validation and test splits sharing one transform family.
#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub transforms: Vec<TransformSpec>,
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
    pub test: SyntheticDataset,
    pub pool: TargetPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub setting: Setting,
    pub transform: TransformKind,
    pub dim: usize,
    pub m: usize,
    /// Training pool size, validation included.
    pub n_train: usize,
    pub n_test: usize,
    pub corpus_size: usize,
    pub val_fraction: f64,
    /// Normalize inputs before applying the transforms.
    pub normalize_inputs: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            setting: Setting::MultiInDist,
            transform: TransformKind::Mlp,
            dim: 64,
            m: 5,
            n_train: 2000,
            n_test: 200,
            corpus_size: 20_000,
            val_fraction: 0.1,
            normalize_inputs: false,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("dim must be >= 2, got {}", self.dim)));
        }
        if !(2..=NUM_TRANSFORMS).contains(&self.m) {
            return Err(Error::Config(format!(
                "m must lie in 2..={NUM_TRANSFORMS}, got {}",
                self.m
            )));
        }
        if self.n_train < 2 || self.n_test < 1 {
            return Err(Error::Config("need n_train >= 2 and n_test >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn n_val(&self) -> usize {
        (self.n_train as f64 * self.val_fraction).round() as usize
    }
}

fn make_split(
    cfg: &DataConfig,
    seed: u64,
    split: Split,
    transforms: &[TransformSpec],
    dists: &[InputDistribution],
    queries: std::ops::Range<usize>,
    stream: RngStream,
) -> Result<SyntheticDataset> {
    let mut records = Vec::with_capacity(queries.len());
    for (pos, q) in queries.enumerate() {
        let dist = &dists[pos % dists.len()];
        let raw = dist.sample(cfg.dim, &mut stream.derive(0, pos as u64).rng());
        let mut input: Vec<f32> = raw.iter().map(|&v| v as f32).collect();
        if cfg.normalize_inputs {
            input = normalize(&input)?.into_inner();
        }
        let x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        let mut targets = Vec::with_capacity(cfg.m);
        for t in &transforms[..cfg.m] {
            targets.push(t.apply(&x)?.into_iter().map(|v| v as f32).collect());
        }
        records.push(Record {
            input,
            targets,
            target_ids: (0..cfg.m).map(|s| (q * cfg.m + s) as u64).collect(),
        });
    }
    Ok(SyntheticDataset {
        setting: cfg.setting,
        transform: cfg.transform,
        split,
        dim: cfg.dim,
        m: cfg.m,
        seed,
        records,
    })
}

/// Generates transforms, the three splits and the normalized target pool.
///
/// The training pool of `n_train` queries cycles through the setting's
/// training distributions; its last `val_fraction` becomes validation.
pub fn build_dataset(cfg: &DataConfig, seed: u64) -> Result<GeneratedData> {
    cfg.validate()?;
    let root = RngStream::new(seed, 0);
    let transforms = make_transforms(cfg.transform, cfg.dim, root)?;
    let resolve = |split: Split| -> Result<Vec<InputDistribution>> {
        cfg.setting
            .distributions(split)
            .iter()
            .map(|&k| InputDistribution::new(k, cfg.dim, root.derive(P_COVARIANCE, 0)))
            .collect()
    };
    let train_dists = resolve(Split::Train)?;
    let test_dists = resolve(Split::Test)?;

    let pool = make_split(
        cfg,
        seed,
        Split::Train,
        &transforms,
        &train_dists,
        0..cfg.n_train,
        root.derive(P_TRAIN_INPUT, 0),
    )?;
    let test = make_split(
        cfg,
        seed,
        Split::Test,
        &transforms,
        &test_dists,
        cfg.n_train..cfg.n_train + cfg.n_test,
        root.derive(P_TEST_INPUT, 0),
    )?;
    let n_val = cfg.n_val();
    let mut train = pool;
    let val_records = train.records.split_off(cfg.n_train - n_val);
    let val = SyntheticDataset {
        split: Split::Val,
        records: val_records,
        ..train.clone()
    };

    let mut vectors = Vec::with_capacity((cfg.n_train + cfg.n_test) * cfg.m);
    for r in train
        .records
        .iter()
        .chain(&val.records)
        .chain(&test.records)
    {
        vectors.extend(r.unit_targets()?);
    }
    Ok(GeneratedData {
        transforms,
        train,
        val,
        test,
        pool: TargetPool {
            dim: cfg.dim,
            m: cfg.m,
            vectors,
        },
    })
}

/// All pool targets followed by `n_total − |pool|` normalized Gaussian
/// distractors.
pub fn build_corpus(pool: &TargetPool, n_total: usize, seed: u64) -> Result<Corpus> {
    if n_total < pool.vectors.len() {
        return Err(Error::CorpusTooSmall {
            requested: n_total,
            targets: pool.vectors.len(),
        });
    }
    let d = pool.dim;
    let mut data = Vec::with_capacity(n_total * d);
    let mut provenance = Vec::with_capacity(n_total);
    for (i, v) in pool.vectors.iter().enumerate() {
        if v.dim() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: v.dim(),
            });
        }
        data.extend_from_slice(v.as_slice());
        provenance.push(Provenance::TargetOf {
            query: (i / pool.m) as u64,
            slot: (i % pool.m) as u8,
        });
    }
    let stream = RngStream::new(seed, 0).derive(P_DISTRACTOR, 0);
    for j in 0..n_total - pool.vectors.len() {
        let mut rng = stream.derive(0, j as u64).rng();
        let v = loop {
            if let Ok(u) = normalize_f64(&gaussian_vec(&mut rng, d)) {
                break u;
            }
        };
        data.extend_from_slice(v.as_slice());
        provenance.push(Provenance::RandomDistractor);
    }
    Ok(Corpus {
        dim: d,
        data,
        provenance,
    })
}

impl GeneratedData {
    pub fn splits(&self) -> [&SyntheticDataset; 3] {
        [&self.train, &self.val, &self.test]
    }
}

pub fn transforms_to_bytes(transforms: &[TransformSpec]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(TRANSFORM_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(transforms.len() as u32);
    for t in transforms {
        w.u8(t.kind.code());
        w.u8(t.index as u8);
        w.u32(t.weights.len() as u32);
        for m in &t.weights {
            w.u32(m.rows() as u32);
            w.u32(m.cols() as u32);
            for &v in m.data() {
                w.f64(v);
            }
        }
    }
    w.into_inner()
}

pub fn transforms_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<TransformSpec>> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_magic(TRANSFORM_MAGIC)?;
    if r.u32()? != FORMAT_VERSION {
        return Err(r.error("unsupported version"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let kind = TransformKind::from_code(r.u8()?).ok_or_else(|| r.error("bad kind"))?;
        let index = r.u8()? as usize;
        let n = r.u32()? as usize;
        let mut weights = Vec::with_capacity(n.min(8));
        for _ in 0..n {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.f64()?);
            }
            weights.push(Matrix::new(rows, cols, data)?);
        }
        out.push(TransformSpec {
            kind,
            index,
            weights,
        });
    }
    r.finish()?;
    Ok(out)
}

/// Checks that every target id resolves to the matching normalized corpus
/// entry (within 1e-6 per coordinate).
pub fn verify_target_ids(ds: &SyntheticDataset, corpus: &Corpus) -> Result<()> {
    for r in &ds.records {
        for (t, &id) in r.targets.iter().zip(&r.target_ids) {
            if id as usize >= corpus.len() {
                return Err(Error::MissingCorpusIds {
                    id,
                    n: corpus.len(),
                });
            }
            let want = normalize(t)?;
            let got = corpus.entry(id as usize);
            if want
                .as_slice()
                .iter()
                .zip(got)
                .any(|(a, b)| (a - b).abs() > 1e-6)
            {
                return Err(Error::ShapeMismatch(format!(
                    "corpus entry {id} does not match its target"
                )));
            }
        }
    }
    Ok(())
}

/// Mean pairwise cosine similarity among one query's raw targets.
pub fn mean_pairwise_cosine(targets: &[Vec<f32>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..targets.len() {
        for j in i + 1..targets.len() {
            let d = crate::tensor::dot(&targets[i], &targets[j]);
            sum += d / (norm(&targets[i]) * norm(&targets[j]));
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
