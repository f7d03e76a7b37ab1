//! Retrieval evaluation: fusion, MRecall@k, MMR re-ranking, diversity
//! binning and the report formats.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{FlatIndex, Hit, RankedList};
use crate::model::{decode_batch, Batch, ModelParams};
use crate::synthgen::SyntheticDataset;
use crate::tensor::{dot, UnitVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiversityMetric {
    Euclidean,
    Cosine,
}

impl DiversityMetric {
    pub fn name(self) -> &'static str {
        match self {
            DiversityMetric::Euclidean => "euclidean",
            DiversityMetric::Cosine => "cosine",
        }
    }

    fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            DiversityMetric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
                .sqrt(),
            DiversityMetric::Cosine => 1.0 - dot(a, b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Amer,
    SingleQuery,
    SingleQueryMmr,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Amer => "amer",
            EvalMode::SingleQuery => "single-query",
            EvalMode::SingleQueryMmr => "single-query-mmr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_values: Vec<usize>,
    pub m_pred: usize,
    pub metric: DiversityMetric,
    pub bins: usize,
    pub mmr_lambdas: Vec<f64>,
    /// Candidates handed to MMR.
    pub mmr_depth: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_values: vec![10, 100],
            m_pred: 5,
            metric: DiversityMetric::Euclidean,
            bins: 4,
            mmr_lambdas: vec![0.5, 0.75, 0.9],
            mmr_depth: 500,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::Config(
                "eval.k_values must be non-empty and >= 1".into(),
            ));
        }
        if self.m_pred == 0 {
            return Err(Error::Config("eval.m_pred must be >= 1".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config("eval.bins must be >= 2".into()));
        }
        if self.mmr_lambdas.is_empty() || self.mmr_lambdas.iter().any(|l| !(0.0..=1.0).contains(l))
        {
            return Err(Error::Config(
                "eval.mmr_lambdas must be non-empty and in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn max_k(&self) -> usize {
        self.k_values.iter().copied().max().unwrap_or(1)
    }
}

/// Set recall of the top `k` ids: all `m` targets when `k >= m`, else `k`
/// of them.
pub fn mrecall(retrieved: &[u64], targets: &[u64], k: usize) -> Result<u8> {
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let top: HashSet<u64> = retrieved.iter().take(k).copied().collect();
    let found = targets.iter().filter(|t| top.contains(t)).count();
    Ok(u8::from(found >= targets.len().min(k)))
}

/// Interleaves the lists rank by rank, skipping ids already taken.
pub fn round_robin_merge(lists: &[RankedList], k: usize) -> RankedList {
    let query = lists.first().map_or(0, |l| l.query);
    let mut seen = HashSet::new();
    let mut hits = Vec::with_capacity(k);
    let depth = lists.iter().map(|l| l.len()).max().unwrap_or(0);
    'outer: for rank in 0..depth {
        for list in lists {
            if hits.len() == k {
                break 'outer;
            }
            if let Some(h) = list.hits.get(rank) {
                if seen.insert(h.id) {
                    hits.push(Hit {
                        id: h.id,
                        score: 1.0 / (1.0 + hits.len() as f64),
                    });
                }
            }
        }
    }
    RankedList { query, hits }
}

/// One MMR candidate: its similarity to the query and its vector.
#[derive(Clone, Copy, Debug)]
pub struct MmrCandidate<'a> {
    pub id: u64,
    pub sim_q: f64,
    pub vector: &'a [f32],
}

/// Greedy maximal marginal relevance over candidates given in rank order.
/// Output hits keep their query similarity as score.
pub fn mmr_rerank(candidates: &[MmrCandidate<'_>], lambda: f64, k: usize) -> Vec<Hit> {
    let n = candidates.len();
    let mut taken = vec![false; n];
    // Largest similarity to anything selected so far.
    let mut max_sim = vec![f64::NEG_INFINITY; n];
    let mut out = Vec::with_capacity(k.min(n));
    while out.len() < k.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in candidates.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let penalty = if out.is_empty() { 0.0 } else { max_sim[i] };
            let score = lambda * c.sim_q - (1.0 - lambda) * penalty;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let (pick, _) = best.expect("a candidate remains");
        taken[pick] = true;
        out.push(Hit {
            id: candidates[pick].id,
            score: candidates[pick].sim_q,
        });
        let v = candidates[pick].vector;
        for (i, c) in candidates.iter().enumerate() {
            if !taken[i] {
                max_sim[i] = max_sim[i].max(dot(c.vector, v));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinAssignment {
    pub statistic: f64,
    pub bin: usize,
}

fn mean_pairwise(vs: &[&[f32]], f: impl Fn(&[f32], &[f32]) -> f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            sum += f(vs[i], vs[j]);
            n += 1;
        }
    }
    sum / n as f64
}

/// Equal-count quantile bins by mean pairwise target distance. Earlier
/// bins take the remainder; ties keep query order.
pub fn diversity_bins(
    targets: &[Vec<&[f32]>],
    metric: DiversityMetric,
    bins: usize,
) -> Result<Vec<BinAssignment>> {
    if bins < 2 {
        return Err(Error::Config("need at least 2 bins".into()));
    }
    let mut stats = Vec::with_capacity(targets.len());
    for (q, t) in targets.iter().enumerate() {
        if t.len() < 2 {
            return Err(Error::SingleTarget { query: q });
        }
        stats.push(mean_pairwise(t, |a, b| metric.distance(a, b)));
    }
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[a].total_cmp(&stats[b]));
    let (base, rem) = (stats.len() / bins, stats.len() % bins);
    let mut out = vec![
        BinAssignment {
            statistic: 0.0,
            bin: 0
        };
        stats.len()
    ];
    let mut pos = 0;
    for bin in 0..bins {
        let size = base + usize::from(bin < rem);
        for &q in &order[pos..pos + size] {
            out[q] = BinAssignment {
                statistic: stats[q],
                bin,
            };
        }
        pos += size;
    }
    Ok(out)
}

/// Mean over queries of the mean pairwise cosine between predictions.
pub fn output_diversity(preds: &[Vec<UnitVector>]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let mut total = 0.0;
    for (q, p) in preds.iter().enumerate() {
        if p.len() < 2 {
            return Err(Error::SinglePrediction { query: q });
        }
        let views: Vec<&[f32]> = p.iter().map(|u| u.as_slice()).collect();
        total += mean_pairwise(&views, dot);
    }
    Ok(total / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KRecall {
    pub k: usize,
    pub mrecall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bin: usize,
    pub n_queries: usize,
    pub min_statistic: f64,
    pub max_statistic: f64,
    pub mrecall: Vec<KRecall>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: u64,
    pub bin: usize,
    pub statistic: f64,
    /// 0/1 per entry of `k_values`.
    pub hits: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub metric: DiversityMetric,
    pub n_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmr_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_diversity: Option<f64>,
    pub target_diversity: f64,
    pub overall: Vec<KRecall>,
    pub bins: Vec<BinReport>,
    pub config: EvalConfig,
    pub queries: Vec<QueryRecord>,
}

impl EvalReport {
    pub fn mrecall_at(&self, k: usize) -> Option<f64> {
        self.overall.iter().find(|r| r.k == k).map(|r| r.mrecall)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("report serialization: {e}")))
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Flat `k,bin,metric,n_queries,mrecall` rows; `bin` is `all` for the
    /// overall line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,bin,metric,n_queries,mrecall\n");
        let metric = self.metric.name();
        for r in &self.overall {
            let _ = writeln!(
                s,
                "{},all,{metric},{},{:.6}",
                r.k, self.n_queries, r.mrecall
            );
        }
        for b in &self.bins {
            for r in &b.mrecall {
                let _ = writeln!(
                    s,
                    "{},{},{metric},{},{:.6}",
                    r.k, b.bin, b.n_queries, r.mrecall
                );
            }
        }
        s
    }
}

/// Per-query ground truth: ids plus unit vectors for binning.
pub struct QueryTargets<'a> {
    pub query: u64,
    pub ids: Vec<u64>,
    pub vectors: Vec<&'a [f32]>,
}

/// Looks every target id up in the index.
pub fn resolve_targets<'a>(
    index: &'a FlatIndex,
    targets: &[(u64, Vec<u64>)],
) -> Result<Vec<QueryTargets<'a>>> {
    targets
        .iter()
        .map(|(query, ids)| {
            let vectors = ids
                .iter()
                .map(|&id| {
                    index
                        .vector_by_id(id)
                        .ok_or(Error::MissingCorpusIds { id, n: index.len() })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(QueryTargets {
                query: *query,
                ids: ids.clone(),
                vectors,
            })
        })
        .collect()
}

pub fn dataset_targets(ds: &SyntheticDataset) -> Vec<(u64, Vec<u64>)> {
    ds.records
        .iter()
        .map(|r| (r.target_ids[0] / ds.m as u64, r.target_ids.clone()))
        .collect()
}

/// Scores one final ranked list per query.
pub fn score_lists(
    lists: &[RankedList],
    targets: &[QueryTargets<'_>],
    cfg: &EvalConfig,
    mode: &str,
) -> Result<EvalReport> {
    cfg.validate()?;
    if lists.len() != targets.len() {
        return Err(Error::CountMismatch {
            expected: targets.len(),
            got: lists.len(),
        });
    }
    let vecs: Vec<Vec<&[f32]>> = targets.iter().map(|t| t.vectors.clone()).collect();
    let assign = diversity_bins(&vecs, cfg.metric, cfg.bins)?;
    let target_diversity =
        vecs.iter().map(|v| mean_pairwise(v, dot)).sum::<f64>() / vecs.len().max(1) as f64;
    let mut queries = Vec::with_capacity(lists.len());
    for ((list, t), a) in lists.iter().zip(targets).zip(&assign) {
        let ids = list.ids();
        let hits = cfg
            .k_values
            .iter()
            .map(|&k| mrecall(&ids, &t.ids, k))
            .collect::<Result<Vec<_>>>()?;
        queries.push(QueryRecord {
            query: t.query,
            bin: a.bin,
            statistic: a.statistic,
            hits,
        });
    }
    let mean_over = |qs: &[&QueryRecord]| -> Vec<KRecall> {
        cfg.k_values
            .iter()
            .enumerate()
            .map(|(i, &k)| KRecall {
                k,
                mrecall: if qs.is_empty() {
                    0.0
                } else {
                    qs.iter().map(|q| q.hits[i] as f64).sum::<f64>() / qs.len() as f64
                },
            })
            .collect()
    };
    let all: Vec<&QueryRecord> = queries.iter().collect();
    let overall = mean_over(&all);
    let bins = (0..cfg.bins)
        .map(|bin| {
            let members: Vec<&QueryRecord> = queries.iter().filter(|q| q.bin == bin).collect();
            let stats = members.iter().map(|q| q.statistic);
            BinReport {
                bin,
                n_queries: members.len(),
                min_statistic: stats.clone().fold(f64::INFINITY, f64::min),
                max_statistic: stats.fold(f64::NEG_INFINITY, f64::max),
                mrecall: mean_over(&members),
            }
        })
        .collect();
    Ok(EvalReport {
        mode: mode.to_string(),
        metric: cfg.metric,
        n_queries: queries.len(),
        mmr_lambda: None,
        output_diversity: None,
        target_diversity,
        overall,
        bins,
        config: cfg.clone(),
        queries,
    })
}

/// Retrieves `depth` per embedding and fuses round-robin to `max_k`.
pub fn fused_lists(
    index: &FlatIndex,
    embeddings: &[Vec<UnitVector>],
    depth: usize,
    k: usize,
) -> Result<Vec<RankedList>> {
    embeddings
        .iter()
        .enumerate()
        .map(|(q, embs)| {
            let lists = embs
                .iter()
                .map(|e| index.search(e, depth))
                .collect::<Result<Vec<_>>>()?;
            let mut merged = round_robin_merge(&lists, k);
            merged.query = q as u64;
            Ok(merged)
        })
        .collect()
}

/// MMR over each query's top `depth` candidates from a single embedding.
pub fn mmr_lists(
    index: &FlatIndex,
    embeddings: &[UnitVector],
    depth: usize,
    lambda: f64,
    k: usize,
) -> Result<Vec<RankedList>> {
    let candidates = index.batch_search(embeddings, depth)?;
    candidates
        .iter()
        .map(|list| rerank_list(index, list, lambda, k))
        .collect()
}

/// MMR over a ranked list, using its scores as query similarity.
pub fn rerank_list(
    index: &FlatIndex,
    list: &RankedList,
    lambda: f64,
    k: usize,
) -> Result<RankedList> {
    let cands = list
        .hits
        .iter()
        .map(|h| {
            Ok(MmrCandidate {
                id: h.id,
                sim_q: h.score,
                vector: index.vector_by_id(h.id).ok_or(Error::MissingCorpusIds {
                    id: h.id,
                    n: index.len(),
                })?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedList {
        query: list.query,
        hits: mmr_rerank(&cands, lambda, k),
    })
}

fn dataset_inputs(params: &ModelParams<f32>, ds: &SyntheticDataset) -> Result<Batch<f32>> {
    if ds.dim != params.config.dim {
        return Err(Error::DimMismatch {
            expected: params.config.dim,
            got: ds.dim,
        });
    }
    Batch::from_rows(
        &ds.records.iter().map(|r| &r.input).collect::<Vec<_>>(),
        ds.dim,
    )
}

/// Decoded query embeddings for every record of `ds`.
pub fn decode_dataset(
    params: &ModelParams<f32>,
    ds: &SyntheticDataset,
    m_pred: usize,
) -> Result<Vec<Vec<UnitVector>>> {
    decode_batch(params, &dataset_inputs(params, ds)?, m_pred)
}

/// The ranked lists an evaluation scores, keyed by dataset query id.
pub fn retrieval_lists(
    embeddings: &[Vec<UnitVector>],
    ds: &SyntheticDataset,
    index: &FlatIndex,
    cfg: &EvalConfig,
    mmr_lambda: Option<f64>,
) -> Result<Vec<RankedList>> {
    let k = cfg.max_k();
    let mut lists = match mmr_lambda {
        Some(lambda) => {
            let firsts: Vec<UnitVector> = embeddings.iter().map(|e| e[0].clone()).collect();
            mmr_lists(index, &firsts, cfg.mmr_depth.max(k), lambda, k)?
        }
        None => fused_lists(index, embeddings, k, k)?,
    };
    for (list, (q, _)) in lists.iter_mut().zip(dataset_targets(ds)) {
        list.query = q;
    }
    Ok(lists)
}

/// Scores precomputed query embeddings against a dataset split.
pub fn evaluate_embeddings(
    embeddings: &[Vec<UnitVector>],
    ds: &SyntheticDataset,
    index: &FlatIndex,
    cfg: &EvalConfig,
    mode: EvalMode,
    mmr_lambda: Option<f64>,
) -> Result<EvalReport> {
    cfg.validate()?;
    if embeddings.iter().flatten().any(|e| e.dim() != index.dim()) {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            got: embeddings
                .iter()
                .flatten()
                .map(|e| e.dim())
                .find(|&d| d != index.dim())
                .unwrap_or(0),
        });
    }
    let targets = resolve_targets(index, &dataset_targets(ds))?;
    let k = cfg.max_k();
    let lists = match (mode, mmr_lambda) {
        (EvalMode::SingleQueryMmr, Some(lambda)) => {
            let firsts: Vec<UnitVector> = embeddings.iter().map(|e| e[0].clone()).collect();
            mmr_lists(index, &firsts, cfg.mmr_depth.max(k), lambda, k)?
        }
        (EvalMode::SingleQueryMmr, None) => {
            return Err(Error::Config("MMR evaluation needs a lambda".into()));
        }
        _ => fused_lists(index, embeddings, k, k)?,
    };
    let mut report = score_lists(&lists, &targets, cfg, mode.name())?;
    report.mmr_lambda = mmr_lambda;
    if mode == EvalMode::Amer && embeddings.iter().all(|e| e.len() >= 2) {
        report.output_diversity = Some(output_diversity(embeddings)?);
    }
    Ok(report)
}

/// Decodes queries with a trained model and scores retrieval on `test`.
/// MMR mode picks its lambda on `val` (mean MRecall over `k_values`,
/// larger lambda on ties).
pub fn evaluate_model(
    params: &ModelParams<f32>,
    test: &SyntheticDataset,
    val: Option<&SyntheticDataset>,
    index: &FlatIndex,
    cfg: &EvalConfig,
    mode: EvalMode,
) -> Result<EvalReport> {
    cfg.validate()?;
    let m_pred = match mode {
        EvalMode::Amer => cfg.m_pred,
        EvalMode::SingleQuery | EvalMode::SingleQueryMmr => 1,
    };
    let embed = |ds: &SyntheticDataset| decode_dataset(params, ds, m_pred);
    let test_emb = embed(test)?;
    if mode != EvalMode::SingleQueryMmr {
        return evaluate_embeddings(&test_emb, test, index, cfg, mode, None);
    }
    let val =
        val.ok_or_else(|| Error::Config("MMR lambda tuning needs a validation split".into()))?;
    let val_emb = embed(val)?;
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &cfg.mmr_lambdas {
        let r = evaluate_embeddings(&val_emb, val, index, cfg, mode, Some(lambda))?;
        let score = r.overall.iter().map(|k| k.mrecall).sum::<f64>() / r.overall.len() as f64;
        let better = match best {
            None => true,
            Some((l, s)) => score > s || (score == s && lambda > l),
        };
        if better {
            best = Some((lambda, score));
        }
    }
    let lambda = best.map(|(l, _)| l);
    evaluate_embeddings(&test_emb, test, index, cfg, mode, lambda)
}

/// Parses `query_id m target_id...` lines.
pub fn parse_targets(text: &str, path: &Path) -> Result<Vec<(u64, Vec<u64>)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || {
            Error::format(
                path,
                format!("line {}: expected `query_id m target_id...`", lineno + 1),
            )
        };
        let nums = line
            .split_whitespace()
            .map(|f| f.parse::<u64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if nums.len() < 2 || nums.len() != 2 + nums[1] as usize {
            return Err(bad());
        }
        let ids = nums[2..].to_vec();
        if ids.is_empty() {
            return Err(Error::EmptyTargets);
        }
        if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
            return Err(Error::format(
                path,
                format!("line {}: duplicate target ids", lineno + 1),
            ));
        }
        out.push((nums[0], ids));
    }
    Ok(out)
}

pub fn format_targets(targets: &[(u64, Vec<u64>)]) -> String {
    let mut s = String::new();
    for (q, ids) in targets {
        let _ = write!(s, "{q} {}", ids.len());
        for id in ids {
            let _ = write!(s, " {id}");
        }
        s.push('\n');
    }
    s
}

/// Scores an external run against a targets file. Queries missing from
/// the run count as misses.
pub fn evaluate_run(
    run: &[RankedList],
    targets: &[(u64, Vec<u64>)],
    index: &FlatIndex,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let resolved = resolve_targets(index, targets)?;
    let by_query: std::collections::HashMap<u64, &RankedList> =
        run.iter().map(|l| (l.query, l)).collect();
    let lists: Vec<RankedList> = resolved
        .iter()
        .map(|t| {
            by_query.get(&t.query).map_or_else(
                || RankedList {
                    query: t.query,
                    hits: Vec::new(),
                },
                |l| (*l).clone(),
            )
        })
        .collect();
    score_lists(&lists, &resolved, cfg, "external-run")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{build_corpus, build_dataset, DataConfig, Setting, TransformKind};
    use crate::tensor::{normalize, RngStream};
    use rand::Rng;

    fn list(ids: &[u64]) -> RankedList {
        RankedList {
            query: 0,
            hits: ids
                .iter()
                .enumerate()
                .map(|(i, &id)| Hit {
                    id,
                    score: 1.0 - i as f64 * 0.01,
                })
                .collect(),
        }
    }

    #[test]
    fn mrecall_cases() {
        let targets = [1, 2, 3, 4, 5];
        let ranked = [1, 9, 2, 8, 3, 7, 4, 6, 5, 10];
        assert_eq!(mrecall(&ranked, &targets, 10).unwrap(), 1);
        let four = [1, 9, 2, 8, 3, 7, 4, 6, 11, 10];
        assert_eq!(mrecall(&four, &targets, 10).unwrap(), 0);
        assert_eq!(mrecall(&[3, 1, 2, 9], &targets, 3).unwrap(), 1);
        assert_eq!(mrecall(&[3, 9, 2, 1], &targets, 3).unwrap(), 0);
        assert!(matches!(
            mrecall(&ranked, &[], 10),
            Err(Error::EmptyTargets)
        ));
    }

    #[test]
    fn mrecall_is_monotone_in_k() {
        let mut rng = RngStream::new(3, 0).rng();
        for _ in 0..200 {
            let ranked: Vec<u64> = {
                let mut v: Vec<u64> = (0..60).collect();
                rand::seq::SliceRandom::shuffle(&mut v[..], &mut rng);
                v
            };
            let targets: Vec<u64> = (0..5).map(|i| i * 7).collect();
            let mut prev = 0;
            for k in 5..60 {
                let r = mrecall(&ranked, &targets, k).unwrap();
                assert!(r >= prev);
                prev = r;
            }
        }
    }

    #[test]
    fn round_robin_examples() {
        let m = round_robin_merge(&[list(&[1, 2, 3]), list(&[4, 5, 6])], 4);
        assert_eq!(m.ids(), vec![1, 4, 2, 5]);
        let m = round_robin_merge(&[list(&[1, 2]), list(&[1, 3])], 3);
        assert_eq!(m.ids(), vec![1, 2, 3]);
        assert_eq!(
            round_robin_merge(&[list(&[7, 8, 9, 10])], 2).ids(),
            vec![7, 8]
        );
        let m = round_robin_merge(&[list(&[1, 2]), list(&[2, 1])], 10);
        assert_eq!(m.ids(), vec![1, 2]);
        assert_eq!(m.hits[1].score, 0.5);
    }

    #[test]
    fn round_robin_properties() {
        let mut rng = RngStream::new(4, 0).rng();
        for _ in 0..200 {
            let lists: Vec<RankedList> = (0..rng.random_range(1..6))
                .map(|_| {
                    list(
                        &(0..rng.random_range(0..15))
                            .map(|_| rng.random_range(0..20))
                            .collect::<Vec<_>>(),
                    )
                })
                .map(|mut l| {
                    let mut seen = HashSet::new();
                    l.hits.retain(|h| seen.insert(h.id));
                    l
                })
                .collect();
            let k = rng.random_range(1..30);
            let m = round_robin_merge(&lists, k);
            let ids = m.ids();
            let distinct: HashSet<u64> = lists.iter().flat_map(|l| l.ids()).collect();
            assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
            assert_eq!(ids.len(), k.min(distinct.len()));
        }
    }

    fn cand<'a>(id: u64, sim_q: f64, v: &'a [f32]) -> MmrCandidate<'a> {
        MmrCandidate {
            id,
            sim_q,
            vector: v,
        }
    }

    #[test]
    fn mmr_hand_example() {
        // Unit vectors with sim(A,B)=0.95, sim(A,C)=sim(B,C)=0.1.
        let a = [1.0f32, 0.0, 0.0];
        let b = [0.95f32, (1.0f32 - 0.95 * 0.95).sqrt(), 0.0];
        let c1 = 0.1f32;
        let c2 = (0.1 - 0.95 * c1) / b[1];
        let c = [c1, c2, (1.0 - c1 * c1 - c2 * c2).sqrt()];
        assert!((dot(&a, &b) - 0.95).abs() < 1e-6);
        assert!((dot(&a, &c) - 0.1).abs() < 1e-6);
        assert!((dot(&b, &c) - 0.1).abs() < 1e-6);
        let cands = [cand(0, 0.9, &a), cand(1, 0.8, &b), cand(2, 0.7, &c)];
        let ids: Vec<u64> = mmr_rerank(&cands, 0.5, 3).iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![0, 2, 1]);
        for lambda in [0.0, 0.3, 1.0] {
            assert_eq!(mmr_rerank(&cands, lambda, 1)[0].id, 0);
        }
    }

    #[test]
    fn mmr_lambda_one_is_identity() {
        let mut rng = RngStream::new(5, 0).rng();
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let vecs: Vec<Vec<f32>> = (0..n)
                .map(|_| {
                    let v: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                    normalize(&v).unwrap().into_inner()
                })
                .collect();
            let mut sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            sims.sort_by(|a, b| b.total_cmp(a));
            let cands: Vec<MmrCandidate> =
                (0..n).map(|i| cand(i as u64, sims[i], &vecs[i])).collect();
            let out: Vec<u64> = mmr_rerank(&cands, 1.0, n).iter().map(|h| h.id).collect();
            assert_eq!(out, (0..n as u64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bins_examples_and_properties() {
        let near = [[1.0f32, 0.0], [0.99, 0.141]];
        let far = [[1.0f32, 0.0], [-1.0, 0.0]];
        let t = vec![
            vec![&far[0][..], &far[1][..]],
            vec![&near[0][..], &near[1][..]],
        ];
        let b = diversity_bins(&t, DiversityMetric::Euclidean, 2).unwrap();
        assert_eq!((b[0].bin, b[1].bin), (1, 0));
        let same = [0.6f32, 0.8];
        let t2 = vec![vec![&same[..], &same[..]], t[0].clone(), t[1].clone()];
        let b = diversity_bins(&t2, DiversityMetric::Cosine, 2).unwrap();
        assert_eq!(b[0].bin, 0);
        assert!(b[0].statistic.abs() < 1e-6);
        assert!(matches!(
            diversity_bins(&[vec![&same[..]]], DiversityMetric::Cosine, 2),
            Err(Error::SingleTarget { query: 0 })
        ));

        let mut rng = RngStream::new(6, 0).rng();
        let vecs: Vec<Vec<f32>> = (0..23 * 3)
            .map(|_| {
                normalize(&[
                    rng.random_range(-1.0f32..1.0),
                    rng.random_range(-1.0..1.0),
                    0.5,
                ])
                .unwrap()
                .into_inner()
            })
            .collect();
        let t: Vec<Vec<&[f32]>> = vecs
            .chunks(3)
            .map(|c| c.iter().map(|v| v.as_slice()).collect())
            .collect();
        let a = diversity_bins(&t, DiversityMetric::Euclidean, 4).unwrap();
        let sizes: Vec<usize> = (0..4)
            .map(|b| a.iter().filter(|x| x.bin == b).count())
            .collect();
        assert_eq!(sizes, vec![6, 6, 6, 5]);
        for b in 0..3 {
            let hi = a
                .iter()
                .filter(|x| x.bin == b)
                .map(|x| x.statistic)
                .fold(f64::MIN, f64::max);
            let lo = a
                .iter()
                .filter(|x| x.bin == b + 1)
                .map(|x| x.statistic)
                .fold(f64::MAX, f64::min);
            assert!(hi <= lo);
        }
    }

    #[test]
    fn linear_targets_have_large_cosine_distance() {
        let cfg = DataConfig {
            transform: TransformKind::Linear,
            setting: Setting::SingleInDist,
            n_train: 20,
            n_test: 20,
            corpus_size: 400,
            ..Default::default()
        };
        let data = build_dataset(&cfg, 1).unwrap();
        for r in &data.test.records {
            let u: Vec<Vec<f32>> = r
                .unit_targets()
                .unwrap()
                .into_iter()
                .map(|u| u.into_inner())
                .collect();
            let views: Vec<&[f32]> = u.iter().map(|v| v.as_slice()).collect();
            let stat = mean_pairwise(&views, |a, b| DiversityMetric::Cosine.distance(a, b));
            assert!(stat > 1.0, "{stat}");
        }
    }

    #[test]
    fn output_diversity_examples() {
        let u = normalize(&[1.0, 2.0]).unwrap();
        let nu = normalize(&[-1.0, -2.0]).unwrap();
        assert!(
            (output_diversity(&[vec![u.clone(), u.clone(), u.clone()]]).unwrap() - 1.0).abs()
                < 1e-6
        );
        assert!((output_diversity(&[vec![u.clone(), nu]]).unwrap() + 1.0).abs() < 1e-6);
        assert!(matches!(
            output_diversity(&[vec![u]]),
            Err(Error::SinglePrediction { query: 0 })
        ));
    }

    fn small_world() -> (crate::synthgen::GeneratedData, FlatIndex) {
        let cfg = DataConfig {
            transform: TransformKind::Linear,
            setting: Setting::SingleInDist,
            n_train: 50,
            n_test: 30,
            corpus_size: 2000,
            ..Default::default()
        };
        let data = build_dataset(&cfg, 2).unwrap();
        let corpus = build_corpus(&data.pool, cfg.corpus_size, 2).unwrap();
        (data, FlatIndex::build(&corpus).unwrap())
    }

    #[test]
    fn oracle_and_degenerate_embeddings() {
        let (data, index) = small_world();
        let cfg = EvalConfig::default();
        let oracle: Vec<Vec<UnitVector>> = data
            .test
            .records
            .iter()
            .map(|r| r.unit_targets().unwrap())
            .collect();
        let r =
            evaluate_embeddings(&oracle, &data.test, &index, &cfg, EvalMode::Amer, None).unwrap();
        assert_eq!(r.mrecall_at(10), Some(1.0));
        assert_eq!(r.mrecall_at(100), Some(1.0));
        // Output diversity equals the between-target statistic.
        assert!((r.output_diversity.unwrap() - r.target_diversity).abs() < 1e-9);

        let fixed: Vec<Vec<UnitVector>> = oracle.iter().map(|t| vec![t[0].clone(); 5]).collect();
        let r =
            evaluate_embeddings(&fixed, &data.test, &index, &cfg, EvalMode::Amer, None).unwrap();
        assert_eq!(r.mrecall_at(10), Some(0.0));
        for (q, e) in r.queries.iter().zip(&fixed) {
            let direct = index.search(&e[0], 10).unwrap();
            let fused = fused_lists(&index, std::slice::from_ref(e), 10, 10).unwrap();
            assert_eq!(fused[0].ids(), direct.ids());
            assert_eq!(q.hits[0], 0);
        }
    }

    #[test]
    fn bins_average_back_to_overall() {
        let (data, index) = small_world();
        let cfg = EvalConfig::default();
        let mut rng = RngStream::new(1, 0).rng();
        // Two true targets plus noise: a mix of hits and misses.
        let embs: Vec<Vec<UnitVector>> = data
            .test
            .records
            .iter()
            .map(|r| {
                let t = r.unit_targets().unwrap();
                (0..5)
                    .map(|i| {
                        if rng.random_bool(0.8) {
                            t[i].clone()
                        } else {
                            t[0].clone()
                        }
                    })
                    .collect()
            })
            .collect();
        let r = evaluate_embeddings(&embs, &data.test, &index, &cfg, EvalMode::Amer, None).unwrap();
        for (i, k) in r.overall.iter().enumerate() {
            let weighted: f64 = r
                .bins
                .iter()
                .map(|b| b.mrecall[i].mrecall * b.n_queries as f64)
                .sum::<f64>()
                / r.n_queries as f64;
            assert!((weighted - k.mrecall).abs() < 1e-12);
        }
        assert!(r.overall[0].mrecall > 0.0 && r.overall[0].mrecall < 1.0);
        let back = EvalReport::from_toml(&r.to_toml().unwrap(), Path::new("r")).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert!(csv.starts_with("k,bin,metric,n_queries,mrecall\n10,all,euclidean,30,"));
        assert_eq!(csv.lines().count(), 1 + 2 + 4 * 2);
    }

    #[test]
    fn missing_ids_are_reported() {
        let (data, index) = small_world();
        let bad = vec![(0u64, vec![1u64, 999_999])];
        assert!(matches!(
            resolve_targets(&index, &bad),
            Err(Error::MissingCorpusIds { id: 999_999, .. })
        ));
        let t = dataset_targets(&data.test);
        let text = format_targets(&t);
        assert_eq!(parse_targets(&text, Path::new("t")).unwrap(), t);
        assert!(parse_targets("1 3 4 5", Path::new("t")).is_err());
    }

    #[test]
    fn external_run_matches_internal_scoring() {
        let (data, index) = small_world();
        let cfg = EvalConfig::default();
        let oracle: Vec<Vec<UnitVector>> = data
            .test
            .records
            .iter()
            .map(|r| r.unit_targets().unwrap())
            .collect();
        let internal =
            evaluate_embeddings(&oracle, &data.test, &index, &cfg, EvalMode::Amer, None).unwrap();
        let targets = dataset_targets(&data.test);
        let mut lists = fused_lists(&index, &oracle, 100, 100).unwrap();
        for (l, (q, _)) in lists.iter_mut().zip(&targets) {
            l.query = *q;
        }
        let ext = evaluate_run(&lists, &targets, &index, &cfg).unwrap();
        assert_eq!(ext.overall, internal.overall);
        assert_eq!(ext.bins, internal.bins);
    }
}
