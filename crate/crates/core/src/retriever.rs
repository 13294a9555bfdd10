//! Dual-encoder dense retrieval over the knowledge base, plus the
//! forecaster-feedback distillation objective used to train it.
//!
//! The query and candidate encoders are independent two-layer tanh MLPs
//! (`sl → 4·sl → e`). A candidate's score is the dot product of the two
//! encodings. The training target is a softmax over the negated per-candidate
//! forecast error, and the retrieval loss is `KL(P ‖ softmax(S / τ_s))`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::kbase::KnowledgeBase;
use crate::numkit::{axpy, dot, kl_divergence, softmax, Activation, ActivationCache, Grads, Matrix, MlpParams};
use crate::tsdata::instance_normalize;

/// Default retrieval embedding width.
pub const DEFAULT_EMBED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetrieverHyper {
    pub k: usize,
    /// Temperature applied to metric values when building the target.
    pub tau_m: f64,
    /// Temperature applied to retrieval scores.
    pub tau_s: f64,
    /// Per-slot replacement probability for candidate augmentation.
    pub rho: f64,
}

impl Default for RetrieverHyper {
    fn default() -> Self {
        Self {
            k: 8,
            tau_m: 0.1,
            tau_s: 1.0,
            rho: 0.2,
        }
    }
}

impl RetrieverHyper {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.tau_m > 0.0 && self.tau_s > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config("augmentation rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Top-k candidates for one query.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetrievalResult {
    /// Knowledge-base indices, pairwise distinct.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub augmented: Vec<bool>,
    /// Forecaster-feedback distribution, once computed.
    pub target: Option<Vec<f64>>,
}

impl RetrievalResult {
    pub fn new(indices: Vec<usize>, scores: Vec<f64>) -> Self {
        let k = indices.len();
        Self {
            indices,
            scores,
            augmented: vec![false; k],
            target: None,
        }
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retriever {
    query_encoder: MlpParams,
    cand_encoder: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverGrads {
    pub query: Grads,
    pub cand: Grads,
}

impl RetrieverGrads {
    pub fn zero(&mut self) {
        self.query.zero();
        self.cand.zero();
    }
}

/// Encodings and activations for a query and a fixed candidate list.
#[derive(Debug, Clone)]
pub struct ScoreTrace {
    query_cache: ActivationCache,
    query_emb: Vec<f64>,
    cand_caches: Vec<ActivationCache>,
    cand_embs: Vec<Vec<f64>>,
}

impl ScoreTrace {
    pub fn query_embedding(&self) -> &[f64] {
        &self.query_emb
    }

    pub fn candidate_embeddings(&self) -> &[Vec<f64>] {
        &self.cand_embs
    }
}

impl Retriever {
    /// Two independent encoders `sl → 4·sl → embed_dim`, tanh on both layers.
    pub fn new<R: Rng + ?Sized>(sl: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        Self::with_hidden(sl, 4 * sl, embed_dim, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(sl: usize, hidden: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        let dims = [sl, hidden, embed_dim];
        Ok(Self {
            query_encoder: MlpParams::init(&dims, Activation::Tanh, rng)?,
            cand_encoder: MlpParams::init(&dims, Activation::Tanh, rng)?,
        })
    }

    pub fn from_parts(query_encoder: MlpParams, cand_encoder: MlpParams) -> Result<Self> {
        check_len("encoder input", query_encoder.in_dim(), cand_encoder.in_dim())?;
        check_len("encoder output", query_encoder.out_dim(), cand_encoder.out_dim())?;
        Ok(Self {
            query_encoder,
            cand_encoder,
        })
    }

    pub fn query_encoder(&self) -> &MlpParams {
        &self.query_encoder
    }

    pub fn cand_encoder(&self) -> &MlpParams {
        &self.cand_encoder
    }

    pub fn query_encoder_mut(&mut self) -> &mut MlpParams {
        &mut self.query_encoder
    }

    pub fn cand_encoder_mut(&mut self) -> &mut MlpParams {
        &mut self.cand_encoder
    }

    pub fn sl(&self) -> usize {
        self.query_encoder.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.query_encoder.out_dim()
    }

    pub fn grads(&self) -> RetrieverGrads {
        RetrieverGrads {
            query: Grads::for_params(&self.query_encoder),
            cand: Grads::for_params(&self.cand_encoder),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.query_encoder.fingerprint() ^ self.cand_encoder.fingerprint().rotate_left(1)
    }

    pub fn encode_query(&self, xn: &[f64]) -> Result<Vec<f64>> {
        self.query_encoder.infer(xn)
    }

    pub fn encode_candidate(&self, tn: &[f64]) -> Result<Vec<f64>> {
        self.cand_encoder.infer(tn)
    }

    /// Encodes each row of `windows` (normalized candidates).
    pub fn encode_candidates(&self, windows: &Matrix) -> Result<Matrix> {
        self.cand_encoder.infer_batch(windows)
    }

    /// Scores already-normalized candidate windows against a normalized query.
    pub fn score_normalized<'a, I>(&self, query_xn: &[f64], candidates: I) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let q = self.encode_query(query_xn)?;
        candidates
            .into_iter()
            .map(|c| Ok(dot(&q, &self.encode_candidate(c)?)))
            .collect()
    }

    /// Scores every eligible entry of `kb` against a raw query window. Query
    /// and candidates are each instance-normalized with their own statistics.
    pub fn score_all(&self, query: &[f64], kb: &KnowledgeBase, eligible: &[usize]) -> Result<Vec<f64>> {
        if eligible.is_empty() {
            return Err(Error::Empty("eligible candidate set"));
        }
        let (qn, _) = instance_normalize(query);
        let normalized: Vec<Vec<f64>> = eligible
            .iter()
            .map(|&i| instance_normalize(&kb.entry(i).values).0)
            .collect();
        self.score_normalized(&qn, normalized.iter().map(Vec::as_slice))
    }

    /// Forward pass over a fixed candidate list, keeping what
    /// [`backward`](Self::backward) needs.
    pub fn score_traced(&self, query_xn: &[f64], candidates: &[&[f64]]) -> Result<(Vec<f64>, ScoreTrace)> {
        let mut query_cache = ActivationCache::new();
        let query_emb = self.query_encoder.forward(query_xn, &mut query_cache)?;
        let mut cand_caches = Vec::with_capacity(candidates.len());
        let mut cand_embs = Vec::with_capacity(candidates.len());
        for c in candidates {
            let mut cache = ActivationCache::new();
            cand_embs.push(self.cand_encoder.forward(c, &mut cache)?);
            cand_caches.push(cache);
        }
        let scores = cand_embs.iter().map(|c| dot(&query_emb, c)).collect();
        Ok((
            scores,
            ScoreTrace {
                query_cache,
                query_emb,
                cand_caches,
                cand_embs,
            },
        ))
    }

    /// Pushes `∂L/∂scores` through both encoders.
    pub fn backward(&self, trace: &ScoreTrace, score_grad: &[f64], grads: &mut RetrieverGrads) -> Result<()> {
        check_len("score gradient", trace.cand_embs.len(), score_grad.len())?;
        let mut dq = vec![0.0; trace.query_emb.len()];
        for (g, (c, cache)) in score_grad.iter().zip(trace.cand_embs.iter().zip(&trace.cand_caches)) {
            axpy(*g, c, &mut dq);
            let dc: Vec<f64> = trace.query_emb.iter().map(|q| g * q).collect();
            self.cand_encoder.backward(cache, &dc, Some(&mut grads.cand))?;
        }
        self.query_encoder.backward(&trace.query_cache, &dq, Some(&mut grads.query))?;
        Ok(())
    }
}

/// Positions of the `k` largest scores, best first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if scores.len() < k {
        return Err(Error::InsufficientCandidates {
            available: scores.len(),
            needed: k,
        });
    }
    // Bounded insertion: `best` stays sorted by (score desc, index asc).
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &s) in scores.iter().enumerate() {
        if best.len() == k && s <= scores[best[k - 1]] {
            continue;
        }
        let pos = best.iter().position(|&j| s > scores[j]).unwrap_or(best.len());
        best.insert(pos, i);
        best.truncate(k);
    }
    Ok(best)
}

/// `pᵢ = softmax(metricᵢ / τ_m)`; metrics must already be higher-is-better.
pub fn target_distribution(metric_values: &[f64], tau_m: f64) -> Result<Vec<f64>> {
    softmax(metric_values, tau_m)
}

/// `KL(P ‖ softmax(S / τ_s))` and its gradient `(softmax(S / τ_s) − P) / τ_s`.
pub fn retrieval_loss(scores: &[f64], target: &[f64], tau_s: f64) -> Result<(f64, Vec<f64>)> {
    check_len("retrieval target", scores.len(), target.len())?;
    let q = softmax(scores, tau_s)?;
    let loss = kl_divergence(target, &q)?;
    let grad = q.iter().zip(target).map(|(qi, pi)| (qi - pi) / tau_s).collect();
    Ok((loss, grad))
}

/// Replaces each slot with probability `rho` by a fresh eligible candidate
/// not already selected, rescoring replaced slots with `rescore`. Returns
/// `false` as the second value when no spare candidate existed.
pub fn augment<R, F>(
    mut result: RetrievalResult,
    eligible: &[usize],
    rho: f64,
    rng: &mut R,
    mut rescore: F,
) -> Result<(RetrievalResult, bool)>
where
    R: Rng + ?Sized,
    F: FnMut(usize) -> Result<f64>,
{
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config("augmentation rate must lie in [0, 1]".into()));
    }
    let mut spare: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|i| !result.indices.contains(i))
        .collect();
    if spare.is_empty() {
        return Ok((result, rho == 0.0));
    }
    for slot in 0..result.k() {
        if spare.is_empty() {
            break;
        }
        if rng.random::<f64>() < rho {
            let pick = spare.swap_remove(rng.random_range(0..spare.len()));
            result.indices[slot] = pick;
            result.scores[slot] = rescore(pick)?;
            result.augmented[slot] = true;
        }
    }
    Ok((result, true))
}
