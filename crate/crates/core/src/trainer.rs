//! Joint retriever + fusion training against a frozen backbone, and the
//! retrieval-augmented inference and evaluation paths.
//!
//! One training step, for a single window pair:
//!
//! 1. select `k` candidates from the eligible (other-dataset) entries,
//! 2. randomly replace slots with probability `ρ`,
//! 3. forecast once per candidate with the current fusion to build the
//!    target `P = softmax(−MSEᵢ / τ_m)` (no gradient through this),
//! 4. `L = L_Pred + λ·KL(P ‖ softmax(S / τ_s))`, where `L_Pred` is the
//!    normalized-space MSE of the forecast fused over all `k` candidates,
//! 5. step the fusion MLP (gradient through the frozen backbone) and the two
//!    retriever encoders (gradient of the KL term only).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::error::{check_len, Error, Result};
use crate::fusion::{Fusion, FusionPolicy};
use crate::kbase::KnowledgeBase;
use crate::numkit::{dot, l2_norm, mse, mse_grad, Grads, Matrix, OptimizerKind, OptimizerState};
use crate::retriever::{
    augment, retrieval_loss, target_distribution, top_k, RetrievalResult, Retriever, RetrieverGrads, RetrieverHyper,
    DEFAULT_EMBED_DIM,
};
use crate::tsdata::{denormalize, instance_normalize, WindowPair};

/// How candidates are chosen from the knowledge base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RetrievalPolicy {
    /// Top-k by the trained dual encoder.
    Learned,
    /// Seeded uniform k-subset.
    Random,
    /// Top-k by cosine similarity of the normalized raw windows.
    Cosine,
}

impl RetrievalPolicy {
    pub const ALL: [RetrievalPolicy; 3] = [Self::Learned, Self::Random, Self::Cosine];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Learned => "learned",
            Self::Random => "random",
            Self::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub hyper: RetrieverHyper,
    /// Weight of the retrieval loss.
    pub lambda: f64,
    pub lr_retriever: f64,
    pub lr_fusion: f64,
    pub epochs: usize,
    pub seed: u64,
    pub retrieval_policy: RetrievalPolicy,
    pub fusion_policy: FusionPolicy,
    pub optimizer: OptimizerKind,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyper: RetrieverHyper::default(),
            lambda: 1.0,
            lr_retriever: 1e-3,
            lr_fusion: 1e-5,
            epochs: 2,
            seed: 0,
            retrieval_policy: RetrievalPolicy::Learned,
            fusion_policy: FusionPolicy::ChannelPrompt,
            optimizer: OptimizerKind::ADAM,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be a non-negative number".into()));
        }
        if !(self.lr_retriever > 0.0 && self.lr_fusion > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("retrieval embedding width must be positive".into()));
        }
        Ok(())
    }
}

/// A knowledge base together with everything about it that the frozen
/// backbone fixes: normalized windows and their patch embeddings.
#[derive(Debug, Clone)]
pub struct PreparedKb {
    kb: KnowledgeBase,
    normalized: Vec<Vec<f64>>,
    stacked: Matrix,
    norms: Vec<f64>,
    embeddings: Vec<Matrix>,
}

impl PreparedKb {
    pub fn new(kb: KnowledgeBase, backbone: &Backbone) -> Result<Self> {
        check_len("knowledge base window length", backbone.dims().sl, kb.sl())?;
        let normalized: Vec<Vec<f64>> = kb.entries().iter().map(|e| instance_normalize(&e.values).0).collect();
        let norms = normalized.iter().map(|v| l2_norm(v)).collect();
        let mut stacked = Matrix::zeros(normalized.len(), kb.sl());
        for (i, v) in normalized.iter().enumerate() {
            stacked.row_mut(i).copy_from_slice(v);
        }
        let embeddings = normalized
            .iter()
            .map(|v| backbone.embed_window(v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kb,
            normalized,
            stacked,
            norms,
            embeddings,
        })
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn len(&self) -> usize {
        self.kb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kb.is_empty()
    }

    pub fn normalized(&self, i: usize) -> &[f64] {
        &self.normalized[i]
    }

    /// All normalized windows, one per row.
    pub fn normalized_matrix(&self) -> &Matrix {
        &self.stacked
    }

    pub fn embedding(&self, i: usize) -> &Matrix {
        &self.embeddings[i]
    }

    fn cosine(&self, xn: &[f64], xnorm: f64, i: usize) -> f64 {
        let denom = xnorm * self.norms[i];
        if denom > 0.0 {
            dot(xn, &self.normalized[i]) / denom
        } else {
            0.0
        }
    }
}

/// Frozen backbone plus the trainable retrieval components.
#[derive(Debug, Clone, PartialEq)]
pub struct RafModel {
    pub backbone: Backbone,
    pub retriever: Retriever,
    pub fusion: Fusion,
}

impl RafModel {
    /// Fresh retriever and fusion around a frozen backbone, seeded by `cfg.seed`.
    pub fn new(backbone: Backbone, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if !backbone.is_frozen() {
            return Err(Error::Config("backbone must be frozen before retrieval training".into()));
        }
        let dims = backbone.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let retriever = Retriever::new(dims.sl, cfg.embed_dim, &mut rng)?;
        let fusion = Fusion::new(cfg.fusion_policy, dims.n(), dims.d, &mut rng)?;
        Ok(Self {
            backbone,
            retriever,
            fusion,
        })
    }

    pub fn from_parts(backbone: Backbone, retriever: Retriever, fusion: Fusion) -> Result<Self> {
        check_len("retriever input", backbone.dims().sl, retriever.sl())?;
        if !backbone.is_frozen() {
            return Err(Error::Config("backbone must be frozen".into()));
        }
        Ok(Self {
            backbone,
            retriever,
            fusion,
        })
    }

    /// Normalized forecast for a normalized lookback and the given candidates.
    pub fn forecast_with(&self, xn: &[f64], pkb: &PreparedKb, indices: &[usize]) -> Result<Vec<f64>> {
        let x_emb = self.backbone.embed_window(xn)?;
        if !self.fusion.policy().uses_candidates() {
            return self.backbone.forecast_normalized(&x_emb);
        }
        let cands: Vec<&Matrix> = indices.iter().map(|&i| pkb.embedding(i)).collect();
        let fused = self.fusion.fuse(&x_emb, &cands)?;
        self.backbone.forecast_normalized(&fused)
    }
}

/// Read-only inference over one prepared knowledge base. Candidate
/// encodings are computed once.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    model: &'a RafModel,
    pkb: &'a PreparedKb,
    cfg: TrainConfig,
    encodings: Matrix,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a RafModel, pkb: &'a PreparedKb, cfg: &TrainConfig) -> Result<Self> {
        let bypass = !model.fusion.policy().uses_candidates();
        if !bypass && pkb.len() < cfg.hyper.k {
            return Err(Error::InsufficientCandidates {
                available: pkb.len(),
                needed: cfg.hyper.k,
            });
        }
        let encodings = if cfg.retrieval_policy == RetrievalPolicy::Learned && !bypass {
            model.retriever.encode_candidates(pkb.normalized_matrix())?
        } else {
            Matrix::zeros(0, 0)
        };
        Ok(Self {
            model,
            pkb,
            cfg: *cfg,
            encodings,
        })
    }

    /// Top-k over the whole knowledge base; no leakage filter, no augmentation.
    pub fn retrieve(&self, x: &[f64]) -> Result<RetrievalResult> {
        let (xn, _) = instance_normalize(x);
        self.retrieve_normalized(&xn, x)
    }

    fn retrieve_normalized(&self, xn: &[f64], raw: &[f64]) -> Result<RetrievalResult> {
        let k = self.cfg.hyper.k;
        let all: Vec<usize> = (0..self.pkb.len()).collect();
        match self.cfg.retrieval_policy {
            RetrievalPolicy::Learned => {
                let q = self.model.retriever.encode_query(xn)?;
                let scores: Vec<f64> = (0..self.encodings.rows()).map(|i| dot(&q, self.encodings.row(i))).collect();
                let idx = top_k(&scores, k)?;
                let s = idx.iter().map(|&i| scores[i]).collect();
                Ok(RetrievalResult::new(idx, s))
            }
            RetrievalPolicy::Cosine => select_cosine(xn, self.pkb, &all, k),
            RetrievalPolicy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ window_digest(raw));
                select_random(&all, k, &mut rng)
            }
        }
    }

    /// Retrieval-augmented forecast in the original scale.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !self.model.fusion.policy().uses_candidates() {
            return self.model.backbone.predict(x);
        }
        let (xn, stats) = instance_normalize(x);
        let sel = self.retrieve_normalized(&xn, x)?;
        let yn = self.model.forecast_with(&xn, self.pkb, &sel.indices)?;
        let y = denormalize(&yn, stats);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forecast"));
        }
        Ok(y)
    }
}

/// One-off retrieval-augmented forecast. Prefer [`Predictor`] for many windows.
pub fn predict_raf(x: &[f64], pkb: &PreparedKb, model: &RafModel, cfg: &TrainConfig) -> Result<Vec<f64>> {
    Predictor::new(model, pkb, cfg)?.predict(x)
}

fn window_digest(x: &[f64]) -> u64 {
    let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
    let mut d = crc.digest();
    for v in x {
        d.update(&v.to_bits().to_le_bytes());
    }
    d.finalize()
}

fn select_cosine(xn: &[f64], pkb: &PreparedKb, eligible: &[usize], k: usize) -> Result<RetrievalResult> {
    let xnorm = l2_norm(xn);
    let scores: Vec<f64> = eligible.iter().map(|&i| pkb.cosine(xn, xnorm, i)).collect();
    let pos = top_k(&scores, k)?;
    Ok(RetrievalResult::new(
        pos.iter().map(|&p| eligible[p]).collect(),
        pos.iter().map(|&p| scores[p]).collect(),
    ))
}

fn select_random<R: Rng + ?Sized>(eligible: &[usize], k: usize, rng: &mut R) -> Result<RetrievalResult> {
    if eligible.len() < k {
        return Err(Error::InsufficientCandidates {
            available: eligible.len(),
            needed: k,
        });
    }
    let idx: Vec<usize> = rand::seq::index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|p| eligible[p])
        .collect();
    Ok(RetrievalResult::new(idx, vec![0.0; k]))
}

/// Losses and gradients of the joint objective for a fixed candidate set.
#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub loss: f64,
    pub pred_loss: f64,
    pub retrieval_loss: f64,
    /// Gradients of `L_Pred` for the fusion parameters, if it has any.
    pub fusion_grads: Option<Grads>,
    /// Gradients of `λ·L_R` for the retriever encoders, if a target was given.
    pub retriever_grads: Option<RetrieverGrads>,
}

/// `L = L_Pred + λ·L_R` for the candidates `indices`, with the retrieval
/// target `target` held fixed. Pass `target = None` to drop the retrieval term.
pub fn joint_loss(
    model: &RafModel,
    pair: &WindowPair,
    pkb: &PreparedKb,
    indices: &[usize],
    target: Option<&[f64]>,
    lambda: f64,
    tau_s: f64,
) -> Result<JointOutcome> {
    let (xn, _) = instance_normalize(&pair.x);
    let yn = pair.normalized_target();
    let x_emb = model.backbone.embed_window(&xn)?;
    let cands: Vec<&Matrix> = indices.iter().map(|&i| pkb.embedding(i)).collect();

    let (fused, ftrace) = model.fusion.fuse_traced(&x_emb, &cands)?;
    let (pred, btrace) = model.backbone.forecast_traced(&fused)?;
    let pred_loss = mse(&pred, &yn)?;
    let fusion_grads = match model.fusion.params() {
        Some(p) => {
            let mut g = Grads::for_params(p);
            let dfused = model.backbone.embedding_grad(&btrace, &mse_grad(&pred, &yn)?, None)?;
            model.fusion.backward(&ftrace, &dfused, Some(&mut g))?;
            Some(g)
        }
        None => None,
    };

    let (retrieval, retriever_grads) = match target {
        Some(p) => {
            let cand_windows: Vec<&[f64]> = indices.iter().map(|&i| pkb.normalized(i)).collect();
            let (scores, strace) = model.retriever.score_traced(&xn, &cand_windows)?;
            let (l, g) = retrieval_loss(&scores, p, tau_s)?;
            let mut grads = model.retriever.grads();
            if lambda != 0.0 {
                let scaled: Vec<f64> = g.iter().map(|v| lambda * v).collect();
                model.retriever.backward(&strace, &scaled, &mut grads)?;
            }
            (l, Some(grads))
        }
        None => (0.0, None),
    };
    Ok(JointOutcome {
        loss: pred_loss + lambda * retrieval,
        pred_loss,
        retrieval_loss: retrieval,
        fusion_grads,
        retriever_grads,
    })
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub pred_loss: f64,
    pub retrieval_loss: f64,
    pub query_dataset: String,
    pub indices: Vec<usize>,
    pub augmented: Vec<bool>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingLog {
    pub steps: Vec<StepStats>,
    /// Mean `L_Pred` over each epoch's steps.
    pub epoch_pred_loss: Vec<f64>,
    /// Steps skipped because fewer than `k` candidates were eligible.
    pub skipped: usize,
}

/// Owns the model being trained and its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: RafModel,
    query_opt: OptimizerState,
    cand_opt: OptimizerState,
    fusion_opt: Option<OptimizerState>,
    rng: ChaCha8Rng,
    step: usize,
    skipped: usize,
    initial_loss: Option<f64>,
}

/// Losses above this multiple of the initial loss abort training. The
/// initial loss is the mean bare-backbone loss over the training pairs when
/// training through [`Trainer::train`], else the first step's loss.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

impl Trainer {
    pub fn new(model: RafModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.fusion.policy() != cfg.fusion_policy {
            return Err(Error::Config("model fusion does not match the configured fusion policy".into()));
        }
        let query_opt = OptimizerState::new(cfg.optimizer, cfg.lr_retriever, model.retriever.query_encoder());
        let cand_opt = OptimizerState::new(cfg.optimizer, cfg.lr_retriever, model.retriever.cand_encoder());
        let fusion_opt = model
            .fusion
            .params()
            .map(|p| OptimizerState::new(cfg.optimizer, cfg.lr_fusion, p));
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            cfg,
            model,
            query_opt,
            cand_opt,
            fusion_opt,
            step: 0,
            skipped: 0,
            initial_loss: None,
        })
    }

    pub fn model(&self) -> &RafModel {
        &self.model
    }

    pub fn into_model(self) -> RafModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn select_training(&mut self, xn: &[f64], pkb: &PreparedKb, eligible: &[usize]) -> Result<RetrievalResult> {
        let k = self.cfg.hyper.k;
        let result = match self.cfg.retrieval_policy {
            RetrievalPolicy::Learned => {
                let r = &self.model.retriever;
                let q = r.encode_query(xn)?;
                let enc = r.encode_candidates(pkb.normalized_matrix())?;
                let scores: Vec<f64> = eligible.iter().map(|&i| dot(&q, enc.row(i))).collect();
                let pos = top_k(&scores, k)?;
                RetrievalResult::new(
                    pos.iter().map(|&p| eligible[p]).collect(),
                    pos.iter().map(|&p| scores[p]).collect(),
                )
            }
            RetrievalPolicy::Cosine => select_cosine(xn, pkb, eligible, k)?,
            RetrievalPolicy::Random => select_random(eligible, k, &mut self.rng)?,
        };
        let policy = self.cfg.retrieval_policy;
        let model = &self.model;
        let xnorm = l2_norm(xn);
        let q = match policy {
            RetrievalPolicy::Learned => Some(model.retriever.encode_query(xn)?),
            _ => None,
        };
        let (result, _) = augment(result, eligible, self.cfg.hyper.rho, &mut self.rng, |i| match policy {
            RetrievalPolicy::Learned => Ok(dot(q.as_deref().unwrap_or(&[]), &model.retriever.encode_candidate(pkb.normalized(i))?)),
            RetrievalPolicy::Cosine => Ok(pkb.cosine(xn, xnorm, i)),
            RetrievalPolicy::Random => Ok(0.0),
        })?;
        Ok(result)
    }

    /// One joint update on a single window pair. Returns `None` when the
    /// pair was skipped for lack of eligible candidates.
    pub fn train_step(&mut self, pair: &WindowPair, pkb: &PreparedKb, epoch: usize) -> Result<Option<StepStats>> {
        if !self.model.fusion.policy().uses_candidates() {
            return Ok(None);
        }
        let k = self.cfg.hyper.k;
        let eligible = match pkb.kb().eligible_candidates(&pair.source.dataset_id, true, k) {
            Ok(e) => e,
            Err(Error::InsufficientCandidates { .. }) => {
                self.skipped += 1;
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let (xn, _) = instance_normalize(&pair.x);
        let yn = pair.normalized_target();
        let mut sel = self.select_training(&xn, pkb, &eligible)?;

        let metrics = sel
            .indices
            .iter()
            .map(|&i| Ok(-mse(&self.model.forecast_with(&xn, pkb, &[i])?, &yn)?))
            .collect::<Result<Vec<f64>>>()?;
        let target = target_distribution(&metrics, self.cfg.hyper.tau_m)?;

        let learned = self.cfg.retrieval_policy == RetrievalPolicy::Learned;
        let out = joint_loss(
            &self.model,
            pair,
            pkb,
            &sel.indices,
            if learned { Some(&target) } else { None },
            self.cfg.lambda,
            self.cfg.hyper.tau_s,
        )?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let initial = *self.initial_loss.get_or_insert(out.loss);
        let limit = DIVERGENCE_FACTOR * initial;
        if initial > 0.0 && out.loss > limit {
            return Err(Error::Diverged {
                step: self.step,
                loss: out.loss,
                limit,
            });
        }

        if let (Some(mut g), Some(opt), Some(p)) = (out.fusion_grads, self.fusion_opt.as_mut(), self.model.fusion.params_mut()) {
            opt.step(p, &mut g)?;
        }
        if let Some(mut g) = out.retriever_grads {
            if self.cfg.lambda != 0.0 {
                self.query_opt.step(self.model.retriever.query_encoder_mut(), &mut g.query)?;
                self.cand_opt.step(self.model.retriever.cand_encoder_mut(), &mut g.cand)?;
            }
        }

        sel.target = Some(target);
        let stats = StepStats {
            step: self.step,
            epoch,
            loss: out.loss,
            pred_loss: out.pred_loss,
            retrieval_loss: out.retrieval_loss,
            query_dataset: pair.source.dataset_id.clone(),
            indices: sel.indices,
            augmented: sel.augmented,
            target: sel.target.unwrap_or_default(),
        };
        self.step += 1;
        Ok(Some(stats))
    }

    /// Runs all configured epochs over `pairs` in a seeded shuffled order,
    /// calling `on_epoch(epoch, model)` after each one.
    pub fn train<F>(&mut self, pairs: &[WindowPair], pkb: &PreparedKb, mut on_epoch: F) -> Result<TrainingLog>
    where
        F: FnMut(usize, &RafModel) -> Result<()>,
    {
        if pairs.is_empty() {
            return Err(Error::Empty("training pairs"));
        }
        if self.initial_loss.is_none() {
            self.initial_loss = Some(self.model.backbone.normalized_mse(pairs)?);
        }
        let mut log = TrainingLog::default();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut count = 0usize;
            for &i in &order {
                if let Some(s) = self.train_step(&pairs[i], pkb, epoch)? {
                    total += s.pred_loss;
                    count += 1;
                    log.steps.push(s);
                }
            }
            log.epoch_pred_loss.push(if count > 0 { total / count as f64 } else { 0.0 });
            on_epoch(epoch, &self.model)?;
        }
        log.skipped = self.skipped;
        Ok(log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetScore {
    pub mse: f64,
    pub windows: usize,
}

/// Original-scale sliding-window MSE.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub mse: f64,
    pub windows: usize,
    pub per_dataset: BTreeMap<String, DatasetScore>,
    /// Per-window `ŷ − y`, when requested.
    pub residuals: Option<Vec<Vec<f64>>>,
}

/// Per-window MSEs averaged in index order.
pub fn evaluate<F>(pairs: &[WindowPair], keep_residuals: bool, mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&WindowPair) -> Result<Vec<f64>>,
{
    let predictions = pairs.iter().map(&mut predict).collect::<Result<Vec<_>>>()?;
    report_from_predictions(pairs, &predictions, keep_residuals)
}

/// Builds the report from predictions already computed (possibly out of order).
pub fn report_from_predictions(pairs: &[WindowPair], predictions: &[Vec<f64>], keep_residuals: bool) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation windows"));
    }
    check_len("prediction count", pairs.len(), predictions.len())?;
    let mut total = 0.0;
    let mut per: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut residuals = keep_residuals.then(Vec::new);
    for (p, yhat) in pairs.iter().zip(predictions) {
        let m = mse(yhat, &p.y)?;
        if !m.is_finite() {
            return Err(Error::NonFinite("evaluation error"));
        }
        total += m;
        let e = per.entry(p.source.dataset_id.clone()).or_insert((0.0, 0));
        e.0 += m;
        e.1 += 1;
        if let Some(r) = residuals.as_mut() {
            r.push(yhat.iter().zip(&p.y).map(|(a, b)| a - b).collect());
        }
    }
    Ok(EvalReport {
        mse: total / pairs.len() as f64,
        windows: pairs.len(),
        per_dataset: per
            .into_iter()
            .map(|(k, (s, n))| (k, DatasetScore { mse: s / n as f64, windows: n }))
            .collect(),
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneDims;
    use crate::kbase::KbEntry;
    use crate::numkit::{Activation, MlpParams};
    use crate::tsdata::{sliding_windows, Series, WindowSource};
    use alloc::format;
    use alloc::string::ToString;

    fn dims() -> BackboneDims {
        BackboneDims {
            sl: 16,
            fl: 4,
            patch_len: 4,
            d: 3,
        }
    }

    fn wave(len: usize, period: f64, phase: f64) -> Vec<f64> {
        (0..len)
            .map(|t| libm::sin(2.0 * core::f64::consts::PI * t as f64 / period + phase) + 0.01 * t as f64)
            .collect()
    }

    fn series(id: &str, domain: &str, values: Vec<f64>) -> Series {
        Series {
            values,
            channel_id: "c0".to_string(),
            dataset_id: id.to_string(),
            domain: domain.to_string(),
            frequency: "h".to_string(),
        }
    }

    fn frozen_backbone(seed: u64) -> Backbone {
        let mut b = Backbone::new(dims(), seed).unwrap();
        b.freeze();
        b
    }

    fn toy_kb(sl: usize) -> KnowledgeBase {
        let entries = (0..12)
            .map(|i| KbEntry {
                values: wave(sl, 3.0 + i as f64, 0.3 * i as f64),
                domain: format!("dom{}", i % 2),
                dataset_id: format!("ds{}", i % 3),
                channel_id: "c0".to_string(),
                start: 0,
            })
            .collect();
        KnowledgeBase::from_entries(sl, entries, 0).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hyper: RetrieverHyper {
                k: 3,
                ..RetrieverHyper::default()
            },
            lr_fusion: 1e-3,
            embed_dim: 8,
            ..TrainConfig::default()
        }
    }

    fn pairs(id: &str) -> Vec<WindowPair> {
        sliding_windows(&series(id, "dom0", wave(60, 7.0, 0.1)), 16, 4, 4)
    }

    #[test]
    fn divergence_is_measured_against_the_initial_loss() {
        let mut b = Backbone::new(dims(), 4).unwrap();
        b.zero_head();
        b.freeze();
        let pkb = PreparedKb::new(toy_kb(16), &b).unwrap();
        let x = wave(16, 5.0, 0.0);
        let stats = crate::tsdata::norm_stats(&x);
        // The zero head forecasts the window mean, so normalized losses are
        // 1e-6 and 900.
        let pair = |offset: f64| WindowPair {
            x: x.clone(),
            y: vec![stats.mean + offset * stats.std; 4],
            stats,
            source: WindowSource {
                dataset_id: "q".into(),
                channel_id: "c0".into(),
                start: 0,
            },
        };
        let (easy, hard) = (pair(1e-3), pair(30.0));
        let cfg = TrainConfig {
            lambda: 0.0,
            epochs: 1,
            ..small_cfg()
        };
        let mut t = Trainer::new(RafModel::new(b.clone(), &cfg).unwrap(), cfg).unwrap();
        assert!(t.train_step(&easy, &pkb, 0).unwrap().is_some());
        assert!(matches!(t.train_step(&hard, &pkb, 0), Err(Error::Diverged { step: 1, .. })));

        let mut t = Trainer::new(RafModel::new(b, &cfg).unwrap(), cfg).unwrap();
        let log = t.train(&[easy, hard], &pkb, |_, _| Ok(())).unwrap();
        assert_eq!(log.steps.len(), 2);
    }

    #[test]
    fn defaults_echo_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.hyper.k, 8);
        assert_eq!((c.lr_retriever, c.lr_fusion, c.epochs), (1e-3, 1e-5, 2));
        assert!(TrainConfig { lambda: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn zero_fusion_is_bare_backbone() {
        let cfg = small_cfg();
        let model = RafModel::new(frozen_backbone(1), &cfg).unwrap();
        let pkb = PreparedKb::new(toy_kb(16), &model.backbone).unwrap();
        let pred = Predictor::new(&model, &pkb, &cfg).unwrap();
        for p in pairs("q") {
            assert_eq!(pred.predict(&p.x).unwrap(), model.backbone.predict(&p.x).unwrap());
        }
    }

    #[test]
    fn first_step_pred_loss_equals_backbone() {
        let cfg = small_cfg();
        let model = RafModel::new(frozen_backbone(2), &cfg).unwrap();
        let pkb = PreparedKb::new(toy_kb(16), &model.backbone).unwrap();
        let p = &pairs("q")[0];
        let bare = model.backbone.normalized_mse(core::slice::from_ref(p)).unwrap();
        let mut t = Trainer::new(model, cfg).unwrap();
        let s = t.train_step(p, &pkb, 0).unwrap().unwrap();
        assert_eq!(s.pred_loss, bare);
        assert_eq!(s.loss, s.pred_loss + cfg.lambda * s.retrieval_loss);
    }

    #[test]
    fn lambda_zero_leaves_retriever_untouched() {
        let cfg = TrainConfig { lambda: 0.0, ..small_cfg() };
        let model = RafModel::new(frozen_backbone(3), &cfg).unwrap();
        let pkb = PreparedKb::new(toy_kb(16), &model.backbone).unwrap();
        let p = &pairs("q")[1];
        let out = joint_loss(&model, p, &pkb, &[0, 1, 2], Some(&[0.5, 0.25, 0.25]), 0.0, 1.0).unwrap();
        let g = out.retriever_grads.unwrap();
        assert!(g.query.is_zero() && g.cand.is_zero());
        let before = model.retriever.fingerprint();
        let mut t = Trainer::new(model, cfg).unwrap();
        for p in pairs("q").iter().take(4) {
            t.train_step(p, &pkb, 0).unwrap();
        }
        assert_eq!(t.model().retriever.fingerprint(), before);
    }

    #[test]
    fn training_never_retrieves_own_dataset() {
        let cfg = small_cfg();
        let model = RafModel::new(frozen_backbone(4), &cfg).unwrap();
        let pkb = PreparedKb::new(toy_kb(16), &model.backbone).unwrap();
        let mut all = pairs("ds0");
        all.extend(pairs("ds1"));
        let backbone_hash = model.backbone.fingerprint();
        let mut t = Trainer::new(model, cfg).unwrap();
        let log = t.train(&all, &pkb, |_, _| Ok(())).unwrap();
        assert_eq!(log.steps.len(), 2 * all.len());
        for s in &log.steps {
            for &i in &s.indices {
                assert_ne!(pkb.kb().entry(i).dataset_id, s.query_dataset);
            }
            assert_eq!(s.loss, s.pred_loss + s.retrieval_loss);
            let mut u = s.indices.clone();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), 3);
        }
        assert_eq!(t.model().backbone.fingerprint(), backbone_hash);
    }

    #[test]
    fn insufficient_candidates_are_skipped() {
        let cfg = TrainConfig {
            hyper: RetrieverHyper {
                k: 9,
                ..RetrieverHyper::default()
            },
            ..small_cfg()
        };
        let model = RafModel::new(frozen_backbone(5), &cfg).unwrap();
        let pkb = PreparedKb::new(toy_kb(16), &model.backbone).unwrap();
        let mut t = Trainer::new(model, cfg).unwrap();
        // ds0 owns 4 of 12 entries, leaving 8 < 9 eligible.
        assert_eq!(t.train_step(&pairs("ds0")[0], &pkb, 0).unwrap(), None);
        assert_eq!(t.skipped(), 1);
        assert!(t.train_step(&pairs("other")[0], &pkb, 0).unwrap().is_some());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let cfg = small_cfg();
            let model = RafModel::new(frozen_backbone(6), &cfg).unwrap();
            let pkb = PreparedKb::new(toy_kb(16), &model.backbone).unwrap();
            let mut t = Trainer::new(model, cfg).unwrap();
            let log = t.train(&pairs("ds2"), &pkb, |_, _| Ok(())).unwrap();
            (log, t.into_model())
        };
        let (la, ma) = run();
        let (lb, mb) = run();
        assert_eq!(la, lb);
        assert_eq!(ma, mb);
    }

    #[test]
    fn all_policies_train_and_predict() {
        for rp in RetrievalPolicy::ALL {
            for fp in FusionPolicy::ALL {
                let cfg = TrainConfig {
                    retrieval_policy: rp,
                    fusion_policy: fp,
                    epochs: 1,
                    ..small_cfg()
                };
                let model = RafModel::new(frozen_backbone(7), &cfg).unwrap();
                let pkb = PreparedKb::new(toy_kb(16), &model.backbone).unwrap();
                let mut t = Trainer::new(model, cfg).unwrap();
                let log = t.train(&pairs("ds1"), &pkb, |_, _| Ok(())).unwrap();
                if fp == FusionPolicy::None {
                    assert!(log.steps.is_empty());
                }
                let model = t.into_model();
                let pred = Predictor::new(&model, &pkb, &cfg).unwrap();
                let x = &pairs("q")[0].x;
                let a = pred.predict(x).unwrap();
                assert_eq!(a, pred.predict(x).unwrap(), "{rp:?}/{fp:?}");
                if fp == FusionPolicy::None {
                    assert_eq!(a, model.backbone.predict(x).unwrap());
                }
            }
        }
    }

    #[test]
    fn identical_candidates_give_identical_fusion_across_policies() {
        let cfg = small_cfg();
        let mut model = RafModel::new(frozen_backbone(8), &cfg).unwrap();
        if let Some(p) = model.fusion.params_mut() {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            *p = MlpParams::init(&[24, 24, 12, 12, 12], Activation::Identity, &mut rng).unwrap();
        }
        let pkb = PreparedKb::new(toy_kb(16), &model.backbone).unwrap();
        let p = &pairs("q")[0];
        let (xn, _) = instance_normalize(&p.x);
        let cos = select_cosine(&xn, &pkb, &(0..12).collect::<Vec<_>>(), 3).unwrap();
        let direct = model.forecast_with(&xn, &pkb, &cos.indices).unwrap();
        let via_loss = joint_loss(&model, p, &pkb, &cos.indices, None, 1.0, 1.0).unwrap();
        assert_eq!(via_loss.pred_loss, mse(&direct, &p.normalized_target()).unwrap());
    }

    #[test]
    fn cosine_selection_matches_brute_force() {
        let b = frozen_backbone(9);
        let pkb = PreparedKb::new(toy_kb(16), &b).unwrap();
        let (xn, _) = instance_normalize(&wave(16, 5.0, 0.0));
        let eligible: Vec<usize> = (0..12).filter(|i| i % 3 != 0).collect();
        let got = select_cosine(&xn, &pkb, &eligible, 3).unwrap();
        let mut sims: Vec<(f64, usize)> = eligible
            .iter()
            .map(|&i| {
                let c = pkb.normalized(i);
                (dot(&xn, c) / (l2_norm(&xn) * l2_norm(c)), i)
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(got.indices, sims.iter().take(3).map(|s| s.1).collect::<Vec<_>>());
    }

    #[test]
    fn random_inference_is_seeded_per_query() {
        let cfg = TrainConfig {
            retrieval_policy: RetrievalPolicy::Random,
            ..small_cfg()
        };
        let model = RafModel::new(frozen_backbone(10), &cfg).unwrap();
        let pkb = PreparedKb::new(toy_kb(16), &model.backbone).unwrap();
        let pred = Predictor::new(&model, &pkb, &cfg).unwrap();
        let x = &pairs("q")[0].x;
        assert_eq!(pred.retrieve(x).unwrap(), pred.retrieve(x).unwrap());
        let other = TrainConfig { seed: 99, ..cfg };
        let pred2 = Predictor::new(&model, &pkb, &other).unwrap();
        let a: Vec<_> = pairs("q").iter().map(|p| pred.retrieve(&p.x).unwrap().indices).collect();
        let b: Vec<_> = pairs("q").iter().map(|p| pred2.retrieve(&p.x).unwrap().indices).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn small_kb_is_rejected_at_inference() {
        let cfg = TrainConfig {
            hyper: RetrieverHyper {
                k: 13,
                ..RetrieverHyper::default()
            },
            ..small_cfg()
        };
        let model = RafModel::new(frozen_backbone(11), &cfg).unwrap();
        let pkb = PreparedKb::new(toy_kb(16), &model.backbone).unwrap();
        assert!(matches!(
            predict_raf(&pairs("q")[0].x, &pkb, &model, &cfg),
            Err(Error::InsufficientCandidates { available: 12, needed: 13 })
        ));
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        // k = 2, n = 2, d = 4.
        let d = BackboneDims {
            sl: 6,
            fl: 3,
            patch_len: 3,
            d: 4,
        };
        for seed in 0..3u64 {
            let mut b = Backbone::new(d, 40 + seed).unwrap();
            b.freeze();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let retriever = Retriever::new(6, 5, &mut rng).unwrap();
            let fmlp = MlpParams::init(&[16, 16, 8, 8, 8], Activation::Identity, &mut rng).unwrap();
            let fusion = Fusion::ChannelPrompt(crate::fusion::ChannelPrompt::from_params(fmlp, 2, 4).unwrap());
            let model = RafModel::from_parts(b, retriever, fusion).unwrap();
            let entries = (0..3)
                .map(|i| KbEntry {
                    values: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    domain: "a".to_string(),
                    dataset_id: format!("k{i}"),
                    channel_id: "c".to_string(),
                    start: 0,
                })
                .collect();
            let pkb = PreparedKb::new(KnowledgeBase::from_entries(6, entries, 0).unwrap(), &model.backbone).unwrap();
            let values: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pair = sliding_windows(&series("q", "a", values), 6, 3, 1).remove(0);
            let target = [0.7, 0.3];
            let (lambda, tau_s) = (0.8, 0.5);
            let loss = |m: &RafModel| joint_loss(m, &pair, &pkb, &[2, 0], Some(&target), lambda, tau_s).unwrap().loss;
            let out = joint_loss(&model, &pair, &pkb, &[2, 0], Some(&target), lambda, tau_s).unwrap();
            let rg = out.retriever_grads.unwrap();
            let fg = out.fusion_grads.unwrap();

            type Access = fn(&mut RafModel) -> &mut MlpParams;
            let parts: [(Access, Vec<f64>); 3] = [
                (|m| m.retriever.query_encoder_mut(), rg.query.flat()),
                (|m| m.retriever.cand_encoder_mut(), rg.cand.flat()),
                (|m| m.fusion.params_mut().unwrap(), fg.flat()),
            ];
            let h = 1e-6;
            for (access, analytic) in parts {
                for (i, an) in analytic.iter().enumerate() {
                    let mut m = model.clone();
                    let orig = *access(&mut m).param_mut(i);
                    *access(&mut m).param_mut(i) = orig + h;
                    let up = loss(&m);
                    *access(&mut m).param_mut(i) = orig - h;
                    let dn = loss(&m);
                    let fd = (up - dn) / (2.0 * h);
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                    assert!(err < 1e-4, "seed {seed} param {i}: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn evaluation_loop_oracle() {
        let s = series("e", "a", wave(700, 11.0, 0.0));
        let all = sliding_windows(&s, 512, 96, 1);
        assert_eq!(all.len(), 93);
        let perfect = evaluate(&all, false, |p| Ok(p.y.clone())).unwrap();
        assert_eq!(perfect.mse, 0.0);
        assert_eq!(perfect.windows, 93);

        let ten = &all[..10];
        let guess = |p: &WindowPair| Ok(vec![p.x[511]; 96]);
        let rep = evaluate(ten, true, guess).unwrap();
        let mut total = 0.0;
        for p in ten {
            let mut se = 0.0;
            for v in &p.y {
                se += (p.x[511] - v) * (p.x[511] - v);
            }
            total += se / 96.0;
        }
        assert_eq!(rep.mse, total / 10.0);
        assert_eq!(rep.per_dataset["e"].windows, 10);
        assert_eq!(rep.residuals.unwrap().len(), 10);
        assert_eq!(evaluate(&[], false, guess), Err(Error::Empty("evaluation windows")));
    }
}
