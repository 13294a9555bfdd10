//! The zero-shot benchmark and ablation grid.
//!
//! Per seed: generate a corpus, pretrain the backbone on the source domains,
//! build a balanced knowledge base from every non-held-out series, then train
//! and evaluate one model per grid cell on the held-out series of the target
//! domain. Cells within a seed share data, backbone and knowledge base.

use std::collections::BTreeMap;
use std::time::Instant;

use rafcast_core::backbone::{Backbone, BackboneDims, PretrainConfig, PretrainReport};
use rafcast_core::fusion::FusionPolicy;
use rafcast_core::kbase::KnowledgeBase;
use rafcast_core::trainer::{
    report_from_predictions, EvalReport, Predictor, PreparedKb, RafModel, RetrievalPolicy, TrainConfig, Trainer,
    TrainingLog,
};
use rafcast_core::tsdata::{sliding_windows, Series, WindowPair};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{generate, SyntheticSpec};

/// Where the knowledge base comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbSource {
    /// No retrieval: the bare backbone through the fusion bypass.
    Without,
    /// Equal quota per domain.
    Curated,
    /// Uniform over the pooled window grid; inherits corpus imbalance.
    Random,
    /// Only the target domain.
    DomainSpecific,
}

impl KbSource {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Without => "without",
            Self::Curated => "curated",
            Self::Random => "random",
            Self::DomainSpecific => "domain_specific",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub synth: SyntheticSpec,
    /// Domain evaluated zero-shot and excluded from backbone pretraining.
    pub target_domain: String,
    pub dims: BackboneDims,
    pub pretrain: PretrainConfig,
    pub pretrain_stride: usize,
    pub train: TrainConfig,
    pub train_stride: usize,
    pub test_stride: usize,
    pub kb_per_domain: usize,
    pub seeds: Vec<u64>,
    /// (retrieval, fusion) pairs to train.
    pub cells: Vec<(RetrievalPolicy, FusionPolicy)>,
    /// Inference-time KB fractions applied to the learned channel-prompt model.
    pub kb_fractions: Vec<f64>,
    /// Knowledge-base sources, each trained with learned retrieval and channel prompting.
    pub kb_sources: Vec<KbSource>,
}

impl BenchConfig {
    /// Small enough for a laptop: `sl = 64`, `fl = 16`, eight patches of 8.
    pub fn desk() -> Self {
        let dims = BackboneDims {
            sl: 64,
            fl: 16,
            patch_len: 8,
            d: 8,
        };
        Self {
            synth: SyntheticSpec::three_domain(8, 4, 2560),
            target_domain: "C".into(),
            dims,
            pretrain: PretrainConfig {
                epochs: 20,
                lr: 1e-3,
                batch_size: 16,
                seed: 0,
                ..PretrainConfig::default()
            },
            pretrain_stride: 8,
            train: TrainConfig {
                lr_fusion: 1e-3,
                ..TrainConfig::default()
            },
            train_stride: 64,
            test_stride: 16,
            kb_per_domain: 300,
            seeds: vec![0, 1, 2],
            cells: vec![
                (RetrievalPolicy::Learned, FusionPolicy::ChannelPrompt),
                (RetrievalPolicy::Cosine, FusionPolicy::ChannelPrompt),
                (RetrievalPolicy::Random, FusionPolicy::ChannelPrompt),
                (RetrievalPolicy::Learned, FusionPolicy::TokenConcat),
                (RetrievalPolicy::Learned, FusionPolicy::Average),
            ],
            kb_fractions: vec![1.0, 0.5, 0.3, 0.1, 0.01],
            kb_sources: vec![KbSource::Without, KbSource::Random, KbSource::Curated, KbSource::DomainSpecific],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.dims.validate()?;
        self.train.validate()?;
        if !self.synth.domains.iter().any(|d| d.name == self.target_domain) {
            return Err(Error::Config(format!("target domain {:?} is not in the corpus", self.target_domain)));
        }
        if self.pretrain_stride == 0 || self.train_stride == 0 || self.test_stride == 0 {
            return Err(Error::Config("window strides must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// Everything a seed's cells share.
pub struct SeedContext {
    pub seed: u64,
    pub backbone: Backbone,
    pub pretrain_report: PretrainReport,
    pub pool: Vec<Series>,
    pub train_pairs: Vec<WindowPair>,
    pub test_pairs: Vec<WindowPair>,
    pub kb: KnowledgeBase,
}

/// Every sliding window of every series, series by series.
pub fn windows(series: &[Series], dims: BackboneDims, stride: usize) -> Vec<WindowPair> {
    series
        .iter()
        .flat_map(|s| sliding_windows(s, dims.sl, dims.fl, stride))
        .collect()
}

/// Derives a stage seed from a run seed.
pub fn mix(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

impl SeedContext {
    pub fn prepare(cfg: &BenchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let corpus = generate(&cfg.synth, mix(seed, 1))?;
        let (pool, held): (Vec<_>, Vec<_>) = corpus.into_iter().partition(|g| !g.heldout);
        let pool: Vec<Series> = pool.into_iter().map(|g| g.series).collect();
        let test: Vec<Series> = held
            .into_iter()
            .map(|g| g.series)
            .filter(|s| s.domain == cfg.target_domain)
            .collect();
        if test.is_empty() {
            return Err(Error::Config("no held-out series in the target domain".into()));
        }
        let source: Vec<Series> = pool.iter().filter(|s| s.domain != cfg.target_domain).cloned().collect();
        let mut backbone = Backbone::new(cfg.dims, mix(seed, 2))?;
        let pretrain_report = backbone.pretrain(
            &windows(&source, cfg.dims, cfg.pretrain_stride),
            &PretrainConfig {
                seed: mix(seed, 3),
                ..cfg.pretrain
            },
        )?;
        let kb = KnowledgeBase::build(&pool, cfg.dims.sl, cfg.kb_per_domain, mix(seed, 4))?;
        Ok(Self {
            seed,
            backbone,
            pretrain_report,
            train_pairs: windows(&pool, cfg.dims, cfg.train_stride),
            test_pairs: windows(&test, cfg.dims, cfg.test_stride),
            pool,
            kb,
        })
    }

    pub fn kb_for(&self, cfg: &BenchConfig, source: KbSource) -> Result<KnowledgeBase> {
        Ok(match source {
            KbSource::Without | KbSource::Curated => self.kb.clone(),
            KbSource::Random => KnowledgeBase::build_pooled(&self.pool, cfg.dims.sl, self.kb.len(), mix(self.seed, 5))?,
            KbSource::DomainSpecific => self.kb.restrict_to_domain(&cfg.target_domain),
        })
    }

    pub fn train_cell(&self, cfg: &TrainConfig, pkb: &PreparedKb) -> Result<(RafModel, TrainingLog)> {
        let model = RafModel::new(self.backbone.clone(), cfg)?;
        let mut trainer = Trainer::new(model, *cfg)?;
        let log = trainer.train(&self.train_pairs, pkb, |_, _| Ok(()))?;
        Ok((trainer.into_model(), log))
    }

    pub fn evaluate(&self, model: &RafModel, pkb: &PreparedKb, cfg: &TrainConfig) -> Result<EvalReport> {
        let pred = Predictor::new(model, pkb, cfg)?;
        let ys = self
            .test_pairs
            .iter()
            .map(|p| pred.predict(&p.x))
            .collect::<rafcast_core::Result<Vec<_>>>()?;
        Ok(report_from_predictions(&self.test_pairs, &ys, false)?)
    }

    pub fn evaluate_bare(&self) -> Result<EvalReport> {
        let ys = self
            .test_pairs
            .iter()
            .map(|p| self.backbone.predict(&p.x))
            .collect::<rafcast_core::Result<Vec<_>>>()?;
        Ok(report_from_predictions(&self.test_pairs, &ys, false)?)
    }
}

/// One ablation grid entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub axis: String,
    pub seed: u64,
    pub retrieval: Option<RetrievalPolicy>,
    pub fusion: FusionPolicy,
    pub kb_source: Option<KbSource>,
    pub kb_fraction: Option<f64>,
    pub kb_size: usize,
    pub mse: Option<f64>,
    pub skipped: Option<String>,
    pub train_steps: usize,
    pub config: TrainConfig,
}

impl Cell {
    pub fn label(&self) -> String {
        let mut s = format!("{}:{}", self.retrieval.map_or("none", |r| r.name()), self.fusion.name());
        if let Some(src) = self.kb_source {
            s += &format!(":kb={}", src.name());
        }
        if let Some(f) = self.kb_fraction {
            s += &format!(":frac={f}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<Cell>,
    pub bare_mse: BTreeMap<u64, f64>,
    pub pretrain_losses: BTreeMap<u64, Vec<f64>>,
}

/// Mean over seeds per (axis, label); skipped cells are left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis: String,
    pub label: String,
    pub mean_mse: Option<f64>,
    pub seeds: usize,
}

impl AblationReport {
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        let mut order = Vec::new();
        for c in &self.cells {
            let key = (c.axis.clone(), c.label());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            let e = groups.entry(key).or_default();
            if let Some(m) = c.mse {
                e.push(m);
            }
        }
        let bare: Vec<f64> = self.bare_mse.values().copied().collect();
        let mut rows = vec![SummaryRow {
            axis: "baseline".into(),
            label: "none:none".into(),
            mean_mse: mean(&bare),
            seeds: bare.len(),
        }];
        for key in order {
            let v = &groups[&key];
            rows.push(SummaryRow {
                axis: key.0,
                label: key.1,
                mean_mse: mean(v),
                seeds: v.len(),
            });
        }
        rows
    }

    /// Seed-mean MSE of the first cell matching `pred`.
    pub fn mean_where(&self, pred: impl Fn(&Cell) -> bool) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| pred(c)).filter_map(|c| c.mse).collect();
        mean(&v)
    }

    pub fn bare_mean(&self) -> Option<f64> {
        mean(&self.bare_mse.values().copied().collect::<Vec<_>>())
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Progress hook: `(seed, cell label, mse, seconds)`.
pub type Progress<'a> = dyn FnMut(u64, &str, Option<f64>, f64) + 'a;
pub type SendProgress<'a> = dyn FnMut(u64, &str, Option<f64>, f64) + Send + 'a;

/// Runs the full grid for every configured seed.
pub fn run(cfg: &BenchConfig, progress: &mut Progress<'_>) -> Result<AblationReport> {
    cfg.validate()?;
    let results = cfg.seeds.iter().map(|&seed| run_one(cfg, seed, progress)).collect();
    collect(cfg, results)
}

/// Like [`run`], with up to `jobs` seeds in flight at once. Seeds share no
/// state, so the report is identical for every `jobs`.
pub fn run_parallel(cfg: &BenchConfig, jobs: usize, progress: &mut SendProgress<'_>) -> Result<AblationReport> {
    cfg.validate()?;
    let progress = std::sync::Mutex::new(progress);
    let one = |seed: u64| -> Result<SeedResult> {
        let hook = &mut |s: u64, l: &str, m: Option<f64>, t: f64| (progress.lock().expect("progress hook panicked"))(s, l, m, t);
        run_one(cfg, seed, hook)
    };
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for chunk in cfg.seeds.chunks(jobs.max(1)) {
        if chunk.len() == 1 {
            results.push(one(chunk[0]));
            continue;
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|&seed| scope.spawn(move || one(seed))).collect();
            results.extend(handles.into_iter().map(|h| h.join().expect("ablation worker panicked")));
        });
    }
    collect(cfg, results)
}

fn collect(cfg: &BenchConfig, results: Vec<Result<SeedResult>>) -> Result<AblationReport> {
    let mut report = AblationReport {
        cells: Vec::new(),
        bare_mse: BTreeMap::new(),
        pretrain_losses: BTreeMap::new(),
    };
    for (&seed, r) in cfg.seeds.iter().zip(results) {
        let r = r?;
        report.bare_mse.insert(seed, r.bare);
        report.pretrain_losses.insert(seed, r.pretrain_losses);
        report.cells.extend(r.cells);
    }
    Ok(report)
}

struct SeedResult {
    bare: f64,
    pretrain_losses: Vec<f64>,
    cells: Vec<Cell>,
}

fn run_one(cfg: &BenchConfig, seed: u64, progress: &mut Progress<'_>) -> Result<SeedResult> {
    let t0 = Instant::now();
    let ctx = SeedContext::prepare(cfg, seed)?;
    let bare = ctx.evaluate_bare()?.mse;
    progress(seed, "none:none", Some(bare), t0.elapsed().as_secs_f64());
    let mut cells = Vec::new();
    run_seed(cfg, &ctx, &mut cells, progress)?;
    Ok(SeedResult {
        bare,
        pretrain_losses: ctx.pretrain_report.epoch_losses.clone(),
        cells,
    })
}

fn train_cfg(cfg: &BenchConfig, seed: u64, retrieval: RetrievalPolicy, fusion: FusionPolicy) -> TrainConfig {
    TrainConfig {
        seed: mix(seed, 6),
        retrieval_policy: retrieval,
        fusion_policy: fusion,
        ..cfg.train
    }
}

fn run_seed(cfg: &BenchConfig, ctx: &SeedContext, cells: &mut Vec<Cell>, progress: &mut Progress<'_>) -> Result<()> {
    let pkb = PreparedKb::new(ctx.kb.clone(), &ctx.backbone)?;
    // The learned channel-prompt model on the curated KB, with its MSE and step count.
    let mut reference: Option<(RafModel, TrainConfig, f64, usize)> = None;
    for &(retrieval, fusion) in &cfg.cells {
        let t0 = Instant::now();
        let tc = train_cfg(cfg, ctx.seed, retrieval, fusion);
        let (model, log) = ctx.train_cell(&tc, &pkb)?;
        let mse = ctx.evaluate(&model, &pkb, &tc)?.mse;
        let cell = Cell {
            axis: "policy".into(),
            seed: ctx.seed,
            retrieval: Some(retrieval),
            fusion,
            kb_source: None,
            kb_fraction: None,
            kb_size: pkb.len(),
            mse: Some(mse),
            skipped: None,
            train_steps: log.steps.len(),
            config: tc,
        };
        progress(ctx.seed, &cell.label(), Some(mse), t0.elapsed().as_secs_f64());
        cells.push(cell);
        if retrieval == RetrievalPolicy::Learned && fusion == FusionPolicy::ChannelPrompt {
            reference = Some((model, tc, mse, log.steps.len()));
        }
    }

    if !cfg.kb_fractions.is_empty() {
        if reference.is_none() {
            let tc = train_cfg(cfg, ctx.seed, RetrievalPolicy::Learned, FusionPolicy::ChannelPrompt);
            let (model, log) = ctx.train_cell(&tc, &pkb)?;
            let mse = ctx.evaluate(&model, &pkb, &tc)?.mse;
            reference = Some((model, tc, mse, log.steps.len()));
        }
        let (model, tc) = reference.as_ref().map(|r| (&r.0, r.1)).expect("reference trained above");
        for &f in &cfg.kb_fractions {
            let t0 = Instant::now();
            let mut cell = Cell {
                axis: "kb_size".into(),
                seed: ctx.seed,
                retrieval: Some(RetrievalPolicy::Learned),
                fusion: FusionPolicy::ChannelPrompt,
                kb_source: None,
                kb_fraction: Some(f),
                kb_size: 0,
                mse: None,
                skipped: None,
                train_steps: 0,
                config: tc,
            };
            match ctx.kb.subsample(f, mix(ctx.seed, 7)) {
                Ok(kb) if kb.len() >= tc.hyper.k => {
                    cell.kb_size = kb.len();
                    let sub = PreparedKb::new(kb, &ctx.backbone)?;
                    cell.mse = Some(ctx.evaluate(model, &sub, &tc)?.mse);
                }
                Ok(kb) => {
                    cell.kb_size = kb.len();
                    cell.skipped = Some(format!("{} entries cannot supply k = {}", kb.len(), tc.hyper.k));
                }
                Err(e) => cell.skipped = Some(e.to_string()),
            }
            progress(ctx.seed, &cell.label(), cell.mse, t0.elapsed().as_secs_f64());
            cells.push(cell);
        }
    }

    for &source in &cfg.kb_sources {
        let t0 = Instant::now();
        let fusion = match source {
            KbSource::Without => FusionPolicy::None,
            _ => FusionPolicy::ChannelPrompt,
        };
        let tc = train_cfg(cfg, ctx.seed, RetrievalPolicy::Learned, fusion);
        let mut cell = Cell {
            axis: "kb_source".into(),
            seed: ctx.seed,
            retrieval: (source != KbSource::Without).then_some(RetrievalPolicy::Learned),
            fusion,
            kb_source: Some(source),
            kb_fraction: None,
            kb_size: 0,
            mse: None,
            skipped: None,
            train_steps: 0,
            config: tc,
        };
        match (source, &reference) {
            (KbSource::Curated, Some((_, _, mse, steps))) => {
                cell.kb_size = pkb.len();
                cell.mse = Some(*mse);
                cell.train_steps = *steps;
            }
            (KbSource::Without, _) => {
                let model = RafModel::new(ctx.backbone.clone(), &tc)?;
                cell.mse = Some(ctx.evaluate(&model, &pkb, &tc)?.mse);
            }
            _ => match ctx.kb_for(cfg, source) {
                Ok(kb) if kb.len() >= tc.hyper.k => {
                    cell.kb_size = kb.len();
                    let pkb = PreparedKb::new(kb, &ctx.backbone)?;
                    let (model, log) = ctx.train_cell(&tc, &pkb)?;
                    cell.train_steps = log.steps.len();
                    cell.mse = Some(ctx.evaluate(&model, &pkb, &tc)?.mse);
                }
                Ok(kb) => cell.skipped = Some(format!("{} entries cannot supply k = {}", kb.len(), tc.hyper.k)),
                Err(e) => cell.skipped = Some(e.to_string()),
            },
        }
        progress(ctx.seed, &cell.label(), cell.mse, t0.elapsed().as_secs_f64());
        cells.push(cell);
    }
    Ok(())
}
