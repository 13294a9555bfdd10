//! What each subcommand does, callable without the command line.
//!
//! Series flagged `heldout` in the manifest only ever reach evaluation and
//! case studies. Everything else forms the pool that feeds the knowledge
//! base and retriever/fusion training; pretraining further drops the target
//! domain.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rafcast_core::backbone::{Backbone, PretrainReport};
use rafcast_core::fusion::FusionPolicy;
use rafcast_core::kbase::KnowledgeBase;
use rafcast_core::numkit::mse;
use rafcast_core::retriever::target_distribution;
use rafcast_core::trainer::{
    evaluate, EvalReport, Predictor, PreparedKb, RafModel, RetrievalPolicy, StepStats, Trainer, TrainingLog,
};
use rafcast_core::tsdata::{instance_normalize, Series, WindowPair};
use serde::{Deserialize, Serialize};

use crate::artifact::Envelope;
use crate::bench::{self, windows, AblationReport, KbSource};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, Manifest};
use crate::error::{Error, Result};
use crate::synth;
use crate::tskb;

pub const RETRIEVER_FILE: &str = "retriever.tsck";
pub const FUSION_FILE: &str = "fusion.tsck";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RETRIEVAL_LOG_FILE: &str = "retrievals.jsonl";

fn envelope(command: &str, cfg: &RunConfig) -> Envelope {
    Envelope::new(command, cfg.seed, cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// A loaded manifest split into the training pool and held-out series.
pub struct Corpus {
    pub manifest: Manifest,
    pub pool: Vec<Series>,
    pub heldout: Vec<Series>,
}

impl Corpus {
    pub fn load(manifest: &Path) -> Result<Self> {
        let (manifest, series) = dataset::load(manifest)?;
        let (pool, heldout) = dataset::partition_heldout(&manifest, series);
        if pool.is_empty() {
            return Err(Error::Data("every series is held out; nothing to train on".into()));
        }
        Ok(Self {
            manifest,
            pool,
            heldout,
        })
    }

    /// Pool series outside the target domain.
    pub fn source(&self, cfg: &RunConfig) -> Vec<Series> {
        self.pool
            .iter()
            .filter(|s| cfg.target_domain.as_deref() != Some(s.domain.as_str()))
            .cloned()
            .collect()
    }

    /// Held-out series of the target domain (all held-out series without one).
    pub fn test(&self, cfg: &RunConfig) -> Vec<Series> {
        self.heldout
            .iter()
            .filter(|s| cfg.target_domain.as_deref().is_none_or(|t| s.domain == t))
            .cloned()
            .collect()
    }

    pub fn test_pairs(&self, cfg: &RunConfig) -> Result<Vec<WindowPair>> {
        let pairs = windows(&self.test(cfg), cfg.dims, cfg.eval.stride);
        if pairs.is_empty() {
            return Err(Error::Data("no held-out evaluation windows".into()));
        }
        Ok(pairs)
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let corpus = synth::generate(&cfg.synth, cfg.generator_seed())?;
    synth::write_corpus(out, &corpus, Some(&envelope("gen-data", cfg)))
}

pub fn build_kb(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<KnowledgeBase> {
    let corpus = Corpus::load(manifest)?;
    let sl = cfg.dims.sl;
    let kb = match cfg.kb.source {
        KbSource::Curated => KnowledgeBase::build(&corpus.pool, sl, cfg.kb.per_domain, cfg.kb_seed())?,
        KbSource::Random => {
            // Same size as the curated base it is compared against.
            let curated = KnowledgeBase::build(&corpus.pool, sl, cfg.kb.per_domain, cfg.kb_seed())?;
            KnowledgeBase::build_pooled(&corpus.pool, sl, curated.len(), cfg.random_kb_seed())?
        }
        KbSource::DomainSpecific => {
            let target = cfg
                .target_domain
                .as_deref()
                .ok_or_else(|| Error::Config("a domain-specific knowledge base needs target_domain".into()))?;
            KnowledgeBase::build(&corpus.pool, sl, cfg.kb.per_domain, cfg.kb_seed())?.restrict_to_domain(target)
        }
        KbSource::Without => return Err(Error::Config("kb.source \"without\" builds nothing".into())),
    };
    tskb::save(out, &kb, Some(&envelope("build-kb", cfg)))?;
    Ok(kb)
}

pub fn pretrain(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<PretrainReport> {
    let corpus = Corpus::load(manifest)?;
    let pairs = windows(&corpus.source(cfg), cfg.dims, cfg.pretrain_stride);
    let mut backbone = Backbone::new(cfg.dims, cfg.backbone_init_seed())?;
    let report = backbone.pretrain(&pairs, &cfg.pretrain)?;
    checkpoint::save_backbone(out, &backbone, Some(&envelope("pretrain", cfg)))?;
    Ok(report)
}

/// Loads a pretrained backbone and checks it against the config.
pub fn load_backbone(cfg: &RunConfig, path: &Path) -> Result<Backbone> {
    let (b, _) = checkpoint::load_backbone(path)?;
    if b.dims() != cfg.dims {
        return Err(Error::Config(format!(
            "{}: backbone dims {:?} differ from config dims {:?}",
            path.display(),
            b.dims(),
            cfg.dims
        )));
    }
    if !b.is_frozen() {
        return Err(Error::Config(format!("{}: backbone has not been pretrained", path.display())));
    }
    Ok(b)
}

pub fn load_kb(cfg: &RunConfig, path: &Path) -> Result<KnowledgeBase> {
    let (kb, _) = tskb::load(path)?;
    if kb.sl() != cfg.dims.sl {
        return Err(Error::Config(format!(
            "{}: knowledge-base window {} differs from lookback {}",
            path.display(),
            kb.sl(),
            cfg.dims.sl
        )));
    }
    Ok(kb)
}

/// Retriever and fusion from a training output directory.
pub fn load_model(backbone: Backbone, dir: &Path) -> Result<RafModel> {
    let (retriever, _) = checkpoint::load_retriever(&dir.join(RETRIEVER_FILE))?;
    let (fusion, _) = checkpoint::load_fusion(&dir.join(FUSION_FILE))?;
    Ok(RafModel::from_parts(backbone, retriever, fusion)?)
}

fn save_model(dir: &Path, suffix: &str, model: &RafModel, env: &Envelope) -> Result<()> {
    let dims = model.backbone.dims();
    let name = |f: &str| dir.join(f.replace(".tsck", &format!("{suffix}.tsck")));
    checkpoint::save_retriever(&name(RETRIEVER_FILE), &model.retriever, Some(env))?;
    checkpoint::save_fusion(&name(FUSION_FILE), &model.fusion, dims.n(), dims.d, Some(env))
}

/// One line of `retrievals.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub step: usize,
    pub epoch: usize,
    pub query_dataset: String,
    pub indices: Vec<usize>,
    pub candidate_datasets: Vec<String>,
    pub augmented: Vec<bool>,
    pub target: Vec<f64>,
}

fn training_log_csv(env: &Envelope, steps: &[StepStats]) -> String {
    let mut s = env.csv_preamble();
    s.push_str("step,epoch,L,L_Pred,L_R_aug\n");
    for st in steps {
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?}\n",
            st.step, st.epoch, st.loss, st.pred_loss, st.retrieval_loss
        ));
    }
    s
}

/// Trains retriever and fusion, writing per-epoch and final checkpoints,
/// the loss log and the retrieval log into `out`.
pub fn train(cfg: &RunConfig, manifest: &Path, kb: &Path, backbone: &Path, out: &Path) -> Result<TrainingLog> {
    let corpus = Corpus::load(manifest)?;
    let kb = load_kb(cfg, kb)?;
    let backbone = load_backbone(cfg, backbone)?;
    let before = backbone.fingerprint();
    let pkb = PreparedKb::new(kb, &backbone)?;
    let pairs = windows(&corpus.pool, cfg.dims, cfg.train_stride);
    let mut trainer = Trainer::new(RafModel::new(backbone, &cfg.train)?, cfg.train)?;
    let mut snapshots = Vec::new();
    let log = trainer.train(&pairs, &pkb, |_, m| {
        snapshots.push((m.retriever.clone(), m.fusion.clone()));
        Ok(())
    })?;
    let model = trainer.into_model();
    assert_eq!(model.backbone.fingerprint(), before, "training must not touch the backbone");

    create_dir(out)?;
    let env = envelope("train", cfg);
    for (e, (retriever, fusion)) in snapshots.into_iter().enumerate() {
        let snap = RafModel::from_parts(model.backbone.clone(), retriever, fusion)?;
        save_model(out, &format!("_epoch{}", e + 1), &snap, &env)?;
    }
    save_model(out, "", &model, &env)?;
    write_file(&out.join(TRAIN_LOG_FILE), training_log_csv(&env, &log.steps).as_bytes())?;
    let mut jsonl = Vec::new();
    for st in &log.steps {
        let rec = RetrievalRecord {
            step: st.step,
            epoch: st.epoch,
            query_dataset: st.query_dataset.clone(),
            indices: st.indices.clone(),
            candidate_datasets: st.indices.iter().map(|&i| pkb.kb().entry(i).dataset_id.clone()).collect(),
            augmented: st.augmented.clone(),
            target: st.target.clone(),
        };
        serde_json::to_writer(&mut jsonl, &rec).expect("records serialize");
        jsonl.push(b'\n');
    }
    write_file(&out.join(RETRIEVAL_LOG_FILE), &jsonl)?;
    Ok(log)
}

/// The evaluation report as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub artifact: Envelope,
    /// `None` for the bare backbone.
    pub retrieval_policy: Option<RetrievalPolicy>,
    pub fusion_policy: FusionPolicy,
    pub kb_size: Option<usize>,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Wall-clock timing, kept beside the report so the report itself stays
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_secs: f64,
}

pub fn timing_path(report: &Path) -> PathBuf {
    let mut name = report.file_stem().unwrap_or_default().to_os_string();
    name.push(".timing.json");
    report.with_file_name(name)
}

/// Where a retrieval-augmented model comes from.
pub struct ModelPaths<'a> {
    pub kb: &'a Path,
    pub dir: &'a Path,
}

/// Evaluates the bare backbone (`model: None`) or a trained model on the
/// held-out windows and writes the report to `out`.
pub fn eval(cfg: &RunConfig, manifest: &Path, backbone: &Path, model: Option<ModelPaths<'_>>, out: &Path) -> Result<EvalOutput> {
    let t0 = Instant::now();
    let corpus = Corpus::load(manifest)?;
    let pairs = corpus.test_pairs(cfg)?;
    let backbone = load_backbone(cfg, backbone)?;
    let keep = cfg.eval.residuals;
    let output = match model {
        None => EvalOutput {
            artifact: envelope("eval", cfg),
            retrieval_policy: None,
            fusion_policy: FusionPolicy::None,
            kb_size: None,
            report: evaluate(&pairs, keep, |p| backbone.predict(&p.x))?,
        },
        Some(paths) => {
            let pkb = PreparedKb::new(load_kb(cfg, paths.kb)?, &backbone)?;
            let model = load_model(backbone, paths.dir)?;
            let pred = Predictor::new(&model, &pkb, &cfg.train)?;
            EvalOutput {
                artifact: envelope("eval", cfg),
                retrieval_policy: Some(cfg.train.retrieval_policy),
                fusion_policy: model.fusion.policy(),
                kb_size: Some(pkb.len()),
                report: evaluate(&pairs, keep, |p| pred.predict(&p.x))?,
            }
        }
    };
    write_json(out, &output)?;
    write_json(
        &timing_path(out),
        &Timing {
            wall_clock_secs: t0.elapsed().as_secs_f64(),
        },
    )?;
    Ok(output)
}

/// One retrieved candidate in a case-study dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDump {
    pub kb_index: usize,
    pub dataset_id: String,
    pub domain: String,
    pub channel_id: String,
    pub start: usize,
    pub values: Vec<f64>,
    pub score: f64,
    /// Share of the target distribution built from single-candidate forecasts.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDump {
    pub artifact: Envelope,
    pub query: usize,
    pub dataset_id: String,
    pub channel_id: String,
    pub start: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub candidates: Vec<CandidateDump>,
    pub y_raf: Vec<f64>,
    pub y_bare: Vec<f64>,
    pub mse_raf: f64,
    pub mse_bare: f64,
}

fn case_csv(env: &Envelope, d: &CaseDump) -> String {
    let (sl, fl) = (d.x.len(), d.y.len());
    let mut s = env.csv_preamble();
    s.push_str("t,series,raf,bare");
    for i in 0..d.candidates.len() {
        s.push_str(&format!(",cand_{i}"));
    }
    s.push('\n');
    let opt = |v: Option<&f64>| v.map_or(String::new(), |v| format!("{v:?}"));
    for t in 0..sl + fl {
        let series = if t < sl { d.x[t] } else { d.y[t - sl] };
        let horizon = t.checked_sub(sl);
        s.push_str(&format!(
            "{t},{series:?},{},{}",
            opt(horizon.and_then(|h| d.y_raf.get(h))),
            opt(horizon.and_then(|h| d.y_bare.get(h)))
        ));
        for c in &d.candidates {
            s.push_str(&format!(",{}", opt(c.values.get(t))));
        }
        s.push('\n');
    }
    s
}

/// Dumps retrieval details for the chosen evaluation windows (indices into
/// the same window list `eval` scores) as `query_<i>.json` and `.csv`.
pub fn case_study(
    cfg: &RunConfig,
    manifest: &Path,
    backbone: &Path,
    model: ModelPaths<'_>,
    queries: &[usize],
    out: &Path,
) -> Result<Vec<CaseDump>> {
    let corpus = Corpus::load(manifest)?;
    let pairs = corpus.test_pairs(cfg)?;
    if let Some(&q) = queries.iter().find(|&&q| q >= pairs.len()) {
        return Err(Error::Config(format!("query {q} out of range: {} evaluation windows", pairs.len())));
    }
    let backbone = load_backbone(cfg, backbone)?;
    let pkb = PreparedKb::new(load_kb(cfg, model.kb)?, &backbone)?;
    let model = load_model(backbone, model.dir)?;
    if !model.fusion.policy().uses_candidates() {
        return Err(Error::Config("case studies need a fusion policy that uses candidates".into()));
    }
    let pred = Predictor::new(&model, &pkb, &cfg.train)?;
    let env = envelope("case-study", cfg);
    create_dir(out)?;
    let mut dumps = Vec::with_capacity(queries.len());
    for &q in queries {
        let p = &pairs[q];
        let sel = pred.retrieve(&p.x)?;
        let (xn, _) = instance_normalize(&p.x);
        let yn = p.normalized_target();
        let metrics = sel
            .indices
            .iter()
            .map(|&i| Ok(-mse(&model.forecast_with(&xn, &pkb, &[i])?, &yn)?))
            .collect::<rafcast_core::Result<Vec<f64>>>()?;
        let target = target_distribution(&metrics, cfg.train.hyper.tau_m)?;
        let y_raf = pred.predict(&p.x)?;
        let y_bare = model.backbone.predict(&p.x)?;
        let dump = CaseDump {
            artifact: env.clone(),
            query: q,
            dataset_id: p.source.dataset_id.clone(),
            channel_id: p.source.channel_id.clone(),
            start: p.source.start,
            x: p.x.clone(),
            y: p.y.clone(),
            candidates: sel
                .indices
                .iter()
                .zip(&sel.scores)
                .zip(&target)
                .map(|((&i, &score), &target)| {
                    let e = pkb.kb().entry(i);
                    CandidateDump {
                        kb_index: i,
                        dataset_id: e.dataset_id.clone(),
                        domain: e.domain.clone(),
                        channel_id: e.channel_id.clone(),
                        start: e.start,
                        values: e.values.clone(),
                        score,
                        target,
                    }
                })
                .collect(),
            mse_raf: mse(&y_raf, &p.y)?,
            mse_bare: mse(&y_bare, &p.y)?,
            y_raf,
            y_bare,
        };
        write_json(&out.join(format!("query_{q}.json")), &dump)?;
        write_file(&out.join(format!("query_{q}.csv")), case_csv(&env, &dump).as_bytes())?;
        dumps.push(dump);
    }
    Ok(dumps)
}

/// The ablation grid as written to `ablation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutput {
    pub artifact: Envelope,
    pub summary: Vec<bench::SummaryRow>,
    #[serde(flatten)]
    pub report: AblationReport,
}

fn ablation_csv(env: &Envelope, report: &AblationReport) -> String {
    let mut s = env.csv_preamble();
    s.push_str("axis,seed,retrieval,fusion,kb_source,kb_fraction,kb_size,train_steps,mse,skipped\n");
    let esc = |t: &str| {
        if t.contains([',', '"', '\n']) {
            format!("\"{}\"", t.replace('"', "\"\""))
        } else {
            t.to_string()
        }
    };
    for c in &report.cells {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.axis,
            c.seed,
            c.retrieval.map_or("none", |r| r.name()),
            c.fusion.name(),
            c.kb_source.map_or("", |k| k.name()),
            c.kb_fraction.map_or(String::new(), |f| format!("{f:?}")),
            c.kb_size,
            c.train_steps,
            c.mse.map_or(String::new(), |m| format!("{m:?}")),
            esc(c.skipped.as_deref().unwrap_or(""))
        ));
    }
    s
}

fn summary_csv(env: &Envelope, rows: &[bench::SummaryRow]) -> String {
    let mut s = env.csv_preamble();
    s.push_str("axis,label,mean_mse,seeds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.axis,
            r.label,
            r.mean_mse.map_or(String::new(), |m| format!("{m:?}")),
            r.seeds
        ));
    }
    s
}

/// Runs the ablation grid and writes `ablation.json`, `ablation.csv` and
/// `summary.csv` into `out`, running up to `jobs` seeds at once. Progress
/// lines go to `progress`.
pub fn ablate(cfg: &RunConfig, out: &Path, jobs: usize, progress: &mut (dyn std::io::Write + Send)) -> Result<AblationOutput> {
    if cfg.target_domain.is_none() {
        return Err(Error::Config("ablation needs a target_domain".into()));
    }
    let bench_cfg = cfg.bench();
    let report = bench::run_parallel(&bench_cfg, jobs, &mut |seed, label, mse, secs| {
        let m = mse.map_or("skipped".into(), |m| format!("{m:.5}"));
        let _ = writeln!(progress, "seed {seed} {label:<40} mse {m:>10} ({secs:.1}s)");
    })?;
    let env = envelope("ablate", cfg);
    let output = AblationOutput {
        artifact: env.clone(),
        summary: report.summary(),
        report,
    };
    create_dir(out)?;
    write_json(&out.join("ablation.json"), &output)?;
    write_file(&out.join("ablation.csv"), ablation_csv(&env, &output.report).as_bytes())?;
    write_file(&out.join("summary.csv"), summary_csv(&env, &output.summary).as_bytes())?;
    Ok(output)
}
