//! Experiment orchestration: full incremental runs, the sequential
//! finetune baseline, ablation sweeps, and the CSV/checkpoint artifacts.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use crate::backbone::{pretrain_backbone, Backbone, PretrainReport};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::datagen::{generate_stream, write_manifest, ClassId, StageDataset};
use crate::engine::{
    classify, extract_prototypes, run_stage, synthesize_old_prototypes, IncrementalState,
    PrototypeStore, StageTrainConfig, TrainReport,
};
use crate::error::{DrlError, Result};
use crate::graph::Graph;
use crate::ipa::{stream_forward, AttentionMode, FusionMode, StageModule, StreamInputs};
use crate::metrics::{accuracy_after_stage, average_accuracy, MetricsTable};
use crate::optim::sgd_step;
use crate::param::total_numel;
use crate::rng::derive;
use crate::supervision::{sample_loss_graph, LogitHead, LossKind, SupervisionConfig};
use crate::tensor::Tensor;

/// Knobs for programmatic runs. The backbone cache shares pretrained
/// weights between runs whose (config, seed) match bit for bit; disable it
/// to exercise pretraining end to end.
#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub reuse_backbone_cache: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            reuse_backbone_cache: true,
        }
    }
}

struct CachedBackbone {
    values: Vec<(String, Tensor)>,
    report: PretrainReport,
}

fn backbone_cache() -> &'static Mutex<HashMap<String, CachedBackbone>> {
    static CACHE: OnceLock<Mutex<HashMap<String, CachedBackbone>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn backbone_cache_key(cfg: &RunConfig) -> String {
    format!(
        "{}|{}|{}|{}",
        serde_json::to_string(&cfg.backbone).expect("serializes"),
        serde_json::to_string(&cfg.pretrain).expect("serializes"),
        serde_json::to_string(&cfg.resolved_stream()).expect("serializes"),
        cfg.seed
    )
}

/// Pretrains the backbone on the base task, or restores bit-identical
/// weights from the in-process cache.
pub fn pretrained_backbone(
    cfg: &RunConfig,
    base: &StageDataset,
    opts: &ExperimentOptions,
) -> Result<(Backbone, PretrainReport)> {
    let key = backbone_cache_key(cfg);
    if opts.reuse_backbone_cache {
        let cache = backbone_cache().lock().expect("cache lock");
        if let Some(hit) = cache.get(&key) {
            let bb = Backbone::init(cfg.backbone.clone(), cfg.seed)?;
            let by_name: HashMap<String, &Tensor> =
                hit.values.iter().map(|(n, t)| (n.clone(), t)).collect();
            for p in bb.params() {
                let t = by_name
                    .get(&p.name())
                    .unwrap_or_else(|| panic!("cached backbone missing {}", p.name()));
                p.set_value((*t).clone());
            }
            bb.freeze();
            return Ok((bb, hit.report.clone()));
        }
    }
    let (bb, report) = pretrain_backbone(base, &cfg.backbone, &cfg.pretrain, cfg.seed)?;
    if opts.reuse_backbone_cache {
        let values = bb
            .params()
            .iter()
            .map(|p| (p.name(), p.value_clone()))
            .collect();
        backbone_cache().lock().expect("cache lock").insert(
            key,
            CachedBackbone {
                values,
                report: report.clone(),
            },
        );
    }
    Ok((bb, report))
}

/// Exclusive ownership of an experiment directory for the duration of a
/// run. The lock file disappears when the guard drops, including on panic.
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(DrlError::Protocol(
                format!("experiment directory {} is locked by another run", dir.display()),
            )),
            Err(e) => Err(DrlError::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub metrics: MetricsTable,
    pub reports: Vec<TrainReport>,
    pub pretrain: PretrainReport,
    pub state: IncrementalState,
    pub store: PrototypeStore,
}

/// One row of a summary CSV.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub method: String,
    pub fusion: FusionMode,
    pub attention: AttentionMode,
    pub loss: LossKind,
    /// Seed as text; aggregate rows carry `"mean"`.
    pub seed: String,
    pub a_bar: f64,
    pub a_t: f64,
}

/// Runs the full pipeline: pretrain, then per stage train / extract /
/// synthesize / evaluate. When `out_dir` is given, emits config.json,
/// manifest.csv, metrics.csv, summary.csv, embeddings.csv, per-stage
/// checkpoints and reports.
pub fn run_experiment(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    opts: &ExperimentOptions,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let _lock = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| DrlError::io(dir, e))?;
            let guard = LockGuard::acquire(dir)?;
            fs::write(dir.join("config.json"), cfg.to_json())
                .map_err(|e| DrlError::io(&dir.join("config.json"), e))?;
            Some(guard)
        }
        None => None,
    };

    let stream_spec = cfg.resolved_stream();
    let (base, stages) = generate_stream(&stream_spec)?;
    if let Some(dir) = out_dir {
        write_manifest(&base, &stages, &dir.join("manifest.csv"))?;
    }

    let (backbone, pretrain) = pretrained_backbone(cfg, &base, opts)?;
    let mut state = IncrementalState::new(backbone)?;
    let mut store = PrototypeStore::new();
    let digest = cfg.digest();

    let train_cfg = StageTrainConfig {
        arch: cfg.arch(),
        supervision: cfg.supervision.clone(),
        optimizer: cfg.optimizer.clone(),
        seed: cfg.seed,
    };

    let mut counts = Vec::with_capacity(stages.len());
    let mut reports = Vec::with_capacity(stages.len());
    for (i, stage_data) in stages.iter().enumerate() {
        let t = i + 1;
        let report = run_stage(&mut state, stage_data, &train_cfg)?;
        extract_prototypes(&state, &mut store, stage_data)?;
        if t > 1 {
            synthesize_old_prototypes(&mut store, t, cfg.tau)?;
        }
        let seen: Vec<&StageDataset> = stages[..t].iter().collect();
        counts.push(accuracy_after_stage(&state, &store, &seen)?);
        if let Some(dir) = out_dir {
            save_checkpoint(&state, &store, &digest, &dir.join(format!("stage_{t}.ckpt")))?;
            let rp = dir.join(format!("report_stage_{t}.json"));
            fs::write(&rp, serde_json::to_string_pretty(&report).expect("report json"))
                .map_err(|e| DrlError::io(&rp, e))?;
        }
        reports.push(report);
    }

    let metrics = MetricsTable::from_counts(counts)?;
    if let Some(dir) = out_dir {
        write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
        let row = SummaryRow {
            method: "drl".into(),
            fusion: cfg.fusion_mode,
            attention: cfg.attention_mode,
            loss: cfg.supervision.kind,
            seed: cfg.seed.to_string(),
            a_bar: metrics.a_bar,
            a_t: metrics.a_t,
        };
        write_summary_csv(&dir.join("summary.csv"), &[row])?;
        let seen: Vec<&StageDataset> = stages.iter().collect();
        dump_embeddings(&state, &seen, &dir.join("embeddings.csv"))?;
        let pp = dir.join("pretrain.json");
        fs::write(&pp, serde_json::to_string_pretty(&pretrain).expect("pretrain json"))
            .map_err(|e| DrlError::io(&pp, e))?;
    }

    Ok(ExperimentOutcome {
        metrics,
        reports,
        pretrain,
        state,
        store,
    })
}

/// Naive sequential finetune: one adapter stream and one growing
/// classifier head, both unfrozen across stages, trained with plain
/// cross-entropy over all seen classes using only the current stage's
/// data. Old classes get only negative pressure while the feature space
/// drifts, so they erode. Inference is the head's argmax.
pub fn run_finetune_baseline(cfg: &RunConfig, opts: &ExperimentOptions) -> Result<MetricsTable> {
    cfg.validate()?;
    let stream_spec = cfg.resolved_stream();
    let (base, stages) = generate_stream(&stream_spec)?;
    let (backbone, _) = pretrained_backbone(cfg, &base, opts)?;
    let state = IncrementalState::new(backbone)?;

    let module = StageModule::init(
        1,
        &state.backbone.config,
        &cfg.arch(),
        derive(cfg.seed, "finetune-module", 0),
    )?;
    let supervision = SupervisionConfig {
        kind: LossKind::Ce,
        alpha: 0.0,
        ..SupervisionConfig::default()
    };

    let d = state.embed_dim();
    let mut counts = Vec::with_capacity(stages.len());
    let mut head: Option<LogitHead> = None;

    let ptm_ctx = |image: &Tensor| -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>, Tensor)> {
        let fwd = crate::backbone::backbone_forward(&state.backbone, image)?;
        let blocks: Vec<Tensor> = fwd.traces.iter().map(|t| t.output_tokens.clone()).collect();
        let attn: Vec<Tensor> = fwd.traces.iter().map(|t| t.attention.clone()).collect();
        Ok((fwd.embed, blocks, attn, fwd.feature))
    };

    for (i, stage_data) in stages.iter().enumerate() {
        let t = i + 1;
        // grow the head: keep learned columns, append fresh ones for the
        // new classes
        let mut seen: Vec<ClassId> = stages[..t]
            .iter()
            .flat_map(|s| s.classes.iter().copied())
            .collect();
        seen.sort();
        let grown = LogitHead::new(
            &format!("finetune.stage{t}.head"),
            d,
            seen.clone(),
            derive(cfg.seed, "finetune-head", t as u64),
        );
        if let Some(prev) = &head {
            let mut w = grown.w.value_clone();
            let old = prev.w.value_clone();
            let (cols_new, cols_old) = (w.cols(), old.cols());
            for (j_old, class) in prev.classes.iter().enumerate() {
                let j_new = seen.iter().position(|c| c == class).expect("seen class");
                for row in 0..d {
                    w.data_mut()[row * cols_new + j_new] = old.data()[row * cols_old + j_old];
                }
            }
            grown.w.set_value(w);
            grown.rho.set_value(prev.rho.value_clone());
        }
        let head_ref = head.insert(grown);
        let class_index: std::collections::BTreeMap<ClassId, usize> =
            seen.iter().enumerate().map(|(j, c)| (*c, j)).collect();

        let mut trainable = module.params();
        trainable.extend(head_ref.params());

        let contexts: Vec<_> = stage_data
            .train
            .iter()
            .map(|s| ptm_ctx(&s.image).map(|ctx| (ctx, class_index[&s.label])))
            .collect::<Result<_>>()?;

        for epoch in 0..cfg.optimizer.epochs {
            let mut order: Vec<usize> = (0..contexts.len()).collect();
            crate::backbone::shuffle(
                &mut order,
                cfg.seed,
                "finetune-shuffle",
                ((t as u64) << 32) | epoch as u64,
            );
            for chunk in order.chunks(cfg.optimizer.batch_size) {
                let inv = 1.0 / chunk.len() as f64;
                for &j in chunk {
                    let ((embed, blocks, attn, cls), target) = &contexts[j];
                    let mut g = Graph::new();
                    let vals = stream_forward(
                        &mut g,
                        &module,
                        &StreamInputs {
                            embed,
                            ptm_blocks: blocks,
                            ptm_attn: attn,
                            prev_blocks: None,
                        },
                    )?;
                    let loss =
                        sample_loss_graph(&mut g, vals.cls, cls, head_ref, *target, &supervision)?;
                    g.backward(loss.total, inv)?;
                }
                sgd_step(&trainable, &cfg.optimizer, epoch);
            }
        }

        // evaluate all seen classes through the drifted feature and head
        let mut correct = 0usize;
        let mut total = 0usize;
        for set in &stages[..t] {
            for sample in &set.test {
                let (embed, blocks, attn, _) = ptm_ctx(&sample.image)?;
                let mut g = Graph::new();
                let vals = stream_forward(
                    &mut g,
                    &module,
                    &StreamInputs {
                        embed: &embed,
                        ptm_blocks: &blocks,
                        ptm_attn: &attn,
                        prev_blocks: None,
                    },
                )?;
                let outs = crate::supervision::head_graph(&mut g, vals.cls, head_ref)?;
                let pred = seen[crate::backbone::argmax(g.value(outs.z).data())];
                if pred == sample.label {
                    correct += 1;
                }
                total += 1;
            }
        }
        counts.push((correct, total));
    }

    MetricsTable::from_counts(counts)
}

/// Cartesian sweep over fusion/attention/loss presets and seeds. Emits one
/// summary CSV with per-seed rows followed by per-combination mean rows.
pub fn ablate(
    base: &RunConfig,
    fusions: &[FusionMode],
    attentions: &[AttentionMode],
    losses: &[LossKind],
    seeds: &[u64],
    out_dir: &Path,
    opts: &ExperimentOptions,
) -> Result<Vec<SummaryRow>> {
    if fusions.is_empty() || attentions.is_empty() || losses.is_empty() || seeds.is_empty() {
        return Err(DrlError::Config("ablate sweep has an empty axis".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| DrlError::io(out_dir, e))?;
    let _lock = LockGuard::acquire(out_dir)?;

    let mut rows = Vec::new();
    for &fusion in fusions {
        for &attention in attentions {
            for &loss in losses {
                let mut bars = Vec::with_capacity(seeds.len());
                let mut finals = Vec::with_capacity(seeds.len());
                for &seed in seeds {
                    let mut cfg = base.clone();
                    cfg.fusion_mode = fusion;
                    cfg.attention_mode = attention;
                    cfg.supervision.kind = loss;
                    cfg.seed = seed;
                    let outcome = run_experiment(&cfg, None, opts)?;
                    rows.push(SummaryRow {
                        method: "drl".into(),
                        fusion,
                        attention,
                        loss,
                        seed: seed.to_string(),
                        a_bar: outcome.metrics.a_bar,
                        a_t: outcome.metrics.a_t,
                    });
                    bars.push(outcome.metrics.a_bar);
                    finals.push(outcome.metrics.a_t);
                }
                rows.push(SummaryRow {
                    method: "drl".into(),
                    fusion,
                    attention,
                    loss,
                    seed: "mean".into(),
                    a_bar: average_accuracy(&bars)?,
                    a_t: average_accuracy(&finals)?,
                });
            }
        }
    }
    write_summary_csv(&out_dir.join("summary.csv"), &rows)?;
    Ok(rows)
}

// -- CSV artifacts ------------------------------------------------------------

/// metrics.csv: `stage,total,correct,acc_exact,acc_pct`. The exact column
/// uses the shortest round-trip float encoding, so recomputation from the
/// file reproduces the table bit for bit.
pub fn write_metrics_csv(path: &Path, metrics: &MetricsTable) -> Result<()> {
    let mut out = String::from("stage,total,correct,acc_exact,acc_pct\n");
    for (i, ((correct, total), pct)) in metrics
        .counts
        .iter()
        .zip(metrics.per_stage.iter())
        .enumerate()
    {
        out.push_str(&format!(
            "{},{},{},{},{:.4}\n",
            i + 1,
            total,
            correct,
            pct,
            pct
        ));
    }
    fs::write(path, out).map_err(|e| DrlError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<(usize, usize, usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| DrlError::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(DrlError::Config(format!("bad metrics row {line:?}")));
        }
        rows.push((
            fields[0].parse().map_err(|_| DrlError::Config("bad stage".into()))?,
            fields[1].parse().map_err(|_| DrlError::Config("bad total".into()))?,
            fields[2].parse().map_err(|_| DrlError::Config("bad correct".into()))?,
            fields[3].parse().map_err(|_| DrlError::Config("bad acc".into()))?,
        ));
    }
    Ok(rows)
}

/// summary.csv: `method,fusion_mode,attention_mode,loss,seed,a_bar_pct,
/// a_t_pct,a_bar_exact,a_t_exact`. Percent columns are fixed 4-decimal;
/// exact columns round-trip.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out =
        String::from("method,fusion_mode,attention_mode,loss,seed,a_bar_pct,a_t_pct,a_bar_exact,a_t_exact\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4},{},{}\n",
            r.method, r.fusion, r.attention, r.loss, r.seed, r.a_bar, r.a_t, r.a_bar, r.a_t
        ));
    }
    fs::write(path, out).map_err(|e| DrlError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SummaryRecord {
    pub method: String,
    pub fusion: String,
    pub attention: String,
    pub loss: String,
    pub seed: String,
    pub a_bar_exact: f64,
    pub a_t_exact: f64,
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRecord>> {
    let text = fs::read_to_string(path).map_err(|e| DrlError::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(DrlError::Config(format!("bad summary row {line:?}")));
        }
        rows.push(SummaryRecord {
            method: f[0].into(),
            fusion: f[1].into(),
            attention: f[2].into(),
            loss: f[3].into(),
            seed: f[4].into(),
            a_bar_exact: f[7].parse().map_err(|_| DrlError::Config("bad a_bar".into()))?,
            a_t_exact: f[8].parse().map_err(|_| DrlError::Config("bad a_t".into()))?,
        });
    }
    Ok(rows)
}

/// embeddings.csv: `sample_id,label,stage,f0..f{W-1}` over the test splits
/// of the given sets, full-precision floats.
pub fn dump_embeddings(
    state: &IncrementalState,
    sets: &[&StageDataset],
    path: &Path,
) -> Result<()> {
    let width = (state.stage_index() + 1) * state.embed_dim();
    let mut header = String::from("sample_id,label,stage");
    for i in 0..width {
        header.push_str(&format!(",f{i}"));
    }
    header.push('\n');
    let mut out = header;
    for set in sets {
        for sample in &set.test {
            let features = crate::ipa::composite_forward(&sample.image, state)?;
            out.push_str(&format!("{},{},{}", sample.id, sample.label, set.stage));
            for v in features.concatenated.data() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| DrlError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub id: u64,
    pub label: ClassId,
    pub stage: usize,
    pub feature: Tensor,
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = fs::read_to_string(path).map_err(|e| DrlError::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            return Err(DrlError::Config(format!("bad embedding row {line:?}")));
        }
        let id = f[0].parse().map_err(|_| DrlError::Config("bad id".into()))?;
        let label = ClassId(f[1].parse().map_err(|_| DrlError::Config("bad label".into()))?);
        let stage = f[2].parse().map_err(|_| DrlError::Config("bad stage".into()))?;
        let feature: Vec<f64> = f[3..]
            .iter()
            .map(|v| v.parse().map_err(|_| DrlError::Config("bad feature".into())))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow {
            id,
            label,
            stage,
            feature: Tensor::vector(feature),
        });
    }
    Ok(rows)
}

/// Reclassifies dumped embeddings against a store; used by the round-trip
/// audit.
pub fn classify_embedding_rows(
    rows: &[EmbeddingRow],
    store: &PrototypeStore,
) -> Result<Vec<(u64, ClassId)>> {
    rows.iter()
        .map(|r| classify(&r.feature, store).map(|(pred, _)| (r.id, pred)))
        .collect()
}

/// Count of trainable parameters a fresh stage would hold under `cfg`,
/// including its classifier head.
pub fn stage_trainable_count(cfg: &RunConfig, classes: usize) -> usize {
    let arch = cfg.arch();
    let module = StageModule::init(1, &cfg.backbone, &arch, 0).expect("valid arch");
    let head = LogitHead::new(
        "probe.head",
        cfg.backbone.embed_dim,
        (0..classes as u32).map(ClassId).collect(),
        0,
    );
    let mut params = module.params();
    params.extend(head.params());
    total_numel(&params)
}
