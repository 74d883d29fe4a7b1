//! Non-rehearsal stage protocol: per-stage training with freezing,
//! prototype extraction, similarity-guided synthesis of old-class
//! prototypes in new streams, and cosine classification over the
//! concatenated feature space.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, shuffle, Backbone};
use crate::datagen::{ClassId, StageDataset};
use crate::error::{DrlError, Result};
use crate::graph::Graph;
use crate::ipa::{composite_trace, stream_forward, StageArch, StageModule, StreamInputs};
use crate::optim::{sgd_step, OptimizerConfig};
use crate::param::{total_numel, Param};
use crate::rng::derive;
use crate::supervision::{
    effective_lambdas, head_graph, sample_loss_graph, LogitHead, LossBreakdown, SupervisionConfig,
};
use crate::tensor::{combine_checksums, cosine_similarity, Tensor};

/// The composite network: frozen backbone, ordered frozen adapter streams,
/// and (while a stage trains) the current trainable module.
#[derive(Debug)]
pub struct IncrementalState {
    pub backbone: Backbone,
    pub streams: Vec<StageModule>,
    pub current: Option<StageModule>,
    /// Incremental class -> stage of first appearance (1-based).
    pub class_registry: BTreeMap<ClassId, usize>,
    eval_counts: RefCell<Vec<u64>>,
}

impl IncrementalState {
    pub fn new(backbone: Backbone) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(DrlError::Protocol(
                "backbone must be frozen before incremental stages".into(),
            ));
        }
        Ok(IncrementalState {
            backbone,
            streams: Vec::new(),
            current: None,
            class_registry: BTreeMap::new(),
            eval_counts: RefCell::new(vec![0]),
        })
    }

    /// Number of sealed incremental stages.
    pub fn stage_index(&self) -> usize {
        self.streams.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.config.embed_dim
    }

    pub(crate) fn bump_eval(&self, stream: usize) {
        let mut counts = self.eval_counts.borrow_mut();
        if counts.len() <= stream {
            counts.resize(stream + 1, 0);
        }
        counts[stream] += 1;
    }

    pub fn reset_eval_counts(&self) {
        self.eval_counts.borrow_mut().iter_mut().for_each(|c| *c = 0);
    }

    /// Per-stream forward counts since the last reset (index 0 = backbone).
    pub fn eval_counts(&self) -> Vec<u64> {
        let counts = self.eval_counts.borrow();
        let mut out = vec![0; self.streams.len() + 1];
        for (i, &c) in counts.iter().enumerate().take(out.len()) {
            out[i] = c;
        }
        out
    }

    pub fn frozen_param_count(&self) -> usize {
        let mut n = total_numel(&self.backbone.params());
        for s in &self.streams {
            n += total_numel(&s.params());
        }
        n
    }

    pub fn classes_seen(&self) -> Vec<ClassId> {
        self.class_registry.keys().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Measured,
    Synthesized,
}

#[derive(Debug, Clone)]
pub struct ClassPrototype {
    /// Stage of first appearance.
    pub stage: usize,
    /// One segment per stream, indexed by stream id.
    pub segments: Vec<(Tensor, Provenance)>,
}

/// Per-class concatenated prototype segments across streams.
#[derive(Debug, Clone, Default)]
pub struct PrototypeStore {
    pub entries: BTreeMap<ClassId, ClassPrototype>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn segment(&self, class: ClassId, stream: usize) -> Option<&(Tensor, Provenance)> {
        self.entries.get(&class).and_then(|p| p.segments.get(stream))
    }

    /// True when every class holds segments for streams `0..=t`.
    pub fn complete_through(&self, t: usize) -> bool {
        self.entries.values().all(|p| p.segments.len() == t + 1)
    }

    fn concat_segments(&self, class: ClassId) -> Option<Tensor> {
        let p = self.entries.get(&class)?;
        let mut data = Vec::new();
        for (seg, _) in &p.segments {
            data.extend_from_slice(seg.data());
        }
        Some(Tensor::vector(data))
    }
}

/// Everything `run_stage` needs besides the data.
#[derive(Debug, Clone)]
pub struct StageTrainConfig {
    pub arch: StageArch,
    pub supervision: SupervisionConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: usize,
    pub epochs: Vec<LossBreakdown>,
    pub final_train_accuracy: f64,
    pub per_class_train_accuracy: Vec<(u32, f64)>,
    pub wall_clock_secs: f64,
    pub trainable_params: usize,
    pub frozen_params: usize,
    /// Checksum of the freshly initialized module + head, before any step.
    pub init_checksum: u64,
    /// Checksum over the ids and pixels of the samples seen.
    pub data_checksum: u64,
    /// Ids of every sample read during the stage, in first-touch order.
    pub access_log: Vec<u64>,
}

/// Frozen per-sample context cached across epochs: everything the current
/// stream consumes is constant during one stage.
struct FrozenCtx {
    embed: Tensor,
    ptm_blocks: Vec<Tensor>,
    ptm_attn: Vec<Tensor>,
    prev_blocks: Option<Vec<Tensor>>,
    ptm_cls: Tensor,
    target: usize,
}

/// Trains one incremental stage on `data` and seals it. Only `data` is
/// read; every sample id touched lands in the access log.
pub fn run_stage(
    state: &mut IncrementalState,
    data: &StageDataset,
    cfg: &StageTrainConfig,
) -> Result<TrainReport> {
    let started = Instant::now();
    if state.current.is_some() {
        return Err(DrlError::Protocol("previous stage is not sealed".into()));
    }
    if data.train.is_empty() || data.classes.is_empty() {
        return Err(DrlError::Config("stage dataset is empty".into()));
    }
    for c in &data.classes {
        if state.class_registry.contains_key(c) {
            return Err(DrlError::Protocol(format!(
                "class {c} already registered in an earlier stage"
            )));
        }
    }
    cfg.optimizer.validate()?;

    let t = state.stage_index() + 1;
    let d = state.embed_dim();
    state.current = Some(StageModule::init(
        t,
        &state.backbone.config,
        &cfg.arch,
        derive(cfg.seed, "stage-module", t as u64),
    )?);
    let module = state.current.as_ref().expect("just set");
    let mut classes = data.classes.clone();
    classes.sort();
    let head = LogitHead::new(
        &format!("stage{t}.head"),
        d,
        classes.clone(),
        derive(cfg.seed, "stage-head", t as u64),
    );
    let class_index: BTreeMap<ClassId, usize> =
        classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();

    let mut trainable = module.params();
    trainable.extend(head.params());
    let init_checksum = crate::param::params_checksum(&trainable);

    let trainable_params = total_numel(&trainable);
    let frozen_params = state.frozen_param_count();

    // cache the frozen context per sample once; it cannot change during
    // this stage
    let mut access_log = Vec::with_capacity(data.train.len());
    let mut data_sums = Vec::with_capacity(data.train.len());
    let mut contexts = Vec::with_capacity(data.train.len());
    for sample in &data.train {
        access_log.push(sample.id);
        data_sums.push(combine_checksums([sample.id, sample.image.bit_checksum()]));
        let trace = composite_trace(state, &sample.image)?;
        contexts.push(FrozenCtx {
            embed: trace.embed,
            ptm_blocks: trace.ptm_blocks,
            ptm_attn: trace.ptm_attn,
            prev_blocks: trace.last_stream_blocks,
            ptm_cls: trace.ptm_cls,
            target: class_index[&sample.label],
        });
    }
    let data_checksum = combine_checksums(data_sums);

    let n = contexts.len();
    let mut epochs = Vec::with_capacity(cfg.optimizer.epochs);
    let (lambda_pos, lambda_neg) = effective_lambdas(&cfg.supervision);
    for epoch in 0..cfg.optimizer.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(
            &mut order,
            cfg.seed,
            "stage-shuffle",
            ((t as u64) << 32) | epoch as u64,
        );
        let (mut sp, mut sn, mut sk) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.optimizer.batch_size) {
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let ctx = &contexts[i];
                let mut g = Graph::new();
                let vals = stream_forward(
                    &mut g,
                    &module,
                    &StreamInputs {
                        embed: &ctx.embed,
                        ptm_blocks: &ctx.ptm_blocks,
                        ptm_attn: &ctx.ptm_attn,
                        prev_blocks: ctx.prev_blocks.as_deref(),
                    },
                )?;
                let loss = sample_loss_graph(
                    &mut g,
                    vals.cls,
                    &ctx.ptm_cls,
                    &head,
                    ctx.target,
                    &cfg.supervision,
                )?;
                sp += loss.l_pos;
                sn += loss.l_neg;
                sk += loss.l_kd;
                g.backward(loss.total, inv)?;
            }
            sgd_step(&trainable, &cfg.optimizer, epoch);
        }
        epochs.push(LossBreakdown::compose(
            sp / n as f64,
            sn / n as f64,
            sk / n as f64,
            lambda_pos,
            lambda_neg,
            cfg.supervision.alpha,
        ));
    }

    // train accuracy with the stage head before it is discarded
    let mut per_class_hits: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for (sample, ctx) in data.train.iter().zip(contexts.iter()) {
        let mut g = Graph::new();
        let vals = stream_forward(
            &mut g,
            &module,
            &StreamInputs {
                embed: &ctx.embed,
                ptm_blocks: &ctx.ptm_blocks,
                ptm_attn: &ctx.ptm_attn,
                prev_blocks: ctx.prev_blocks.as_deref(),
            },
        )?;
        let outs = head_graph(&mut g, vals.cls, &head)?;
        let pred = argmax(g.value(outs.z).data());
        let entry = per_class_hits.entry(sample.label).or_insert((0, 0));
        entry.1 += 1;
        if pred == ctx.target {
            entry.0 += 1;
        }
    }
    let total_hits: usize = per_class_hits.values().map(|(h, _)| h).sum();
    let final_train_accuracy = 100.0 * total_hits as f64 / n as f64;
    let per_class_train_accuracy = per_class_hits
        .iter()
        .map(|(c, (h, tot))| (c.0, 100.0 * *h as f64 / *tot as f64))
        .collect();

    let sealed = state.current.take().expect("training module present");
    sealed.freeze();
    state.streams.push(sealed);
    for c in &classes {
        state.class_registry.insert(*c, t);
    }

    Ok(TrainReport {
        stage: t,
        epochs,
        final_train_accuracy,
        per_class_train_accuracy,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        trainable_params,
        frozen_params,
        init_checksum,
        data_checksum,
        access_log,
    })
}

/// Measures per-stream prototypes for the just-sealed stage's classes:
/// the mean class token of every stream over each class's samples.
pub fn extract_prototypes(
    state: &IncrementalState,
    store: &mut PrototypeStore,
    data: &StageDataset,
) -> Result<()> {
    if state.current.is_some() || state.stage_index() == 0 {
        return Err(DrlError::Protocol(
            "extract_prototypes requires a sealed stage".into(),
        ));
    }
    let t = state.stage_index();
    let streams = t + 1;
    let d = state.embed_dim();

    let mut sums: BTreeMap<ClassId, (Vec<Tensor>, usize)> = BTreeMap::new();
    for c in &data.classes {
        sums.insert(*c, (vec![Tensor::zeros(vec![d]); streams], 0));
    }
    for sample in &data.train {
        let trace = composite_trace(state, &sample.image)?;
        let entry = sums.get_mut(&sample.label).ok_or_else(|| {
            DrlError::Protocol(format!("sample of unexpected class {}", sample.label))
        })?;
        for (s, f) in trace.per_stream_cls.iter().enumerate() {
            entry.0[s].add_scaled(f, 1.0);
        }
        entry.1 += 1;
    }
    for (class, (mut acc, count)) in sums {
        if count == 0 {
            return Err(DrlError::DegenerateInput {
                op: "extract_prototypes",
                detail: format!("class {class} has zero samples"),
            });
        }
        for seg in &mut acc {
            let inv = 1.0 / count as f64;
            for v in seg.data_mut() {
                *v *= inv;
            }
        }
        store.entries.insert(
            class,
            ClassPrototype {
                stage: t,
                segments: acc.into_iter().map(|s| (s, Provenance::Measured)).collect(),
            },
        );
    }
    Ok(())
}

/// Fills stream-`t` segments for classes from earlier stages: each old
/// class's new segment is a similarity-softmax mixture of the current
/// classes' measured stream-`t` segments, with similarities taken in the
/// latest stream both sides measured.
pub fn synthesize_old_prototypes(store: &mut PrototypeStore, t: usize, tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(DrlError::Config("synthesis temperature must be positive".into()));
    }
    let current: Vec<ClassId> = store
        .entries
        .iter()
        .filter(|(_, p)| p.stage == t)
        .map(|(c, _)| *c)
        .collect();
    if current.is_empty() {
        return Err(DrlError::Protocol(format!(
            "no measured prototypes for stage {t}"
        )));
    }
    let old: Vec<ClassId> = store
        .entries
        .iter()
        .filter(|(_, p)| p.stage < t)
        .map(|(c, _)| *c)
        .collect();

    for o in old {
        let proto = &store.entries[&o];
        if let Some((_, Provenance::Measured)) = proto.segments.get(t) {
            return Err(DrlError::Protocol(format!(
                "class {o} already has a measured segment for stream {t}"
            )));
        }
        // latest stream where this class and every current class are all
        // measured; stream 0 always qualifies
        let mut shared: Option<usize> = None;
        for s in (0..proto.segments.len().min(t + 1)).rev() {
            let o_measured = matches!(proto.segments.get(s), Some((_, Provenance::Measured)));
            let all_current = current.iter().all(|j| {
                matches!(
                    store.entries[j].segments.get(s),
                    Some((_, Provenance::Measured))
                )
            });
            if o_measured && all_current {
                shared = Some(s);
                break;
            }
        }
        let s_star = shared.ok_or_else(|| {
            DrlError::Protocol(format!("class {o} shares no measured stream with stage {t}"))
        })?;

        let anchor = store.entries[&o].segments[s_star].0.clone();
        let sims: Vec<f64> = current
            .iter()
            .map(|j| cosine_similarity(&anchor, &store.entries[j].segments[s_star].0))
            .collect::<Result<_>>()?;
        let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
        let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|s| (s - mx).exp()).collect();
        let norm: f64 = exps.iter().sum();

        let d = anchor.numel();
        let mut mixed = Tensor::zeros(vec![d]);
        for (j, w) in current.iter().zip(exps.iter()) {
            mixed.add_scaled(&store.entries[j].segments[t].0, w / norm);
        }
        let entry = store.entries.get_mut(&o).expect("known class");
        if entry.segments.len() == t {
            entry.segments.push((mixed, Provenance::Synthesized));
        } else {
            entry.segments[t] = (mixed, Provenance::Synthesized);
        }
    }
    Ok(())
}

/// Cosine classification over the concatenated feature. Ties break toward
/// the lowest class id.
pub fn classify(
    feature: &Tensor,
    store: &PrototypeStore,
) -> Result<(ClassId, Vec<(ClassId, f64)>)> {
    if store.is_empty() {
        return Err(DrlError::Protocol("prototype store is empty".into()));
    }
    let seg_count = store
        .entries
        .values()
        .next()
        .map(|p| p.segments.len())
        .unwrap_or(0);
    let mut scores = Vec::with_capacity(store.len());
    for (class, proto) in &store.entries {
        if proto.segments.len() != seg_count {
            return Err(DrlError::Protocol(format!(
                "class {class} has {} segments, expected {seg_count}",
                proto.segments.len()
            )));
        }
        let concat = store.concat_segments(*class).expect("segments");
        if concat.numel() != feature.numel() {
            return Err(DrlError::Protocol(format!(
                "feature width {} does not match prototype width {}",
                feature.numel(),
                concat.numel()
            )));
        }
        scores.push((*class, cosine_similarity(&concat, feature)?));
    }
    let mut best = scores[0];
    for &(c, s) in &scores[1..] {
        if s > best.1 {
            best = (c, s);
        }
    }
    Ok((best.0, scores))
}

/// Per-stream class-token features for a probe batch.
#[derive(Debug, Clone)]
pub struct ProbeSnapshot {
    pub features: Vec<Vec<Tensor>>,
}

pub fn take_probe_snapshot(state: &IncrementalState, probe: &[Tensor]) -> Result<ProbeSnapshot> {
    let mut features = Vec::with_capacity(probe.len());
    for image in probe {
        let trace = composite_trace(state, image)?;
        features.push(trace.per_stream_cls);
    }
    Ok(ProbeSnapshot { features })
}

/// True iff every stream present in the snapshot reproduces its features
/// bit-identically now.
pub fn probe_invariance_check(
    state: &IncrementalState,
    probe: &[Tensor],
    snapshot: &ProbeSnapshot,
) -> Result<bool> {
    if probe.len() != snapshot.features.len() {
        return Err(DrlError::Config("probe batch does not match snapshot".into()));
    }
    for (image, expected) in probe.iter().zip(snapshot.features.iter()) {
        let trace = composite_trace(state, image)?;
        for (s, feat) in expected.iter().enumerate() {
            match trace.per_stream_cls.get(s) {
                Some(now) if now.bit_eq(feat) => {}
                _ => return Ok(false),
            }
        }
    }
    Ok(true)
}

/// Checksum of every frozen parameter (backbone plus sealed streams).
pub fn frozen_checksum(state: &IncrementalState) -> u64 {
    let mut parts: Vec<u64> = vec![state.backbone.checksum()];
    parts.extend(state.streams.iter().map(|s| s.checksum()));
    combine_checksums(parts)
}

/// Convenience for tests: all frozen parameters as a flat list.
pub fn frozen_params(state: &IncrementalState) -> Vec<Param> {
    let mut out = state.backbone.params();
    for s in &state.streams {
        out.extend(s.params());
    }
    out
}
