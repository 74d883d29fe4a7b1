//! Incremental parallel adapters: per-block bottleneck adapters that reuse
//! the frozen backbone's attention, transfer gates that blend the previous
//! stream with the backbone, and the final-block transfer block. One
//! [`StageModule`] holds everything one incremental stage trains.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{DrlError, Result};
use crate::graph::{Graph, Val};
use crate::param::{params_checksum, total_numel, Param};
use crate::rng::rng_for;
use crate::tensor::{is_row_stochastic, Tensor};

const INIT_STD: f64 = 0.02;

/// How adapter-stream features are fused with the blended gate input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Sum,
    GatePart,
    GateAdapt,
    GateExtra,
}

impl Default for FusionMode {
    fn default() -> Self {
        FusionMode::GateAdapt
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionMode::Sum => "sum",
            FusionMode::GatePart => "gate_part",
            FusionMode::GateAdapt => "gate_adapt",
            FusionMode::GateExtra => "gate_extra",
        };
        write!(f, "{s}")
    }
}

/// Attention used inside the adapter stream: none, standard self-attention
/// with fresh projections, or the backbone's reused attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    NAtt,
    SAtt,
    RAtt,
}

impl Default for AttentionMode {
    fn default() -> Self {
        AttentionMode::RAtt
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttentionMode::NAtt => "n_att",
            AttentionMode::SAtt => "s_att",
            AttentionMode::RAtt => "r_att",
        };
        write!(f, "{s}")
    }
}

/// How the multi-head attention stack is collapsed when reused: averaged
/// across heads and applied to the full width, or applied head-by-head to
/// the matching channel group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseCollapse {
    HeadMean,
    PerHead,
}

impl Default for ReuseCollapse {
    fn default() -> Self {
        ReuseCollapse::HeadMean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Gelu
    }
}

fn apply_act(g: &mut Graph, x: Val, act: Activation) -> Result<Val> {
    match act {
        Activation::Gelu => g.gelu(x),
        Activation::Identity => Ok(x),
    }
}

/// Bottleneck adapter: down-projection, activation, up-projection.
#[derive(Debug)]
pub struct AdapterParams {
    pub w_down: Param,
    pub b_down: Param,
    pub w_up: Param,
    pub b_up: Param,
    pub act: Activation,
}

impl AdapterParams {
    pub fn init(prefix: &str, d: usize, r: usize, rng: &mut ChaCha8Rng) -> Self {
        AdapterParams {
            w_down: Param::normal(format!("{prefix}.down.w"), vec![d, r], INIT_STD, rng, true),
            b_down: Param::zeros(format!("{prefix}.down.b"), vec![r]),
            w_up: Param::normal(format!("{prefix}.up.w"), vec![r, d], INIT_STD, rng, true),
            b_up: Param::zeros(format!("{prefix}.up.b"), vec![d]),
            act: Activation::Gelu,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.w_down.clone(),
            self.b_down.clone(),
            self.w_up.clone(),
            self.b_up.clone(),
        ]
    }
}

/// Transfer gate: the adapter shape followed by an elementwise sigmoid.
#[derive(Debug)]
pub struct GateParams {
    pub inner: AdapterParams,
}

impl GateParams {
    pub fn init(prefix: &str, d: usize, r: usize, rng: &mut ChaCha8Rng) -> Self {
        GateParams {
            inner: AdapterParams::init(prefix, d, r, rng),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        self.inner.params()
    }
}

/// Fresh query/key projections for the standard self-attention variant.
/// No key bias: a constant added to every key shifts each row of scores
/// uniformly, which the row softmax cancels, so the parameter would be
/// inert.
#[derive(Debug)]
pub struct SAttParams {
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
}

impl SAttParams {
    pub fn init(prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        SAttParams {
            wq: Param::normal(format!("{prefix}.wq"), vec![d, d], INIT_STD, rng, true),
            bq: Param::zeros(format!("{prefix}.bq"), vec![d]),
            wk: Param::normal(format!("{prefix}.wk"), vec![d, d], INIT_STD, rng, true),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.wq.clone(), self.bq.clone(), self.wk.clone()]
    }
}

/// Final-block replacement: attention mixing followed by two square linear
/// layers behind a residual.
#[derive(Debug)]
pub struct TransferBlockParams {
    pub w_first: Param,
    pub b_first: Param,
    pub w_second: Param,
    pub b_second: Param,
    pub act: Activation,
}

impl TransferBlockParams {
    pub fn init(prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        TransferBlockParams {
            w_first: Param::normal(format!("{prefix}.w1"), vec![d, d], INIT_STD, rng, true),
            b_first: Param::zeros(format!("{prefix}.b1"), vec![d]),
            w_second: Param::normal(format!("{prefix}.w2"), vec![d, d], INIT_STD, rng, true),
            b_second: Param::zeros(format!("{prefix}.b2"), vec![d]),
            act: Activation::Gelu,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.w_first.clone(),
            self.b_first.clone(),
            self.w_second.clone(),
            self.b_second.clone(),
        ]
    }
}

/// One incremental stage's trainable bundle: adapter/gate pairs for blocks
/// `1..L-1`, a transfer block for block `L`, and the fusion/attention
/// configuration.
#[derive(Debug)]
pub struct StageModule {
    /// 1-based stream index this module was trained as.
    pub stage: usize,
    pub adapters: Vec<AdapterParams>,
    pub gates: Vec<GateParams>,
    pub extra_gates: Vec<GateParams>,
    pub s_att: Vec<SAttParams>,
    pub transfer: TransferBlockParams,
    pub fusion_mode: FusionMode,
    pub attention_mode: AttentionMode,
    pub collapse: ReuseCollapse,
    pub gamma: f64,
    pub bottleneck: usize,
}

/// Architecture knobs shared by every stage of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageArch {
    pub fusion_mode: FusionMode,
    pub attention_mode: AttentionMode,
    pub collapse: ReuseCollapse,
    pub gamma: f64,
    pub bottleneck: usize,
}

impl StageModule {
    pub fn init(stage: usize, cfg: &BackboneConfig, arch: &StageArch, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&arch.gamma) {
            return Err(DrlError::Config(format!(
                "gamma must be in [0, 1], got {}",
                arch.gamma
            )));
        }
        let d = cfg.embed_dim;
        let r = arch.bottleneck;
        if r == 0 || r >= d {
            return Err(DrlError::Config(format!(
                "bottleneck r = {r} must satisfy 0 < r < d = {d}"
            )));
        }
        let mut rng = rng_for(seed, "stage-module-init", stage as u64);
        let prefix = format!("stream{stage}");
        let n_adapters = cfg.blocks - 1;

        let adapters = (0..n_adapters)
            .map(|l| AdapterParams::init(&format!("{prefix}.block{}.adapter", l + 1), d, r, &mut rng))
            .collect();
        let gates = match arch.fusion_mode {
            FusionMode::Sum => Vec::new(),
            _ => (0..n_adapters)
                .map(|l| GateParams::init(&format!("{prefix}.block{}.gate", l + 1), d, r, &mut rng))
                .collect(),
        };
        let extra_gates = match arch.fusion_mode {
            FusionMode::GateExtra => (0..n_adapters)
                .map(|l| {
                    GateParams::init(&format!("{prefix}.block{}.gate_extra", l + 1), d, r, &mut rng)
                })
                .collect(),
            _ => Vec::new(),
        };
        let s_att = match arch.attention_mode {
            AttentionMode::SAtt => (0..cfg.blocks)
                .map(|l| SAttParams::init(&format!("{prefix}.block{}.satt", l + 1), d, &mut rng))
                .collect(),
            _ => Vec::new(),
        };
        let transfer = TransferBlockParams::init(&format!("{prefix}.transfer"), d, &mut rng);

        Ok(StageModule {
            stage,
            adapters,
            gates,
            extra_gates,
            s_att,
            transfer,
            fusion_mode: arch.fusion_mode,
            attention_mode: arch.attention_mode,
            collapse: arch.collapse,
            gamma: arch.gamma,
            bottleneck: r,
        })
    }

    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        for a in &self.adapters {
            out.extend(a.params());
        }
        for g in &self.gates {
            out.extend(g.params());
        }
        for g in &self.extra_gates {
            out.extend(g.params());
        }
        for s in &self.s_att {
            out.extend(s.params());
        }
        out.extend(self.transfer.params());
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        total_numel(&self.params())
    }

    pub fn freeze(&self) {
        for p in self.params() {
            p.freeze();
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| p.frozen())
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(&self.params())
    }

    pub fn arch(&self) -> StageArch {
        StageArch {
            fusion_mode: self.fusion_mode,
            attention_mode: self.attention_mode,
            collapse: self.collapse,
            gamma: self.gamma,
            bottleneck: self.bottleneck,
        }
    }
}

/// Closed-form trainable-parameter count of one stage module (head
/// excluded), matching the constructed shapes exactly.
pub fn closed_form_module_params(
    d: usize,
    r: usize,
    blocks: usize,
    fusion: FusionMode,
    attention: AttentionMode,
) -> usize {
    let bottleneck = d * r + r + r * d + d;
    let adapters = (blocks - 1) * bottleneck;
    let gates = match fusion {
        FusionMode::Sum => 0,
        FusionMode::GateExtra => 2 * (blocks - 1) * bottleneck,
        _ => (blocks - 1) * bottleneck,
    };
    let satt = match attention {
        AttentionMode::SAtt => blocks * (2 * d * d + d),
        _ => 0,
    };
    let transfer = 2 * (d * d + d);
    adapters + gates + satt + transfer
}

/// Closed-form head parameter count: one weight column per class plus the
/// scale.
pub fn closed_form_head_params(d: usize, classes: usize) -> usize {
    d * classes + 1
}

/// Default bottleneck width: 48 at full scale, halved embedding width at
/// desk scale.
pub fn default_bottleneck(d: usize) -> usize {
    48.min(d / 2).max(1)
}

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

/// `f_hat = up(act(down(f_in)))`, applied tokenwise.
pub fn adapter_forward(g: &mut Graph, f_in: Val, adapter: &AdapterParams) -> Result<Val> {
    let wd = g.param(&adapter.w_down);
    let bd = g.param(&adapter.b_down);
    let wu = g.param(&adapter.w_up);
    let bu = g.param(&adapter.b_up);
    let h = g.matmul(f_in, wd)?;
    let h = g.add_row(h, bd)?;
    let h = apply_act(g, h, adapter.act)?;
    let h = g.matmul(h, wu)?;
    g.add_row(h, bu)
}

/// `M = sigmoid(up(act(down(g_in))))`; entries strictly inside (0, 1).
pub fn gate_mask(g: &mut Graph, g_in: Val, gate: &GateParams) -> Result<Val> {
    let pre = adapter_forward(g, g_in, &gate.inner)?;
    g.sigmoid(pre)
}

/// Applies the configured attention to `f_hat` treated as values.
/// `r_att` reuses the backbone's post-softmax stack `a_stack [H,T,T]`,
/// `n_att` passes through, `s_att` computes fresh single-head attention
/// from `f_hat` with its own projections.
pub fn reusable_attention_apply(
    g: &mut Graph,
    f_hat: Val,
    a_stack: &Tensor,
    mode: AttentionMode,
    collapse: ReuseCollapse,
    s_att: Option<&SAttParams>,
) -> Result<Val> {
    match mode {
        AttentionMode::NAtt => Ok(f_hat),
        AttentionMode::RAtt => {
            if a_stack.rank() != 3 {
                return Err(DrlError::ShapeMismatch {
                    op: "reusable_attention_apply",
                    left: a_stack.shape().to_vec(),
                    right: vec![],
                });
            }
            let heads = a_stack.shape()[0];
            let t = a_stack.shape()[1];
            for h in 0..heads {
                let per_head = Tensor::from_raw(
                    vec![t, t],
                    a_stack.data()[h * t * t..(h + 1) * t * t].to_vec(),
                );
                if !is_row_stochastic(&per_head, 1e-9) {
                    return Err(DrlError::Protocol(
                        "reused attention matrix is not row-stochastic".into(),
                    ));
                }
            }
            match collapse {
                ReuseCollapse::HeadMean => {
                    let mut mean = vec![0.0; t * t];
                    for h in 0..heads {
                        for k in 0..t * t {
                            mean[k] += a_stack.data()[h * t * t + k];
                        }
                    }
                    for v in &mut mean {
                        *v /= heads as f64;
                    }
                    let a = g.constant(Tensor::from_raw(vec![t, t], mean));
                    g.matmul(a, f_hat)
                }
                ReuseCollapse::PerHead => {
                    let d = g.value(f_hat).cols();
                    if d % heads != 0 {
                        return Err(DrlError::Config(format!(
                            "per-head reuse needs heads {heads} to divide width {d}"
                        )));
                    }
                    let dh = d / heads;
                    let mut parts = Vec::with_capacity(heads);
                    for h in 0..heads {
                        let a = g.constant(Tensor::from_raw(
                            vec![t, t],
                            a_stack.data()[h * t * t..(h + 1) * t * t].to_vec(),
                        ));
                        let group = g.slice_cols(f_hat, h * dh, (h + 1) * dh)?;
                        parts.push(g.matmul(a, group)?);
                    }
                    g.concat_cols(&parts)
                }
            }
        }
        AttentionMode::SAtt => {
            let p = s_att.ok_or_else(|| {
                DrlError::Config("s_att mode requires query/key projections".into())
            })?;
            let d = g.value(f_hat).cols();
            let wq = g.param(&p.wq);
            let bq = g.param(&p.bq);
            let wk = g.param(&p.wk);
            let q = g.matmul(f_hat, wq)?;
            let q = g.add_row(q, bq)?;
            let k = g.matmul(f_hat, wk)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
            let a = g.softmax_rows(scores)?;
            g.matmul(a, f_hat)
        }
    }
}

/// Gate input: convex blend of the previous stream's block feature with the
/// backbone's. At stage one there is no previous adapter stream and the
/// input is the backbone feature itself, exactly.
pub fn gate_input(g: &mut Graph, f_prev: Option<Val>, f_ptm: Val, gamma: f64) -> Result<Val> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DrlError::Config(format!(
            "gamma must be in [0, 1], got {gamma}"
        )));
    }
    match f_prev {
        None => Ok(f_ptm),
        Some(prev) => {
            let a = g.scale(prev, 1.0 - gamma)?;
            let b = g.scale(f_ptm, gamma)?;
            g.add(a, b)
        }
    }
}

/// Fusion of the attended adapter features with the gate input.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    g: &mut Graph,
    f_bar: Val,
    g_in: Val,
    mask: Option<Val>,
    f_prev_raw: Val,
    f_ptm: Val,
    mask_extra: Option<Val>,
    mode: FusionMode,
) -> Result<Val> {
    let need_mask = || {
        mask.ok_or_else(|| DrlError::Config(format!("fusion mode {mode} requires a gate mask")))
    };
    match mode {
        FusionMode::Sum => g.add(f_bar, g_in),
        FusionMode::GatePart => {
            let m = need_mask()?;
            let gated = g.mul(m, g_in)?;
            g.add(f_bar, gated)
        }
        FusionMode::GateAdapt => {
            let m = need_mask()?;
            let neg = g.scale(m, -1.0)?;
            let inv = g.add_const(neg, 1.0)?;
            let a = g.mul(inv, f_bar)?;
            let b = g.mul(m, g_in)?;
            g.add(a, b)
        }
        FusionMode::GateExtra => {
            let m = need_mask()?;
            let m0 = mask_extra.ok_or_else(|| {
                DrlError::Config("gate_extra requires a second gate mask".into())
            })?;
            let msum = g.add(m, m0)?;
            let neg = g.scale(msum, -1.0)?;
            let two_minus = g.add_const(neg, 2.0)?;
            let t1 = g.mul(two_minus, f_bar)?;
            let t2 = g.mul(m, f_prev_raw)?;
            let t3 = g.mul(m0, f_ptm)?;
            let s = g.add(t1, t2)?;
            let s = g.add(s, t3)?;
            g.scale(s, 0.5)
        }
    }
}

/// Final-block transfer: attention mixing of the stream's block `L-1`
/// output, then two square linear layers behind a residual. No gate fusion
/// happens at the last block.
pub fn transfer_block_forward(
    g: &mut Graph,
    f_in: Val,
    tb: &TransferBlockParams,
    a_stack_last: &Tensor,
    mode: AttentionMode,
    collapse: ReuseCollapse,
    s_att: Option<&SAttParams>,
) -> Result<Val> {
    let x = reusable_attention_apply(g, f_in, a_stack_last, mode, collapse, s_att)?;
    let w1 = g.param(&tb.w_first);
    let b1 = g.param(&tb.b_first);
    let w2 = g.param(&tb.w_second);
    let b2 = g.param(&tb.b_second);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = apply_act(g, h, tb.act)?;
    let h = g.matmul(h, w2)?;
    let h = g.add_row(h, b2)?;
    g.add(x, h)
}

/// Frozen context one stream consumes: the shared stem output, the
/// backbone's per-block tokens and attention stacks, and the previous
/// stream's per-block tokens (absent at stage one).
pub struct StreamInputs<'a> {
    pub embed: &'a Tensor,
    pub ptm_blocks: &'a [Tensor],
    pub ptm_attn: &'a [Tensor],
    pub prev_blocks: Option<&'a [Tensor]>,
}

/// Tape handles for one stream pass: every block output and the final
/// class token.
pub struct StreamVals {
    pub blocks: Vec<Val>,
    pub cls: Val,
}

/// Runs one adapter stream over the tape. Blocks `1..L-1` apply
/// adapter -> attention -> gate fusion; block `L` applies the transfer
/// block.
pub fn stream_forward(g: &mut Graph, module: &StageModule, inputs: &StreamInputs) -> Result<StreamVals> {
    let l_total = inputs.ptm_blocks.len();
    if inputs.ptm_attn.len() != l_total {
        return Err(DrlError::Config(
            "backbone trace lengths disagree".into(),
        ));
    }
    if module.adapters.len() + 1 != l_total {
        return Err(DrlError::Config(format!(
            "module has {} adapters for a {}-block backbone",
            module.adapters.len(),
            l_total
        )));
    }
    if let Some(prev) = inputs.prev_blocks {
        if prev.len() != l_total {
            return Err(DrlError::Config("previous stream trace length disagrees".into()));
        }
    }

    let mut blocks = Vec::with_capacity(l_total);
    let mut current = g.constant(inputs.embed.clone());
    for l in 0..l_total - 1 {
        let f_hat = adapter_forward(g, current, &module.adapters[l])?;
        let f_bar = reusable_attention_apply(
            g,
            f_hat,
            &inputs.ptm_attn[l],
            module.attention_mode,
            module.collapse,
            module.s_att.get(l),
        )?;
        let f_ptm = g.constant(inputs.ptm_blocks[l].clone());
        let f_prev = inputs
            .prev_blocks
            .map(|prev| g.constant(prev[l].clone()));
        let g_in = gate_input(g, f_prev, f_ptm, module.gamma)?;
        let mask = match module.fusion_mode {
            FusionMode::Sum => None,
            _ => Some(gate_mask(g, g_in, &module.gates[l])?),
        };
        let mask_extra = match module.fusion_mode {
            FusionMode::GateExtra => Some(gate_mask(g, f_ptm, &module.extra_gates[l])?),
            _ => None,
        };
        // for gate_extra, the raw previous-stream feature is the backbone's
        // at stage one
        let f_prev_raw = f_prev.unwrap_or(f_ptm);
        current = fuse(g, f_bar, g_in, mask, f_prev_raw, f_ptm, mask_extra, module.fusion_mode)?;
        blocks.push(current);
    }

    let out = transfer_block_forward(
        g,
        current,
        &module.transfer,
        &inputs.ptm_attn[l_total - 1],
        module.attention_mode,
        module.collapse,
        module.s_att.get(l_total - 1),
    )?;
    blocks.push(out);
    let cls = g.row(out, 0)?;
    Ok(StreamVals { blocks, cls })
}

/// Value-level record of one composite pass: the shared stem output, the
/// backbone's block tokens and attention stacks, every stream's final class
/// token, and the last stream's full block outputs (the context the next
/// stage trains against).
pub struct CompositeTrace {
    pub embed: Tensor,
    pub ptm_blocks: Vec<Tensor>,
    pub ptm_attn: Vec<Tensor>,
    pub ptm_cls: Tensor,
    pub per_stream_cls: Vec<Tensor>,
    pub last_stream_blocks: Option<Vec<Tensor>>,
}

/// Single-pass evaluation of the whole composite network: the backbone
/// runs once, then each sealed stream in stage order, each consuming its
/// predecessor's block features and the backbone traces.
pub fn composite_trace(
    state: &crate::engine::IncrementalState,
    image: &Tensor,
) -> Result<CompositeTrace> {
    let fwd = crate::backbone::backbone_forward(&state.backbone, image)?;
    state.bump_eval(0);
    let ptm_blocks: Vec<Tensor> = fwd
        .traces
        .iter()
        .map(|t| t.output_tokens.clone())
        .collect();
    let ptm_attn: Vec<Tensor> = fwd.traces.iter().map(|t| t.attention.clone()).collect();
    let mut per_stream_cls = vec![fwd.feature.clone()];
    let mut prev: Option<Vec<Tensor>> = None;
    for (i, module) in state.streams.iter().enumerate() {
        let mut g = Graph::new();
        let vals = stream_forward(
            &mut g,
            module,
            &StreamInputs {
                embed: &fwd.embed,
                ptm_blocks: &ptm_blocks,
                ptm_attn: &ptm_attn,
                prev_blocks: prev.as_deref(),
            },
        )?;
        let blocks: Vec<Tensor> = vals.blocks.iter().map(|&v| g.value(v).clone()).collect();
        per_stream_cls.push(g.value(vals.cls).clone());
        state.bump_eval(i + 1);
        prev = Some(blocks);
    }
    Ok(CompositeTrace {
        embed: fwd.embed,
        ptm_blocks,
        ptm_attn,
        ptm_cls: per_stream_cls[0].clone(),
        per_stream_cls,
        last_stream_blocks: prev,
    })
}

/// The inference embedding and its per-stream pieces.
pub struct CompositeFeatures {
    /// Concatenation of every stream's final class token, width `(t+1)*d`.
    pub concatenated: Tensor,
    pub per_stream_cls: Vec<Tensor>,
}

pub fn composite_forward(
    image: &Tensor,
    state: &crate::engine::IncrementalState,
) -> Result<CompositeFeatures> {
    let trace = composite_trace(state, image)?;
    let mut data = Vec::new();
    for f in &trace.per_stream_cls {
        data.extend_from_slice(f.data());
    }
    Ok(CompositeFeatures {
        concatenated: Tensor::vector(data),
        per_stream_cls: trace.per_stream_cls,
    })
}
