//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic          4 bytes  "DRLC"
//! version        u16
//! config digest  32 bytes
//! stage index    u32
//! backbone cfg   6 x u32  (image_side, patch_side, embed_dim, heads, blocks, ffn_hidden)
//! streams        u32 count, then per stream:
//!                  u8 fusion, u8 attention, u8 collapse, u8 activation,
//!                  f64 gamma, u32 bottleneck
//! param blocks   u32 count, then per block:
//!                  u32 name len, name bytes, u8 frozen, u8 decay,
//!                  u8 rank, u32 x rank dims, f64 x numel values
//! registry       u32 count, then (u32 class, u32 stage) pairs
//! prototypes     u32 count, then per class:
//!                  u32 class, u32 stage, u32 segment count,
//!                  per segment: u8 provenance, u32 len, f64 x len values
//! ```
//!
//! Loading parses the whole file from memory and only hands back a state
//! once every section has been read, so a truncated or corrupt file fails
//! atomically with a named error.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig};
use crate::datagen::ClassId;
use crate::engine::{ClassPrototype, IncrementalState, Provenance, PrototypeStore};
use crate::error::{CheckpointError, DrlError, Result};
use crate::ipa::{Activation, AttentionMode, FusionMode, ReuseCollapse, StageArch, StageModule};
use crate::param::Param;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DRLC";
pub const VERSION: u16 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub state: IncrementalState,
    pub store: PrototypeStore,
    pub config_digest: [u8; 32],
    pub version: u16,
}

// -- encoding ---------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.rank() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn param(&mut self, p: &Param) {
        self.string(&p.name());
        self.u8(u8::from(p.frozen()));
        self.u8(u8::from(p.decay()));
        self.tensor(&p.value_clone());
    }
}

fn fusion_byte(f: FusionMode) -> u8 {
    match f {
        FusionMode::Sum => 0,
        FusionMode::GatePart => 1,
        FusionMode::GateAdapt => 2,
        FusionMode::GateExtra => 3,
    }
}

fn attention_byte(a: AttentionMode) -> u8 {
    match a {
        AttentionMode::NAtt => 0,
        AttentionMode::SAtt => 1,
        AttentionMode::RAtt => 2,
    }
}

fn collapse_byte(c: ReuseCollapse) -> u8 {
    match c {
        ReuseCollapse::HeadMean => 0,
        ReuseCollapse::PerHead => 1,
    }
}

fn activation_byte(a: Activation) -> u8 {
    match a {
        Activation::Gelu => 0,
        Activation::Identity => 1,
    }
}

/// Serializes a sealed state plus its prototype store.
pub fn encode_checkpoint(
    state: &IncrementalState,
    store: &PrototypeStore,
    config_digest: &[u8; 32],
) -> Result<Vec<u8>> {
    if state.current.is_some() {
        return Err(DrlError::Protocol(
            "cannot checkpoint while a stage is training".into(),
        ));
    }
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.bytes(config_digest);
    w.u32(state.stage_index() as u32);

    let cfg = &state.backbone.config;
    for v in [
        cfg.image_side,
        cfg.patch_side,
        cfg.embed_dim,
        cfg.heads,
        cfg.blocks,
        cfg.ffn_hidden,
    ] {
        w.u32(v as u32);
    }

    w.u32(state.streams.len() as u32);
    for s in &state.streams {
        w.u8(fusion_byte(s.fusion_mode));
        w.u8(attention_byte(s.attention_mode));
        w.u8(collapse_byte(s.collapse));
        w.u8(activation_byte(s.transfer.act));
        w.f64(s.gamma);
        w.u32(s.bottleneck as u32);
    }

    let mut params = state.backbone.params();
    for s in &state.streams {
        params.extend(s.params());
    }
    w.u32(params.len() as u32);
    for p in &params {
        w.param(p);
    }

    w.u32(state.class_registry.len() as u32);
    for (c, stage) in &state.class_registry {
        w.u32(c.0);
        w.u32(*stage as u32);
    }

    w.u32(store.entries.len() as u32);
    for (c, proto) in &store.entries {
        w.u32(c.0);
        w.u32(proto.stage as u32);
        w.u32(proto.segments.len() as u32);
        for (seg, prov) in &proto.segments {
            w.u8(match prov {
                Provenance::Measured => 0,
                Provenance::Synthesized => 1,
            });
            w.u32(seg.numel() as u32);
            for &v in seg.data() {
                w.f64(v);
            }
        }
    }

    Ok(w.buf)
}

pub fn save_checkpoint(
    state: &IncrementalState,
    store: &PrototypeStore,
    config_digest: &[u8; 32],
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(state, store, config_digest)?;
    std::fs::write(path, bytes).map_err(|e| DrlError::io(path, e))
}

// -- decoding ---------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated { section });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self, s: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, s)?[0])
    }
    fn u16(&mut self, s: &'static str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, s)?.try_into().unwrap()))
    }
    fn u32(&mut self, s: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, s)?.try_into().unwrap()))
    }
    fn f64(&mut self, s: &'static str) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, s)?.try_into().unwrap()))
    }
    fn string(&mut self, s: &'static str) -> std::result::Result<String, CheckpointError> {
        let len = self.u32(s)? as usize;
        let bytes = self.take(len, s)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Corrupt(format!("non-utf8 string in {s}")))
    }
    fn tensor(&mut self, s: &'static str) -> std::result::Result<Tensor, CheckpointError> {
        let rank = self.u8(s)? as usize;
        if rank > 4 {
            return Err(CheckpointError::Corrupt(format!("tensor rank {rank} in {s}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(s)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 64 * 1024 * 1024 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor of {numel} elements in {s}"
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64(s)?);
        }
        Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt(format!("bad tensor in {s}: {e}")))
    }
}

fn fusion_from(b: u8) -> std::result::Result<FusionMode, CheckpointError> {
    Ok(match b {
        0 => FusionMode::Sum,
        1 => FusionMode::GatePart,
        2 => FusionMode::GateAdapt,
        3 => FusionMode::GateExtra,
        _ => return Err(CheckpointError::Corrupt(format!("fusion byte {b}"))),
    })
}

fn attention_from(b: u8) -> std::result::Result<AttentionMode, CheckpointError> {
    Ok(match b {
        0 => AttentionMode::NAtt,
        1 => AttentionMode::SAtt,
        2 => AttentionMode::RAtt,
        _ => return Err(CheckpointError::Corrupt(format!("attention byte {b}"))),
    })
}

fn collapse_from(b: u8) -> std::result::Result<ReuseCollapse, CheckpointError> {
    Ok(match b {
        0 => ReuseCollapse::HeadMean,
        1 => ReuseCollapse::PerHead,
        _ => return Err(CheckpointError::Corrupt(format!("collapse byte {b}"))),
    })
}

fn activation_from(b: u8) -> std::result::Result<Activation, CheckpointError> {
    Ok(match b {
        0 => Activation::Gelu,
        1 => Activation::Identity,
        _ => return Err(CheckpointError::Corrupt(format!("activation byte {b}"))),
    })
}

fn apply_values(
    params: &[Param],
    values: &mut BTreeMap<String, (Tensor, bool, bool)>,
) -> std::result::Result<(), CheckpointError> {
    for p in params {
        let name = p.name();
        let (value, frozen, _decay) = values.remove(&name).ok_or_else(|| {
            CheckpointError::Corrupt(format!("missing parameter block {name:?}"))
        })?;
        if value.shape() != p.shape().as_slice() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter {name:?} has shape {:?}, expected {:?}",
                value.shape(),
                p.shape()
            )));
        }
        p.set_value(value);
        if frozen {
            p.freeze();
        }
    }
    Ok(())
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let mut config_digest = [0u8; 32];
    config_digest.copy_from_slice(r.take(32, "config digest")?);
    let stage_index = r.u32("stage index")? as usize;

    let cfg = BackboneConfig {
        image_side: r.u32("backbone config")? as usize,
        patch_side: r.u32("backbone config")? as usize,
        embed_dim: r.u32("backbone config")? as usize,
        heads: r.u32("backbone config")? as usize,
        blocks: r.u32("backbone config")? as usize,
        ffn_hidden: r.u32("backbone config")? as usize,
    };
    cfg.validate()
        .map_err(|e| CheckpointError::Corrupt(format!("backbone config: {e}")))?;

    let stream_count = r.u32("stream metadata")? as usize;
    if stream_count != stage_index {
        return Err(CheckpointError::Corrupt(format!(
            "stage index {stage_index} but {stream_count} stream records"
        )));
    }
    let mut archs = Vec::with_capacity(stream_count);
    for _ in 0..stream_count {
        let fusion = fusion_from(r.u8("stream metadata")?)?;
        let attention = attention_from(r.u8("stream metadata")?)?;
        let collapse = collapse_from(r.u8("stream metadata")?)?;
        let act = activation_from(r.u8("stream metadata")?)?;
        let gamma = r.f64("stream metadata")?;
        let bottleneck = r.u32("stream metadata")? as usize;
        archs.push((
            StageArch {
                fusion_mode: fusion,
                attention_mode: attention,
                collapse,
                gamma,
                bottleneck,
            },
            act,
        ));
    }

    let block_count = r.u32("parameter blocks")? as usize;
    let mut values: BTreeMap<String, (Tensor, bool, bool)> = BTreeMap::new();
    for _ in 0..block_count {
        let name = r.string("parameter blocks")?;
        let frozen = r.u8("parameter blocks")? != 0;
        let decay = r.u8("parameter blocks")? != 0;
        let value = r.tensor("parameter blocks")?;
        if values.insert(name.clone(), (value, frozen, decay)).is_some() {
            return Err(CheckpointError::Corrupt(format!(
                "duplicate parameter block {name:?}"
            )));
        }
    }

    let registry_count = r.u32("class registry")? as usize;
    let mut registry = BTreeMap::new();
    for _ in 0..registry_count {
        let class = ClassId(r.u32("class registry")?);
        let stage = r.u32("class registry")? as usize;
        registry.insert(class, stage);
    }

    let proto_count = r.u32("prototypes")? as usize;
    let mut store = PrototypeStore::new();
    for _ in 0..proto_count {
        let class = ClassId(r.u32("prototypes")?);
        let stage = r.u32("prototypes")? as usize;
        let seg_count = r.u32("prototypes")? as usize;
        let mut segments = Vec::with_capacity(seg_count);
        for _ in 0..seg_count {
            let prov = match r.u8("prototypes")? {
                0 => Provenance::Measured,
                1 => Provenance::Synthesized,
                b => return Err(CheckpointError::Corrupt(format!("provenance byte {b}"))),
            };
            let len = r.u32("prototypes")? as usize;
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f64("prototypes")?);
            }
            let seg = Tensor::new(vec![len], data)
                .map_err(|e| CheckpointError::Corrupt(format!("prototype segment: {e}")))?;
            segments.push((seg, prov));
        }
        store.entries.insert(class, ClassPrototype { stage, segments });
    }

    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    // rebuild the modules with placeholder init, then overwrite every value
    let backbone = Backbone::init(cfg.clone(), 0)
        .map_err(|e| CheckpointError::Corrupt(format!("backbone rebuild: {e}")))?;
    apply_values(&backbone.params(), &mut values)?;
    if !backbone.is_frozen() {
        return Err(CheckpointError::Corrupt(
            "checkpoint backbone is not frozen".into(),
        ));
    }

    let mut streams = Vec::with_capacity(stream_count);
    for (i, (arch, act)) in archs.iter().enumerate() {
        let mut module = StageModule::init(i + 1, &cfg, arch, 0)
            .map_err(|e| CheckpointError::Corrupt(format!("stream rebuild: {e}")))?;
        for a in &mut module.adapters {
            a.act = *act;
        }
        for gate in &mut module.gates {
            gate.inner.act = *act;
        }
        for gate in &mut module.extra_gates {
            gate.inner.act = *act;
        }
        module.transfer.act = *act;
        apply_values(&module.params(), &mut values)?;
        if !module.is_frozen() {
            return Err(CheckpointError::Corrupt(format!(
                "checkpoint stream {} is not frozen",
                i + 1
            )));
        }
        streams.push(module);
    }

    if let Some(name) = values.keys().next() {
        return Err(CheckpointError::Corrupt(format!(
            "unclaimed parameter block {name:?}"
        )));
    }

    let mut state = IncrementalState::new(backbone)
        .map_err(|e| CheckpointError::Corrupt(format!("state rebuild: {e}")))?;
    state.streams = streams;
    state.class_registry = registry;

    Ok(Checkpoint {
        state,
        store,
        config_digest,
        version,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    decode_inner(bytes).map_err(DrlError::Checkpoint)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| DrlError::Checkpoint(CheckpointError::Io(e)))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_state() -> (IncrementalState, PrototypeStore) {
        let cfg = BackboneConfig {
            image_side: 8,
            patch_side: 4,
            embed_dim: 8,
            heads: 2,
            blocks: 2,
            ffn_hidden: 16,
        };
        let backbone = Backbone::random_frozen(cfg.clone(), 0).unwrap();
        let mut state = IncrementalState::new(backbone).unwrap();
        let arch = StageArch {
            fusion_mode: FusionMode::GateAdapt,
            attention_mode: AttentionMode::RAtt,
            collapse: ReuseCollapse::HeadMean,
            gamma: 0.9,
            bottleneck: 4,
        };
        let module = StageModule::init(1, &cfg, &arch, 7).unwrap();
        module.freeze();
        state.streams.push(module);
        state.class_registry.insert(ClassId(10), 1);
        state.class_registry.insert(ClassId(11), 1);

        let mut store = PrototypeStore::new();
        store.entries.insert(
            ClassId(10),
            ClassPrototype {
                stage: 1,
                segments: vec![
                    (Tensor::vector(vec![1.0; 8]), Provenance::Measured),
                    (Tensor::vector(vec![0.5; 8]), Provenance::Measured),
                ],
            },
        );
        (state, store)
    }

    #[test]
    fn save_load_save_is_a_fixpoint() {
        let (state, store) = tiny_state();
        let digest = [7u8; 32];
        let bytes = encode_checkpoint(&state, &store, &digest).unwrap();
        let loaded = decode_checkpoint(&bytes).unwrap();
        let bytes2 = encode_checkpoint(&loaded.state, &loaded.store, &loaded.config_digest).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(loaded.config_digest, digest);
        assert_eq!(loaded.state.class_registry.len(), 2);
    }

    #[test]
    fn bad_magic_is_named() {
        let (state, store) = tiny_state();
        let mut bytes = encode_checkpoint(&state, &store, &[0; 32]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(DrlError::Checkpoint(CheckpointError::BadMagic))
        ));
    }

    #[test]
    fn version_mismatch_is_named() {
        let (state, store) = tiny_state();
        let mut bytes = encode_checkpoint(&state, &store, &[0; 32]).unwrap();
        bytes[4] = 99;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(DrlError::Checkpoint(CheckpointError::VersionMismatch {
                found: 99,
                ..
            }))
        ));
    }

    #[test]
    fn truncation_fails_atomically_at_any_cut() {
        let (state, store) = tiny_state();
        let bytes = encode_checkpoint(&state, &store, &[0; 32]).unwrap();
        for cut in [5usize, 40, 60, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(
                    err,
                    DrlError::Checkpoint(CheckpointError::Truncated { .. })
                ),
                "cut at {cut}: {err}"
            );
        }
    }

    #[test]
    fn trailing_garbage_is_corrupt() {
        let (state, store) = tiny_state();
        let mut bytes = encode_checkpoint(&state, &store, &[0; 32]).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(DrlError::Checkpoint(CheckpointError::Corrupt(_)))
        ));
    }

    #[test]
    fn loaded_params_are_bit_identical() {
        let (state, store) = tiny_state();
        let bytes = encode_checkpoint(&state, &store, &[0; 32]).unwrap();
        let loaded = decode_checkpoint(&bytes).unwrap();
        assert_eq!(
            crate::engine::frozen_checksum(&state),
            crate::engine::frozen_checksum(&loaded.state)
        );
        let (seg, prov) = loaded.store.segment(ClassId(10), 1).unwrap();
        assert!(seg.bit_eq(&store.segment(ClassId(10), 1).unwrap().0));
        assert_eq!(*prov, Provenance::Measured);
    }
}
