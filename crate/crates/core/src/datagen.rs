//! Deterministic synthetic class stream: a base task for pretraining the
//! backbone plus disjoint incremental stages in the B0 Inc-n convention.
//!
//! Each class owns a fixed low-frequency template (an oriented sinusoid
//! grating mixed with Gaussian blobs); samples perturb the template with a
//! cyclic +-2 pixel shift and per-pixel Gaussian noise, clamped to [0, 1].

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DrlError, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub base_classes: usize,
    pub incremental_classes: usize,
    pub inc_n: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub image_side: usize,
    /// When absent, the experiment runner derives it from the run seed.
    pub seed: Option<u64>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            base_classes: 10,
            incremental_classes: 10,
            inc_n: 2,
            train_per_class: 40,
            test_per_class: 20,
            noise_sigma: 0.15,
            image_side: 16,
            seed: None,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_classes == 0 || self.incremental_classes == 0 {
            return Err(DrlError::Config("class counts must be positive".into()));
        }
        if self.inc_n == 0 || self.incremental_classes % self.inc_n != 0 {
            return Err(DrlError::Config(format!(
                "inc_n {} must divide incremental_classes {}",
                self.inc_n, self.incremental_classes
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DrlError::Config("samples per class must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DrlError::Config("noise_sigma must be nonnegative".into()));
        }
        if self.image_side == 0 {
            return Err(DrlError::Config("image_side must be positive".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.incremental_classes / self.inc_n
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: u64,
    pub image: Tensor,
    pub label: ClassId,
    pub split: Split,
}

/// One unit of the stream: the base task (stage 0) or an incremental stage.
#[derive(Debug, Clone)]
pub struct StageDataset {
    /// 0 for the base task, 1.. for incremental stages.
    pub stage: usize,
    pub classes: Vec<ClassId>,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl StageDataset {
    pub fn class_set(&self) -> BTreeSet<ClassId> {
        self.classes.iter().copied().collect()
    }
}

/// Deterministic partition of `classes` into equally sized stages of `n`.
pub fn split_b0_inc_n(classes: &[ClassId], n: usize) -> Result<Vec<Vec<ClassId>>> {
    if n == 0 || classes.len() % n != 0 {
        return Err(DrlError::Config(format!(
            "cannot split {} classes into stages of {}",
            classes.len(),
            n
        )));
    }
    Ok(classes.chunks(n).map(|c| c.to_vec()).collect())
}

struct ClassTemplate {
    pixels: Vec<f64>,
    side: usize,
}

fn class_template(spec: &StreamSpec, seed: u64, class: ClassId) -> ClassTemplate {
    let mut rng = rng_for(seed, "class-template", u64::from(class.0));
    let side = spec.image_side;
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.gen_range(0.8..3.2);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.gen_range(0.18..0.30);
    let n_blobs = rng.gen_range(2..=3usize);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let cx = rng.gen_range(0.0..side as f64);
            let cy = rng.gen_range(0.0..side as f64);
            let sigma = rng.gen_range(1.5..3.5);
            let mag = rng.gen_range(0.15..0.30) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (cx, cy, sigma, mag)
        })
        .collect();

    let (ct, st) = (theta.cos(), theta.sin());
    let mut pixels = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let u = x as f64 / side as f64;
            let v = y as f64 / side as f64;
            let mut val =
                0.5 + amp * (std::f64::consts::TAU * freq * (ct * u + st * v) + phase).sin();
            for &(cx, cy, sigma, mag) in &blobs {
                // cyclic distance so shifted samples stay on-template
                let dx = cyclic_dist(x as f64, cx, side as f64);
                let dy = cyclic_dist(y as f64, cy, side as f64);
                val += mag * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
            pixels[y * side + x] = val.clamp(0.0, 1.0);
        }
    }
    ClassTemplate { pixels, side }
}

fn cyclic_dist(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).abs() % period;
    d.min(period - d)
}

/// Sample ids encode (class, split, index) so audits can attribute any
/// access without a lookup table.
pub fn sample_id(class: ClassId, split: Split, index: usize) -> u64 {
    let split_bit = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    (u64::from(class.0) << 32) | (split_bit << 24) | (index as u64)
}

fn render_sample(
    spec: &StreamSpec,
    seed: u64,
    template: &ClassTemplate,
    class: ClassId,
    split: Split,
    index: usize,
) -> SyntheticSample {
    let id = sample_id(class, split, index);
    let mut rng = rng_for(seed, "sample", id);
    let side = template.side;
    let dx = rng.gen_range(-2i64..=2);
    let dy = rng.gen_range(-2i64..=2);
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma");
    let mut pixels = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let sx = (x as i64 - dx).rem_euclid(side as i64) as usize;
            let sy = (y as i64 - dy).rem_euclid(side as i64) as usize;
            let noise = if spec.noise_sigma > 0.0 {
                normal.sample(&mut rng)
            } else {
                0.0
            };
            pixels[y * side + x] = (template.pixels[sy * side + sx] + noise).clamp(0.0, 1.0);
        }
    }
    SyntheticSample {
        id,
        image: Tensor::new(vec![side, side], pixels).expect("finite pixels"),
        label: class,
        split,
    }
}

fn build_stage(spec: &StreamSpec, seed: u64, stage: usize, classes: &[ClassId]) -> StageDataset {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &c in classes {
        let template = class_template(spec, seed, c);
        for i in 0..spec.train_per_class {
            train.push(render_sample(spec, seed, &template, c, Split::Train, i));
        }
        for i in 0..spec.test_per_class {
            test.push(render_sample(spec, seed, &template, c, Split::Test, i));
        }
    }
    StageDataset {
        stage,
        classes: classes.to_vec(),
        train,
        test,
    }
}

/// Generates the full stream: the base task (classes `0..base`) and the
/// incremental stages (classes `base..base+incremental`, `inc_n` per stage).
/// Fully determined by `spec` and its seed.
pub fn generate_stream(spec: &StreamSpec) -> Result<(StageDataset, Vec<StageDataset>)> {
    spec.validate()?;
    let seed = spec.seed.ok_or_else(|| {
        DrlError::Config("stream spec has no seed; set one or derive from the run seed".into())
    })?;

    let base_classes: Vec<ClassId> = (0..spec.base_classes as u32).map(ClassId).collect();
    let inc_classes: Vec<ClassId> = (spec.base_classes as u32
        ..(spec.base_classes + spec.incremental_classes) as u32)
        .map(ClassId)
        .collect();

    let base = build_stage(spec, seed, 0, &base_classes);
    let partitions = split_b0_inc_n(&inc_classes, spec.inc_n)?;
    let stages: Vec<StageDataset> = partitions
        .iter()
        .enumerate()
        .map(|(i, cls)| build_stage(spec, seed, i + 1, cls))
        .collect();
    Ok((base, stages))
}

/// Writes the stream manifest: one row per (class, split) with its stage
/// and sample count.
pub fn write_manifest(base: &StageDataset, stages: &[StageDataset], path: &Path) -> Result<()> {
    let mut out = String::from("class_id,stage,split,sample_count\n");
    let mut push_rows = |ds: &StageDataset| {
        for &c in &ds.classes {
            let n_train = ds.train.iter().filter(|s| s.label == c).count();
            let n_test = ds.test.iter().filter(|s| s.label == c).count();
            out.push_str(&format!("{},{},train,{}\n", c, ds.stage, n_train));
            out.push_str(&format!("{},{},test,{}\n", c, ds.stage, n_test));
        }
    };
    push_rows(base);
    for s in stages {
        push_rows(s);
    }
    fs::write(path, out).map_err(|e| DrlError::io(path, e))
}

// ---------------------------------------------------------------------------
// Optional external data: binary PGM (P5) folders behind the same
// StageDataset interface. Layout: <root>/<class_id>/{train,test}_*.pgm
// ---------------------------------------------------------------------------

/// Reads a binary (P5) PGM file into a `[h, w]` tensor scaled to [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| DrlError::io(path, e))?;
    parse_pgm(&bytes).map_err(|detail| DrlError::DegenerateInput {
        op: "read_pgm",
        detail: format!("{}: {detail}", path.display()),
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token()? != "P5" {
        return Err("not a binary PGM (P5) file".into());
    }
    let w: usize = token()?.parse().map_err(|_| "bad width")?;
    let h: usize = token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token()?.parse().map_err(|_| "bad maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (8-bit only)"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h;
    if bytes.len() < pos + need {
        return Err("pixel data truncated".into());
    }
    let data: Vec<f64> = bytes[pos..pos + need]
        .iter()
        .map(|&b| f64::from(b) / maxval as f64)
        .collect();
    Tensor::new(vec![h, w], data).map_err(|e| e.to_string())
}

/// Loads one stage from per-class PGM subdirectories. Directory names are
/// numeric class ids; files prefixed `train` go to the train split, `test`
/// to the test split.
pub fn stage_from_pgm_dir(root: &Path, stage: usize, image_side: usize) -> Result<StageDataset> {
    let mut classes = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();

    let mut class_dirs: Vec<(u32, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| DrlError::io(root, e))? {
        let entry = entry.map_err(|e| DrlError::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let id: u32 = name.parse().map_err(|_| {
            DrlError::Config(format!("class directory {name:?} is not a numeric id"))
        })?;
        class_dirs.push((id, entry.path()));
    }
    class_dirs.sort();

    for (id, dir) in class_dirs {
        let class = ClassId(id);
        classes.push(class);
        let mut files: Vec<std::path::PathBuf> = fs::read_dir(&dir)
            .map_err(|e| DrlError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "pgm").unwrap_or(false))
            .collect();
        files.sort();
        for (i, file) in files.iter().enumerate() {
            let image = read_pgm(file)?;
            if image.shape() != [image_side, image_side] {
                return Err(DrlError::Config(format!(
                    "{}: expected {image_side}x{image_side} image, got {:?}",
                    file.display(),
                    image.shape()
                )));
            }
            let name = file.file_name().unwrap().to_string_lossy().into_owned();
            let split = if name.starts_with("test") {
                Split::Test
            } else {
                Split::Train
            };
            let sample = SyntheticSample {
                id: sample_id(class, split, i),
                image,
                label: class,
                split,
            };
            match split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
    }
    if classes.is_empty() {
        return Err(DrlError::Config(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    Ok(StageDataset {
        stage,
        classes,
        train,
        test,
    })
}

/// Writes a tensor as a binary PGM file (used by tests and for exporting
/// synthetic data).
pub fn write_pgm(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (image.rows(), image.cols());
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut f = fs::File::create(path).map_err(|e| DrlError::io(path, e))?;
    f.write_all(&out).map_err(|e| DrlError::io(path, e))
}
