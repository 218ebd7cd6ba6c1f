//! Synthetic frame-feature inputs standing in for a frozen visual encoder.
//!
//! A video is `N` frames at one frame per second. Each frame contributes one
//! global feature vector and `P` fine-grained patch features. The needle
//! generator buries a class-identifying pattern in exactly one patch of one
//! frame, so the class is recoverable from that fine slot but washes out of
//! any pooled aggregate; the frame's global feature carries a class-neutral
//! salience marker so frame relevance (not the answer) is visible upstream.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{IvaError, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Number of answer classes in needle datasets.
pub const NEEDLE_CLASSES: usize = 4;
/// Norm of the class-identifying pattern planted in the key fine slot.
pub const NEEDLE_NORM: f64 = 5.0;
/// Amplitude of the class-neutral frame marker added to the key frame's
/// global feature.
pub const MARKER_AMP: f64 = 4.0;
/// Norm of the per-frame caption pattern used by the pretraining dataset.
pub const CAPTION_NORM: f64 = 5.0;
/// Distinct caption pattern ids.
pub const CAPTION_CLASSES: usize = 4;

// Token layout shared by the synthetic datasets.
pub const TOK_PAD: u32 = 0;
pub const TOK_ASK: u32 = 1;
pub const TOK_FAMILY: u32 = 2;
pub const TOK_SEP: u32 = 3;
pub const ANSWER_BASE: u32 = 4;
pub const CAPTION_BASE: u32 = ANSWER_BASE + NEEDLE_CLASSES as u32;

/// Per-video encoder output surrogate: `global` is `N x d_v`, `fine` is
/// `N x P x d_v`, and row `k` of both refers to the same frame.
#[derive(Debug, Clone)]
pub struct FrameFeatureSet {
    pub num_frames: usize,
    pub patch_count: usize,
    pub d_v: usize,
    pub global: Tensor,
    pub fine: Tensor,
    pub seed: u64,
}

impl FrameFeatureSet {
    pub fn fine_slot(&self, frame: usize, patch: usize) -> &[f64] {
        let off = (frame * self.patch_count + patch) * self.d_v;
        &self.fine.data()[off..off + self.d_v]
    }

    pub fn fine_slot_mut(&mut self, frame: usize, patch: usize) -> &mut [f64] {
        let off = (frame * self.patch_count + patch) * self.d_v;
        &mut self.fine.data_mut()[off..off + self.d_v]
    }

    pub fn global_row(&self, frame: usize) -> &[f64] {
        &self.global.data()[frame * self.d_v..(frame + 1) * self.d_v]
    }
}

/// Location and answer of a planted needle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct NeedleLabel {
    pub key_frame: usize,
    pub key_patch: usize,
    pub answer_token: u32,
}

#[derive(Debug, Clone)]
pub struct NeedleSample {
    pub features: FrameFeatureSet,
    pub label: NeedleLabel,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct CaptionSample {
    pub features: FrameFeatureSet,
    pub caption: Vec<u32>,
}

fn check_extents(n: usize, p: usize, d_v: usize) -> Result<()> {
    if n < 1 || p < 1 || d_v < 1 {
        return Err(IvaError::Domain(format!(
            "feature extents must be >= 1, got N={n} P={p} d_v={d_v}"
        )));
    }
    Ok(())
}

/// I.i.d. standard-normal global and fine features, deterministic in `seed`.
pub fn generate_synthetic_video(
    n: usize,
    p: usize,
    d_v: usize,
    seed: u64,
) -> Result<FrameFeatureSet> {
    check_extents(n, p, d_v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let global: Vec<f64> = (0..n * d_v).map(|_| normal.sample(&mut rng)).collect();
    let fine: Vec<f64> = (0..n * p * d_v).map(|_| normal.sample(&mut rng)).collect();
    Ok(FrameFeatureSet {
        num_frames: n,
        patch_count: p,
        d_v,
        global: Tensor::new(vec![n, d_v], global)?,
        fine: Tensor::new(vec![n, p, d_v], fine)?,
        seed,
    })
}

/// Coordinate axis carrying the answer-class direction `c`.
pub fn needle_class_axis(class: usize) -> usize {
    class
}

/// Coordinate axis of the class-neutral frame marker.
pub fn marker_axis(d_v: usize) -> usize {
    d_v - 1
}

/// Minimum feature width keeping needle classes, caption patterns, and the
/// frame marker on disjoint axes.
pub const MIN_NEEDLE_D_V: usize = NEEDLE_CLASSES + 1 + CAPTION_CLASSES + 1;

/// Balanced needle dataset. Each sample hides `NEEDLE_NORM * e_c` in exactly
/// one `(frame, patch)` fine slot; every other fine slot is unit noise. The
/// key frame's global feature additionally carries `MARKER_AMP * e_marker`,
/// which is identical for all classes. The fixed question asks for the
/// single needle family.
pub fn generate_needle_dataset(
    count: usize,
    n: usize,
    p: usize,
    d_v: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<NeedleSample>> {
    if count < 1 {
        return Err(IvaError::Domain(format!(
            "needle dataset needs count >= 1, got {count}"
        )));
    }
    check_extents(n, p, d_v)?;
    if d_v < MIN_NEEDLE_D_V {
        return Err(IvaError::Domain(format!(
            "needle dataset needs d_v >= {MIN_NEEDLE_D_V}, got {d_v}"
        )));
    }
    if vocab_size < 4 + NEEDLE_CLASSES {
        return Err(IvaError::Domain(format!(
            "vocab_size {vocab_size} too small: need >= {}",
            4 + NEEDLE_CLASSES
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % NEEDLE_CLASSES;
        let sub_seed = rng.gen::<u64>();
        let mut features = generate_synthetic_video(n, p, d_v, sub_seed)?;
        let key_frame = rng.gen_range(0..n);
        let key_patch = rng.gen_range(0..p);

        let slot = features.fine_slot_mut(key_frame, key_patch);
        slot.fill(0.0);
        slot[needle_class_axis(class)] = NEEDLE_NORM;

        let marker = marker_axis(d_v);
        features.global.data_mut()[key_frame * d_v + marker] += MARKER_AMP;

        samples.push(NeedleSample {
            features,
            label: NeedleLabel {
                key_frame,
                key_patch,
                answer_token: ANSWER_BASE + class as u32,
            },
            question: vec![TOK_ASK, TOK_FAMILY, TOK_SEP],
            answer: vec![ANSWER_BASE + class as u32],
        });
    }
    Ok(samples)
}

/// Caption dataset for the pretraining stage. Every frame hides one caption
/// pattern `CAPTION_NORM * (e_common + e_id) / sqrt(2)` in a random patch;
/// the target caption is the per-frame sequence of pattern ids. Recovering
/// it requires the pooling path to find the patterned patch in each frame.
pub fn generate_caption_dataset(
    count: usize,
    n: usize,
    p: usize,
    d_v: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<CaptionSample>> {
    if count < 1 {
        return Err(IvaError::Domain(format!(
            "caption dataset needs count >= 1, got {count}"
        )));
    }
    check_extents(n, p, d_v)?;
    if d_v < MIN_NEEDLE_D_V {
        return Err(IvaError::Domain(format!(
            "caption dataset needs d_v >= {MIN_NEEDLE_D_V}, got {d_v}"
        )));
    }
    if (vocab_size as u32) < CAPTION_BASE + CAPTION_CLASSES as u32 {
        return Err(IvaError::Domain(format!(
            "vocab_size {vocab_size} too small for caption tokens"
        )));
    }
    let common_axis = NEEDLE_CLASSES;
    let amp = CAPTION_NORM / 2f64.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let sub_seed = rng.gen::<u64>();
        let mut features = generate_synthetic_video(n, p, d_v, sub_seed)?;
        let mut caption = Vec::with_capacity(n);
        for k in 0..n {
            let id = rng.gen_range(0..CAPTION_CLASSES);
            let patch = rng.gen_range(0..p);
            let slot = features.fine_slot_mut(k, patch);
            slot.fill(0.0);
            slot[common_axis] = amp;
            slot[common_axis + 1 + id] = amp;
            caption.push(CAPTION_BASE + id as u32);
        }
        samples.push(CaptionSample { features, caption });
    }
    Ok(samples)
}

// ── Persistence ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct FeatureSidecar {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "P")]
    p: usize,
    d_v: usize,
    seed: u64,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

/// Write the global and fine tensors as two consecutive `IVAT` records plus
/// a JSON metadata sidecar next to the file.
pub fn save_features(path: impl AsRef<Path>, fs: &FrameFeatureSet) -> Result<()> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| IvaError::io(&p, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, &fs.global, &p)?;
    write_tensor(&mut w, &fs.fine, &p)?;
    w.flush().map_err(|e| IvaError::io(&p, e))?;

    let sidecar = FeatureSidecar {
        n: fs.num_frames,
        p: fs.patch_count,
        d_v: fs.d_v,
        seed: fs.seed,
    };
    let sp = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&sp, json).map_err(|e| IvaError::io(sp.display().to_string(), e))?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FrameFeatureSet> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| IvaError::io(&p, e))?;
    let mut r = BufReader::new(file);
    let (global, first_len) = read_tensor(&mut r, 0, &p)?;
    let (fine, _) = read_tensor(&mut r, first_len, &p)?;
    if global.shape().len() != 2 || fine.shape().len() != 3 {
        return Err(IvaError::Format {
            offset: 0,
            message: format!(
                "feature file `{p}` has ranks {}/{} instead of 2/3",
                global.shape().len(),
                fine.shape().len()
            ),
        });
    }
    let (n, d_v) = (global.shape()[0], global.shape()[1]);
    if fine.shape()[0] != n || fine.shape()[2] != d_v {
        return Err(IvaError::Format {
            offset: first_len,
            message: format!(
                "feature file `{p}` global {:?} and fine {:?} disagree",
                global.shape(),
                fine.shape()
            ),
        });
    }
    let patch_count = fine.shape()[1];
    let seed = std::fs::read_to_string(sidecar_path(path))
        .ok()
        .and_then(|s| serde_json::from_str::<FeatureSidecar>(&s).ok())
        .map(|m| m.seed)
        .unwrap_or(0);
    Ok(FrameFeatureSet {
        num_frames: n,
        patch_count,
        d_v,
        global,
        fine,
        seed,
    })
}

// ── Dataset manifest (JSON lines) ───────────────────────────────────────

/// One question/answer round, in token ids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Round {
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

/// One manifest line: a feature file plus its conversation rounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub features: String,
    pub rounds: Vec<Round>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle: Option<NeedleLabel>,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let p = path.as_ref().display().to_string();
    let file = File::create(path.as_ref()).map_err(|e| IvaError::io(&p, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let line = serde_json::to_string(e)?;
        writeln!(w, "{line}").map_err(|e| IvaError::io(&p, e))?;
    }
    w.flush().map_err(|e| IvaError::io(&p, e))?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let p = path.as_ref().display().to_string();
    let file = File::open(path.as_ref()).map_err(|e| IvaError::io(&p, e))?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| IvaError::io(&p, e))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(entries)
}
