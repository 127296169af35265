//! Dataset plumbing: clip manifests, frame sampling, and the synthetic
//! two-class motion corpus used for end-to-end checks.
//!
//! A manifest is a JSON file listing video samples; each sample owns an
//! ordered list of frame images (PPM) and, optionally, a parallel list of
//! precomputed flow fields (.flo). Paths are stored relative to the manifest
//! file so a dataset directory can be moved wholesale.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppm;
use crate::tensor::Tensor;

/// Frames drawn per clip by the temporal sampler.
pub const DEFAULT_CLIP_LEN: usize = 12;
/// Frames rendered per synthetic clip.
pub const DEFAULT_SYNTH_FRAMES: usize = 24;
/// Edge length of synthetic frames.
pub const DEFAULT_SYNTH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSample {
    pub id: String,
    /// 0 = non-violent motion profile, 1 = violent motion profile.
    pub label: u8,
    /// Frame image paths, relative to the manifest file, in temporal order.
    pub frames: Vec<String>,
    /// Optional flow-field paths parallel to `frames` (flow from frame t
    /// toward a later frame, as written by the flow precompute pass).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flows: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    /// Square frame edge length every sample must match.
    pub frame_size: usize,
    pub samples: Vec<VideoSample>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 {
            return Err(Error::Data("manifest frame_size is zero".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if s.id.is_empty() {
                return Err(Error::Data("sample with empty id".into()));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {:?}", s.id)));
            }
            if s.label > 1 {
                return Err(Error::Data(format!("sample {:?} label {} not in {{0,1}}", s.id, s.label)));
            }
            if s.frames.is_empty() {
                return Err(Error::Data(format!("sample {:?} has no frames", s.id)));
            }
            if let Some(flows) = &s.flows {
                if flows.len() != s.frames.len() {
                    return Err(Error::Data(format!(
                        "sample {:?} has {} flows for {} frames",
                        s.id,
                        flows.len(),
                        s.frames.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Samples assigned to `split`; samples without an assignment match none.
    pub fn subset(&self, split: Split) -> Vec<&VideoSample> {
        self.samples.iter().filter(|s| s.split == Some(split)).collect()
    }
}

/// Resolve a manifest-relative path against the manifest's directory.
pub fn resolve_path(manifest_path: &Path, relative: &str) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) => dir.join(relative),
        None => PathBuf::from(relative),
    }
}

/// Indices of `k` frames spread uniformly over a clip of `n`, endpoints
/// included, rounding half up: index_i = round(i * (n-1) / (k-1)).
///
/// Short clips repeat frames rather than failing, so every clip yields a
/// fixed-length stack.
pub fn uniform_sample_indices(n: usize, k: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Data("cannot sample from an empty clip".into()));
    }
    if k < 2 {
        return Err(Error::Contract(format!("sampler needs k >= 2, got {k}")));
    }
    let d = k - 1;
    Ok((0..k).map(|i| (2 * i * (n - 1) + d) / (2 * d)).collect())
}

/// The frame pair whose displacement stands in for motion at time `t`:
/// `(t, min(t + offset, n - 1))`. The caller guarantees `t < n`.
pub fn flow_pair_indices(t: usize, offset: usize, n: usize) -> (usize, usize) {
    debug_assert!(t < n);
    (t, (t + offset).min(n - 1))
}

/// Everything about how a blob looks; drawn identically for both classes so
/// only motion statistics separate them.
struct BlobLook {
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
    tint: [f64; 3],
}

impl BlobLook {
    fn draw(rng: &mut ChaCha20Rng, size: usize) -> BlobLook {
        let s = size as f64;
        BlobLook {
            cx: rng.gen_range(0.3 * s..0.7 * s),
            cy: rng.gen_range(0.3 * s..0.7 * s),
            // Floored so the blob stays a visible feature on tiny frames.
            sigma: rng.gen_range(0.07 * s..0.11 * s).max(1.1),
            amp: rng.gen_range(0.6..0.9),
            tint: [
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.6..1.0),
            ],
        }
    }
}

const BACKGROUND: f64 = 0.08;
/// Per-frame drift speed range for the calm class at the reference size,
/// pixels per frame.
const CALM_SPEED: (f64, f64) = (0.4, 0.9);
/// Per-frame jump magnitude range for the agitated class at the reference
/// size, pixels per frame.
const JITTER_SPEED: (f64, f64) = (2.5, 5.5);

/// Speeds are tuned for 64px frames and scale down with the frame, floored
/// so motion never becomes sub-pixel noise on small test frames.
fn motion_scale(size: usize) -> f64 {
    (size as f64 / DEFAULT_SYNTH_SIZE as f64).max(0.45)
}

/// Fold `x` back into [lo, hi] by mirror reflection at the ends.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let mut r = (x - lo).rem_euclid(2.0 * span);
    if r > span {
        r = 2.0 * span - r;
    }
    lo + r
}

fn render_blob(look: &BlobLook, cx: f64, cy: f64, size: usize) -> Tensor {
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    let inv = 1.0 / (2.0 * look.sigma * look.sigma);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let g = look.amp * (-(dx * dx + dy * dy) * inv).exp();
            for c in 0..3 {
                data[c * plane + y * size + x] = (BACKGROUND + look.tint[c] * g).min(1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("blob frame is finite")
}

fn render_clip(
    look: &BlobLook,
    label: u8,
    motion_seed: u64,
    frames: usize,
    size: usize,
) -> Vec<Tensor> {
    let mut rng = ChaCha20Rng::seed_from_u64(motion_seed);
    let lo = 0.15 * size as f64;
    let hi = 0.85 * size as f64;
    let scale = motion_scale(size);
    let (mut cx, mut cy) = (look.cx, look.cy);
    // The calm class commits to one velocity for the whole clip; the agitated
    // class redraws direction and magnitude every frame.
    let (mut vx, mut vy) = (0.0, 0.0);
    if label == 0 {
        let theta = rng.gen_range(0.0..TAU);
        let speed = rng.gen_range(CALM_SPEED.0..CALM_SPEED.1) * scale;
        vx = speed * theta.cos();
        vy = speed * theta.sin();
    }
    let mut clip = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 {
            if label == 1 {
                let theta = rng.gen_range(0.0..TAU);
                let mag = rng.gen_range(JITTER_SPEED.0..JITTER_SPEED.1) * scale;
                vx = mag * theta.cos();
                vy = mag * theta.sin();
            }
            cx = reflect(cx + vx, lo, hi);
            cy = reflect(cy + vy, lo, hi);
        }
        clip.push(render_blob(look, cx, cy, size));
    }
    clip
}

/// Write a balanced synthetic dataset under `dir`: `per_class` clips of each
/// class as PPM frames plus `manifest.json`. Identical seeds produce
/// byte-identical output.
pub fn generate_synthetic(
    dir: &Path,
    seed: u64,
    per_class: usize,
    frames: usize,
    size: usize,
) -> Result<Manifest> {
    if per_class == 0 || frames < 2 || size < 8 {
        return Err(Error::Contract(format!(
            "synthetic generator needs per_class >= 1, frames >= 2, size >= 8; \
             got {per_class}, {frames}, {size}"
        )));
    }
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    // Draw all per-sample seeds up front so the stream layout is fixed.
    let mut seeds = Vec::with_capacity(per_class);
    for _ in 0..per_class {
        let look: u64 = master.gen();
        let motion: [u64; 2] = [master.gen(), master.gen()];
        seeds.push((look, motion));
    }
    let mut samples = Vec::with_capacity(2 * per_class);
    for label in 0u8..2 {
        for (i, (look_seed, motion_seeds)) in seeds.iter().enumerate() {
            let id = format!("c{label}_{i:03}");
            let look = BlobLook::draw(&mut ChaCha20Rng::seed_from_u64(*look_seed), size);
            let clip = render_clip(&look, label, motion_seeds[label as usize], frames, size);
            let frame_dir = dir.join("frames").join(&id);
            std::fs::create_dir_all(&frame_dir)?;
            let mut paths = Vec::with_capacity(frames);
            for (t, frame) in clip.iter().enumerate() {
                let rel = format!("frames/{id}/f{t:03}.ppm");
                ppm::save_ppm_file(&dir.join(&rel), frame)?;
                paths.push(rel);
            }
            samples.push(VideoSample {
                id,
                label,
                frames: paths,
                flows: None,
                split: None,
            });
        }
    }
    let manifest = Manifest {
        name: "synthetic-blobs".into(),
        frame_size: size,
        samples,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Assign an 80/20 train/eval split stratified per class: each class
/// contributes floor(0.8 * n) training samples after a seeded shuffle.
pub fn split_dataset(manifest: &mut Manifest, seed: u64) -> Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for label in 0u8..2 {
        let mut idx: Vec<usize> = manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == label)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 5 {
            return Err(Error::Data(format!(
                "class {label} has {} samples; need at least 5 to split 80/20",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let train_n = idx.len() * 4 / 5;
        for (rank, &i) in idx.iter().enumerate() {
            manifest.samples[i].split =
                Some(if rank < train_n { Split::Train } else { Split::Eval });
        }
    }
    Ok(())
}
