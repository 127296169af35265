//! Training and evaluation: clip caching, the RMSprop/BCE loop, and metrics.
//!
//! All randomness (weight init, epoch shuffling) derives from the configured
//! seed, gradients fold in weight-name order, and batches run
//! single-threaded, so a seed pins the trained weights bit for bit. Only the
//! per-epoch wall-time column of the metrics is nondeterministic.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Manifest, Split, VideoSample};
use crate::error::{Error, Result};
use crate::flow;
use crate::model::{init_model_weights, valdnet_forward, ModelConfig};
use crate::optim::{RmsProp, DEFAULT_EPSILON, DEFAULT_LEARNING_RATE, DEFAULT_RHO};
use crate::ppm;
use crate::tape::{NodeId, Tape, BCE_EPS};
use crate::tensor::Tensor;
use crate::weights::{TapedParams, WeightStore};

fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_batch() -> usize {
    4
}
fn default_epochs() -> usize {
    50
}
fn default_rho() -> f64 {
    DEFAULT_RHO
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rho: f64,
    pub epsilon: f64,
    /// Pins init and shuffling; no default on purpose — runs must be
    /// reproducible, so the caller has to pick one.
    pub seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            rho: default_rho(),
            epsilon: default_epsilon(),
            seed: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.epochs == 0
            || self.rho <= 0.0
            || self.rho >= 1.0
            || self.epsilon <= 0.0
        {
            return Err(Error::Config(format!(
                "train config fields must be positive (rho in (0,1)): {self:?}"
            )));
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("no seed configured; set train.seed or pass --seed".into()))
    }
}

/// One row of the per-epoch metrics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,eval_loss,eval_acc,seconds";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.train_loss, r.train_acc, r.eval_loss, r.eval_acc, r.seconds
        ));
    }
    out
}

/// A clip ready for the network: sampled frames and matching flow inputs.
pub struct ClipTensors {
    pub id: String,
    pub label: u8,
    pub rgb: Vec<Tensor>,
    pub flow: Vec<Tensor>,
}

/// Every clip of a manifest, decoded and flow-processed once, split apart.
pub struct DatasetCache {
    pub train: Vec<ClipTensors>,
    pub eval: Vec<ClipTensors>,
}

/// Thread pool for clip decoding, capped by `VALDNET_THREADS` when set.
fn data_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("VALDNET_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("VALDNET_THREADS={v:?} is not a thread count")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Decode one sample: uniform frame sampling, then either load its
/// precomputed flow fields or run the estimator on the sampled pairs.
pub fn load_clip(
    manifest_path: &Path,
    sample: &VideoSample,
    cfg: &ModelConfig,
) -> Result<ClipTensors> {
    let n = sample.frames.len();
    let indices = data::uniform_sample_indices(n, cfg.frames)?;

    // Decode each needed frame once, even when sampling repeats indices.
    let mut needed: Vec<usize> = indices.clone();
    if sample.flows.is_none() {
        needed.extend(
            indices
                .iter()
                .map(|&t| data::flow_pair_indices(t, cfg.offset, n).1),
        );
    }
    needed.sort_unstable();
    needed.dedup();
    let mut frames = BTreeMap::new();
    for &t in &needed {
        let img = ppm::load_ppm_file(&data::resolve_path(manifest_path, &sample.frames[t]))?;
        let s = img.shape();
        if s != [3, cfg.rgb.input_size, cfg.rgb.input_size] {
            return Err(Error::Data(format!(
                "sample {:?} frame {t} is {s:?}, model wants [3,{},{}]",
                sample.id, cfg.rgb.input_size, cfg.rgb.input_size
            )));
        }
        frames.insert(t, img);
    }

    let mut flow_inputs = Vec::with_capacity(indices.len());
    for &t in &indices {
        let field = match &sample.flows {
            Some(flows) => flow::load_flo(&data::resolve_path(manifest_path, &flows[t]))?,
            None => {
                let (a, b) = data::flow_pair_indices(t, cfg.offset, n);
                let ga = flow::grayscale(&frames[&a])?;
                let gb = flow::grayscale(&frames[&b])?;
                flow::estimate_flow(
                    &ga,
                    &gb,
                    flow::DEFAULT_FLOW_ALPHA,
                    flow::DEFAULT_FLOW_ITERATIONS,
                )?
            }
        };
        if field.width() != cfg.flow.input_size || field.height() != cfg.flow.input_size {
            return Err(Error::Data(format!(
                "sample {:?} flow {t} is {}x{}, model wants {}",
                sample.id,
                field.width(),
                field.height(),
                cfg.flow.input_size
            )));
        }
        flow_inputs.push(field.to_input_tensor());
    }

    Ok(ClipTensors {
        id: sample.id.clone(),
        label: sample.label,
        rgb: indices.iter().map(|t| frames[t].clone()).collect(),
        flow: flow_inputs,
    })
}

/// Decode and flow-process every split sample of the manifest at `path`.
pub fn build_cache(path: &Path, cfg: &ModelConfig) -> Result<DatasetCache> {
    let manifest = Manifest::load(path)?;
    build_cache_from(path, &manifest, cfg)
}

/// Decode and flow-process only the samples assigned to one split.
pub fn load_split_clips(
    path: &Path,
    cfg: &ModelConfig,
    split: Split,
) -> Result<Vec<ClipTensors>> {
    cfg.validate()?;
    let manifest = Manifest::load(path)?;
    let subset = manifest.subset(split);
    let pool = data_pool()?;
    pool.install(|| {
        subset
            .par_iter()
            .map(|s| load_clip(path, s, cfg))
            .collect::<Result<Vec<_>>>()
    })
}

pub fn build_cache_from(
    path: &Path,
    manifest: &Manifest,
    cfg: &ModelConfig,
) -> Result<DatasetCache> {
    cfg.validate()?;
    if manifest.samples.iter().any(|s| s.split.is_none()) {
        return Err(Error::Data(
            "manifest has unsplit samples; run the splitter first".into(),
        ));
    }
    let pool = data_pool()?;
    let mut cache = DatasetCache { train: Vec::new(), eval: Vec::new() };
    for (split, out) in [(Split::Train, &mut cache.train), (Split::Eval, &mut cache.eval)] {
        let subset = manifest.subset(split);
        *out = pool.install(|| {
            subset
                .par_iter()
                .map(|s| load_clip(path, s, cfg))
                .collect::<Result<Vec<_>>>()
        })?;
    }
    Ok(cache)
}

/// Estimate flow for every frame of every sample at the given offset, write
/// the fields as `.flo` files next to the frames, and record them in the
/// manifest (in memory; the caller persists it).
pub fn precompute_flows(manifest_path: &Path, manifest: &mut Manifest, offset: usize) -> Result<()> {
    if !(1..=3).contains(&offset) {
        return Err(Error::Config(format!("flow offset must be 1..=3, got {offset}")));
    }
    let pool = data_pool()?;
    let flow_lists: Vec<Vec<String>> = pool.install(|| {
        manifest
            .samples
            .par_iter()
            .map(|sample| {
                let n = sample.frames.len();
                let grays: Vec<Tensor> = sample
                    .frames
                    .iter()
                    .map(|f| {
                        let img = ppm::load_ppm_file(&data::resolve_path(manifest_path, f))?;
                        flow::grayscale(&img)
                    })
                    .collect::<Result<_>>()?;
                let mut rels = Vec::with_capacity(n);
                for t in 0..n {
                    let (a, b) = data::flow_pair_indices(t, offset, n);
                    let field = flow::estimate_flow(
                        &grays[a],
                        &grays[b],
                        flow::DEFAULT_FLOW_ALPHA,
                        flow::DEFAULT_FLOW_ITERATIONS,
                    )?;
                    let rel = format!("flows/k{offset}/{}/f{t:03}.flo", sample.id);
                    let full = data::resolve_path(manifest_path, &rel);
                    if let Some(dir) = full.parent() {
                        std::fs::create_dir_all(dir)?;
                    }
                    flow::save_flo(&full, &field)?;
                    rels.push(rel);
                }
                Ok(rels)
            })
            .collect::<Result<_>>()
    })?;
    for (sample, rels) in manifest.samples.iter_mut().zip(flow_lists) {
        sample.flows = Some(rels);
    }
    Ok(())
}

fn bce_scalar(p: f64, label: u8) -> f64 {
    let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let y = label as f64;
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

/// Threshold rule: probability at or above one half predicts the positive
/// class.
pub fn predicted_label(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

/// Per-weight gradients keyed by store name, in bind order.
type NamedGradients = Vec<(String, Vec<f64>)>;

/// One clip's forward and backward pass. Returns the loss, the probability,
/// and the gradient of every bound weight in name order.
fn forward_backward(
    store: &WeightStore,
    cfg: &ModelConfig,
    clip: &ClipTensors,
) -> Result<(f64, f64, NamedGradients)> {
    let mut tape = Tape::new();
    let mut params = TapedParams::new(store);
    let rgb_ids: Vec<NodeId> = clip.rgb.iter().map(|t| tape.leaf(t.clone())).collect();
    let flow_ids: Vec<NodeId> = clip.flow.iter().map(|t| tape.leaf(t.clone())).collect();
    let prob_id = valdnet_forward(&mut tape, &mut params, cfg, &rgb_ids, &flow_ids)?;
    let p = tape.data(prob_id)[0];
    let loss_id = tape.bce_loss(prob_id, clip.label as f64)?;
    let loss = tape.data(loss_id)[0];
    let bound: Vec<(String, NodeId)> = params
        .bound()
        .map(|(name, id)| (name.to_string(), id))
        .collect();
    let mut grads = tape.backward(loss_id)?;
    let named = bound
        .into_iter()
        .map(|(name, id)| {
            let g = grads
                .take(id)
                .ok_or_else(|| Error::Contract(format!("no gradient for weight {name:?}")))?;
            Ok((name, g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, p, named))
}

/// Mean loss and accuracy of the current weights over a set of clips.
pub fn evaluate_clips(
    clips: &[ClipTensors],
    store: &WeightStore,
    cfg: &ModelConfig,
) -> Result<(f64, f64)> {
    if clips.is_empty() {
        return Err(Error::Data("evaluation over an empty split".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for clip in clips {
        let p = crate::model::predict_probability(store, cfg, &clip.rgb, &clip.flow)?;
        loss += bce_scalar(p, clip.label);
        if predicted_label(p) == clip.label {
            correct += 1;
        }
    }
    Ok((loss / clips.len() as f64, correct as f64 / clips.len() as f64))
}

/// Train on a prepared cache. The observer sees each finished epoch's row
/// and may return `false` to stop before the configured epoch count.
pub fn train_on_cache(
    cache: &DatasetCache,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut observer: Option<&mut dyn FnMut(&MetricsRow) -> bool>,
) -> Result<(WeightStore, Vec<MetricsRow>)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let seed = train_cfg.seed()?;
    if cache.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if cache.eval.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }

    let mut store = init_model_weights(model_cfg, seed)?;
    let mut opt = RmsProp::new(train_cfg.learning_rate, train_cfg.rho, train_cfg.epsilon)?;
    // Separate stream so shuffling never aliases the init draws.
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);

    let train_n = cache.train.len() as f64;
    let mut rows = Vec::with_capacity(train_cfg.epochs);
    for epoch in 1..=train_cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..cache.train.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(train_cfg.batch_size) {
            let mut fold: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in batch {
                let clip = &cache.train[i];
                let (loss, p, named) = forward_backward(&store, model_cfg, clip)?;
                loss_sum += loss;
                if predicted_label(p) == clip.label {
                    correct += 1;
                }
                for (name, g) in named {
                    match fold.get_mut(&name) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&g) {
                                *a += v;
                            }
                        }
                        None => {
                            fold.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (name, mut g) in fold {
                for v in &mut g {
                    *v *= scale;
                }
                opt.step(&mut store, &name, &g)?;
            }
        }

        let (eval_loss, eval_acc) = evaluate_clips(&cache.eval, &store, model_cfg)?;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / train_n,
            train_acc: correct as f64 / train_n,
            eval_loss,
            eval_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        debug_assert!(row.train_loss >= 0.0 && (0.0..=1.0).contains(&row.train_acc));
        rows.push(row);
        if let Some(obs) = observer.as_deref_mut() {
            if !obs(&row) {
                break;
            }
        }
    }
    Ok((store, rows))
}

/// Build the cache from a split manifest and train on it.
pub fn train(
    manifest_path: &Path,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    observer: Option<&mut dyn FnMut(&MetricsRow) -> bool>,
) -> Result<(WeightStore, Vec<MetricsRow>)> {
    let cache = build_cache(manifest_path, model_cfg)?;
    train_on_cache(&cache, model_cfg, train_cfg, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, StageSpec};
    use crate::recurrent::CellKind;

    /// Smallest config that still exercises every model part, sized for
    /// 8x8 synthetic frames.
    fn sanity_model() -> ModelConfig {
        let backbone = |channels| BackboneConfig {
            input_channels: channels,
            input_size: 8,
            stem_filters: 2,
            stages: vec![StageSpec { expansion: 2, out_channels: 4, stride: 2, repeats: 1 }],
            se_reduction: 2,
            feature_dim: 4,
        };
        ModelConfig {
            rgb: backbone(3),
            flow: backbone(2),
            cell: CellKind::Gru,
            hidden: 3,
            offset: 1,
            fc: vec![4, 2, 1],
            frames: 4,
        }
    }

    fn sanity_train(epochs: usize, seed: u64) -> TrainConfig {
        // The sanity corpus allows only a handful of updates per epoch, so
        // the default learning rate would barely move a fresh model; train
        // hotter and in smaller batches than the full-scale defaults.
        TrainConfig {
            epochs,
            seed: Some(seed),
            learning_rate: 0.02,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    fn synth_cache(dir: &Path, per_class: usize, cfg: &ModelConfig, seed: u64) -> DatasetCache {
        let mut manifest = data::generate_synthetic(dir, seed, per_class, 6, 8).unwrap();
        data::split_dataset(&mut manifest, seed).unwrap();
        let path = dir.join("manifest.json");
        manifest.save(&path).unwrap();
        build_cache(&path, cfg).unwrap()
    }

    #[test]
    fn micro_run_loss_decreases() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = sanity_model();
        let cache = synth_cache(dir.path(), 10, &cfg, 42);
        let (_, rows) = train_on_cache(&cache, &cfg, &sanity_train(5, 42), None).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(
            rows[4].train_loss < rows[0].train_loss,
            "epoch-5 loss {} not below epoch-1 loss {}",
            rows[4].train_loss,
            rows[0].train_loss
        );
    }

    #[test]
    fn same_seed_reproduces_weights_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = sanity_model();
        let cache = synth_cache(dir.path(), 5, &cfg, 8);
        let (store_a, rows_a) = train_on_cache(&cache, &cfg, &sanity_train(2, 9), None).unwrap();
        let (store_b, rows_b) = train_on_cache(&cache, &cfg, &sanity_train(2, 9), None).unwrap();
        assert_eq!(store_a.to_bytes(), store_b.to_bytes());
        for (a, b) in rows_a.iter().zip(&rows_b) {
            assert_eq!(
                (a.epoch, a.train_loss, a.train_acc, a.eval_loss, a.eval_acc),
                (b.epoch, b.train_loss, b.train_acc, b.eval_loss, b.eval_acc)
            );
        }
    }

    #[test]
    fn observer_can_stop_early() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = sanity_model();
        let cache = synth_cache(dir.path(), 5, &cfg, 3);
        let mut stop_after = 2;
        let mut obs = |_: &MetricsRow| {
            stop_after -= 1;
            stop_after > 0
        };
        let (_, rows) = train_on_cache(&cache, &cfg, &sanity_train(10, 3), Some(&mut obs)).unwrap();
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn unsplit_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = sanity_model();
        let manifest = data::generate_synthetic(dir.path(), 2, 5, 4, 8).unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        assert!(matches!(build_cache(&path, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn empty_eval_split_is_an_error() {
        let empty: Vec<ClipTensors> = Vec::new();
        let cfg = sanity_model();
        let store = init_model_weights(&cfg, 1).unwrap();
        assert!(matches!(evaluate_clips(&empty, &store, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn constant_half_predictor_follows_the_tie_rule() {
        // p = 0.5 everywhere predicts positive, so accuracy is exactly the
        // class-1 fraction of the split.
        let dir = tempfile::tempdir().unwrap();
        let cfg = sanity_model();
        let cache = synth_cache(dir.path(), 5, &cfg, 6);
        let mut store = init_model_weights(&cfg, 1).unwrap();
        let last = cfg.fc.len() - 1;
        for suffix in ["w", "b"] {
            let name = format!("fc.{last}.{suffix}");
            let zeros = vec![0.0; store.get(&name).unwrap().numel()];
            store.update(&name, zeros).unwrap();
        }
        let (loss, acc) = evaluate_clips(&cache.eval, &store, &cfg).unwrap();
        let ones = cache.eval.iter().filter(|c| c.label == 1).count();
        assert_eq!(acc, ones as f64 / cache.eval.len() as f64);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn precomputed_flows_feed_training_identically() {
        // Clips built from .flo files must match on-the-fly estimation: the
        // precompute pass stores exactly what the estimator produces, modulo
        // the f32 narrowing of the file format.
        let dir = tempfile::tempdir().unwrap();
        let cfg = sanity_model();
        let mut manifest = data::generate_synthetic(dir.path(), 4, 5, 4, 8).unwrap();
        data::split_dataset(&mut manifest, 4).unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let direct = build_cache(&path, &cfg).unwrap();

        precompute_flows(&path, &mut manifest, cfg.offset).unwrap();
        manifest.save(&path).unwrap();
        let from_files = build_cache(&path, &cfg).unwrap();

        for (a, b) in direct.train.iter().zip(&from_files.train) {
            assert_eq!(a.id, b.id);
            for (fa, fb) in a.flow.iter().zip(&b.flow) {
                for (x, y) in fa.data().iter().zip(fb.data()) {
                    assert!((x - y).abs() < 1e-6, "flow input drifted: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn metrics_csv_is_fixed_point() {
        let rows = vec![MetricsRow {
            epoch: 1,
            train_loss: std::f64::consts::LN_2,
            train_acc: 0.5,
            eval_loss: 1.0,
            eval_acc: 0.25,
            seconds: 2.125,
        }];
        let csv = metrics_csv(&rows);
        assert_eq!(
            csv,
            "epoch,train_loss,train_acc,eval_loss,eval_acc,seconds\n\
             1,0.693147,0.500000,1.000000,0.250000,2.125000\n"
        );
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::default().seed().is_err());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { rho: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }
}
