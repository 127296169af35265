//! The full detector: two specialized backbones (appearance and motion),
//! sum fusion, a bidirectional recurrent pass, and a three-layer
//! fully-connected head ending in a sigmoid probability.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{time_distributed, BackboneConfig};
use crate::error::{Error, Result};
use crate::recurrent::{bidirectional, register_cell_weights, CellKind, CellNodes};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::weights::{TapedParams, WeightStore};

fn default_fc() -> Vec<usize> {
    vec![32, 16, 1]
}
fn default_hidden() -> usize {
    16
}
fn default_offset() -> usize {
    1
}
fn default_frames() -> usize {
    crate::data::DEFAULT_CLIP_LEN
}
fn default_cell() -> CellKind {
    CellKind::Gru
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub rgb: BackboneConfig,
    pub flow: BackboneConfig,
    pub cell: CellKind,
    /// Hidden width per direction; the head sees twice this.
    pub hidden: usize,
    /// Flow is computed from sampled frame t toward frame t+offset.
    pub offset: usize,
    /// Fully-connected layer widths; the last must be 1.
    pub fc: Vec<usize>,
    /// Frames sampled per clip.
    pub frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            rgb: BackboneConfig::rgb_default(),
            flow: BackboneConfig::flow_default(),
            cell: default_cell(),
            hidden: default_hidden(),
            offset: default_offset(),
            fc: default_fc(),
            frames: default_frames(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.rgb.validate()?;
        self.flow.validate()?;
        if self.fc.last() != Some(&1) {
            return Err(Error::Config(format!(
                "final fc layer must have width 1, got {:?}",
                self.fc
            )));
        }
        if self.fc.contains(&0) {
            return Err(Error::Config("fc layer with zero width".into()));
        }
        if !(1..=3).contains(&self.offset) {
            return Err(Error::Config(format!("flow offset must be 1..=3, got {}", self.offset)));
        }
        if self.frames == 0 || self.hidden == 0 {
            return Err(Error::Config("frames and hidden must be positive".into()));
        }
        if self.rgb.feature_dim != self.flow.feature_dim {
            return Err(Error::Config(format!(
                "stream feature widths differ: rgb {} vs flow {}",
                self.rgb.feature_dim, self.flow.feature_dim
            )));
        }
        if self.rgb.input_size != self.flow.input_size {
            return Err(Error::Config(format!(
                "stream input sizes differ: rgb {} vs flow {}",
                self.rgb.input_size, self.flow.input_size
            )));
        }
        Ok(())
    }
}

/// Register every model weight: both backbones, both recurrent directions,
/// and the fc head. Registration and RNG-draw order are fixed, so a seed
/// pins the full initialization.
pub fn register_model_weights(
    store: &mut WeightStore,
    cfg: &ModelConfig,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    cfg.validate()?;
    crate::backbone::register_backbone_weights(store, "rgb", &cfg.rgb, rng)?;
    crate::backbone::register_backbone_weights(store, "flow", &cfg.flow, rng)?;
    let feat = cfg.rgb.feature_dim;
    register_cell_weights(store, "rnn.fwd", cfg.cell, feat, cfg.hidden, rng)?;
    register_cell_weights(store, "rnn.bwd", cfg.cell, feat, cfg.hidden, rng)?;
    let mut fan_in = 2 * cfg.hidden;
    for (i, &width) in cfg.fc.iter().enumerate() {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..width * fan_in)
            .map(|_| rand::Rng::gen_range(rng, -bound..bound))
            .collect();
        store.insert(&format!("fc.{i}.w"), Tensor::new(vec![width, fan_in], w)?)?;
        store.insert(&format!("fc.{i}.b"), Tensor::zeros(vec![width]))?;
        fan_in = width;
    }
    Ok(())
}

/// Fresh seeded weights for a model config.
pub fn init_model_weights(cfg: &ModelConfig, seed: u64) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    register_model_weights(&mut store, cfg, &mut rng)?;
    Ok(store)
}

/// Elementwise feature fusion; both streams must agree on shape.
pub fn fuse_sum(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dim(format!(
            "fuse_sum shapes differ: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    tape.add(a, b)
}

/// Run the fc head on a pooled feature vector: swish between layers, sigmoid
/// after the last.
fn fc_head(
    tape: &mut Tape,
    params: &mut TapedParams,
    layers: usize,
    mut x: NodeId,
) -> Result<NodeId> {
    for i in 0..layers {
        let w = params.get(tape, &format!("fc.{i}.w"))?;
        let b = params.get(tape, &format!("fc.{i}.b"))?;
        let wx = tape.matvec(w, x)?;
        x = tape.add(wx, b)?;
        x = if i + 1 == layers { tape.sigmoid(x)? } else { tape.swish(x)? };
    }
    Ok(x)
}

/// Full forward pass over one clip: per-frame backbone features for both
/// streams, summed, refined by the bidirectional recurrent pass, averaged
/// over time, and classified. Returns the scalar probability node.
pub fn valdnet_forward(
    tape: &mut Tape,
    params: &mut TapedParams,
    cfg: &ModelConfig,
    rgb_frames: &[NodeId],
    flow_inputs: &[NodeId],
) -> Result<NodeId> {
    if rgb_frames.len() != cfg.frames || flow_inputs.len() != cfg.frames {
        return Err(Error::Dim(format!(
            "expected {} frames and flows, got {} and {}",
            cfg.frames,
            rgb_frames.len(),
            flow_inputs.len()
        )));
    }
    let rgb_feat = time_distributed(tape, params, "rgb", &cfg.rgb, rgb_frames)?;
    let flow_feat = time_distributed(tape, params, "flow", &cfg.flow, flow_inputs)?;
    let fused = fuse_sum(tape, rgb_feat, flow_feat)?;
    let fwd = CellNodes::bind(tape, params, "rnn.fwd", cfg.cell)?;
    let bwd = CellNodes::bind(tape, params, "rnn.bwd", cfg.cell)?;
    let refined = bidirectional(tape, &fwd, &bwd, fused)?;
    let pooled = tape.mean_rows(refined)?;
    fc_head(tape, params, cfg.fc.len(), pooled)
}

/// Forward pass outside any training loop: binds weights, runs the graph,
/// returns the probability as a plain number.
pub fn predict_probability(
    store: &WeightStore,
    cfg: &ModelConfig,
    rgb_frames: &[Tensor],
    flow_inputs: &[Tensor],
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut params = TapedParams::new(store);
    let rgb_ids: Vec<NodeId> = rgb_frames.iter().map(|t| tape.leaf(t.clone())).collect();
    let flow_ids: Vec<NodeId> = flow_inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let p = valdnet_forward(&mut tape, &mut params, cfg, &rgb_ids, &flow_ids)?;
    Ok(tape.data(p)[0])
}

/// Smallest configuration that still exercises every model component; used
/// by the gradient verification suite, where finite differences make full
/// sizes prohibitively slow.
pub fn micro_config() -> ModelConfig {
    use crate::backbone::StageSpec;
    let backbone = |channels| BackboneConfig {
        input_channels: channels,
        input_size: 16,
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
        frames: 2,
    }
}
