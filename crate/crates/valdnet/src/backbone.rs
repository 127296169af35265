//! Scaled-down EfficientNet-style spatial feature extractor.
//!
//! Layout: 3x3 stride-2 stem conv → MBConv stages (1x1 expand → depthwise
//! 3x3 → squeeze-excite → 1x1 project, residual skip when stride is 1 and
//! the channel count is unchanged) → 1x1 head conv → global average pool.
//! There are no batch statistics anywhere; every convolution is followed by
//! a learnable per-channel scale and bias instead, which keeps single-sample
//! training deterministic. Swish follows every conv except the projection,
//! which stays linear.
//!
//! Weight names: `<prefix>.stem.<w|scale|bias>`,
//! `<prefix>.s<stage>.b<block>.<expand|dw|project>.<w|scale|bias>`,
//! `<prefix>.s<stage>.b<block>.se.fc<1|2>.<w|b>`, `<prefix>.head.<...>`,
//! where prefix is `rgb` or `flow`.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Padding, Tape};
use crate::tensor::Tensor;
use crate::weights::{TapedParams, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub expansion: usize,
    pub out_channels: usize,
    /// Stride of the stage's first block; later repeats use stride 1.
    pub stride: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stem_filters: usize,
    pub stages: Vec<StageSpec>,
    pub se_reduction: usize,
    pub feature_dim: usize,
}

impl BackboneConfig {
    fn default_with_channels(input_channels: usize) -> Self {
        BackboneConfig {
            input_channels,
            input_size: 64,
            stem_filters: 8,
            stages: vec![
                StageSpec { expansion: 1, out_channels: 8, stride: 1, repeats: 1 },
                StageSpec { expansion: 4, out_channels: 16, stride: 2, repeats: 2 },
                StageSpec { expansion: 4, out_channels: 32, stride: 2, repeats: 2 },
            ],
            se_reduction: 4,
            feature_dim: 32,
        }
    }

    /// Default appearance-stream backbone (3 input channels).
    pub fn rgb_default() -> Self {
        Self::default_with_channels(3)
    }

    /// Default motion-stream backbone (2 flow channels).
    pub fn flow_default() -> Self {
        Self::default_with_channels(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.input_size == 0
            || self.stem_filters == 0
            || self.feature_dim == 0
            || self.se_reduction == 0
        {
            return Err(Error::Config("backbone config has a zero field".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride != 1 && s.stride != 2 {
                return Err(Error::Config(format!("stage {i}: stride must be 1 or 2")));
            }
            if s.expansion < 1 {
                return Err(Error::Config(format!("stage {i}: expansion must be >= 1")));
            }
            if s.out_channels == 0 || s.repeats == 0 {
                return Err(Error::Config(format!("stage {i}: zero channels or repeats")));
            }
        }
        Ok(())
    }

    /// Channels entering stage `i`.
    fn stage_input_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.stem_filters
        } else {
            self.stages[i - 1].out_channels
        }
    }

    fn last_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_filters, |s| s.out_channels)
    }
}

/// Reduced width of the squeeze-excite bottleneck for `expanded` channels.
fn se_reduced(expanded: usize, reduction: usize) -> usize {
    (expanded / reduction).max(1)
}

fn uniform_fan_in(rng: &mut ChaCha20Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Conv kernel plus its per-channel scale (init 1) and bias (init 0).
fn register_conv(
    store: &mut WeightStore,
    name: &str,
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    let out_channels = shape[0];
    let n: usize = shape.iter().product();
    store.insert(&format!("{name}.w"), Tensor::new(shape, uniform_fan_in(rng, fan_in, n))?)?;
    store.insert(
        &format!("{name}.scale"),
        Tensor::new(vec![out_channels], vec![1.0; out_channels])?,
    )?;
    store.insert(&format!("{name}.bias"), Tensor::zeros(vec![out_channels]))?;
    Ok(())
}

/// Register every weight of one backbone under `prefix`. Draw order is
/// fixed (stem, stages in order, head), so a seeded RNG reproduces the
/// exact same initialization.
pub fn register_backbone_weights(
    store: &mut WeightStore,
    prefix: &str,
    cfg: &BackboneConfig,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    cfg.validate()?;
    register_conv(
        store,
        &format!("{prefix}.stem"),
        vec![cfg.stem_filters, cfg.input_channels, 3, 3],
        cfg.input_channels * 9,
        rng,
    )?;
    for (i, stage) in cfg.stages.iter().enumerate() {
        let mut c_in = cfg.stage_input_channels(i);
        for j in 0..stage.repeats {
            let base = format!("{prefix}.s{i}.b{j}");
            let expanded = c_in * stage.expansion;
            if stage.expansion > 1 {
                register_conv(store, &format!("{base}.expand"), vec![expanded, c_in, 1, 1], c_in, rng)?;
            }
            register_conv(store, &format!("{base}.dw"), vec![expanded, 3, 3], 9, rng)?;
            let red = se_reduced(expanded, cfg.se_reduction);
            store.insert(
                &format!("{base}.se.fc1.w"),
                Tensor::new(vec![red, expanded], uniform_fan_in(rng, expanded, red * expanded))?,
            )?;
            store.insert(&format!("{base}.se.fc1.b"), Tensor::zeros(vec![red]))?;
            store.insert(
                &format!("{base}.se.fc2.w"),
                Tensor::new(vec![expanded, red], uniform_fan_in(rng, red, expanded * red))?,
            )?;
            store.insert(&format!("{base}.se.fc2.b"), Tensor::zeros(vec![expanded]))?;
            register_conv(
                store,
                &format!("{base}.project"),
                vec![stage.out_channels, expanded, 1, 1],
                expanded,
                rng,
            )?;
            c_in = stage.out_channels;
        }
    }
    register_conv(
        store,
        &format!("{prefix}.head"),
        vec![cfg.feature_dim, cfg.last_channels(), 1, 1],
        cfg.last_channels(),
        rng,
    )?;
    Ok(())
}

/// Squeeze-excite weights bound to tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct SeNodes {
    pub fc1w: NodeId,
    pub fc1b: NodeId,
    pub fc2w: NodeId,
    pub fc2b: NodeId,
}

impl SeNodes {
    pub fn bind(tape: &mut Tape, params: &mut TapedParams, base: &str) -> Result<Self> {
        Ok(SeNodes {
            fc1w: params.get(tape, &format!("{base}.se.fc1.w"))?,
            fc1b: params.get(tape, &format!("{base}.se.fc1.b"))?,
            fc2w: params.get(tape, &format!("{base}.se.fc2.w"))?,
            fc2b: params.get(tape, &format!("{base}.se.fc2.b"))?,
        })
    }
}

/// `features ⊙ sigmoid(FC2(relu(FC1(global_avg_pool(features)))))`, the gate
/// broadcast per channel.
pub fn squeeze_excite(tape: &mut Tape, se: &SeNodes, x: NodeId) -> Result<NodeId> {
    let pooled = tape.global_avg_pool(x)?;
    let a = tape.matvec(se.fc1w, pooled)?;
    let a = tape.add(a, se.fc1b)?;
    let a = tape.relu(a)?;
    let g = tape.matvec(se.fc2w, a)?;
    let g = tape.add(g, se.fc2b)?;
    let gate = tape.sigmoid(g)?;
    tape.mul(x, gate)
}

/// Conv followed by its per-channel scale and bias, then optionally swish.
fn conv_scale_bias(
    tape: &mut Tape,
    params: &mut TapedParams,
    name: &str,
    x: NodeId,
    stride: usize,
    depthwise: bool,
    swish: bool,
) -> Result<NodeId> {
    let w = params.get(tape, &format!("{name}.w"))?;
    let scale = params.get(tape, &format!("{name}.scale"))?;
    let bias = params.get(tape, &format!("{name}.bias"))?;
    let y = if depthwise {
        tape.depthwise_conv2d(x, w, stride, Padding::Same)?
    } else {
        tape.conv2d(x, w, stride, Padding::Same)?
    };
    let y = tape.mul(y, scale)?;
    let y = tape.add(y, bias)?;
    if swish { tape.swish(y) } else { Ok(y) }
}

/// One inverted-bottleneck block. The 1x1 expansion is omitted when the
/// expansion ratio is 1; the residual skip applies iff stride is 1 and the
/// channel count is preserved.
pub fn mbconv(
    tape: &mut Tape,
    params: &mut TapedParams,
    base: &str,
    expansion: usize,
    stride: usize,
    x: NodeId,
) -> Result<NodeId> {
    let c_in = tape.shape(x)[0];
    let expanded = if expansion > 1 {
        conv_scale_bias(tape, params, &format!("{base}.expand"), x, 1, false, true)?
    } else {
        x
    };
    let dw = conv_scale_bias(tape, params, &format!("{base}.dw"), expanded, stride, true, true)?;
    let se = SeNodes::bind(tape, params, base)?;
    let gated = squeeze_excite(tape, &se, dw)?;
    let projected = conv_scale_bias(tape, params, &format!("{base}.project"), gated, 1, false, false)?;
    if stride == 1 && tape.shape(projected)[0] == c_in {
        tape.add(projected, x)
    } else {
        Ok(projected)
    }
}

/// `[C,H,W] -> [feature_dim]` for one frame.
pub fn backbone_forward(
    tape: &mut Tape,
    params: &mut TapedParams,
    prefix: &str,
    cfg: &BackboneConfig,
    frame: NodeId,
) -> Result<NodeId> {
    let expect = [cfg.input_channels, cfg.input_size, cfg.input_size];
    if tape.shape(frame) != expect {
        return Err(Error::Dim(format!(
            "backbone {prefix} wants {expect:?}, got {:?}",
            tape.shape(frame)
        )));
    }
    let mut x = conv_scale_bias(tape, params, &format!("{prefix}.stem"), frame, 2, false, true)?;
    for (i, stage) in cfg.stages.iter().enumerate() {
        for j in 0..stage.repeats {
            let stride = if j == 0 { stage.stride } else { 1 };
            x = mbconv(tape, params, &format!("{prefix}.s{i}.b{j}"), stage.expansion, stride, x)?;
        }
    }
    let x = conv_scale_bias(tape, params, &format!("{prefix}.head"), x, 1, false, true)?;
    tape.global_avg_pool(x)
}

/// `T frames -> [T, feature_dim]`; row t is the backbone applied to frame t,
/// with no mixing across frames.
pub fn time_distributed(
    tape: &mut Tape,
    params: &mut TapedParams,
    prefix: &str,
    cfg: &BackboneConfig,
    frames: &[NodeId],
) -> Result<NodeId> {
    if frames.is_empty() {
        return Err(Error::Contract("time_distributed over no frames".into()));
    }
    let rows: Vec<NodeId> = frames
        .iter()
        .map(|&f| backbone_forward(tape, params, prefix, cfg, f))
        .collect::<Result<_>>()?;
    tape.stack_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            input_channels: 2,
            input_size: 16,
            stem_filters: 4,
            stages: vec![
                StageSpec { expansion: 1, out_channels: 4, stride: 1, repeats: 1 },
                StageSpec { expansion: 2, out_channels: 6, stride: 2, repeats: 1 },
            ],
            se_reduction: 4,
            feature_dim: 6,
        }
    }

    fn seeded_store(prefix: &str, cfg: &BackboneConfig, seed: u64) -> WeightStore {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        register_backbone_weights(&mut store, prefix, cfg, &mut rng).unwrap();
        store
    }

    fn rand_frame(rng: &mut ChaCha20Rng, c: usize, s: usize) -> Tensor {
        let data: Vec<f64> = (0..c * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![c, s, s], data).unwrap()
    }

    /// A standalone squeeze-excite store: 2 channels reduced to 1.
    fn se_only_store() -> (WeightStore, Vec<String>) {
        let mut store = WeightStore::new();
        let names: Vec<String> = ["x.se.fc1.w", "x.se.fc1.b", "x.se.fc2.w", "x.se.fc2.b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        store.insert(&names[0], Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap()).unwrap();
        store.insert(&names[1], Tensor::zeros(vec![1])).unwrap();
        store.insert(&names[2], Tensor::new(vec![2, 1], vec![0.0; 2]).unwrap()).unwrap();
        store.insert(&names[3], Tensor::zeros(vec![2])).unwrap();
        (store, names)
    }

    fn bind_se(tape: &mut Tape, params: &mut TapedParams) -> SeNodes {
        SeNodes::bind(tape, params, "x").unwrap()
    }

    #[test]
    fn squeeze_excite_preserves_zero() {
        let (store, _) = se_only_store();
        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let se = bind_se(&mut tape, &mut params);
        let x = tape.leaf(Tensor::zeros(vec![2, 3, 3]));
        let y = squeeze_excite(&mut tape, &se, x).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_open_gate_passes_input_through() {
        let (mut store, names) = se_only_store();
        store.update(&names[3], vec![20.0, 20.0]).unwrap();
        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let se = bind_se(&mut tape, &mut params);
        let input: Vec<f64> = (1..=18).map(f64::from).collect();
        let x = tape.leaf(Tensor::new(vec![2, 3, 3], input.clone()).unwrap());
        let y = squeeze_excite(&mut tape, &se, x).unwrap();
        for (out, inp) in tape.data(y).iter().zip(&input) {
            assert!((out - inp).abs() < 1e-7, "{out} vs {inp}");
        }
    }

    #[test]
    fn saturated_closed_gate_suppresses_input() {
        let (mut store, names) = se_only_store();
        store.update(&names[3], vec![-20.0, -20.0]).unwrap();
        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let se = bind_se(&mut tape, &mut params);
        let input: Vec<f64> = (1..=18).map(f64::from).collect();
        let norm: f64 = input.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x = tape.leaf(Tensor::new(vec![2, 3, 3], input).unwrap());
        let y = squeeze_excite(&mut tape, &se, x).unwrap();
        let out_norm: f64 = tape.data(y).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(out_norm < 1e-8 * norm);
    }

    #[test]
    fn squeeze_excite_never_amplifies_any_channel() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..20 {
            let c = rng.gen_range(1..=4);
            let red = (c / 2).max(1);
            let mut store = WeightStore::new();
            let f1: Vec<f64> = (0..red * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f2: Vec<f64> = (0..c * red).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b1: Vec<f64> = (0..red).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b2: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            store.insert("x.se.fc1.w", Tensor::new(vec![red, c], f1).unwrap()).unwrap();
            store.insert("x.se.fc1.b", Tensor::new(vec![red], b1).unwrap()).unwrap();
            store.insert("x.se.fc2.w", Tensor::new(vec![c, red], f2).unwrap()).unwrap();
            store.insert("x.se.fc2.b", Tensor::new(vec![c], b2).unwrap()).unwrap();

            let mut tape = Tape::new();
            let mut params = TapedParams::new(&store);
            let se = bind_se(&mut tape, &mut params);
            let frame = rand_frame(&mut rng, c, 3);
            let x = tape.leaf(frame);
            let y = squeeze_excite(&mut tape, &se, x).unwrap();
            let hw = 9;
            for ch in 0..c {
                let inf_in = tape.data(x)[ch * hw..(ch + 1) * hw]
                    .iter()
                    .fold(0.0_f64, |m, v| m.max(v.abs()));
                let inf_out = tape.data(y)[ch * hw..(ch + 1) * hw]
                    .iter()
                    .fold(0.0_f64, |m, v| m.max(v.abs()));
                assert!(inf_out <= inf_in, "channel {ch} grew: {inf_in} -> {inf_out}");
            }
        }
    }

    #[test]
    fn zeroed_block_is_the_identity_through_its_skip() {
        let cfg = tiny_config();
        let mut store = seeded_store("t", &cfg, 3);
        // Stage 0 block: stride 1, 4 -> 4 channels, so the skip applies.
        // Zero every branch weight; the projection then contributes nothing.
        for name in [
            "t.s0.b0.dw.w",
            "t.s0.b0.dw.bias",
            "t.s0.b0.se.fc1.w",
            "t.s0.b0.se.fc1.b",
            "t.s0.b0.se.fc2.w",
            "t.s0.b0.se.fc2.b",
            "t.s0.b0.project.w",
            "t.s0.b0.project.bias",
        ] {
            let n = store.get(name).unwrap().numel();
            store.update(name, vec![0.0; n]).unwrap();
        }
        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let x = tape.leaf(Tensor::new(vec![4, 5, 5], (0..100).map(f64::from).collect()).unwrap());
        let y = mbconv(&mut tape, &mut params, "t.s0.b0", 1, 1, x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn stride_two_block_halves_spatial_extents() {
        let cfg = tiny_config();
        let store = seeded_store("t", &cfg, 4);
        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let x = tape.leaf(Tensor::new(vec![4, 7, 7], vec![0.1; 4 * 49]).unwrap());
        let y = mbconv(&mut tape, &mut params, "t.s1.b0", 2, 2, x).unwrap();
        assert_eq!(tape.shape(y), &[6, 4, 4], "7 -> ceil(7/2) = 4");
    }

    #[test]
    fn default_config_produces_a_32_vector_from_3x64x64() {
        let cfg = BackboneConfig::rgb_default();
        let store = seeded_store("rgb", &cfg, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let x = tape.leaf(rand_frame(&mut rng, 3, 64));
        let y = backbone_forward(&mut tape, &mut params, "rgb", &cfg, x).unwrap();
        assert_eq!(tape.shape(y), &[32]);
    }

    #[test]
    fn identical_frames_give_identical_features() {
        let cfg = tiny_config();
        let store = seeded_store("t", &cfg, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let frame = rand_frame(&mut rng, 2, 16);
        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let a = tape.leaf(frame.clone());
        let b = tape.leaf(frame);
        let fa = backbone_forward(&mut tape, &mut params, "t", &cfg, a).unwrap();
        let fb = backbone_forward(&mut tape, &mut params, "t", &cfg, b).unwrap();
        assert_eq!(tape.data(fa), tape.data(fb));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = tiny_config();
        let store = seeded_store("t", &cfg, 9);
        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let x = tape.leaf(Tensor::new(vec![3, 16, 16], vec![0.0; 3 * 256]).unwrap());
        assert!(matches!(
            backbone_forward(&mut tape, &mut params, "t", &cfg, x),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn time_distributed_rows_match_single_frame_forward() {
        let cfg = tiny_config();
        let store = seeded_store("t", &cfg, 10);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let frames: Vec<Tensor> = (0..3).map(|_| rand_frame(&mut rng, 2, 16)).collect();

        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let ids: Vec<NodeId> = frames.iter().map(|f| tape.leaf(f.clone())).collect();
        let out = time_distributed(&mut tape, &mut params, "t", &cfg, &ids).unwrap();
        assert_eq!(tape.shape(out), &[3, 6]);

        for (t, frame) in frames.iter().enumerate() {
            let mut solo_tape = Tape::new();
            let mut solo_params = TapedParams::new(&store);
            let id = solo_tape.leaf(frame.clone());
            let f = backbone_forward(&mut solo_tape, &mut solo_params, "t", &cfg, id).unwrap();
            assert_eq!(
                &tape.data(out)[t * 6..(t + 1) * 6],
                solo_tape.data(f),
                "row {t} must equal the standalone forward"
            );
        }
    }

    #[test]
    fn permuting_frames_permutes_rows() {
        let cfg = tiny_config();
        let store = seeded_store("t", &cfg, 12);
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let frames: Vec<Tensor> = (0..4).map(|_| rand_frame(&mut rng, 2, 16)).collect();
        let perm = [2usize, 0, 3, 1];

        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let mut params = TapedParams::new(&store);
            let ids: Vec<NodeId> = order.iter().map(|&i| tape.leaf(frames[i].clone())).collect();
            let out = time_distributed(&mut tape, &mut params, "t", &cfg, &ids).unwrap();
            tape.data(out).to_vec()
        };
        let straight = run(&[0, 1, 2, 3]);
        let permuted = run(&perm);
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(
                &permuted[row * 6..(row + 1) * 6],
                &straight[src * 6..(src + 1) * 6]
            );
        }
    }

    #[test]
    fn twelve_frames_give_12x32_features() {
        let cfg = BackboneConfig::flow_default();
        let store = seeded_store("flow", &cfg, 14);
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let ids: Vec<NodeId> = (0..12).map(|_| tape.leaf(rand_frame(&mut rng, 2, 64))).collect();
        let out = time_distributed(&mut tape, &mut params, "flow", &cfg, &ids).unwrap();
        assert_eq!(tape.shape(out), &[12, 32]);
    }

    #[test]
    fn full_backbone_gradient_check_on_16x16_config() {
        let cfg = tiny_config();
        let store = seeded_store("t", &cfg, 16);
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let frame = rand_frame(&mut rng, 2, 16);

        // Perturb frame and every weight; rebuild the store inside the
        // closure from the perturbed tensors.
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut inputs = vec![frame];
        for n in &names {
            inputs.push(store.get(n).unwrap().clone());
        }
        let cfg2 = cfg.clone();
        let err = crate::gradcheck::max_rel_err(&inputs, move |tape, ids| {
            // A store whose tensors are already on the tape: bypass
            // TapedParams by pre-binding names to the given leaf ids.
            let mut store = WeightStore::new();
            for (n, &id) in names.iter().zip(&ids[1..]) {
                store.insert(n, tape.tensor(id))?;
            }
            let mut params = crate::weights::TapedParams::preset(
                &store,
                names.iter().cloned().zip(ids[1..].iter().copied()),
            );
            let f = backbone_forward(tape, &mut params, "t", &cfg2, ids[0])?;
            tape.sum(f)
        })
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn config_validation_rejects_bad_strides_and_ratios() {
        let mut cfg = tiny_config();
        cfg.stages[0].stride = 3;
        assert!(cfg.validate().is_err());
        let mut cfg2 = tiny_config();
        cfg2.stages[0].expansion = 0;
        assert!(cfg2.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }
}
