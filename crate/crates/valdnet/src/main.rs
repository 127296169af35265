//! Command-line entry point: synthesize data, precompute flow, train,
//! evaluate, predict, and run the verification suites.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use valdnet::config::Config;
use valdnet::data::{self, Manifest};
use valdnet::error::{Error, Result};
use valdnet::gradcheck::max_rel_err;
use valdnet::model::{self, micro_config, valdnet_forward};
use valdnet::recurrent::{register_cell_weights, CellKind, CellNodes};
use valdnet::tape::{NodeId, Padding, Tape};
use valdnet::tensor::Tensor;
use valdnet::train::{self, build_cache, load_split_clips, metrics_csv, MetricsRow};
use valdnet::weights::{TapedParams, WeightStore};

#[derive(Parser)]
#[command(
    name = "valdnet",
    version,
    about = "Two-stream violence detector: synthetic data, optical flow, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config file; missing fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. --set train.learning_rate=0.01
    /// (repeatable; wins over the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set model.cell=...
    #[arg(long, value_parser = ["lstm", "gru"])]
    cell: Option<String>,
    /// Shorthand for --set model.offset=...
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=3))]
    offset: Option<u64>,
    /// Shorthand for --set train.seed=...
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        cfg.apply_overrides(&self.set)?;
        if let Some(cell) = &self.cell {
            cfg.model.cell = CellKind::parse(cell)?;
        }
        if let Some(k) = self.offset {
            cfg.model.offset = k as usize;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = Some(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic two-class motion dataset and split it 80/20.
    GenSynth {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Clips per class.
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        /// Frames per clip.
        #[arg(long, default_value_t = data::DEFAULT_SYNTH_FRAMES)]
        frames: usize,
        /// Square frame edge length.
        #[arg(long, default_value_t = data::DEFAULT_SYNTH_SIZE)]
        size: usize,
    },
    /// Estimate optical flow for every frame of a manifest and record the
    /// .flo files in it.
    Flow {
        manifest: PathBuf,
        /// Flow is computed from frame t toward frame t+offset.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=3))]
        offset: u64,
    },
    /// Train on a split manifest; writes weights.vldw and metrics.csv.
    Train {
        manifest: PathBuf,
        /// Output directory for weights and metrics.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate saved weights on the eval split of a manifest.
    Eval {
        manifest: PathBuf,
        weights: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the probability and label for one sample of a manifest.
    Predict {
        manifest: PathBuf,
        /// Sample id, e.g. c1_003.
        sample: String,
        weights: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the uniformly sampled frame indices for a clip of N frames.
    SampleIndices { n: usize, k: usize },
    /// Verify every gradient against finite differences.
    Gradcheck,
}

/// Exclusive ownership of an output directory for the process lifetime;
/// concurrent runs on the same directory are refused.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".valdnet.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (delete {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive here too; only real usage
            // errors take the failure path.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSynth { out, seed, per_class, frames, size } => {
            let _lock = DirLock::acquire(&out)?;
            let mut manifest = data::generate_synthetic(&out, seed, per_class, frames, size)?;
            data::split_dataset(&mut manifest, seed)?;
            manifest.save(&out.join("manifest.json"))?;
            println!(
                "wrote {} clips ({} frames of {}x{} each) under {}",
                manifest.samples.len(),
                frames,
                size,
                size,
                out.display()
            );
            Ok(())
        }
        Cmd::Flow { manifest: path, offset } => {
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            let _lock = DirLock::acquire(dir)?;
            let mut manifest = Manifest::load(&path)?;
            train::precompute_flows(&path, &mut manifest, offset as usize)?;
            manifest.save(&path)?;
            let total: usize = manifest.samples.iter().map(|s| s.frames.len()).sum();
            println!("wrote {total} flow fields at offset {offset}");
            Ok(())
        }
        Cmd::Train { manifest, out, config } => {
            let cfg = config.resolve()?;
            cfg.train.seed()?;
            let _lock = DirLock::acquire(&out)?;
            let cache = build_cache(&manifest, &cfg.model)?;
            println!(
                "training on {} clips, evaluating on {} ({} parameters)",
                cache.train.len(),
                cache.eval.len(),
                model::init_model_weights(&cfg.model, 0)?.param_count()
            );
            let mut echo = |r: &MetricsRow| {
                println!(
                    "epoch {:3}: train loss {:.4} acc {:.3} | eval loss {:.4} acc {:.3} | {:.1}s",
                    r.epoch, r.train_loss, r.train_acc, r.eval_loss, r.eval_acc, r.seconds
                );
                true
            };
            let (store, rows) = train::train_on_cache(&cache, &cfg.model, &cfg.train, Some(&mut echo))?;
            let weights_path = out.join("weights.vldw");
            store.save(&weights_path)?;
            std::fs::write(out.join("metrics.csv"), metrics_csv(&rows))?;
            let last = rows.last().expect("at least one epoch");
            println!(
                "done: eval accuracy {:.4}; weights in {}",
                last.eval_acc,
                weights_path.display()
            );
            Ok(())
        }
        Cmd::Eval { manifest, weights, config } => {
            let cfg = config.resolve()?;
            let store = WeightStore::load(&weights)?;
            let clips = load_split_clips(&manifest, &cfg.model, data::Split::Eval)?;
            let (loss, acc) = train::evaluate_clips(&clips, &store, &cfg.model)?;
            println!("eval clips {}: loss {:.6} accuracy {:.6}", clips.len(), loss, acc);
            Ok(())
        }
        Cmd::Predict { manifest: path, sample, weights, config } => {
            let cfg = config.resolve()?;
            let store = WeightStore::load(&weights)?;
            let manifest = Manifest::load(&path)?;
            let record = manifest
                .samples
                .iter()
                .find(|s| s.id == sample)
                .ok_or_else(|| Error::Data(format!("no sample {sample:?} in the manifest")))?;
            let clip = train::load_clip(&path, record, &cfg.model)?;
            let p = model::predict_probability(&store, &cfg.model, &clip.rgb, &clip.flow)?;
            println!("{sample}: probability {:.6} label {}", p, train::predicted_label(p));
            Ok(())
        }
        Cmd::SampleIndices { n, k } => {
            // Bad values here are plain usage errors, whatever the library
            // calls them internally.
            let indices = data::uniform_sample_indices(n, k)
                .map_err(|e| Error::Config(e.to_string()))?;
            let parts: Vec<String> = indices.iter().map(usize::to_string).collect();
            println!("{}", parts.join(","));
            Ok(())
        }
        Cmd::Gradcheck => gradient_suite(),
    }
}

/// One named finite-difference check against its threshold.
struct Check {
    name: &'static str,
    threshold: f64,
    err: f64,
}

fn rand_tensor(rng: &mut ChaCha20Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("finite")
}

/// Every differentiable operation, alone and composed, against central
/// differences: single ops must sit at FD accuracy, composites may
/// accumulate a little, and the full micro model a little more.
fn gradient_suite() -> Result<()> {
    let started = std::time::Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(1290);
    let mut checks: Vec<Check> = Vec::new();

    let single = 1e-6;
    let composite = 1e-4;
    let end_to_end = 1e-3;

    // ── Single operations ────────────────────────────────────────────
    let x = rand_tensor(&mut rng, vec![4]);
    checks.push(Check {
        name: "mul+sum (quadratic)",
        threshold: single,
        err: max_rel_err(&[x], |t, ids| {
            let sq = t.mul(ids[0], ids[0])?;
            t.sum(sq)
        })?,
    });

    let a = rand_tensor(&mut rng, vec![3, 4]);
    let b = rand_tensor(&mut rng, vec![4, 2]);
    checks.push(Check {
        name: "matmul",
        threshold: single,
        err: max_rel_err(&[a, b], |t, ids| {
            let p = t.matmul(ids[0], ids[1])?;
            t.sum(p)
        })?,
    });

    let m = rand_tensor(&mut rng, vec![3, 5]);
    let v = rand_tensor(&mut rng, vec![5]);
    checks.push(Check {
        name: "matvec",
        threshold: single,
        err: max_rel_err(&[m, v], |t, ids| {
            let p = t.matvec(ids[0], ids[1])?;
            t.sum(p)
        })?,
    });

    let a = rand_tensor(&mut rng, vec![2, 3]);
    let b = rand_tensor(&mut rng, vec![2, 3]);
    checks.push(Check {
        name: "add+mul broadcast",
        threshold: single,
        err: max_rel_err(&[a, b], |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            let m = t.mul(s, ids[1])?;
            t.sum(m)
        })?,
    });

    for (name, f) in [
        ("sigmoid", Tape::sigmoid as fn(&mut Tape, NodeId) -> Result<NodeId>),
        ("tanh", Tape::tanh),
        ("swish", Tape::swish),
        ("relu", Tape::relu),
    ] {
        // Keep relu inputs clear of the kink, where no finite-difference
        // estimate is meaningful.
        let x = Tensor::vector(&[0.9, -0.7, 0.3, -1.4, 0.6]).expect("finite");
        checks.push(Check {
            name,
            threshold: single,
            err: max_rel_err(&[x], |t, ids| {
                let y = f(t, ids[0])?;
                t.sum(y)
            })?,
        });
    }

    let x = rand_tensor(&mut rng, vec![6]);
    checks.push(Check {
        name: "affine",
        threshold: single,
        err: max_rel_err(&[x], |t, ids| {
            let y = t.affine(ids[0], -1.0, 1.0)?;
            t.sum(y)
        })?,
    });

    let img = rand_tensor(&mut rng, vec![2, 6, 6]);
    let ker = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
    checks.push(Check {
        name: "conv2d same/stride2",
        threshold: single,
        err: max_rel_err(&[img, ker], |t, ids| {
            let c = t.conv2d(ids[0], ids[1], 2, Padding::Same)?;
            t.sum(c)
        })?,
    });

    let img = rand_tensor(&mut rng, vec![2, 5, 5]);
    let ker = rand_tensor(&mut rng, vec![2, 3, 3]);
    checks.push(Check {
        name: "depthwise_conv2d valid",
        threshold: single,
        err: max_rel_err(&[img, ker], |t, ids| {
            let c = t.depthwise_conv2d(ids[0], ids[1], 1, Padding::Valid)?;
            t.sum(c)
        })?,
    });

    let img = rand_tensor(&mut rng, vec![3, 4, 4]);
    checks.push(Check {
        name: "global_avg_pool",
        threshold: single,
        err: max_rel_err(&[img], |t, ids| {
            let p = t.global_avg_pool(ids[0])?;
            t.sum(p)
        })?,
    });

    let xs = rand_tensor(&mut rng, vec![3, 4]);
    checks.push(Check {
        name: "mean_rows+row+concat",
        threshold: single,
        err: max_rel_err(&[xs], |t, ids| {
            let m = t.mean_rows(ids[0])?;
            let r = t.row(ids[0], 1)?;
            let c = t.concat_vec(m, r)?;
            t.sum(c)
        })?,
    });

    let x = Tensor::vector(&[0.3]).expect("finite");
    checks.push(Check {
        name: "sigmoid+bce_loss",
        threshold: single,
        err: max_rel_err(&[x], |t, ids| {
            let s = t.sigmoid(ids[0])?;
            t.bce_loss(s, 1.0)
        })?,
    });

    // ── Composite graphs ─────────────────────────────────────────────
    checks.push(Check {
        name: "backbone composite",
        threshold: composite,
        err: backbone_composite_check(&mut rng)?,
    });
    for kind in [CellKind::Lstm, CellKind::Gru] {
        checks.push(Check {
            name: match kind {
                CellKind::Lstm => "lstm unrolled T=3",
                CellKind::Gru => "gru unrolled T=3",
            },
            threshold: composite,
            err: cell_composite_check(&mut rng, kind)?,
        });
    }

    // ── End to end ───────────────────────────────────────────────────
    checks.push(Check {
        name: "micro model end-to-end",
        threshold: end_to_end,
        err: model_end_to_end_check(&mut rng)?,
    });

    let mut all_ok = true;
    for c in &checks {
        let ok = c.err < c.threshold;
        all_ok &= ok;
        println!(
            "{:26} {:>9.2e}  (< {:.0e})  {}",
            c.name,
            c.err,
            c.threshold,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} checks in {:.1}s",
        checks.len(),
        started.elapsed().as_secs_f64()
    );
    if all_ok {
        Ok(())
    } else {
        Err(Error::Numeric("gradient check above threshold".into()))
    }
}

fn backbone_composite_check(rng: &mut ChaCha20Rng) -> Result<f64> {
    use valdnet::backbone::{backbone_forward, register_backbone_weights, BackboneConfig, StageSpec};
    let cfg = BackboneConfig {
        input_channels: 2,
        input_size: 12,
        stem_filters: 2,
        stages: vec![StageSpec { expansion: 2, out_channels: 4, stride: 2, repeats: 1 }],
        se_reduction: 2,
        feature_dim: 4,
    };
    let mut store = WeightStore::new();
    register_backbone_weights(&mut store, "net", &cfg, rng)?;
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    inputs.push(rand_tensor(rng, vec![2, 12, 12]));
    max_rel_err(&inputs, |tape, ids| {
        let bound = names.iter().cloned().zip(ids[..ids.len() - 1].iter().copied());
        let mut params = TapedParams::preset(&store, bound);
        let feat = backbone_forward(tape, &mut params, "net", &cfg, ids[ids.len() - 1])?;
        tape.sum(feat)
    })
}

fn cell_composite_check(rng: &mut ChaCha20Rng, kind: CellKind) -> Result<f64> {
    use valdnet::recurrent::run_sequence;
    let (input, hidden, t_len) = (3, 2, 3);
    let mut store = WeightStore::new();
    register_cell_weights(&mut store, "cell", kind, input, hidden, rng)?;
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    inputs.push(rand_tensor(rng, vec![t_len, input]));
    max_rel_err(&inputs, |tape, ids| {
        let bound = names.iter().cloned().zip(ids[..ids.len() - 1].iter().copied());
        let mut params = TapedParams::preset(&store, bound);
        let cell = CellNodes::bind(tape, &mut params, "cell", kind)?;
        let out = run_sequence(tape, &cell, ids[ids.len() - 1])?;
        tape.sum(out)
    })
}

fn model_end_to_end_check(rng: &mut ChaCha20Rng) -> Result<f64> {
    let cfg = micro_config();
    let store = model::init_model_weights(&cfg, 977)?;
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let weight_count = inputs.len();
    for _ in 0..cfg.frames {
        inputs.push(rand_tensor(rng, vec![cfg.rgb.input_channels, cfg.rgb.input_size, cfg.rgb.input_size]));
    }
    for _ in 0..cfg.frames {
        inputs.push(rand_tensor(rng, vec![cfg.flow.input_channels, cfg.flow.input_size, cfg.flow.input_size]));
    }
    max_rel_err(&inputs, |tape, ids| {
        let bound = names.iter().cloned().zip(ids[..weight_count].iter().copied());
        let mut params = TapedParams::preset(&store, bound);
        let frames = &ids[weight_count..];
        let p = valdnet_forward(tape, &mut params, &cfg, &frames[..cfg.frames], &frames[cfg.frames..])?;
        tape.bce_loss(p, 1.0)
    })
}
