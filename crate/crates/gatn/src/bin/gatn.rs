//! Command-line driver: synthetic data, two-stage training, retrieval
//! evaluation, attention rendering, and checkpoint inspection.

use clap::{Args, Parser, Subcommand};
use gatn::checkpoint;
use gatn::config::{self, Config};
use gatn::data::{self, synth::SynthConfig};
use gatn::error::Result;
use gatn::eval::EvalConfig;
use gatn::global::{analyze, GlobalTrainConfig};
use gatn::tensor::{Elem, ElemTag};
use gatn::triplet::TripletTrainConfig;
use gatn::viz::render_attention_overlay;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gatn", version, about = "Gradient-based attention network for re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. `--set k=4`; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Random seed (wins over the config file and GATN_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| gatn::Error::io(path, e))?;
                let mut c = Config::default();
                config::apply_config(&mut c, &text)?;
                c
            }
            None => Config::default(),
        };
        for set in &self.sets {
            let (key, value) = set.split_once('=').ok_or_else(|| {
                gatn::Error::Config(format!("--set expects key=value, got {set:?}"))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic re-identification dataset with ground truth.
    Synth {
        #[arg(long, default_value_t = 30)]
        ids: u32,
        #[arg(long, default_value_t = 4)]
        images_per_id: u32,
        #[arg(long, default_value_t = 2)]
        cameras: u32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the global attention network with cross-entropy.
    TrainGlobal {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the local patch network with the triplet loss.
    TrainTriplet {
        #[arg(long)]
        data: PathBuf,
        /// Global-stage checkpoint (frozen).
        #[arg(long)]
        global: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate retrieval (CMC, mAP) on a test directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        global: PathBuf,
        /// Local-stage checkpoint; omitted = global features only.
        #[arg(long)]
        local: Option<PathBuf>,
        /// Write per-query first-match ranks as CSV.
        #[arg(long)]
        per_query: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render the attention map and selected patches for one image.
    Attend {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        global: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print checkpoint stage, tensors, and config snapshot.
    Info {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Info { ckpt } => {
            let info = checkpoint::checkpoint_info(&ckpt)?;
            println!("stage: {}", info.stage);
            println!(
                "dtype: {}",
                match info.elem {
                    ElemTag::F32 => "f32",
                    ElemTag::F64 => "f64",
                }
            );
            println!("version: {}", info.version);
            for (name, shape) in &info.tensors {
                println!("tensor: {name} {shape:?}");
            }
            if !info.config_text.is_empty() {
                println!("config:");
                for line in info.config_text.lines() {
                    println!("  {line}");
                }
            }
            Ok(())
        }
        Command::Synth {
            ids,
            images_per_id,
            cameras,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let synth = SynthConfig {
                ids,
                images_per_id,
                cameras,
                seed: cfg.seed(),
                out_dir: out,
            };
            // dataset contents do not depend on the element type
            let (dataset, boxes) = data::synth::synth_generate::<f32>(&synth)?;
            println!(
                "wrote {} images for {} identities ({} glyph boxes) to {}",
                dataset.len(),
                dataset.num_identities(),
                boxes.len(),
                synth.out_dir.display()
            );
            Ok(())
        }
        other => {
            // element type comes from the run configuration
            let cfg = match &other {
                Command::TrainGlobal { config, .. }
                | Command::TrainTriplet { config, .. }
                | Command::Eval { config, .. }
                | Command::Attend { config, .. } => config.resolve()?,
                _ => unreachable!(),
            };
            match cfg.dtype {
                ElemTag::F32 => dispatch::<f32>(other, cfg),
                ElemTag::F64 => dispatch::<f64>(other, cfg),
            }
        }
    }
}

fn protocol(cfg: &Config) -> data::ProtocolConfig {
    data::ProtocolConfig {
        height: cfg.height,
        width: cfg.width,
        ..Default::default()
    }
}

fn dispatch<T: Elem>(command: Command, cfg: Config) -> Result<()> {
    match command {
        Command::TrainGlobal { data: dir, out, .. } => {
            let dataset = data::load_dataset::<T>(&dir, protocol(&cfg))?;
            let train_cfg = GlobalTrainConfig {
                epochs: cfg.epochs,
                initial_lr: cfg.lr,
                lr_decay: cfg.lr_decay,
                seed: cfg.seed(),
                ..Default::default()
            };
            let (params, report) = gatn::global::train_global(&dataset, &train_cfg)?;
            for (epoch, loss) in report.epoch_losses.iter().enumerate() {
                println!("epoch={epoch} loss={loss:.6}");
            }
            println!(
                "classes={} train_accuracy={:.4}",
                report.num_classes, report.final_accuracy
            );
            checkpoint::save_global(&out, &params, &cfg.to_text())?;
            println!("saved {}", out.display());
            Ok(())
        }
        Command::TrainTriplet {
            data: dir,
            global,
            out,
            ..
        } => {
            let dataset = data::load_dataset::<T>(&dir, protocol(&cfg))?;
            let (global_params, _) = checkpoint::load_global::<T>(&global)?;
            let train_cfg = TripletTrainConfig {
                epochs: cfg.epochs,
                mining: gatn::triplet::MiningConfig {
                    margin: cfg.margin,
                    mode: cfg.mining,
                    p: cfg.p,
                    k: cfg.k_images,
                },
                k_patches: cfg.k,
                initial_lr: cfg.lr,
                lr_decay: cfg.lr_decay,
                seed: cfg.seed(),
                verbose: true,
            };
            let (local_params, report) =
                gatn::triplet::train_triplet(&dataset, &global_params, &train_cfg)?;
            if report.converged_early {
                println!("converged early after {} epochs", report.epochs.len());
            }
            checkpoint::save_local(&out, &local_params, &cfg.to_text())?;
            println!("saved {}", out.display());
            Ok(())
        }
        Command::Eval {
            data: dir,
            global,
            local,
            per_query,
            ..
        } => {
            let dataset = data::load_dataset::<T>(&dir, protocol(&cfg))?;
            let split = data::make_test_split(&dataset)?;
            let (mut global_params, _) = checkpoint::load_global::<T>(&global)?;
            let mut local_params = match &local {
                Some(path) => Some(checkpoint::load_local::<T>(path)?.0),
                None => None,
            };
            let eval_cfg = EvalConfig {
                k_patches: if local_params.is_some() { cfg.k } else { 0 },
                ..Default::default()
            };
            let report = gatn::eval::evaluate(
                &split,
                &mut global_params,
                local_params.as_mut(),
                &eval_cfg,
            )?;
            println!("{report}");
            if let Some(path) = per_query {
                std::fs::write(&path, report.per_query_csv())
                    .map_err(|e| gatn::Error::io(&path, e))?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Attend {
            image, global, out, ..
        } => {
            let pixels = data::pnm::decode_image::<T>(&image)?;
            let pixels = data::resize_bilinear(&pixels, cfg.height, cfg.width)?;
            let pixels = if pixels.shape()[0] == 1 {
                // replicate grayscale to the network's expected channels
                let hw = cfg.height * cfg.width;
                let mut data = Vec::with_capacity(3 * hw);
                for _ in 0..3 {
                    data.extend_from_slice(pixels.data());
                }
                gatn::Tensor::from_vec(&[3, cfg.height, cfg.width], data)?
            } else {
                pixels
            };
            let (mut params, _) = checkpoint::load_global::<T>(&global)?;
            let art = analyze(&pixels, &mut params, cfg.k)?;
            println!("entropy: {:.6}", art.entropy.to_f64());
            println!("predicted class: {}", art.distribution.argmax());
            for (i, &(r, c)) in art.patches.positions.iter().enumerate() {
                println!("patch {i}: cell ({r}, {c})");
            }
            render_attention_overlay(&pixels, &art.map, &art.patches, &out)?;
            println!("saved {}", out.display());
            Ok(())
        }
        Command::Synth { .. } | Command::Info { .. } => unreachable!(),
    }
}
