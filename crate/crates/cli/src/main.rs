//! `vitgaze` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vitgaze::archive::TensorArchive;
use vitgaze::data::{
    convert_gazefollow, convert_video_attention_target, image_dims, load_image, load_manifest, resize_image,
    write_manifest, FsImageSource, GazeSample, HeadBox, Split,
};
use vitgaze::model::{prepare_image, GazeModel};
use vitgaze::train::{
    evaluate, finetune_video, load_checkpoint, resolve_device, train, Checkpoint, Dataset, RunConfig, StepRecord,
};
use vitgaze::viz::{heatmap_image, save_png, write_overlays};
use vitgaze::{Error, Result};

const HEAD_HINT: &str = "--head takes x_min,y_min,x_max,y_max normalised to [0, 1], e.g. --head 0.4,0.1,0.55,0.3";

#[derive(Debug, Parser)]
#[command(name = "vitgaze", version, about = "Gaze following from ViT attention maps")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.epochs=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; falls back to VITGAZE_DEVICE, then cpu.
    #[arg(long, global = true)]
    device: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Gazefollow,
    Video,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert public annotations to a manifest (written to --out).
    Convert {
        #[arg(long, value_enum)]
        format: Format,
        /// GazeFollow annotation file or VideoAttentionTarget split directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Directory image paths resolve against when reading sizes.
        #[arg(long)]
        image_root: PathBuf,
    },
    /// Train on --manifest, writing checkpoints and the log under --out.
    Train,
    /// Fine-tune --checkpoint on --manifest at a constant rate.
    Finetune,
    /// Evaluate --checkpoint on --manifest; report to stdout and --out.
    Eval,
    /// Predict the gaze point for one image and head box.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        head: String,
    },
    /// Write guidance, interaction and heatmap overlays to --out.
    Visualize {
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        head: Option<String>,
        /// Sample index within --manifest, used when --image is absent.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Validation(format!("this subcommand needs --{flag}")))
}

fn parse_head(raw: &str) -> Result<HeadBox> {
    let vals: Vec<f64> = raw
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Validation(format!("bad head box `{raw}`: {e}")))?;
    let arr: [f64; 4] = vals
        .try_into()
        .map_err(|_| Error::Validation(format!("head box `{raw}` needs four values")))?;
    HeadBox::from_array(arr)
}

impl Cli {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(seed) = self.seed {
            o.push(format!("seed={seed}"));
        }
        o
    }

    /// `--config` (or, failing that, the checkpoint's stored config) with
    /// overrides applied.
    fn resolve_config(&self, stored: Option<&RunConfig>) -> Result<RunConfig> {
        let cfg = match (&self.config, stored) {
            (Some(path), _) => RunConfig::load(Some(path), &self.overrides())?,
            (None, Some(s)) => RunConfig::from_toml_with_overrides(&s.to_toml()?, &self.overrides())?,
            (None, None) => RunConfig::load(None, &self.overrides())?,
        };
        eprintln!("# resolved config\n{}", cfg.to_toml()?);
        Ok(cfg)
    }

    fn image_root(&self, cfg: &RunConfig) -> Result<PathBuf> {
        if let Some(root) = &cfg.data.image_root {
            return Ok(root.clone());
        }
        let manifest = need(&self.manifest, "manifest")?;
        Ok(manifest.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    fn load_checkpoint(&self) -> Result<Checkpoint<f32>> {
        load_checkpoint(need(&self.checkpoint, "checkpoint")?)
    }
}

fn progress(rec: &StepRecord) {
    eprintln!(
        "{} epoch {} step {} res {} lr {:.3e} loss {:.5} (heatmap {:.5} inout {:.5} aux {:.5})",
        rec.phase, rec.epoch, rec.step, rec.resolution, rec.lr, rec.loss, rec.heatmap, rec.inout, rec.aux
    );
}

fn initial_model(cfg: &RunConfig) -> Result<GazeModel<f32>> {
    let mut rng = vitgaze::data::sample_rng(cfg.seed, u64::MAX);
    match &cfg.data.backbone_weights {
        Some(path) => {
            let mut model = GazeModel::init_decoder(cfg.model.clone(), &mut rng)?;
            let archive = TensorArchive::read(path)?;
            let report = model.load_backbone(&archive, &cfg.data.backbone_prefix)?;
            if !report.unexpected.is_empty() {
                eprintln!("note: {} unused tensors in {}", report.unexpected.len(), path.display());
            }
            Ok(model)
        }
        None => {
            eprintln!("note: no data.backbone_weights given; training from a random backbone");
            GazeModel::init_random(cfg.model.clone(), &mut rng)
        }
    }
}

fn load_samples(cli: &Cli) -> Result<Vec<GazeSample>> {
    load_manifest(need(&cli.manifest, "manifest")?)
}

fn run(cli: &Cli) -> Result<()> {
    resolve_device(cli.device.as_deref())?;
    match &cli.command {
        Command::Convert {
            format,
            input,
            split,
            image_root,
        } => {
            let out = need(&cli.out, "out")?;
            let mut dims = |p: &str| image_dims(image_root.join(p));
            let (samples, skipped) = match format {
                Format::Gazefollow => {
                    let text = std::fs::read_to_string(input).map_err(|e| Error::Io {
                        path: input.clone(),
                        source: e,
                    })?;
                    convert_gazefollow(&text, *split, &mut dims)?
                }
                Format::Video => convert_video_attention_target(input, *split, &mut dims)?,
            };
            write_manifest(out, &samples)?;
            eprintln!("wrote {} samples to {} ({skipped} rows skipped)", samples.len(), out.display());
        }
        Command::Train => {
            let cfg = cli.resolve_config(None)?;
            let out = need(&cli.out, "out")?;
            let images = FsImageSource::new(cli.image_root(&cfg)?);
            let data = Dataset::new(load_samples(cli)?, &images);
            let model = initial_model(&cfg)?;
            let outcome = train(model, &cfg, &data, Some(out), &mut progress)?;
            if let Some(last) = outcome.checkpoints.last() {
                println!("{}", last.display());
            }
        }
        Command::Finetune => {
            let init = need(&cli.checkpoint, "checkpoint")?;
            let stored = load_checkpoint::<f32>(init)?;
            let cfg = cli.resolve_config(Some(&stored.config))?;
            let out = need(&cli.out, "out")?;
            let images = FsImageSource::new(cli.image_root(&cfg)?);
            let data = Dataset::new(load_samples(cli)?, &images);
            let outcome = finetune_video::<f32>(init, &cfg, &data, Some(out), &mut progress)?;
            if let Some(last) = outcome.checkpoints.last() {
                println!("{}", last.display());
            }
        }
        Command::Eval => {
            let ck = cli.load_checkpoint()?;
            let cfg = cli.resolve_config(Some(&ck.config))?;
            let images = FsImageSource::new(cli.image_root(&cfg)?);
            let data = Dataset::new(load_samples(cli)?, &images);
            let report = evaluate(&ck.model, &data, cfg.train.final_epoch_resolution, cfg.data.eval_style)?;
            print!("{report}");
            if let Some(out) = &cli.out {
                report.write(out)?;
            }
        }
        Command::Predict { image, head } => {
            let head = parse_head(head)?;
            let ck = cli.load_checkpoint()?;
            let cfg = cli.resolve_config(Some(&ck.config))?;
            let img = prepare_image(&load_image(image)?, cfg.train.final_epoch_resolution);
            let pred = ck.model.predict(&img, &head)?;
            let record = serde_json::json!({
                "gaze_x": pred.gaze.0,
                "gaze_y": pred.gaze.1,
                "p_out": pred.p_out as f64,
            });
            println!("{record}");
            if let Some(out) = &cli.out {
                save_png(out, &heatmap_image(&pred.heatmap))?;
            }
        }
        Command::Visualize { image, head, index } => {
            let ck = cli.load_checkpoint()?;
            let cfg = cli.resolve_config(Some(&ck.config))?;
            let out = need(&cli.out, "out")?;
            let (path, head) = match (image, head) {
                (Some(img), Some(h)) => (img.clone(), parse_head(h)?),
                (Some(_), None) | (None, Some(_)) => {
                    return Err(Error::Validation("--image and --head go together".into()))
                }
                (None, None) => {
                    let samples = load_samples(cli)?;
                    let s = samples.get(*index).ok_or_else(|| {
                        Error::Validation(format!("--index {index} out of range ({} samples)", samples.len()))
                    })?;
                    (cli.image_root(&cfg)?.join(&s.image_ref), s.head)
                }
            };
            let res = cfg.train.final_epoch_resolution;
            let raw = resize_image(&load_image(&path)?, res, res);
            let pred = ck.model.predict(&prepare_image(&raw, res), &head)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
            for p in write_overlays(out, stem, &raw, &pred, &ck.model.config)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(cli.command, Command::Predict { .. } | Command::Visualize { .. })
                && matches!(e, Error::Validation(_))
            {
                eprintln!("hint: {HEAD_HINT}");
            }
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
