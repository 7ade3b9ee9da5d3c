use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gated_gan::evaluation::{fid, render_interpolation, stats_of, Embedder, ScoreRecord};
use gated_gan::io::{
    check_styles, index_dataset, list_images, load_checkpoint, load_image, resolve_style, run_training, save_image,
    RunConfig, FINAL_CHECKPOINT,
};
use gated_gan::models::{crop_top_left, pad_to_multiple_of_4, StyleWeights};
use gated_gan::training::{sample_noise, seeded_stream, Mode, TrainConfig, TrainState};
use gated_gan::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "gated-gan", version, about = "Multi-collection style transfer with a gated generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config key (`key=value`), applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Add one style branch to a trained model, keeping everything else frozen.
    AddStyle {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        style_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Name of the new style (defaults to the directory name).
        #[arg(long)]
        name: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render images in one style at their native resolution.
    Stylize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        style: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend two styles in `steps` frames, from `--from` to `--to`.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        steps: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate textures from Gaussian noise.
    SynthesizeTexture {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        style: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Output extent; defaults to the training size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode a single noisy feature channel through one branch.
    VisualizeBranch {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        style: String,
        #[arg(long)]
        channel: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        magnitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fréchet distance between stylized content and a real collection.
    Fid {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        style: String,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Decode { .. } | Error::UnsupportedFormat { .. } => 4,
        Error::Dataset(_) => 5,
        Error::Checkpoint(_) => 6,
        Error::Training { .. } => 7,
        Error::Index(_) | Error::Invalid(_) => 8,
        Error::Shape(_) => 9,
        Error::Numeric(_) | Error::NonFinite(_) => 10,
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))
        })
        .collect()
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    RunConfig::load(path, |k| std::env::var(k).ok(), &parse_overrides(overrides)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn style_of(cfg: &TrainConfig, s: &str) -> Result<usize> {
    resolve_style(s, &cfg.style_names, cfg.style_count)
}

/// Image files of a directory, or the single file given.
fn inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        Ok(list_images(path)?.0)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn output_name(input: &Path) -> String {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    format!("{stem}.png")
}

fn train(config: &Path, resume: Option<&Path>, overrides: &[String]) -> Result<()> {
    let run = load_config(config, overrides)?;
    let index = index_dataset(&run.style_dirs, run.content_dir.as_deref())?;
    log::info!("indexed {} styles with {:?} images, {} content images", index.styles(), index.counts(), index.content_files.len());
    let data = index.load()?;
    let mut state = match resume {
        Some(path) => {
            let state = load_checkpoint(path)?;
            check_styles(&state, run.train.style_count)?;
            log::info!("resuming from iteration {}", state.iteration);
            state
        }
        None => TrainState::new(run.train.clone())?,
    };
    let until = run.train.iterations;
    run_training(&mut state, &data, until, &run.out_dir)?;
    println!("{}", run.out_dir.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn add_style(ckpt: &Path, style_dir: &Path, config: &Path, name: Option<String>, overrides: &[String]) -> Result<()> {
    let run = load_config(config, overrides)?;
    let mut state = load_checkpoint(ckpt)?;
    check_styles(&state, run.style_dirs.len())?;
    let mut dirs = run.style_dirs.clone();
    dirs.push(style_dir.to_path_buf());
    let data = index_dataset(&dirs, run.content_dir.as_deref())?.load()?;
    let mut names = state.config.style_names.clone();
    state.begin_extension()?;
    if !names.is_empty() {
        let default = style_dir.file_name().and_then(|s| s.to_str()).unwrap_or("new").to_string();
        names.push(name.unwrap_or(default));
        state.config.style_names = names;
        state.config.validate()?;
    }
    let out = run.out_dir.join("extension");
    run_training(&mut state, &data, run.train.iterations, &out)?;
    println!("{}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn stylize(ckpt: &Path, style: &str, input: &Path, out: &Path) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let c = style_of(&state.config, style)?;
    let w = StyleWeights::one_hot(state.styles(), c)?;
    create_dir(out)?;
    for path in inputs(input)? {
        let img = load_image(&path)?;
        let styled = state.generator.stylize_native(&img, &w)?;
        let dest = out.join(output_name(&path));
        save_image(&styled, &dest)?;
        println!("{}", dest.display());
    }
    Ok(())
}

fn interpolate(ckpt: &Path, from: &str, to: &str, steps: usize, input: &Path, out: &Path) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let (a, b) = (style_of(&state.config, from)?, style_of(&state.config, to)?);
    let img = load_image(input)?;
    let (padded, h, w) = pad_to_multiple_of_4(&img)?;
    // α weights the first style given, so frame 0 (α = 0) is `from`
    let frames = render_interpolation(&padded, &state.generator, b, a, steps)?;
    create_dir(out)?;
    for (i, f) in frames.iter().enumerate() {
        let dest = out.join(format!("frame_{i:03}.png"));
        save_image(&crop_top_left(f, h, w)?, &dest)?;
        println!("{}", dest.display());
    }
    Ok(())
}

fn synthesize(ckpt: &Path, style: &str, count: usize, out: &Path, size: Option<usize>, seed: u64) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let c = style_of(&state.config, style)?;
    let cfg = TrainConfig {
        mode: Mode::TextureSynthesis,
        batch_size: 1,
        image_size: size.unwrap_or(state.config.image_size),
        ..state.config.clone()
    };
    if cfg.image_size % 4 != 0 || cfg.image_size < 8 {
        return Err(Error::Config(format!("texture size {} must be a multiple of 4 and at least 8", cfg.image_size)));
    }
    let mut rng = seeded_stream(seed, 0);
    create_dir(out)?;
    for i in 0..count {
        let z = sample_noise(&cfg, &mut rng)?;
        let dest = out.join(format!("texture_{i:04}.png"));
        save_image(&state.generator.generate(&z, c)?, &dest)?;
        println!("{}", dest.display());
    }
    Ok(())
}

fn visualize(ckpt: &Path, style: &str, channel: usize, out: &Path, magnitude: f64, seed: u64) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let c = style_of(&state.config, style)?;
    let extent = state.config.image_size / 4;
    let mut rng = seeded_stream(seed, 0);
    let img = state.generator.visualize_branch_feature(c, channel, magnitude, (extent, extent), &mut rng)?;
    save_image(&img, out)?;
    println!("{}", out.display());
    Ok(())
}

fn fid_command(ckpt: &Path, style: &str, content: &Path, real: &Path, seed: u64) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let c = style_of(&state.config, style)?;
    let w = StyleWeights::one_hot(state.styles(), c)?;
    let load_dir = |dir: &Path| -> Result<Vec<Tensor<f32>>> {
        let files = list_images(dir)?.0;
        if files.is_empty() {
            return Err(Error::Dataset(format!("{} contains no images", dir.display())));
        }
        files.iter().map(|p| load_image(p)).collect()
    };
    let content = load_dir(content)?;
    let real = load_dir(real)?;
    let generated = content.iter().map(|x| state.generator.stylize_native(x, &w)).collect::<Result<Vec<_>>>()?;
    let embedder = Embedder::new(seed);
    let score = fid(&stats_of(&embedder, &real)?, &stats_of(&embedder, &generated)?)?;
    let record = ScoreRecord { style: c, n_real: real.len(), n_gen: generated.len(), extractor_seed: seed, fid: score };
    println!("{}", record.to_json());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, overrides } => train(&config, resume.as_deref(), &overrides),
        Command::AddStyle { ckpt, style_dir, config, name, overrides } => {
            add_style(&ckpt, &style_dir, &config, name, &overrides)
        }
        Command::Stylize { ckpt, style, input, out } => stylize(&ckpt, &style, &input, &out),
        Command::Interpolate { ckpt, from, to, steps, input, out } => interpolate(&ckpt, &from, &to, steps, &input, &out),
        Command::SynthesizeTexture { ckpt, style, count, out, size, seed } => {
            synthesize(&ckpt, &style, count, &out, size, seed)
        }
        Command::VisualizeBranch { ckpt, style, channel, out, magnitude, seed } => {
            visualize(&ckpt, &style, channel, &out, magnitude, seed)
        }
        Command::Fid { ckpt, style, content, real, seed } => fid_command(&ckpt, &style, &content, &real, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
