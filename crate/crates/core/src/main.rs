use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use flexcap::config::RunConfig;
use flexcap::dataset::{
    build_dataset, prefix_share_fraction, DatasetShard, read_shard, write_shard, ConditioningMode, Vocab,
};
use flexcap::dataset::vocab::len_token;
use flexcap::decode::{Captioner, DecodeConfig};
use flexcap::eval::{self, dense_inputs};
use flexcap::model::{check_loss_gradient, ModelConfig, ModelParams};
use flexcap::prompt::{self, Frame, ObjectLine, Variant};
use flexcap::train::{self, load_checkpoint, save_checkpoint, write_loss_curve, StepRecord};
use flexcap::world::{caption_for, generate_scene, read_scenes, render, write_scenes, BBox, Scene, CANVAS};

#[derive(Parser)]
#[command(name = "flexcap", version, about = "Length-conditioned region captioning on synthetic scenes")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key=value`; may repeat. Applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes with seeds `seed .. seed + count`.
    GenScenes {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a scene file into a triplet shard.
    BuildDataset {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Prefix-sharing fractions and caption-length histogram of a shard.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train a model on a shard and write a checkpoint.
    Train {
        #[arg(long)]
        shard: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the per-step loss curve here as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Caption one region of one scene; prints JSON lines.
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        /// Seed of the scene to caption.
        #[arg(long)]
        scene: u64,
        /// Ground-truth object index; ignored when --box is given.
        #[arg(long, default_value_t = 0)]
        object: usize,
        /// Normalized box `cx,cy,w,h`.
        #[arg(long = "box")]
        bbox: Option<String>,
        /// Conditioning prefix such as `LEN_4 the color is`.
        #[arg(long, default_value = "LEN_3")]
        prefix: String,
    },
    /// Exact-length accuracy per requested length.
    EvalLength(EvalArgs),
    /// Shape classification by caption voting.
    EvalRegion(EvalArgs),
    /// Dense-captioning mAP over the threshold grid.
    EvalDense(EvalArgs),
    /// Attribute completion after "the color is"-style prefixes.
    EvalPrefix(EvalArgs),
    /// Assemble a language-model prompt and print it.
    Prompt(PromptArgs),
    /// Finite-difference check of the loss gradient on a tiny model.
    GradCheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Check every n-th parameter.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long, default_value = "standard")]
    variant: String,
    #[arg(long)]
    question: String,
    #[arg(long, default_value_t = CANVAS as u32)]
    width: u32,
    #[arg(long, default_value_t = CANVAS as u32)]
    height: u32,
    /// Whole-image caption; may repeat.
    #[arg(long = "image-caption")]
    image_captions: Vec<String>,
    /// `caption;caption@cx,cy,w,h[@score]` in pixels; may repeat.
    #[arg(long = "object")]
    objects: Vec<String>,
    /// `index:caption;caption`; any frame switches to the video template.
    #[arg(long = "frame")]
    frames: Vec<String>,
    /// Caption objects of this scene with a model instead of --object.
    #[arg(long, requires_all = ["checkpoint", "scenes"])]
    scene: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<PathBuf>,
}

/// A configuration problem; exits like a usage error.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn resolve(cli: &Cli, flags: &[(&str, Option<String>)]) -> anyhow::Result<RunConfig> {
    let cfg = resolve_config(cli, flags).map_err(|e| Usage(format!("{e:#}")))?;
    for (key, value) in cfg.resolved() {
        info!("config {key}={value}");
    }
    Ok(cfg)
}

fn resolve_config(cli: &Cli, flags: &[(&str, Option<String>)]) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    let cfg = cfg.seeded();
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> anyhow::Result<(ModelConfig, ModelParams<f32>)> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn scenes_from(path: &Path) -> anyhow::Result<Vec<Scene>> {
    read_scenes(path).with_context(|| format!("reading scenes {}", path.display()))
}

fn shard_from(path: &Path) -> anyhow::Result<DatasetShard> {
    read_shard(path).with_context(|| format!("reading shard {}", path.display()))
}

fn find_scene(scenes: &[Scene], seed: u64) -> anyhow::Result<&Scene> {
    scenes.iter().find(|s| s.seed == seed).ok_or_else(|| anyhow!("no scene with seed {seed}"))
}

fn parse_box(text: &str) -> anyhow::Result<BBox> {
    let v: Vec<f64> = text.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?;
    match v[..] {
        [cx, cy, w, h] => Ok(BBox::new(cx, cy, w, h)),
        _ => bail!("box needs four values cx,cy,w,h"),
    }
}

fn gen_scenes(cfg: &RunConfig, count: usize, out: &Path) -> anyhow::Result<()> {
    let scenes = (0..count as u64)
        .map(|i| generate_scene(cfg.seed + i, &cfg.world))
        .collect::<flexcap::Result<Vec<_>>>()?;
    write_scenes(&scenes, out)?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn build(cfg: &RunConfig, input: &Path, out: &Path) -> anyhow::Result<()> {
    let scenes = scenes_from(input)?;
    let shard = build_dataset(&scenes, &cfg.dataset)?;
    write_shard(&shard, out)?;
    println!("wrote {} triplets from {} scenes to {}", shard.triplets.len(), shard.scenes.len(), out.display());
    Ok(())
}

fn stats(cfg: &RunConfig, input: &Path) -> anyhow::Result<()> {
    let shard = shard_from(input)?;
    let bos = prefix_share_fraction(&shard, ConditioningMode::BosToken, cfg.stats_aggregation, cfg.stats_rule)?;
    let len = prefix_share_fraction(&shard, ConditioningMode::LengthToken, cfg.stats_aggregation, cfg.stats_rule)?;
    println!("scenes {}", shard.scenes.len());
    println!("triplets {}", shard.triplets.len());
    println!("prefix_share_bos {bos:.6}");
    println!("prefix_share_length {len:.6}");
    let mut hist = eval::histogram(shard.triplets.iter().map(|t| t.len));
    hist.sort();
    println!("caption_length,count");
    for (k, n) in hist {
        println!("{k},{n}");
    }
    Ok(())
}

fn run_train(cfg: &RunConfig, shard_path: &Path, out: &Path, loss_csv: Option<&Path>) -> anyhow::Result<()> {
    let shard = shard_from(shard_path)?;
    let mut records: Vec<StepRecord> = Vec::with_capacity(cfg.train.steps);
    let every = cfg.train.checkpoint_every;
    let params = train::train(cfg.model, cfg.train.clone(), &shard, |r, params| {
        records.push(*r);
        let done = r.step + 1;
        if done % 100 == 0 || done == cfg.train.steps {
            info!("step {done} loss {:.4} lr {:.2e} grad_norm {:.3}", r.loss, r.lr, r.grad_norm);
        }
        if every > 0 && done % every == 0 && done < cfg.train.steps {
            let mut name = out.as_os_str().to_owned();
            name.push(format!(".step{done}"));
            save_checkpoint(params, &cfg.model, Path::new(&name))?;
        }
        Ok(())
    })?;
    save_checkpoint(&params, &cfg.model, out)?;
    if let Some(path) = loss_csv {
        write_loss_curve(&records, path)?;
    }
    let last = records.last().map_or(f64::NAN, |r| r.loss);
    println!("trained {} steps, final loss {last:.4}, checkpoint {}", records.len(), out.display());
    Ok(())
}

fn decode(cfg: &RunConfig, model: &ModelArgs, scene: u64, object: usize, bbox: Option<&str>, prefix: &str) -> anyhow::Result<()> {
    let (mcfg, params) = load_model(&model.checkpoint)?;
    let scenes = scenes_from(&model.scenes)?;
    let scene = find_scene(&scenes, scene)?;
    let bbox = match bbox {
        Some(text) => parse_box(text)?,
        None => scene
            .objects
            .get(object)
            .ok_or_else(|| anyhow!("scene {} has {} objects", scene.seed, scene.objects.len()))?
            .bbox(),
    };
    let vocab = Vocab::standard();
    let config = DecodeConfig {
        mode: cfg.decode_mode,
        p: cfg.decode_p,
        temperature: cfg.decode_temperature,
        samples: cfg.decode_samples,
        seed: cfg.seed,
        prefix: vocab.parse_prefix(prefix)?,
    };
    let captioner = Captioner::new(&params, &mcfg);
    for r in captioner.decode(&render(scene), bbox, &config)? {
        println!("{}", r.to_json(&vocab)?);
    }
    Ok(())
}

fn with_model<T>(args: &EvalArgs, f: impl FnOnce(&Captioner, &[Scene]) -> anyhow::Result<T>) -> anyhow::Result<T> {
    let (mcfg, params) = load_model(&args.model.checkpoint)?;
    let scenes = scenes_from(&args.model.scenes)?;
    f(&Captioner::new(&params, &mcfg), &scenes)
}

fn eval_length(cfg: &RunConfig, args: &EvalArgs) -> anyhow::Result<()> {
    let rows = with_model(args, |c, s| Ok(eval::eval_length_compliance(c, s, &cfg.eval_lengths, cfg.seed)?))?;
    println!("k,mean_len,accuracy,count");
    for r in &rows {
        println!("{},{:.4},{:.4},{}", r.k, r.mean_len, r.accuracy, r.count);
    }
    if let Some(out) = &args.out {
        eval::write_compliance_csv(&rows, out)?;
    }
    Ok(())
}

fn eval_region(cfg: &RunConfig, args: &EvalArgs) -> anyhow::Result<()> {
    let report = with_model(args, |c, s| Ok(eval::eval_region_classification(c, s, &cfg.region)?))?;
    println!(
        "accuracy {:.4} over {} objects ({} abstained)",
        report.accuracy, report.objects, report.all_abstained
    );
    if let Some(out) = &args.out {
        eval::write_region_csv(&report, out)?;
    }
    Ok(())
}

fn eval_dense(cfg: &RunConfig, args: &EvalArgs) -> anyhow::Result<()> {
    let report = with_model(args, |c, s| {
        let (preds, truths) = dense_inputs(c, s, cfg.seed)?;
        Ok(eval::eval_dense_captioning(&preds, &truths, &cfg.dense)?)
    })?;
    println!("map {:.4}", report.map);
    if let Some(out) = &args.out {
        eval::write_dense_csv(&report, &cfg.dense, out)?;
    }
    Ok(())
}

fn eval_prefix(args: &EvalArgs) -> anyhow::Result<()> {
    let rows = with_model(args, |c, s| Ok(eval::eval_prefix_extraction(c, s)?))?;
    println!("attribute,accuracy,single_word,count");
    for r in &rows {
        println!("{},{:.4},{:.4},{}", r.attribute.word(), r.accuracy, r.single_word, r.count);
    }
    if let Some(out) = &args.out {
        eval::write_prefix_csv(&rows, out)?;
    }
    Ok(())
}

fn split_captions(text: &str) -> Vec<String> {
    text.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn parse_object(text: &str) -> anyhow::Result<ObjectLine> {
    let mut parts = text.split('@');
    let captions = split_captions(parts.next().unwrap_or(""));
    let coords: Vec<u32> = parts
        .next()
        .ok_or_else(|| anyhow!("object `{text}` lacks @cx,cy,w,h"))?
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()?;
    let bbox: [u32; 4] = coords.try_into().map_err(|_| anyhow!("object `{text}` needs four coordinates"))?;
    let mut line = ObjectLine::new(captions, bbox);
    if let Some(score) = parts.next() {
        line = line.with_score(score.trim().parse()?);
    }
    Ok(line)
}

fn parse_frame(text: &str) -> anyhow::Result<Frame> {
    let (index, captions) = text.split_once(':').ok_or_else(|| anyhow!("frame `{text}` is not index:captions"))?;
    Ok(Frame { index: index.trim().parse()?, captions: split_captions(captions) })
}

fn pixel_box(b: &BBox, width: u32, height: u32) -> [u32; 4] {
    let (w, h) = (width as f64, height as f64);
    [b.cx * w, b.cy * h, b.w * w, b.h * h].map(|v| v.round() as u32)
}

/// Captions every object of a scene at lengths `1..=max_len`.
fn model_objects(cfg: &RunConfig, args: &PromptArgs, seed: u64) -> anyhow::Result<(Vec<String>, Vec<ObjectLine>)> {
    let (checkpoint, scenes) = (args.checkpoint.as_ref().expect("required"), args.scenes.as_ref().expect("required"));
    let (mcfg, params) = load_model(checkpoint)?;
    let scenes = scenes_from(scenes)?;
    let scene = find_scene(&scenes, seed)?;
    let captioner = Captioner::new(&params, &mcfg);
    let vocab = Vocab::standard();
    let vision = captioner.encode(&render(scene))?;
    let caption = |bbox: BBox, k: usize| -> anyhow::Result<(String, f64)> {
        let r = captioner.greedy(&captioner.region(&vision, bbox)?, &[len_token(k)])?;
        Ok((vocab.detokenize(&r.words)?.join(" "), r.confidence().exp()))
    };
    let mut lines = Vec::new();
    for o in &scene.objects {
        let mut captions: Vec<String> = Vec::new();
        let mut score = 0.0;
        for k in 1..=cfg.prompt_max_len {
            let (text, conf) = caption(o.bbox(), k)?;
            if !text.is_empty() && !captions.contains(&text) {
                captions.push(text);
                score = conf;
            }
        }
        let line = ObjectLine::new(captions, pixel_box(&o.bbox(), args.width, args.height));
        lines.push(line.with_score((score * 100.0).round() / 100.0));
    }
    let (whole, _) = caption(BBox::new(0.5, 0.5, 1.0, 1.0), cfg.prompt_max_len)?;
    Ok((if whole.is_empty() { vec![] } else { vec![whole] }, lines))
}

fn run_prompt(cfg: &RunConfig, args: &PromptArgs) -> anyhow::Result<()> {
    let variant: Variant = args.variant.parse()?;
    let text = if !args.frames.is_empty() {
        let frames = args.frames.iter().map(|f| parse_frame(f)).collect::<anyhow::Result<Vec<_>>>()?;
        prompt::build_video_prompt(&frames, &args.question)?
    } else {
        let (captions, objects) = match args.scene {
            Some(seed) => model_objects(cfg, args, seed)?,
            None => (
                args.image_captions.clone(),
                args.objects.iter().map(|o| parse_object(o)).collect::<anyhow::Result<Vec<_>>>()?,
            ),
        };
        prompt::build_vqa_prompt(args.width, args.height, &captions, &objects, &args.question, variant)?
    };
    println!("{text}");
    Ok(())
}

fn grad_check(cfg: &RunConfig, stride: usize, tol: f64) -> anyhow::Result<bool> {
    if stride == 0 {
        bail!("stride must be positive");
    }
    let mcfg = ModelConfig::tiny(Vocab::standard().len());
    let vocab = Vocab::standard();
    let mut images = Vec::new();
    let mut examples = Vec::new();
    for i in 0..2u64 {
        let scene = generate_scene(cfg.seed + i, &cfg.world)?;
        let words = caption_for(&scene, 0, 2).or_else(|_| caption_for(&scene, 0, 1))?;
        let mut tokens = vec![len_token(words.len())];
        tokens.extend(vocab.tokenize(&words)?);
        tokens.push(flexcap::dataset::vocab::EOS);
        tokens.resize(mcfg.max_len, flexcap::dataset::vocab::PAD);
        examples.push(flexcap::model::Example { image: i as usize, bbox: scene.objects[0].bbox(), tokens });
        images.push(render(&scene));
    }
    let refs: Vec<_> = images.iter().collect();
    let params = ModelParams::<f64>::init_with_std(&mcfg, cfg.seed, 0.2);
    let coords: Vec<usize> = (0..params.num_params()).step_by(stride).collect();
    let report = check_loss_gradient(&params, &mcfg, &refs, &examples, 1e-4, Some(&coords))?;
    println!(
        "checked {} coordinates, max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
        report.checked, report.max_rel_error, report.worst, report.analytic, report.numeric
    );
    Ok(report.max_rel_error < tol)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let seed = |s: &Option<u64>| s.map(|v| v.to_string());
    match &cli.command {
        Command::GenScenes { count, seed: s, out } => gen_scenes(&resolve(cli, &[("seed", seed(s))])?, *count, out),
        Command::BuildDataset { input, out, seed: s } => build(&resolve(cli, &[("seed", seed(s))])?, input, out),
        Command::Stats { input } => stats(&resolve(cli, &[])?, input),
        Command::Train { shard, out, steps, seed: s, loss_csv } => {
            let cfg = resolve(cli, &[("seed", seed(s)), ("train.steps", steps.map(|v| v.to_string()))])?;
            run_train(&cfg, shard, out, loss_csv.as_deref())
        }
        Command::Decode { model, scene, object, bbox, prefix } => {
            decode(&resolve(cli, &[])?, model, *scene, *object, bbox.as_deref(), prefix)
        }
        Command::EvalLength(args) => eval_length(&resolve(cli, &[])?, args),
        Command::EvalRegion(args) => eval_region(&resolve(cli, &[])?, args),
        Command::EvalDense(args) => eval_dense(&resolve(cli, &[])?, args),
        Command::EvalPrefix(args) => {
            resolve(cli, &[])?;
            eval_prefix(args)
        }
        Command::Prompt(args) => run_prompt(&resolve(cli, &[])?, args),
        Command::GradCheck { seed: s, stride, tol } => {
            if grad_check(&resolve(cli, &[("seed", seed(s))])?, *stride, *tol)? {
                Ok(())
            } else {
                bail!("relative error above {tol}")
            }
        }
    }
}

fn stage(command: &Command) -> &'static str {
    match command {
        Command::GenScenes { .. } => "gen-scenes",
        Command::BuildDataset { .. } => "build-dataset",
        Command::Stats { .. } => "stats",
        Command::Train { .. } => "train",
        Command::Decode { .. } => "decode",
        Command::EvalLength(_) => "eval-length",
        Command::EvalRegion(_) => "eval-region",
        Command::EvalDense(_) => "eval-dense",
        Command::EvalPrefix(_) => "eval-prefix",
        Command::Prompt(_) => "prompt",
        Command::GradCheck { .. } => "grad-check",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("flexcap {}: bad configuration: {e}", stage(&cli.command));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("flexcap {} failed: {e:#}", stage(&cli.command));
            ExitCode::from(1)
        }
    }
}
