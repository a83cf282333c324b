use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use terragen::diffusion::{
    ddim_sample, from_pixels, to_pixels, train, Model, SampleConfig, TrainConfig, TrainOptions, TrainSample,
};
use terragen::eval::{layout_consistency_report, schedule_from_meta, EvalConfig};
use terragen::layout::{read_layout, transform_layout, validate, write_layout, GeoTransform, Layout};
use terragen::synthdata::{read_dataset, write_dataset, DatasetConfig, Split};

const SEED_ENV: &str = "TERRAGEN_SEED";
const RUN_FILE: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "terragen", version, about = "Layout-conditioned multi-task image diffusion")]
struct Cli {
    /// Root for every relative path.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// JSON config for the subcommand (or a previous run.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; falls back to $TERRAGEN_SEED, then the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted config override, e.g. `--set model.unet.base_channels=16`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus.
    GenData {
        #[arg(long, default_value = "data")]
        dest: PathBuf,
    },
    /// Check layouts for overlaps, broken roads and task conflicts.
    Validate(Source),
    /// Write N seeded geometric variants of every layout.
    Augment {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 2)]
        multiple: usize,
        #[arg(long, default_value = "augmented")]
        dest: PathBuf,
    },
    /// Two-stage training on the train split.
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        dest: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Generate images for a layout file or a manifest split.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "samples")]
        dest: PathBuf,
    },
    /// Layout-consistency and distribution report on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        dest: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct Source {
    /// A single layout JSON file.
    #[arg(long, conflicts_with = "data")]
    layout: Option<PathBuf>,
    /// Dataset root holding manifest.json.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Manifest split to read; all splits when absent.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
}

impl Cli {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn seed(&self) -> anyhow::Result<Option<u64>> {
        if let Some(s) = self.seed {
            return Ok(Some(s));
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an integer"))?)),
            Err(_) => Ok(None),
        }
    }

    /// Default config, then the config file, then `--set` overrides, then the seed.
    fn resolve<T: Serialize + DeserializeOwned + Default>(&self, seed_key: &str) -> anyhow::Result<T> {
        let mut value = serde_json::to_value(T::default())?;
        if let Some(path) = &self.config {
            let path = self.path(path);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let mut file: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if file.get("command").is_some() {
                file = file.get("config").cloned().unwrap_or(Value::Null);
            }
            merge(&mut value, file);
        }
        for o in &self.overrides {
            let (key, raw) = o.split_once('=').with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, v)?;
        }
        if let Some(seed) = self.seed()? {
            set_path(&mut value, seed_key, Value::from(seed))?;
        }
        serde_json::from_value(value).context("config does not match the expected schema")
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> anyhow::Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part).with_context(|| format!("unknown config key {key:?}"))?,
            _ => bail!("config key {key:?} descends into a non-object"),
        };
    }
    *cur = v;
    Ok(())
}

fn write_run(dir: &Path, command: &str, config: &impl Serialize, args: Value) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let doc = serde_json::json!({ "command": command, "config": config, "args": args });
    std::fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    Split::ALL.into_iter().find(|x| x.name() == s).with_context(|| format!("unknown split {s:?} (train, val, test)"))
}

/// (name, layout) pairs from a layout file or a manifest.
fn load_layouts(cli: &Cli, src: &Source) -> anyhow::Result<Vec<(String, Layout)>> {
    let mut out = Vec::new();
    match (&src.layout, &src.data) {
        (Some(file), _) => {
            let path = cli.path(file);
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("layout").to_string();
            out.push((name, read_layout(&path)?));
        }
        (None, Some(data)) => {
            let manifest = read_dataset(&cli.path(data))?;
            let split = src.split.as_deref().map(parse_split).transpose()?;
            for rec in manifest.records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
                let layout = read_layout(&manifest.root.join(&rec.layout)).with_context(|| format!("sample {}", rec.id))?;
                out.push((rec.id.clone(), layout));
            }
        }
        (None, None) => bail!("pass --layout FILE or --data DIR"),
    }
    if let Some(n) = src.limit {
        out.truncate(n);
    }
    Ok(out)
}

fn source_args(src: &Source) -> Value {
    serde_json::json!({ "layout": src.layout, "data": src.data, "split": src.split, "limit": src.limit })
}

fn random_transform(rng: &mut ChaCha8Rng) -> GeoTransform {
    match rng.gen_range(0..5) {
        0 => GeoTransform::FlipHorizontal,
        1 => GeoTransform::FlipVertical,
        2 => GeoTransform::Rotate([90, 180, 270][rng.gen_range(0..3)]),
        3 => GeoTransform::Scale(rng.gen_range(0.75..1.25)),
        _ => GeoTransform::Shear(rng.gen_range(-0.2..0.2)),
    }
}

#[derive(Serialize, serde::Deserialize, Default)]
#[serde(default)]
struct AugmentConfig {
    seed: u64,
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::GenData { dest } => {
            let cfg: DatasetConfig = cli.resolve("seed")?;
            let root = cli.path(dest);
            let manifest = write_dataset(&root, &cfg)?;
            write_run(&root, "gen-data", &cfg, serde_json::json!({ "dest": dest }))?;
            println!("wrote {} samples to {} (spec hash {})", manifest.records.len(), root.display(), manifest.spec_hash);
        }
        Command::Validate(src) => {
            let layouts = load_layouts(cli, src)?;
            let mut n_issues = 0;
            println!("{:<24} {:<18} detail", "sample", "issue");
            for (name, layout) in &layouts {
                for issue in validate(layout) {
                    n_issues += 1;
                    println!("{name:<24} {:<18} {}", issue.kind(), serde_json::to_string(&issue)?);
                }
            }
            println!("{} layouts, {n_issues} issues", layouts.len());
            write_run(&cli.out, "validate", &Value::Null, source_args(src))?;
            return Ok(n_issues == 0);
        }
        Command::Augment { source, multiple, dest } => {
            if *multiple == 0 {
                bail!("--multiple must be at least 1");
            }
            let cfg: AugmentConfig = cli.resolve("seed")?;
            let layouts = load_layouts(cli, source)?;
            let dir = cli.path(dest);
            std::fs::create_dir_all(&dir)?;
            let mut written = 0;
            for (i, (name, layout)) in layouts.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                for k in 0..*multiple {
                    let out = if k == 0 {
                        layout.clone()
                    } else {
                        let mut pick = None;
                        for _ in 0..16 {
                            let t = random_transform(&mut rng);
                            let cand = transform_layout(layout, t)?;
                            if validate(&cand).is_empty() {
                                pick = Some(cand);
                                break;
                            }
                        }
                        // Flips never create new issues.
                        match pick {
                            Some(l) => l,
                            None => transform_layout(layout, GeoTransform::FlipHorizontal)?,
                        }
                    };
                    write_layout(&dir.join(format!("{name}_x{k}.json")), &out)?;
                    written += 1;
                }
            }
            write_run(&dir, "augment", &cfg, serde_json::json!({ "source": source_args(source), "multiple": multiple }))?;
            println!("wrote {written} layouts to {}", dir.display());
        }
        Command::Train { data, dest, resume, stop_after } => {
            let cfg: TrainConfig = cli.resolve("seed")?;
            let manifest = read_dataset(&cli.path(data))?;
            let mut samples = Vec::new();
            for s in manifest.load_split(Split::Train)? {
                let (w, h) = s.image.dimensions();
                let image = from_pixels(s.image.as_raw(), 3, h as usize, w as usize)?;
                samples.push(TrainSample { image, layout: s.layout });
            }
            let out_dir = cli.path(dest);
            write_run(&out_dir, "train", &cfg, serde_json::json!({ "data": data, "dest": dest }))?;
            let opts = TrainOptions { out_dir, resume_from: resume.as_ref().map(|p| cli.path(p)), stop_after: *stop_after };
            let every = (cfg.total_steps() / 50).max(1);
            let summary = train(&cfg, &samples, &opts, &mut |log| {
                if log.step % every == 0 || log.step == 1 {
                    eprintln!("step {:>6}  stage {}  loss {:.5}  lr {:.2e}", log.step, log.stage, log.loss, log.lr);
                }
            })?;
            println!("trained {} steps, checkpoint {}", summary.steps_done, summary.checkpoint.display());
        }
        Command::Sample { checkpoint, source, dest } => {
            let cfg: SampleConfig = cli.resolve("seed")?;
            let ckpt = cli.path(checkpoint);
            let (model, _, meta) = Model::load(&ckpt)?;
            let schedule = schedule_from_meta(&meta)?;
            let layouts = load_layouts(cli, source)?;
            let dir = cli.path(dest);
            std::fs::create_dir_all(&dir)?;
            let [c, h, w] = model.image_shape();
            for (i, (name, layout)) in layouts.iter().enumerate() {
                let per = SampleConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
                let x = ddim_sample(&model, &schedule, layout, &per)?;
                let px = to_pixels(&x);
                let path = dir.join(format!("{name}.png"));
                let color = match c {
                    1 => image::ExtendedColorType::L8,
                    3 => image::ExtendedColorType::Rgb8,
                    other => bail!("cannot write {other}-channel images"),
                };
                image::save_buffer(&path, &px, w as u32, h as u32, color)?;
            }
            write_run(&dir, "sample", &cfg, serde_json::json!({ "checkpoint": checkpoint, "source": source_args(source) }))?;
            println!("wrote {} images to {}", layouts.len(), dir.display());
        }
        Command::Eval { checkpoint, data, dest } => {
            let cfg: EvalConfig = cli.resolve("sample.seed")?;
            let manifest = read_dataset(&cli.path(data))?;
            let report = layout_consistency_report(&cli.path(checkpoint), &manifest, &cfg)?;
            let dir = cli.path(dest);
            write_run(&dir, "eval", &cfg, serde_json::json!({ "checkpoint": checkpoint, "data": data }))?;
            std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            std::fs::write(dir.join("summary.csv"), report.csv_summary())?;
            print!("{}", report.csv_summary());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
