//! `hseg`: generate data, train, evaluate and run hierarchical segmentation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hseg_core::checkpoint::Checkpoint;
use hseg_core::experiment::{ab_compare, box_vs_dense};
use hseg_core::error::HierarchyError;
use hseg_core::hierarchy::{parse_hierarchy, LabelHierarchy, NodeId};
use hseg_core::inference::{argmax_channels, compose, decide, default_palette, export, format_histogram, Detail, Segmentation};
use hseg_core::metrics::ClassFilter;
use hseg_core::network::Network;
use hseg_core::synth::{load_ppm, load_split, write_corpus, CorpusSplit, DatasetSpec, Split};
use hseg_core::training::{class_counts, evaluate, prepare_eval, prepare_hierarchy, train, Mode, PixelTargets, TrainConfig};
use hseg_core::{Error, Result};
use hseg_tensor::Tensor;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "hseg", version, about = "Hierarchical semantic segmentation over heterogeneous datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic train and validation splits for dataset specs.
    GenData(GenData),
    /// Print the tree, classifiers, bindings and validation report.
    InspectHierarchy(Inspect),
    /// Print the network architecture for a hierarchy or checkpoint.
    Describe(Describe),
    /// Train a hierarchical or flat network.
    Train(Train),
    /// Score a checkpoint on dense validation data.
    Eval(Eval),
    /// Segment images with a checkpoint.
    Infer(Infer),
    /// Scripted multi-run comparisons.
    #[command(subcommand)]
    Experiment(Experiment),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    hierarchy: PathBuf,
    /// Dataset spec file; repeat for several datasets.
    #[arg(long = "spec", required = true)]
    specs: Vec<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Inspect {
    hierarchy: PathBuf,
    /// Dataset spec to bind and validate against; repeatable.
    #[arg(long = "spec")]
    specs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct Describe {
    #[arg(long, conflicts_with = "hierarchy")]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "checkpoint")]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct TrainOverrides {
    /// Training config (TOML); flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    steps: Option<usize>,
    /// Samples per dataset in each batch, in `--data` order.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<usize>>,
    #[arg(long)]
    eval_every: Option<usize>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_toml(&read(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(r) = &self.ratios {
            cfg.ratios = r.clone();
        }
        if let Some(e) = self.eval_every {
            cfg.eval_every = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    hierarchy: PathBuf,
    /// Dataset directory written by `gen-data`; repeatable.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directories whose validation split is scored.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Training data for the evaluated-class filter; defaults to `--data`.
    #[arg(long = "train-data")]
    train_data: Vec<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [48, 48])]
    crop: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    min_pixels: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Infer {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stop at this hierarchy level.
    #[arg(long, conflicts_with = "finest", required_unless_present = "finest")]
    level: Option<usize>,
    /// Follow decisions down to the leaves.
    #[arg(long)]
    finest: bool,
    /// Portable anymap images.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Experiment {
    /// Flat versus hierarchical heads on the same data over several seeds.
    AbCompare(AbCompare),
    /// Box versus dense supervision of the deepest classifiers.
    BoxVsDense(BoxVsDense),
}

#[derive(Args, Debug)]
struct AbCompare {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct BoxVsDense {
    #[arg(long)]
    hierarchy: PathBuf,
    /// Spec with box-annotated fine labels (`mixed` or `bbox`).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    corpus_seed: u64,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Everything needed to rerun a command.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    arguments: Vec<String>,
    seed: Option<u64>,
    config: Option<&'a TrainConfig>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        context: format!("reading {}", path.display()),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            context: format!("creating {}", dir.display()),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::Io {
        context: format!("writing {}", path.display()),
        source,
    })
}

fn write_manifest(dir: &Path, command: &str, seed: Option<u64>, config: Option<&TrainConfig>) -> Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        arguments: std::env::args().skip(1).collect(),
        seed,
        config,
    };
    write(&dir.join("manifest.toml"), &toml::to_string(&m).expect("manifest serializes"))
}

fn load_hierarchy(path: &Path) -> Result<LabelHierarchy> {
    Ok(parse_hierarchy(&read(path)?)?)
}

fn load_spec(path: &Path) -> Result<DatasetSpec> {
    Ok(DatasetSpec::from_toml(&read(path)?)?)
}

fn load_splits(dirs: &[PathBuf], split: Split) -> Result<Vec<CorpusSplit>> {
    dirs.iter().map(|d| load_split(d, split)).collect()
}

fn gen_data(a: &GenData) -> Result<()> {
    let mut h = load_hierarchy(&a.hierarchy)?;
    let specs = a.specs.iter().map(|p| load_spec(p)).collect::<Result<Vec<_>>>()?;
    for s in &specs {
        s.bind(&mut h)?;
    }
    for s in &specs {
        let dir = write_corpus(&a.out, s, &h, a.seed)?;
        println!("{}: {} train + {} val images -> {}", s.name, s.image_count, s.val_count, dir.display());
    }
    write_manifest(&a.out, "gen-data", Some(a.seed), None)
}

fn inspect(a: &Inspect) -> Result<()> {
    let mut h = load_hierarchy(&a.hierarchy)?;
    let specs = a.specs.iter().map(|p| load_spec(p)).collect::<Result<Vec<_>>>()?;
    for s in &specs {
        s.bind(&mut h)?;
    }
    print!("{}", h.describe());
    if !specs.is_empty() {
        let annotations: Vec<_> = specs.iter().map(DatasetSpec::annotations).collect();
        let report = h.validate(&annotations);
        for (j, by_ds) in &report.supervision {
            let parts: Vec<String> = by_ds
                .iter()
                .map(|(ds, kinds)| format!("{ds} ({})", kinds.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")))
                .collect();
            println!("{j} `{}` supervised by {}", h.name(h.classifier(*j).node), parts.join("; "));
        }
        for i in &report.issues {
            println!("issue: {i}");
        }
        report.into_result()?;
        println!("valid");
    }
    Ok(())
}

fn describe(a: &Describe) -> Result<()> {
    let net = match (&a.checkpoint, &a.hierarchy) {
        (Some(c), _) => Checkpoint::load(c)?.network,
        (None, Some(h)) => {
            let cfg = match &a.config {
                Some(p) => TrainConfig::from_toml(&read(p)?)?,
                None => TrainConfig::default(),
            };
            Network::build(&load_hierarchy(h)?, &cfg.network, 0)?
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    print!("{}", net.describe());
    Ok(())
}

fn run_train(a: &Train) -> Result<()> {
    let cfg = TrainConfig {
        seed: a.seed,
        ..a.overrides.resolve()?
    };
    let h = load_hierarchy(&a.hierarchy)?;
    let train_set = load_splits(&a.data, Split::Train)?;
    let val = load_splits(&a.data, Split::Val)?;
    let out = train(&h, &train_set, &val, &cfg)?;
    write(&a.out.join("metrics.log"), &out.log.render())?;
    Checkpoint::new(out.network, out.hierarchy, out.flat, Some(&out.optimizer), out.steps_run)
        .save(&a.out.join("checkpoint.hseg"))?;
    write(&a.out.join("train.toml"), &cfg.to_toml())?;
    write_manifest(&a.out, "train", Some(cfg.seed), Some(&cfg))?;
    for l in &out.final_levels {
        println!("L{}: mPA {:.4}  mIoU {:.4}", l.level, l.mpa, l.miou);
    }
    println!("{} steps -> {}", out.steps_run, a.out.display());
    Ok(())
}

fn run_eval(a: &Eval) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut net = ck.network;
    let h = ck.hierarchy;
    let val = load_splits(&a.data, Split::Val)?;
    let crop = [a.crop[0], a.crop[1]];
    let batches = prepare_eval(&h, &val, crop, 4)?;
    let counts = if a.train_data.is_empty() {
        let targets: Vec<PixelTargets> = batches.iter().map(|b| b.targets.clone()).collect();
        class_counts(&h, &targets)
    } else {
        let train_set = load_splits(&a.train_data, Split::Train)?;
        let targets = prepare_eval(&h, &train_set, crop, 4)?.into_iter().map(|b| b.targets).collect::<Vec<_>>();
        class_counts(&h, &targets)
    };
    let filter = ClassFilter {
        threshold: a.min_pixels,
        ..ClassFilter::default()
    };
    let report = evaluate(&mut net, &h, ck.flat.as_ref(), &batches, &counts, filter)?;
    let mut text = String::new();
    let mut lines = String::new();
    for (c, s) in h.classifiers().iter().zip(&report.classifiers) {
        let Some(s) = s else { continue };
        let name = |k: usize| h.name(c.classes[k]).to_string();
        text += &format!("{} `{}` (L{})\n{}\n", c.id, h.name(c.node), c.level, s.to_table(name));
        lines += &s.to_lines(name);
    }
    for l in &report.levels {
        text += &format!("L{}: mPA {:.4}  mIoU {:.4}\n", l.level, l.mpa, l.miou);
    }
    print!("{text}");
    if let Some(dir) = &a.out {
        write(&dir.join("eval.txt"), &text)?;
        write(&dir.join("scores.csv"), &lines)?;
        write_manifest(dir, "eval", None, None)?;
    }
    Ok(())
}

/// Segmentation of a flat network: the argmax class, truncated to a level.
fn flat_segmentation(h: &LabelHierarchy, classes: &[NodeId], probs: &Tensor, detail: Detail) -> Result<Segmentation> {
    let (n, _, height, width) = probs.dims4()?;
    if let Detail::Level(l) = detail {
        if l == 0 || l > h.depth() {
            return Err(HierarchyError::LevelTooDeep { requested: l, depth: h.depth() }.into());
        }
    }
    let nodes = argmax_channels(probs)
        .into_iter()
        .map(|k| {
            // the extra unlabeled class maps to the root
            let node = classes.get(k as usize).copied().unwrap_or(h.root());
            match detail {
                Detail::Finest => node,
                Detail::Level(l) => h.ancestor_at_level(node, l).unwrap_or(node),
            }
        })
        .collect();
    Ok(Segmentation {
        images: n,
        height,
        width,
        nodes,
    })
}

fn run_infer(a: &Infer) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut net = ck.network;
    let h = ck.hierarchy;
    let detail = match a.level {
        Some(l) => Detail::Level(l),
        None => Detail::Finest,
    };
    let palette = default_palette(&h);
    let stride = net.cfg.output_stride;
    for path in &a.images {
        let img = load_ppm(path)?;
        // trim to a multiple of the output stride
        let (th, tw) = (img.height / stride * stride, img.width / stride * stride);
        if th == 0 || tw == 0 {
            return Err(Error::Config(format!("{} is smaller than the output stride {stride}", path.display())));
        }
        let mut data = Vec::with_capacity(3 * th * tw);
        for c in 0..3 {
            for y in 0..th {
                for x in 0..tw {
                    data.push(img.get(c, y, x));
                }
            }
        }
        let input = Tensor::new(&[1, 3, th, tw], data)?;
        let probs = net.predict(&input)?;
        let seg = match &ck.flat {
            Some(f) => flat_segmentation(&h, &f.classes, &probs[0], detail)?,
            None => compose(&decide(&h, &probs)?, &h, detail)?,
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let (written, hist) = export(&seg, 0, &palette, &a.out, stem)?;
        println!("{} -> {}", path.display(), written.display());
        print!("{}", format_histogram(&h, &hist));
    }
    write_manifest(&a.out, "infer", None, None)
}

fn seeds(n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    Ok((0..n).collect())
}

fn run_experiment(e: &Experiment) -> Result<()> {
    match e {
        Experiment::AbCompare(a) => {
            let cfg = a.overrides.resolve()?;
            let h = load_hierarchy(&a.hierarchy)?;
            let train_set = load_splits(&a.data, Split::Train)?;
            let val = load_splits(&a.data, Split::Val)?;
            // fail on an invalid setup before the first run
            prepare_hierarchy(&h, &train_set)?;
            let cmp = ab_compare(&h, &train_set, &val, &cfg, &seeds(a.seeds)?)?;
            let mut table = cmp.to_table();
            for level in 1..=h.depth() {
                if let Some(g) = cmp.mpa_gain(level) {
                    table += &format!("L{level} mPA gain hier - flat: {:+.2}\n", 100.0 * g);
                }
            }
            print!("{table}");
            write(&a.out.join("summary.txt"), &table)?;
            write_manifest(&a.out, "experiment ab-compare", None, Some(&cfg))
        }
        Experiment::BoxVsDense(a) => {
            let cfg = a.overrides.resolve()?;
            let h = load_hierarchy(&a.hierarchy)?;
            let spec = load_spec(&a.spec)?;
            let cmp = box_vs_dense(&h, &spec, a.corpus_seed, &cfg, &seeds(a.seeds)?)?;
            let table = cmp.to_table();
            print!("{table}");
            write(&a.out.join("summary.txt"), &table)?;
            write_manifest(&a.out, "experiment box-vs-dense", Some(a.corpus_seed), Some(&cfg))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::InspectHierarchy(a) => inspect(a),
        Command::Describe(a) => describe(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Experiment(e) => run_experiment(e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
