mod manifest;
mod plots;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ionop::dataset::{build_plan, generate, Dataset, NormStats, Split};
use ionop::fno::{ActivationKind, Checkpoint, CheckpointMeta, FnoConfig, Provenance, Variant};
use ionop::ionic::{ModelId, SolverOptions};
use ionop::train::{
    evaluate, mean_std, state_dim, History, Norm, Preset, Space, TrainConfig, TrainData, Trainer, PROJECTION_HIDDEN,
};
use ionop::tune::{run_search, Mode, SearchConfig, SearchSpace, DEFAULT_BUDGET};
use manifest::RunManifest;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ionop", version, about = "Fourier neural operator surrogates for ionic models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a sampling plan and write `<split>.ionds` files.
    GenData(GenDataArgs),
    /// Train a network on a generated dataset directory.
    Train(TrainArgs),
    /// Evaluate checkpoints on a dataset.
    Eval(EvalArgs),
    /// Random search with successive halving.
    Tune(TuneArgs),
    /// Render SVG plots from a history or evaluation CSV.
    ExportPlots(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// fhn, hh or ord.
    #[arg(long)]
    model: ModelId,
    /// Splits to generate; all three when omitted.
    #[arg(long, value_enum)]
    split: Vec<SplitArg>,
    /// Multiplier on the per-subset record counts.
    #[arg(long, default_value_t = 0.1)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-8)]
    atol: f64,
    #[arg(long, default_value_t = 256)]
    points: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train/val/test `.ionds` files.
    #[arg(long)]
    data: PathBuf,
    /// Named configuration, e.g. fhn-constrained.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Feed only the stimulus, without the t/T coordinate.
    #[arg(long)]
    no_coord_channel: bool,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    padding: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory; repeat to aggregate over seeds.
    #[arg(long = "model-ckpt", required = true)]
    model_ckpt: Vec<PathBuf>,
    /// Dataset file, or a directory containing `test.ionds`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Measure errors on physical rather than normalized values.
    #[arg(long)]
    physical: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Constrained,
    Unconstrained,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Full,
    Desk,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    model: ModelId,
    #[arg(long, default_value_t = 12)]
    trials: usize,
    #[arg(long, value_enum, default_value = "constrained")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; desk-scale data is generated into `<out>/data` when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated cumulative epoch counts.
    #[arg(long, value_delimiter = ',', default_value = "30,90,270")]
    rungs: Vec<usize>,
    /// Reduction factor between rungs.
    #[arg(long, default_value_t = 3)]
    eta: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    #[arg(long, value_enum, default_value = "full")]
    space: SpaceArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Continue from an existing results log in `<out>`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PlotSource {
    /// Training history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Per-sample evaluation CSV.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    source: PlotSource,
    #[arg(long)]
    out: PathBuf,
}

/// Network and optimizer settings of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    width: usize,
    depth: usize,
    modes: usize,
    activation: ActivationKind,
    padding: usize,
    variant: Variant,
    #[serde(default = "default_hidden")]
    projection_hidden: usize,
    lr: f64,
    weight_decay: f64,
    gamma: f64,
    #[serde(default = "default_period")]
    period: usize,
    #[serde(default = "default_batch")]
    batch_size: usize,
}

fn default_hidden() -> usize {
    PROJECTION_HIDDEN
}
fn default_period() -> usize {
    TrainConfig::default().period
}
fn default_batch() -> usize {
    TrainConfig::default().batch_size
}

impl RunConfig {
    fn from_preset(p: &Preset) -> Self {
        Self {
            width: p.width,
            depth: p.depth,
            modes: p.modes,
            activation: p.activation,
            padding: p.padding,
            variant: p.variant,
            projection_hidden: PROJECTION_HIDDEN,
            lr: p.lr,
            weight_decay: p.weight_decay,
            gamma: p.gamma,
            period: default_period(),
            batch_size: default_batch(),
        }
    }

    fn resolve(&self, in_channels: usize, out_channels: usize, epochs: usize, seed: u64) -> (FnoConfig, TrainConfig) {
        (
            FnoConfig {
                in_channels,
                out_channels,
                width: self.width,
                depth: self.depth,
                modes: self.modes,
                activation: self.activation,
                padding: self.padding,
                variant: self.variant,
                projection_hidden: self.projection_hidden,
            },
            TrainConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                gamma: self.gamma,
                period: self.period,
                epochs,
                batch_size: self.batch_size,
                seed,
                ..TrainConfig::default()
            },
        )
    }
}

fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.ionds"))
}

fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let p = split_path(dir, split);
    let ds = Dataset::load(&p).with_context(|| format!("reading {}", p.display()))?;
    if ds.split != split {
        bail!("{} holds the {} split", p.display(), ds.split);
    }
    Ok(ds)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let splits: Vec<Split> = if a.split.is_empty() {
        vec![Split::Train, Split::Val, Split::Test]
    } else {
        a.split.iter().map(|&s| s.into()).collect()
    };
    let opts = SolverOptions::with_tolerances(a.rtol, a.atol);
    for split in splits {
        let plan = build_plan(a.model, split).scaled(a.scale)?;
        let path = split_path(&a.out, split);
        let config = serde_json::json!({
            "model": a.model,
            "split": split,
            "scale": a.scale,
            "points": a.points,
            "rtol": a.rtol,
            "atol": a.atol,
            "plan": plan,
        });
        let m = RunManifest::begin(
            &a.out.join(format!("{split}.manifest.json")),
            "gen-data",
            config,
            vec![a.seed],
            vec![],
            vec![path.clone(), ionop::dataset::sidecar_path(&path)],
        )?;
        let ds = generate(&plan, a.seed, a.points, &opts)?;
        ds.save(&path)?;
        println!("{}: {} records -> {}", split, ds.len(), path.display());
        m.finish()?;
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let (tr, va, te) = (
        load_split(&a.data, Split::Train)?,
        load_split(&a.data, Split::Val)?,
        load_split(&a.data, Split::Test)?,
    );
    let mut run = match (&a.preset, &a.config) {
        (Some(name), None) => {
            let p = Preset::lookup(name)?;
            if p.model != tr.model {
                if p.model == ModelId::Ord {
                    p.resolve(1, 1, 0)?;
                }
                bail!("preset `{}` targets {}, but the data is {}", p.name, p.model, tr.model);
            }
            RunConfig::from_preset(p)
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        _ => unreachable!("clap enforces exactly one of --preset/--config"),
    };
    run.width = a.width.unwrap_or(run.width);
    run.depth = a.depth.unwrap_or(run.depth);
    run.modes = a.modes.unwrap_or(run.modes);
    run.padding = a.padding.unwrap_or(run.padding);
    run.batch_size = a.batch_size.unwrap_or(run.batch_size);
    run.lr = a.lr.unwrap_or(run.lr);

    let coord = !a.no_coord_channel;
    let in_ch = 1 + usize::from(coord);
    let (fno, tc) = run.resolve(in_ch, state_dim(tr.model), a.epochs, a.seed);
    fno.validate()?;
    tc.validate()?;

    let ckpt_dir = a.out.join("checkpoint");
    let m = RunManifest::begin(
        &a.out.join("manifest.json"),
        "train",
        serde_json::json!({ "run": run, "network": fno, "optimizer": tc, "coord_channel": coord }),
        vec![a.seed],
        vec![split_path(&a.data, Split::Train), split_path(&a.data, Split::Val), split_path(&a.data, Split::Test)],
        vec![
            ckpt_dir.clone(),
            a.out.join("final"),
            a.out.join("history.csv"),
            a.out.join("timing.csv"),
        ],
    )?;

    let stats = NormStats::from_train(&tr)?;
    let data = TrainData::from_datasets(&tr, &va, &te, &stats, coord)?;
    println!("training {} parameters for {} epochs", fno.param_count(), a.epochs);
    let mut trainer = Trainer::new(fno.clone(), tc, &data)?;
    let every = (a.epochs / 20).max(1);
    let outcome = trainer.run_until(a.epochs, |e| {
        if (e.epoch + 1) % every == 0 || e.epoch + 1 == a.epochs {
            println!(
                "epoch {:>5}  train {:.4e}  val {:.4e}  test L2 {:.4e}  H1 {:.4e}",
                e.epoch + 1,
                e.train_l2,
                e.val_l2,
                e.test_l2,
                e.test_h1
            );
        }
    });
    std::fs::create_dir_all(&a.out)?;
    trainer.history().write_csv(&a.out.join("history.csv"))?;
    std::fs::write(a.out.join("timing.csv"), trainer.history().timing_csv())?;
    if let Err(e) = outcome {
        if let ionop::Error::Diverged { last_good: Some(p), .. } = &e {
            let meta = CheckpointMeta::new(
                tr.model,
                tr.t_end,
                tr.n_points,
                coord,
                fno.clone(),
                stats.clone(),
                provenance(a.seed, trainer.epoch(), trainer.history()),
            );
            Checkpoint { meta, params: (**p).clone() }.save_dir(&a.out.join("last_good"))?;
        }
        return Err(e.into());
    }
    let fit = trainer.finish();
    let mut prov = provenance(a.seed, a.epochs, &fit.history);
    prov.best_epoch = fit.best_epoch;
    prov.best_val_loss = fit.best_val_l2;
    let meta = CheckpointMeta::new(tr.model, tr.t_end, tr.n_points, coord, fno, stats, prov);
    Checkpoint { meta: meta.clone(), params: fit.best_params }.save_dir(&ckpt_dir)?;
    Checkpoint { meta, params: fit.params }.save_dir(&a.out.join("final"))?;
    println!(
        "best validation L2 {:.4e} at epoch {}; checkpoint in {}",
        fit.best_val_l2,
        fit.best_epoch + 1,
        ckpt_dir.display()
    );
    m.finish()
}

fn provenance(seed: u64, epochs: usize, h: &History) -> Provenance {
    Provenance {
        seed,
        epochs,
        best_epoch: 0,
        final_train_loss: h.epochs.last().map_or(f64::NAN, |e| e.train_l2),
        best_val_loss: f64::NAN,
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let data_path = if a.data.is_dir() { split_path(&a.data, Split::Test) } else { a.data.clone() };
    let space = if a.physical { Space::Physical } else { Space::Normalized };
    let outputs: Vec<PathBuf> = if a.model_ckpt.len() == 1 {
        vec![a.out.join("samples.csv"), a.out.join("channels.csv"), a.out.join("summary.csv")]
    } else {
        vec![a.out.clone()]
    };
    let m = RunManifest::begin(
        &a.out.join("manifest.json"),
        "eval",
        serde_json::json!({ "space": space }),
        vec![],
        std::iter::once(data_path.clone()).chain(a.model_ckpt.iter().cloned()).collect(),
        outputs,
    )?;
    let ds = Dataset::load(&data_path).with_context(|| format!("reading {}", data_path.display()))?;
    let mut per_ckpt = Vec::new();
    for (k, dir) in a.model_ckpt.iter().enumerate() {
        let ckpt = Checkpoint::load_dir(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
        let report = evaluate(&ckpt, &ds, space)?;
        let dest = if a.model_ckpt.len() == 1 { a.out.clone() } else { a.out.join(format!("ckpt{k}")) };
        report.write(&dest)?;
        per_ckpt.push(report);
    }
    let mut summary = String::from("norm,mean,std,checkpoints\n");
    for norm in Norm::ALL {
        let means: Vec<f64> = per_ckpt.iter().map(|r| r.aggregate(norm).0).collect();
        let (mean, std) = if means.len() == 1 { per_ckpt[0].aggregate(norm) } else { mean_std(&means) };
        let _ = writeln!(summary, "{},{mean},{std},{}", norm.name(), means.len());
        println!("relative {:<2} {:.4e} +- {:.2e}", norm.name(), mean, std);
    }
    std::fs::write(a.out.join("summary.csv"), summary)?;
    m.finish()
}

fn tune(a: &TuneArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Constrained => Mode::Constrained { budget: a.budget },
        ModeArg::Unconstrained => Mode::Unconstrained,
    };
    let space = match a.space {
        SpaceArg::Full => SearchSpace::full(),
        SpaceArg::Desk => SearchSpace::desk(),
    };
    let search = SearchConfig {
        space,
        n_trials: a.trials,
        rungs: a.rungs.clone(),
        eta: a.eta,
        mode,
        seed: a.seed,
        batch_size: a.batch_size,
    };
    search.validate()?;
    let log = a.out.join("results.jsonl");
    if log.exists() && !a.resume {
        bail!("{} already exists; pass --resume to continue it", log.display());
    }
    let data_dir = a.data.clone().unwrap_or_else(|| a.out.join("data"));
    let m = RunManifest::begin(
        &a.out.join("manifest.json"),
        "tune",
        serde_json::to_value(&search)?,
        vec![a.seed],
        vec![data_dir.clone()],
        vec![log.clone(), a.out.join("leaderboard.csv"), a.out.join("timings.csv"), a.out.join("best")],
    )?;
    if a.data.is_none() {
        let missing = [Split::Train, Split::Val, Split::Test].into_iter().any(|s| !split_path(&data_dir, s).exists());
        if missing {
            let opts = SolverOptions::default();
            for split in [Split::Train, Split::Val, Split::Test] {
                let plan = build_plan(a.model, split).scaled(0.1)?;
                generate(&plan, a.seed, 256, &opts)?.save(&split_path(&data_dir, split))?;
            }
        }
    }
    let (tr, va, te) = (
        load_split(&data_dir, Split::Train)?,
        load_split(&data_dir, Split::Val)?,
        load_split(&data_dir, Split::Test)?,
    );
    if tr.model != a.model {
        bail!("--model {} but the data is {}", a.model, tr.model);
    }
    let stats = NormStats::from_train(&tr)?;
    let data = TrainData::from_datasets(&tr, &va, &te, &stats, true)?;
    let outcome = run_search(&search, &data, Some(&log))?;
    std::fs::write(a.out.join("leaderboard.csv"), outcome.leaderboard_csv())?;
    std::fs::write(a.out.join("timings.csv"), outcome.timings_csv())?;
    for (r, (n, t)) in outcome.per_rung.iter().zip(&outcome.trained_per_rung).enumerate() {
        println!("rung {} ({} epochs): {n} trials, {t} trained now", r + 1, search.rungs[r]);
    }
    match (outcome.best_trial(), &outcome.best_params) {
        (Some(best), Some(params)) => {
            let prov = Provenance {
                seed: best.seed,
                epochs: *search.rungs.last().unwrap(),
                best_epoch: search.rungs.last().unwrap() - 1,
                final_train_loss: f64::NAN,
                best_val_loss: best.last_val(),
            };
            let meta = CheckpointMeta::new(tr.model, tr.t_end, tr.n_points, true, best.config.clone(), stats, prov);
            Checkpoint { meta, params: params.clone() }.save_dir(&a.out.join("best"))?;
            println!("best trial {}: val L2 {:.4e}, {} parameters", best.id, best.last_val(), best.param_count);
        }
        (Some(best), None) => println!("best trial {} (replayed from the log): val L2 {:.4e}", best.id, best.last_val()),
        _ => println!("no trial completed the final rung"),
    }
    m.finish()
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| anyhow!("{} is empty", path.display()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let rows = lines.map(|l| l.split(',').map(|s| s.trim().to_string()).collect()).collect();
    Ok((header, rows))
}

fn export_plots(a: &PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    if let Some(path) = &a.source.history {
        let h = History::from_csv(&std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?;
        let pick = |name: &str, f: fn(&ionop::train::EpochRecord) -> f64| plots::Series {
            name: name.into(),
            points: h.epochs.iter().map(|e| ((e.epoch + 1) as f64, f(e))).collect(),
        };
        let series = [
            pick("train L2", |e| e.train_l2),
            pick("test L1", |e| e.test_l1),
            pick("test L2", |e| e.test_l2),
            pick("test H1", |e| e.test_h1),
        ];
        let mut csv = String::from("epoch,train_l2,test_l1,test_l2,test_h1\n");
        for e in &h.epochs {
            let _ = writeln!(csv, "{},{},{},{},{}", e.epoch + 1, e.train_l2, e.test_l1, e.test_l2, e.test_h1);
        }
        std::fs::write(a.out.join("loss_curves.csv"), csv)?;
        std::fs::write(a.out.join("loss_curves.svg"), plots::line_plot("Relative errors", "epoch", &series))?;
        println!("wrote loss_curves.svg and loss_curves.csv to {}", a.out.display());
    }
    if let Some(path) = &a.source.eval {
        let (header, rows) = read_csv(path)?;
        let cols: Vec<usize> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| matches!(h.as_str(), "l1" | "l2" | "h1") || h.starts_with("l2_"))
            .map(|(i, _)| i)
            .collect();
        if cols.is_empty() {
            bail!("{} has no error columns", path.display());
        }
        let groups: Vec<(String, Vec<f64>)> = cols
            .iter()
            .map(|&c| {
                let v = rows.iter().filter_map(|r| r.get(c).and_then(|s| s.parse::<f64>().ok())).collect();
                (header[c].clone(), v)
            })
            .collect();
        let mut csv = String::from("series,min,q1,median,q3,max,count\n");
        for (name, v) in &groups {
            match plots::quartiles(v) {
                Some(q) => {
                    let _ = writeln!(csv, "{name},{},{},{},{},{},{}", q[0], q[1], q[2], q[3], q[4], v.len());
                }
                None => {
                    let _ = writeln!(csv, "{name},,,,,,0");
                }
            }
        }
        let (norms, channels): (Vec<_>, Vec<_>) = groups.into_iter().partition(|(n, _)| !n.starts_with("l2_"));
        std::fs::write(a.out.join("error_boxes.csv"), csv)?;
        std::fs::write(a.out.join("norm_boxes.svg"), plots::box_plot("Relative error per norm", &norms))?;
        if !channels.is_empty() {
            std::fs::write(a.out.join("channel_boxes.svg"), plots::box_plot("Relative L2 per channel", &channels))?;
        }
        println!("wrote box plots and error_boxes.csv to {}", a.out.display());
    }
    Ok(())
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("IONOP_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("IONOP_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Tune(a) => tune(a),
        Command::ExportPlots(a) => export_plots(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
