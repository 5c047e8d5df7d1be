//! Command-line front end: `synth`, `train`, `predict`, `eval`, `gradcheck`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{op_suite, Checkpoint, SoftmaxMode, FD_STEP};
use crate::error::{Error, Result};
use crate::eval::{csv_report, error_map, metrics, text_report, ConfusionMatrix};
use crate::model::{Dapnet, Mode, ModelConfig, Strategy};
use crate::pipeline::{
    block_partition, coverage_samples, normalize_block, read_pts, sample_fixed, tile_partition, write_pts,
    LabelScatter, PipelineConfig, PointRecord, PtsFile,
};
use crate::synth::{generate, SceneClass, SceneSpec};
use crate::train::{train_loop, AdamConfig, TrainConfig};

/// Environment variable naming the directory that holds training runs.
pub const RUN_ROOT_ENV: &str = "DAPNET_RUN_ROOT";
const DEFAULT_RUN_ROOT: &str = "runs";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

/// Every setting a training or prediction run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: Scale,
    pub strategy: String,
    pub softmax_mode: SoftmaxMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub block_size: f64,
    pub stride: f64,
    pub min_points: usize,
    pub sample_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 1,
            scale: Scale::Desk,
            strategy: "PGM".into(),
            softmax_mode: SoftmaxMode::Row,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_initial: t.lr_initial,
            lr_final: t.lr_final,
            weight_decay: t.adam.weight_decay,
            block_size: p.block_size,
            stride: p.stride,
            min_points: p.min_points,
            sample_points: p.sample_points,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn strategy(&self) -> Result<Strategy> {
        Strategy::parse(&self.strategy).ok_or_else(|| Error::Config(format!("unknown strategy `{}`", self.strategy)))
    }

    pub fn model_config(&self, class_names: Vec<String>) -> Result<ModelConfig> {
        let c = class_names.len();
        let mut cfg = match self.scale {
            Scale::Desk => ModelConfig::desk(c),
            Scale::Full => ModelConfig::full(c),
        }
        .with_strategy(self.strategy()?);
        cfg.softmax_mode = self.softmax_mode;
        cfg.class_names = class_names;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_initial: self.lr_initial,
            lr_final: self.lr_final,
            adam: AdamConfig {
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dapnet", version, about = "Point-cloud labeling with double self-attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override values from `--config`.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML file with run settings; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub scale: Option<Scale>,
    /// BASE, P, G, M, PM, GM, PG or PGM.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long, value_parser = parse_softmax)]
    pub softmax_mode: Option<SoftmaxMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub block_size: Option<f64>,
    #[arg(long)]
    pub stride: Option<f64>,
    #[arg(long)]
    pub min_points: Option<usize>,
    #[arg(long)]
    pub sample_points: Option<usize>,
}

fn parse_softmax(s: &str) -> std::result::Result<SoftmaxMode, String> {
    match s {
        "row" => Ok(SoftmaxMode::Row),
        "global" => Ok(SoftmaxMode::Global),
        _ => Err(format!("expected `row` or `global`, got `{s}`")),
    }
}

impl Overrides {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    c.$f = v;
                }
            )*};
        }
        take!(
            seed,
            scale,
            strategy,
            softmax_mode,
            epochs,
            batch_size,
            lr_initial,
            lr_final,
            weight_decay,
            block_size,
            stride,
            min_points,
            sample_points
        );
        c.strategy()?;
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled scene as a `.pts` file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32.0)]
        extent: f64,
        /// Points per square meter of surface.
        #[arg(long, default_value_t = 3.0)]
        density: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Comma-separated subset of ground, roof, facade, tree, car, powerline.
        #[arg(long, default_value = "ground,roof,tree,car")]
        classes: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train on a labelled `.pts` file; the run directory is created under $DAPNET_RUN_ROOT.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory name (default `<strategy>-seed<seed>`).
        #[arg(long)]
        run_name: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Label every point of a `.pts` file with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score predictions against reference labels.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        /// Prediction file; its last column is taken as the predicted label.
        #[arg(long)]
        prediction: PathBuf,
        /// Directory for `report.txt` and `metrics.csv`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Write the reference points with predicted and 0/1 mismatch columns.
        #[arg(long)]
        error_map: Option<PathBuf>,
    },
    /// Finite-difference checks of every operation and of the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also check the desk-scale model on a 1024-point sample.
        #[arg(long)]
        desk: bool,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 3)]
        per_param: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn require_file(path: &Path) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Synth {
            out,
            extent,
            density,
            noise,
            classes,
            seed,
        } => {
            let classes = classes
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| SceneClass::parse(s).ok_or_else(|| Failure::Usage(format!("unknown class `{s}`"))))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let scene = generate(&SceneSpec {
                extent,
                classes,
                density,
                noise,
                seed,
            })?;
            write_pts(&out, &scene.records, Some(&scene.class_names), &[])?;
            println!(
                "wrote {} points ({}) to {}",
                scene.records.len(),
                scene.class_names.join(", "),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            run_name,
            overrides,
        } => {
            require_file(&data)?;
            let config = overrides.resolve()?;
            let dir = run_root().join(run_name.unwrap_or_else(|| format!("{}-seed{}", config.strategy, config.seed)));
            let summary = train_command(&data, &config, &dir)?;
            println!("{summary}");
            Ok(())
        }
        Command::Predict {
            checkpoint,
            input,
            out,
            overrides,
        } => {
            require_file(&checkpoint)?;
            require_file(&input)?;
            let config = overrides.resolve()?;
            let n = predict_command(&checkpoint, &input, &out, &config)?;
            println!("labelled {n} points into {}", out.display());
            Ok(())
        }
        Command::Eval {
            reference,
            prediction,
            out_dir,
            error_map,
        } => {
            require_file(&reference)?;
            require_file(&prediction)?;
            let report = eval_command(&reference, &prediction, out_dir.as_deref(), error_map.as_deref())?;
            print!("{report}");
            Ok(())
        }
        Command::Gradcheck {
            seed,
            desk,
            per_param,
            tolerance,
        } => {
            if gradcheck_command(seed, desk, per_param, tolerance)? {
                Ok(())
            } else {
                Err(Failure::Runtime(Error::InvalidArgument(format!(
                    "gradient check exceeded tolerance {tolerance}"
                ))))
            }
        }
    }
}

fn class_names_of(file: &PtsFile) -> Result<Vec<String>> {
    if let Some(names) = &file.class_names {
        return Ok(names.clone());
    }
    let max = file
        .records
        .iter()
        .filter_map(|r| r.label)
        .max()
        .ok_or(Error::Empty("labelled points"))?;
    Ok((0..=max).map(|i| i.to_string()).collect())
}

#[derive(Serialize)]
struct Snapshot<'a> {
    data: String,
    #[serde(flatten)]
    config: &'a RunConfig,
}

/// Trains into `dir` and returns a one-paragraph summary.
pub fn train_command(data: &Path, config: &RunConfig, dir: &Path) -> Result<String> {
    let file = read_pts(data)?;
    if let Some(i) = file.records.iter().position(|r| r.label.is_none()) {
        return Err(Error::InvalidArgument(format!("training point {i} has no label")));
    }
    let names = class_names_of(&file)?;
    let model_config = config.model_config(names)?;
    if let Some((i, l)) = file
        .records
        .iter()
        .enumerate()
        .find_map(|(i, r)| r.label.filter(|&l| l >= model_config.num_classes).map(|l| (i, l)))
    {
        return Err(Error::LabelOutOfRange {
            index: i,
            label: l,
            classes: model_config.num_classes,
        });
    }
    let blocks = block_partition(&file.records, config.block_size, config.stride, config.min_points, true)?
        .iter()
        .map(normalize_block)
        .collect::<Result<Vec<_>>>()?;
    if blocks.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {} m window holds {} points; lower min_points",
            config.block_size, config.min_points
        )));
    }
    fs::create_dir_all(dir)?;
    let snapshot = Snapshot {
        data: data.display().to_string(),
        config,
    };
    fs::write(
        dir.join("config.toml"),
        toml::to_string(&snapshot).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    let model = Dapnet::new(model_config, config.seed)?;
    let outcome = train_loop(
        &blocks,
        model,
        &config.train_config(),
        config.sample_points,
        config.seed,
        Some(dir),
    )?;
    let mut summary = format!("run directory {}\nblocks {}\n", dir.display(), blocks.len());
    if let Some(last) = outcome.log.last() {
        summary += &format!(
            "epochs {}  final loss {:.4}  train OA {:.1}%  best epoch {}",
            last.epoch,
            last.loss,
            100.0 * last.train_oa,
            outcome.best_epoch
        );
    } else {
        summary += "no epochs run";
    }
    Ok(summary)
}

/// Labels every point of `input` and returns the number written.
pub fn predict_command(checkpoint: &Path, input: &Path, out: &Path, config: &RunConfig) -> Result<usize> {
    let model = Dapnet::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let file = read_pts(input)?;
    let labels = predict_points(&model, &file, config)?;
    let names = model.config().class_names.clone();
    let names = (!names.is_empty()).then_some(names);
    write_pts(out, &file.records, names.as_deref(), &[labels])?;
    Ok(file.records.len())
}

/// Predicted label of every point of `file`, in input order.
pub fn predict_points(model: &Dapnet, file: &PtsFile, config: &RunConfig) -> Result<Vec<usize>> {
    let classes = model.config().num_classes;
    if let Some(names) = &file.class_names {
        if names.len() != classes {
            return Err(Error::ConfigMismatch(format!(
                "input declares {} classes ({}) but the checkpoint was trained for {classes}",
                names.len(),
                names.join(", ")
            )));
        }
    }
    if let Some(l) = file.records.iter().filter_map(|r| r.label).find(|&l| l >= classes) {
        return Err(Error::ConfigMismatch(format!(
            "input carries label {l} but the checkpoint was trained for {classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scatter = LabelScatter::new(file.records.len());
    for block in tile_partition(&file.records, config.block_size)? {
        let block = normalize_block(&block)?;
        for sample in coverage_samples(&block, config.sample_points, &mut rng)? {
            let predicted = model.predict(&sample)?;
            scatter.assign(&block, &sample, &predicted);
        }
    }
    scatter.finish()
}

fn prediction_column(file: &PtsFile, path: &Path) -> Result<Vec<usize>> {
    let column: Vec<Option<usize>> = match file.extra.last() {
        Some(_) => file.extra.iter().map(|row| row.last().map(|&v| v as usize)).collect(),
        None => file.records.iter().map(|r| r.label).collect(),
    };
    column
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "no predicted label".into(),
            })
        })
        .collect()
}

/// Scores `prediction` against `reference`; returns the text report.
pub fn eval_command(reference: &Path, prediction: &Path, out_dir: Option<&Path>, map: Option<&Path>) -> Result<String> {
    let reference_file = read_pts(reference)?;
    let prediction_file = read_pts(prediction)?;
    let truth: Vec<usize> = reference_file
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.label.ok_or_else(|| Error::Parse {
                path: reference.to_path_buf(),
                line: i + 1,
                msg: "reference point has no label".into(),
            })
        })
        .collect::<Result<_>>()?;
    let predicted = prediction_column(&prediction_file, prediction)?;
    if truth.len() != predicted.len() {
        return Err(Error::dim("eval point counts", &[truth.len()], &[predicted.len()]));
    }
    let max = truth.iter().chain(&predicted).copied().max().unwrap_or(0);
    let names = reference_file
        .class_names
        .clone()
        .or_else(|| prediction_file.class_names.clone())
        .unwrap_or_else(|| (0..=max).map(|i| i.to_string()).collect());
    let mut cm = ConfusionMatrix::new(names)?;
    cm.accumulate(&truth, &predicted)?;
    let m = metrics(&cm)?;
    let report = text_report(&cm, &m);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), &report)?;
        fs::write(dir.join("metrics.csv"), csv_report(&m))?;
    }
    if let Some(path) = map {
        let mismatch = error_map(&truth, &predicted)?;
        write_pts(
            path,
            &reference_file.records,
            Some(&cm.class_names),
            &[predicted, mismatch],
        )?;
    }
    Ok(report)
}

/// Random labelled points in the unit cube, used by the gradient check.
pub fn random_sample(points: usize, classes: usize, seed: u64) -> Result<crate::pipeline::Sample> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<PointRecord> = (0..points)
        .map(|_| PointRecord {
            x: rng.random(),
            y: rng.random(),
            z: rng.random(),
            intensity: rng.random(),
            return_number: 1,
            num_returns: rng.random_range(1..3),
            label: Some(rng.random_range(0..classes)),
        })
        .collect();
    let block = crate::pipeline::Block {
        xmin: 0.0,
        ymin: 0.0,
        size: 1.0,
        source_ids: (0..points).collect(),
        records,
        norm: None,
    };
    sample_fixed(&block, points, &mut rng)
}

fn gradcheck_command(seed: u64, desk: bool, per_param: usize, tolerance: f64) -> Result<bool> {
    let mut ok = true;
    for check in op_suite(seed)? {
        let pass = check.max_rel_error < tolerance;
        ok &= pass;
        println!(
            "{:<28} {:.3e} {}",
            check.name,
            check.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let mut models = vec![("model (micro, 2 levels)", micro_config(), 24)];
    if desk {
        models.push(("model (desk, 1024 points)", ModelConfig::desk(4), 1024));
    }
    for (label, config, points) in models {
        let mut model = Dapnet::new(config, seed)?;
        model.set_scalar("pam.alpha", 0.3)?;
        model.set_scalar("gam.beta", 0.2)?;
        let sample = random_sample(points, model.config().num_classes, seed)?;
        for mode in [Mode::Train, Mode::Eval] {
            let r = model.check_loss_gradients(&sample, mode, per_param, FD_STEP, seed)?;
            let pass = r.max_rel_error < tolerance;
            ok &= pass;
            println!(
                "{label} {mode:?}: {} coordinates, max rel err {:.3e} (raw {:.3e}), {} within round-off, {} kinks skipped {}",
                r.checked,
                r.max_rel_error,
                r.max_raw_error,
                r.round_off,
                r.kinks,
                if pass { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(ok)
}

/// A two-level network small enough to check every coordinate quickly.
pub fn micro_config() -> ModelConfig {
    let mut c = ModelConfig::desk(3);
    c.group_counts = vec![8, 2];
    c.radii = vec![vec![0.3, 0.6], vec![0.6, 1.2]];
    c.single_radius = vec![0.5, 1.0];
    c.group_size = 4;
    c.sa_kernels = vec![vec![4, 4, 6], vec![6, 6, 8]];
    c.fp_kernels = vec![vec![8, 8], vec![8, 8, 8]];
    c.attention_reduction = 2;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_exits_zero_and_bad_flags_exit_two() {
        assert_eq!(run(["dapnet", "--help"]), EXIT_OK);
        assert_eq!(run(["dapnet", "train", "--help"]), EXIT_OK);
        assert_eq!(run(["dapnet", "train", "--no-such-flag"]), EXIT_USAGE);
        assert_eq!(run(["dapnet"]), EXIT_USAGE);
        assert_eq!(
            run([
                "dapnet",
                "eval",
                "--reference",
                "/nonexistent.pts",
                "--prediction",
                "/x.pts"
            ]),
            EXIT_USAGE
        );
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "epochs = 7\nstride = 2.5\nstrategy = \"M\"\n").unwrap();
        let o = Overrides {
            config: Some(path.clone()),
            epochs: Some(3),
            ..Overrides::default()
        };
        let c = o.resolve().unwrap();
        assert_eq!((c.epochs, c.stride, c.strategy.as_str()), (3, 2.5, "M"));
        assert_eq!(c.batch_size, 16);
        fs::write(&path, "epoch = 7\n").unwrap();
        assert!(o.resolve().is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            (c.lr_initial, c.lr_final, c.weight_decay, c.epochs, c.batch_size),
            (1e-3, 1e-5, 1e-4, 200, 16)
        );
    }

    #[test]
    fn unknown_strategy_rejected() {
        let o = Overrides {
            strategy: Some("XYZ".into()),
            ..Overrides::default()
        };
        assert!(o.resolve().is_err());
    }
}
