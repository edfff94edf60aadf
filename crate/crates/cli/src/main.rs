use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use posekit::config::{load_run_config, RunConfig};
use posekit::domain::{Pose, Scene};
use posekit::evaluation::{eval_csv, nms_bound_csv, nms_upper_bound, refinement_gain, summarize};
use posekit::gradsuite::{run_suite, SuiteOptions, SuiteReport};
use posekit::io::{read_coco_keypoints, read_dataset, read_results, write_dataset, write_results};
use posekit::model::{
    build_model, decode_with, load_checkpoint, save_checkpoint, DecodeMode, ForwardOptions,
};
use posekit::nms::Detection;
use posekit::oks::OksParams;
use posekit::training::{crowd_index, history_csv, synth_dataset, train};
use posekit::Error;

const CSV_SCHEMAS: &str = "\
CSV outputs (column order is fixed):
  train        loss_history.csv  epoch,coarse_l2,refine_l2,focal,heatmap_l2,total
               (epoch 0 is the untrained model over the whole training set,
               epoch e the mean batch loss during epoch e)
  eval         eval.csv          metric,value
               (rows mAP, AP50, AP75, AP@0.50 .. AP@0.95, AP_easy, AP_medium,
               AP_hard, n_easy, n_medium, n_hard; empty bucket AP is blank)
  nms-bound    nms_bound.csv     nms_kind,threshold,recall,ap_hard
  refine-gain  refine_gain.csv   mode,mean_best_oks  (rows coarse, refined)
  gradcheck    gradcheck.csv     op,configs,passed,max_rel_err,checked,skipped_kinks

Every run writes run-manifest.json next to its outputs.

Environment:
  POSEKIT_THREADS  worker threads (0 runs serially); defaults to all cores

Exit codes: 0 success, 1 invalid input or configuration, 2 internal failure
(training divergence, gradient check failure).";

#[derive(Parser, Debug)]
#[command(name = "posekit", version, about = "Train and evaluate a single-stage multi-person pose estimator on synthetic scenes", after_long_help = CSV_SCHEMAS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data synthesis, initialisation and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if needed.
    #[arg(long, default_value = "posekit-out")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Mode {
    Coarse,
    Refined,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into <out>/dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Generate the held-out set instead of the training set.
        #[arg(long)]
        heldout: bool,
    },
    /// Train a model; writes model.json and loss_history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; synthesised from the configuration if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Decode a checkpoint on a dataset; writes results.json.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; the held-out set if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "refined")]
        mode: Mode,
    },
    /// Score a results file against ground truth; writes eval.csv and eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        results: PathBuf,
        /// Dataset directory or COCO person-keypoints JSON file.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run both NMS kinds on ground-truth poses; writes nms_bound.csv and nms_bound.json.
    NmsBound {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; synthesised from the configuration if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Mean best OKS of coarse and refined poses; writes refine_gain.csv and refine_gain.json.
    RefineGain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; the held-out set if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation; writes gradcheck.csv.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random configurations per operation.
        #[arg(long, default_value_t = 50)]
        configs: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::NmsBound { .. } => "nms-bound",
            Command::RefineGain { .. } => "refine-gain",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::Infer { common, .. }
            | Command::Eval { common, .. }
            | Command::NmsBound { common, .. }
            | Command::RefineGain { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

#[derive(Debug)]
enum Failure {
    /// Command-line syntax error, already reported.
    Usage,
    /// Bad input or configuration.
    Input(String),
    /// The run itself failed.
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } | Error::Tensor(_) => Failure::Internal(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

#[derive(Serialize)]
struct OutputFile {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    args: Vec<String>,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
    outputs: Vec<OutputFile>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

struct Run {
    out: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn write(&mut self, name: &str, contents: &str) -> Outcome<()> {
        let path = self.out.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        self.outputs.push(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Outcome<()> {
        let text =
            serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
        self.write(name, &text)
    }

    fn record(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }
}

fn threads_from_env() -> Outcome<Option<usize>> {
    match std::env::var("POSEKIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| Some(n.max(1)))
            .map_err(|_| {
                Failure::Input(format!(
                    "POSEKIT_THREADS must be a non-negative integer, got {v:?}"
                ))
            }),
        Err(_) => Ok(None),
    }
}

fn load_scenes(data: Option<&Path>, synth: &posekit::training::SynthConfig) -> Outcome<Vec<Scene>> {
    Ok(match data {
        Some(dir) => read_dataset(dir)?,
        None => synth_dataset(synth)?,
    })
}

fn check_scene_shape(scenes: &[Scene], cfg: &RunConfig) -> Outcome<()> {
    let c = cfg.head.in_channels;
    let top = cfg.head.strides.iter().copied().max().unwrap_or(1);
    if let Some((i, s)) = scenes.iter().enumerate().find(|(_, s)| {
        let sh = s.image.shape();
        sh[0] != c || sh[1] % top != 0 || sh[2] % top != 0
    }) {
        return Err(Failure::Input(format!(
            "scene {i} has shape {:?}; the model needs {c} channels and sides divisible by {top}",
            s.image.shape()
        )));
    }
    Ok(())
}

fn oks_for(cfg: &RunConfig, k: usize) -> Outcome<OksParams> {
    Ok(cfg.train_config().oks_params(k)?)
}

/// Ground truth for `eval`: per-image poses, crowd indices and image ids.
fn load_ground_truth(path: &Path) -> Outcome<(Vec<Vec<Pose>>, Vec<f64>, Vec<u64>)> {
    if path.is_dir() {
        let scenes = read_dataset(path)?;
        let ids = (0..scenes.len() as u64).collect();
        let crowd = scenes.iter().map(|s| s.crowd_index).collect();
        Ok((scenes.into_iter().map(|s| s.gt_poses).collect(), crowd, ids))
    } else {
        let ds = read_coco_keypoints(path)?;
        let ids = ds.images.iter().map(|g| g.image.id).collect();
        let crowd = ds.images.iter().map(|g| crowd_index(&g.poses)).collect();
        Ok((ds.images.into_iter().map(|g| g.poses).collect(), crowd, ids))
    }
}

fn suite_csv(r: &SuiteReport) -> String {
    let mut s = String::from("op,configs,passed,max_rel_err,checked,skipped_kinks\n");
    for o in &r.ops {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            o.op, o.configs, o.passed, o.max_rel_err, o.checked, o.skipped_kinks
        );
    }
    s
}

fn execute(cmd: &Command, cfg: &RunConfig, run: &mut Run) -> Outcome<()> {
    match cmd {
        Command::Synth { heldout, .. } => {
            let synth = if *heldout {
                cfg.heldout_synth()
            } else {
                cfg.synth.clone()
            };
            let scenes = synth_dataset(&synth)?;
            let dir = run.out.join("dataset");
            write_dataset(&scenes, &dir)?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            files.sort();
            files.into_iter().for_each(|f| run.record(f));
            println!("wrote {} scenes to {}", scenes.len(), dir.display());
        }
        Command::Train { data, .. } => {
            let scenes = load_scenes(data.as_deref(), &cfg.synth)?;
            check_scene_shape(&scenes, cfg)?;
            let model = build_model(&cfg.head, cfg.train.seed)?;
            let out = train(model, &scenes, &cfg.train_config())?;
            let path = run.out.join("model.json");
            save_checkpoint(&out.model, &path)?;
            run.record(path);
            run.write("loss_history.csv", &history_csv(&out.history))?;
            let first = out.history.first().map_or(f64::NAN, |r| r.total);
            let last = out.history.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} steps; total loss {first:.4} -> {last:.4}",
                out.steps
            );
        }
        Command::Infer {
            checkpoint,
            data,
            mode,
            ..
        } => {
            let model = load_checkpoint(checkpoint)?;
            let scenes = load_scenes(data.as_deref(), &cfg.heldout_synth())?;
            check_scene_shape(
                &scenes,
                &RunConfig {
                    head: model.config.clone(),
                    ..cfg.clone()
                },
            )?;
            let params = oks_for(cfg, model.config.num_joints)?;
            let mode = match mode {
                Mode::Coarse => DecodeMode::Coarse,
                Mode::Refined => DecodeMode::Refined,
            };
            let opts = ForwardOptions {
                heatmaps: false,
                offset_grad: false,
            };
            let dets = scenes
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let pred = model.forward(&s.image, opts)?;
                    Ok((i as u64, decode_with(&pred, &model.config, &params, mode)))
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let path = run.out.join("results.json");
            write_results(&dets, &path)?;
            run.record(path);
            println!(
                "decoded {} detections over {} scenes",
                dets.iter().map(|d| d.1.len()).sum::<usize>(),
                dets.len()
            );
        }
        Command::Eval { results, gt, .. } => {
            let (gts, crowd, ids) = load_ground_truth(gt)?;
            let k = gts
                .iter()
                .flatten()
                .map(|p| p.keypoints.len())
                .next()
                .unwrap_or(cfg.head.num_joints);
            let params = oks_for(cfg, k)?;
            let slot: HashMap<u64, usize> =
                ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
            let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); gts.len()];
            for (image_id, ds) in read_results(results)? {
                let Some(&i) = slot.get(&image_id) else {
                    return Err(Failure::Input(format!(
                        "{}: image_id {image_id} is not in the ground truth",
                        results.display()
                    )));
                };
                if let Some(d) = ds.iter().find(|d| d.pose.keypoints.len() != k) {
                    return Err(Failure::Input(format!(
                        "{}: image_id {image_id} has a pose with {} joints, expected {k}",
                        results.display(),
                        d.pose.keypoints.len()
                    )));
                }
                dets[i].extend(ds);
            }
            let r = summarize(&dets, &gts, &crowd, &params, cfg.eval.bucket_cuts)?;
            run.write("eval.csv", &eval_csv(&r))?;
            run.write_json("eval.json", &r)?;
            println!("mAP {:.4}  AP50 {:.4}  AP75 {:.4}", r.map, r.ap50, r.ap75);
        }
        Command::NmsBound { data, .. } => {
            let scenes = load_scenes(data.as_deref(), &cfg.synth)?;
            let k = scenes
                .iter()
                .flat_map(|s| &s.gt_poses)
                .map(|p| p.keypoints.len())
                .next()
                .unwrap_or(cfg.head.num_joints);
            let params = oks_for(cfg, k)?;
            let t = nms_upper_bound(
                &scenes,
                &cfg.eval.nms_thresholds,
                cfg.eval.score_policy,
                &params,
                cfg.eval.bucket_cuts,
            )?;
            run.write("nms_bound.csv", &nms_bound_csv(&t))?;
            run.write_json("nms_bound.json", &t)?;
            for kind in [posekit::nms::NmsKind::Oks, posekit::nms::NmsKind::Iou] {
                println!("{} max recall {:.4}", kind.as_str(), t.max_recall(kind));
            }
        }
        Command::RefineGain {
            checkpoint, data, ..
        } => {
            let model = load_checkpoint(checkpoint)?;
            let scenes = load_scenes(data.as_deref(), &cfg.heldout_synth())?;
            check_scene_shape(
                &scenes,
                &RunConfig {
                    head: model.config.clone(),
                    ..cfg.clone()
                },
            )?;
            let params = oks_for(cfg, model.config.num_joints)?;
            let (coarse, refined) = refinement_gain(&model, &scenes, &params)?;
            run.write(
                "refine_gain.csv",
                &format!("mode,mean_best_oks\ncoarse,{coarse}\nrefined,{refined}\n"),
            )?;
            run.write_json(
                "refine_gain.json",
                &serde_json::json!({ "coarse": coarse, "refined": refined, "gain": refined - coarse }),
            )?;
            println!("mean best OKS: coarse {coarse:.4}, refined {refined:.4}");
        }
        Command::Gradcheck { configs, common } => {
            if *configs == 0 {
                return Err(Failure::Input("--configs must be positive".into()));
            }
            let report = run_suite(&SuiteOptions {
                configs: *configs,
                seed: common.seed,
                ..SuiteOptions::default()
            })?;
            run.write("gradcheck.csv", &suite_csv(&report))?;
            for o in &report.ops {
                println!(
                    "{:<22} {:>3}/{:<3} max rel err {:.2e}",
                    o.op, o.passed, o.configs, o.max_rel_err
                );
            }
            if !report.passed() {
                return Err(Failure::Internal("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn run(argv: Vec<OsString>) -> Outcome<()> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            let _ = e.print();
            return Err(Failure::Usage);
        }
    };
    let common = cli.command.common().clone();
    let cfg = match &common.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    }
    .with_seed(common.seed);
    cfg.validate()?;
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }

    std::fs::create_dir_all(&common.out)
        .map_err(|e| Failure::Input(format!("{}: {e}", common.out.display())))?;
    let mut run = Run {
        out: common.out.clone(),
        outputs: Vec::new(),
    };
    let result = execute(&cli.command, &cfg, &mut run);

    let config_json = serde_json::to_string(&cfg).map_err(|e| Failure::Internal(e.to_string()))?;
    let mut outputs = Vec::with_capacity(run.outputs.len());
    for path in &run.outputs {
        let bytes = std::fs::read(path)
            .map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))?;
        let file = path
            .strip_prefix(&run.out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        outputs.push(OutputFile {
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = RunManifest {
        tool: "posekit",
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name(),
        args: argv
            .iter()
            .skip(1)
            .map(|a| a.to_string_lossy().into_owned())
            .collect(),
        seed: common.seed,
        config_sha256: sha256_hex(config_json.as_bytes()),
        config: &cfg,
        outputs,
    };
    if result.is_ok() {
        run.write_json("run-manifest.json", &manifest)?;
    }
    result
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage) => ExitCode::from(1),
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
