//! Command-line orchestration of the pipeline: dataset generation, model
//! training, descriptor extraction, sparse feature selection, explanation
//! rendering, and the evaluation protocols.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. All randomness derives from `--seed` through named sub-streams.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::dataset::{DataError, LabeledDataset};
use crate::deconv::{BackwardPolicy, DeconvError, HeatmapMode};
use crate::descriptor::{
    build_matrices, dump_matrices, load_matrices, DescriptorError, DescriptorLayout,
};
use crate::eval::{
    ablation_curve, default_patch_side, default_thresholds, explanation_heatmap,
    heatmap_dissimilarity, iou_auc_study, mean_std, occlusion_random, occlusion_study,
    paired_t_greater, random_ablation_curve, reconstruction_auc, write_tsv, EvalError,
};
use crate::explain::{
    average_visualization, explain_image_with, write_explanation_bundle, ExplainError,
};
use crate::flowergen::{
    generate_dataset, load_dataset, load_rgb, write_png_rgb, FlowerError, FlowerSpec,
    FlowerVariant,
};
use crate::network::{accuracy, train, FeatureId, Hyperparams, LayerKind, ModelError, Network};
use crate::selector::{relevant_features, solve_mu_lasso, RelevanceMatrix, SolverError, SolverOptions};
use crate::tensor::TensorError;

pub use crate::dataset::parse_idx;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "RELFEAT_OUT";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.msg)
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_CONFIG, msg: msg.into() }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { code: EXIT_DATA, msg: e.to_string() }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError { code: EXIT_DATA, msg: e.to_string() }
    }
}

impl From<FlowerError> for CliError {
    fn from(e: FlowerError) -> Self {
        let code = match &e {
            FlowerError::BadClass { .. } | FlowerError::BadFrame { .. } => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError { code: EXIT_NUMERIC, msg: e.to_string() }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::Io { .. } | ModelError::Format { .. } => EXIT_DATA,
            ModelError::Tensor(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<DescriptorError> for CliError {
    fn from(e: DescriptorError) -> Self {
        match e {
            DescriptorError::Model(m) => m.into(),
            e @ (DescriptorError::Io(_) | DescriptorError::LabelOutOfRange { .. }) => {
                CliError { code: EXIT_DATA, msg: e.to_string() }
            }
            e => CliError { code: EXIT_NUMERIC, msg: e.to_string() },
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        let code = match &e {
            SolverError::BadMu { .. }
            | SolverError::DimensionMismatch { .. }
            | SolverError::ClassOutOfRange { .. } => EXIT_CONFIG,
            SolverError::Io(_) | SolverError::Format { .. } => EXIT_DATA,
            _ => EXIT_NUMERIC,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<DeconvError> for CliError {
    fn from(e: DeconvError) -> Self {
        let code = match &e {
            DeconvError::Io(_) => EXIT_DATA,
            DeconvError::NotParametric { .. }
            | DeconvError::NotApplicableToFc
            | DeconvError::DegenerateGeometry(_) => EXIT_CONFIG,
            _ => EXIT_NUMERIC,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Model(m) => m.into(),
            ExplainError::Descriptor(d) => d.into(),
            ExplainError::Deconv(d) => d.into(),
            ExplainError::Selector(s) => s.into(),
            ExplainError::Tensor(t) => t.into(),
            ExplainError::Io(i) => i.into(),
            ExplainError::BadK
            | ExplainError::LayoutMismatch { .. }
            | ExplainError::ClassOutOfRange { .. } => config_err(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Deconv(d) => d.into(),
            EvalError::Explain(x) => x.into(),
            EvalError::Descriptor(d) => d.into(),
            EvalError::Flower(f) => f.into(),
            EvalError::Io(i) => i.into(),
            EvalError::MissingMask { .. } => CliError { code: EXIT_DATA, msg: e.to_string() },
            EvalError::BadSchedule
            | EvalError::ScheduleExceedsPool { .. }
            | EvalError::PatchTooLarge { .. } => config_err(e.to_string()),
        }
    }
}

/// Derives an independent seed for a named purpose from the run seed.
pub fn substream(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Parser)]
#[command(name = "relfeat", about = "Identify class-relevant CNN filters and render their heatmap explanations", version)]
pub struct Cli {
    /// Master seed; every stochastic step draws from a named sub-stream.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Output root; falls back to $RELFEAT_OUT, then "out".
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Reserved; all work currently runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset root (the directory holding the variant subdirectory).
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset variant: single-6c, double-12c, or part-2c.
    #[arg(long)]
    pub variant: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic flower dataset with ground-truth masks.
    GenDataset {
        #[arg(long)]
        variant: String,
        /// "full" (300px, augmented, 1000/class) or "mini" (64px, 100/class).
        #[arg(long, default_value = "mini")]
        profile: String,
        /// Override the number of rendered frames per class.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the reference convnet on a generated dataset.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Stop early once this held-out accuracy is reached.
        #[arg(long)]
        target_acc: Option<f64>,
        /// Fold held out for evaluation.
        #[arg(long, default_value_t = 4)]
        test_fold: usize,
    },
    /// Extract response descriptors into a text matrix pair.
    Extract {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Which folds to include: all, train, or test.
        #[arg(long, default_value = "all")]
        folds: String,
        #[arg(long, default_value_t = 4)]
        test_fold: usize,
    },
    /// Solve the L1-budget regression and write the per-class weights.
    Select {
        #[arg(long)]
        matrices: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        mu: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Explain one image: prediction plus top-k feature heatmaps.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Disable the stride compensation (plain deconvnet resampling).
        #[arg(long)]
        vanilla: bool,
    },
    /// Average receptive-field patches for one class's relevant features.
    Interpret {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 100)]
        top_n: usize,
    },
    /// Accuracy-vs-removal curves for selected, conv-only, and random
    /// feature sets.
    EvalAblation {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 4)]
        test_fold: usize,
        #[arg(long, default_value_t = 5)]
        random_seeds: usize,
    },
    /// IoU-AUC of thresholded heatmaps against ground-truth masks, per
    /// fold and heatmap mode.
    EvalIou {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Heatmap-guided vs random occlusion confidence drops.
    EvalOcclusion {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0.30)]
        coverage: f64,
        #[arg(long, default_value_t = 30)]
        limit: usize,
        #[arg(long, default_value_t = 5)]
        random_seeds: usize,
        #[arg(long, default_value_t = 4)]
        test_fold: usize,
    },
    /// Class-sensitivity check: heatmaps must change with the explained
    /// class.
    EvalSanity {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long, default_value_t = 4)]
        test_fold: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Held-out label reconstruction ROC-AUC from descriptor scores.
    EvalReconstruction {
        #[arg(long)]
        matrices: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Collate IoU result tables into one summary with mean and std.
    Report {
        /// Directory holding iou_*.tsv files; defaults to the output root.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    }
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_run_json(dir: &Path, command: &str, seed: u64, args: serde_json::Value) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let run = serde_json::json!({
        "command": command,
        "seed": seed,
        "args": args,
        "written_unix_time": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run).unwrap() + "\n")?;
    Ok(())
}

fn parse_variant(s: &str) -> Result<FlowerVariant, CliError> {
    FlowerVariant::parse(s).ok_or_else(|| config_err(format!("unknown variant '{s}'")))
}

fn load_variant_dataset(args: &DataArgs) -> Result<(LabeledDataset, FlowerVariant), CliError> {
    let variant = parse_variant(&args.variant)?;
    let (ds, _) = load_dataset(&args.data, variant)?;
    Ok((ds, variant))
}

/// Union of every class's relevant features, strongest weight first.
fn merged_relevant_features(
    w: &RelevanceMatrix,
    layout: &DescriptorLayout,
) -> Result<Vec<FeatureId>, CliError> {
    let mut best: std::collections::BTreeMap<(usize, usize), f64> = std::collections::BTreeMap::new();
    for class in 0..w.c {
        for (f, weight) in relevant_features(w, class, layout)? {
            let e = best.entry((f.layer, f.filter)).or_insert(0.0);
            if weight.abs() > *e {
                *e = weight.abs();
            }
        }
    }
    let mut feats: Vec<((usize, usize), f64)> = best.into_iter().collect();
    feats.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(feats.into_iter().map(|((layer, filter), _)| FeatureId { layer, filter }).collect())
}

fn spread_schedule(max: usize) -> Vec<usize> {
    let mut schedule = vec![0];
    for i in 1..=8usize {
        let n = (max * i).div_ceil(8);
        if *schedule.last().unwrap() != n {
            schedule.push(n);
        }
    }
    schedule
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let out = out_root(cli);
    match &cli.command {
        Command::GenDataset { variant, profile, frames } => {
            let v = parse_variant(variant)?;
            let mut spec = match profile.as_str() {
                "full" => FlowerSpec::full(v, substream(cli.seed, "folds")),
                "mini" => FlowerSpec::mini(v, substream(cli.seed, "folds")),
                other => return Err(config_err(format!("unknown profile '{other}'"))),
            };
            if let Some(f) = frames {
                if *f == 0 {
                    return Err(config_err("frames must be positive"));
                }
                spec.frames_per_class = *f;
            }
            let manifest = generate_dataset(&spec, &out)?;
            write_run_json(
                &out,
                "gen-dataset",
                cli.seed,
                serde_json::json!({"variant": variant, "profile": profile, "frames": spec.frames_per_class}),
            )?;
            println!(
                "wrote {} samples across {} classes under {}",
                manifest.samples.len(),
                manifest.classes.len(),
                out.join(v.name()).display()
            );
            Ok(())
        }

        Command::Train { data, model_out, epochs, lr, batch, target_acc, test_fold } => {
            let (ds, variant) = load_variant_dataset(data)?;
            let train_ds = ds.filter_folds(|f| f != *test_fold);
            let test_ds = ds.filter_folds(|f| f == *test_fold);
            if train_ds.is_empty() || test_ds.is_empty() {
                return Err(config_err(format!("test fold {test_fold} leaves an empty split")));
            }
            let mut net = Network::flower_net(variant.class_count());
            net.init_weights(substream(cli.seed, "init"));
            let hp = Hyperparams {
                epochs: *epochs,
                learning_rate: *lr as f32,
                batch_size: *batch,
                target_accuracy: *target_acc,
                ..Hyperparams::default()
            };
            let (trained, report) = train(&net, &train_ds, &hp, substream(cli.seed, "train"), Some(&test_ds))?;
            let path = model_out.clone().unwrap_or_else(|| out.join("model.net"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            trained.save(&path)?;
            write_run_json(
                &out,
                "train",
                cli.seed,
                serde_json::json!({
                    "variant": data.variant, "epochs": epochs, "lr": lr, "batch": batch,
                    "target_acc": target_acc, "test_fold": test_fold, "model": path.display().to_string(),
                }),
            )?;
            println!(
                "trained {} epochs, held-out accuracy {:.4}, model at {}",
                report.epochs_run,
                report.final_eval_accuracy.unwrap_or(f64::NAN),
                path.display()
            );
            Ok(())
        }

        Command::Extract { data, model, output, folds, test_fold } => {
            let (ds, _) = load_variant_dataset(data)?;
            let subset = match folds.as_str() {
                "all" => ds,
                "train" => ds.filter_folds(|f| f != *test_fold),
                "test" => ds.filter_folds(|f| f == *test_fold),
                other => return Err(config_err(format!("unknown fold filter '{other}'"))),
            };
            if subset.is_empty() {
                return Err(CliError { code: EXIT_DATA, msg: "fold filter selected no samples".into() });
            }
            let net = Network::load(model)?;
            let mats = build_matrices(&net, &subset)?;
            let path = output.clone().unwrap_or_else(|| out.join("matrices.txt"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            dump_matrices(&mats, &path)?;
            write_run_json(
                &out,
                "extract",
                cli.seed,
                serde_json::json!({"variant": data.variant, "folds": folds, "output": path.display().to_string()}),
            )?;
            println!("wrote {}x{} descriptor matrix to {}", mats.m, mats.n, path.display());
            Ok(())
        }

        Command::Select { matrices, mu, output } => {
            let mats = load_matrices(matrices)?;
            let (w, report) = solve_mu_lasso(&mats, *mu, &SolverOptions::default())?;
            let path = output.clone().unwrap_or_else(|| out.join(format!("w_mu{mu}.txt")));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            w.save(&path)?;
            write_run_json(
                &out,
                "select",
                cli.seed,
                serde_json::json!({"matrices": matrices.display().to_string(), "mu": mu, "output": path.display().to_string()}),
            )?;
            for class in 0..w.c {
                println!(
                    "class {class}: {} nonzero features ({} iterations)",
                    w.nnz(class),
                    report.iterations[class]
                );
            }
            println!("objective {:.6}, wrote {}", report.objective, path.display());
            Ok(())
        }

        Command::Explain { model, weights, image, k, vanilla } => {
            let net = Network::load(model)?;
            let w = RelevanceMatrix::load(weights)?;
            let img = load_rgb(image)?;
            let policy = if *vanilla { BackwardPolicy::vanilla() } else { BackwardPolicy::ours() };
            let expl = explain_image_with(&net, &w, &img, *k, None, policy)?;
            let layout = DescriptorLayout::for_network(&net);
            let class_names: Vec<String> = (0..net.class_count).map(|c| c.to_string()).collect();
            let dir = out.join("explanation");
            write_explanation_bundle(&expl, &class_names, &dir)?;
            write_run_json(
                &dir,
                "explain",
                cli.seed,
                serde_json::json!({
                    "model": model.display().to_string(), "weights": weights.display().to_string(),
                    "image": image.display().to_string(), "k": k, "vanilla": vanilla,
                }),
            )?;
            println!(
                "predicted class {} (confidence {:.4}), {} feature heatmaps in {} (descriptor m={})",
                expl.predicted_class,
                expl.confidence,
                expl.ranked.len(),
                dir.display(),
                layout.m()
            );
            if expl.truncated {
                println!("note: only {} nonzero weights were available", expl.ranked.len());
            }
            Ok(())
        }

        Command::Interpret { data, model, weights, class, top_n } => {
            let (ds, _) = load_variant_dataset(data)?;
            let net = Network::load(model)?;
            let w = RelevanceMatrix::load(weights)?;
            let vis = average_visualization(&net, &w, *class, &ds, *top_n)?;
            let dir = out.join(format!("interpret_class{class}"));
            std::fs::create_dir_all(&dir)?;
            let mut rows = Vec::new();
            for v in &vis {
                let file = format!("avg_L{}F{}.png", v.feature.layer, v.feature.filter);
                write_png_rgb(&v.patch, &dir.join(&file))?;
                rows.push(vec![
                    v.feature.layer.to_string(),
                    v.feature.filter.to_string(),
                    v.contributing.to_string(),
                    file,
                ]);
            }
            write_tsv(&dir.join("manifest.tsv"), &["layer", "filter", "patches", "file"], &rows)?;
            write_run_json(
                &dir,
                "interpret",
                cli.seed,
                serde_json::json!({"variant": data.variant, "class": class, "top_n": top_n}),
            )?;
            println!("wrote {} average patches to {}", vis.len(), dir.display());
            Ok(())
        }

        Command::EvalAblation { data, model, weights, test_fold, random_seeds } => {
            let (ds, _) = load_variant_dataset(data)?;
            let test_ds = ds.filter_folds(|f| f == *test_fold);
            let net = Network::load(model)?;
            let w = RelevanceMatrix::load(weights)?;
            let layout = DescriptorLayout::for_network(&net);
            let all = merged_relevant_features(&w, &layout)?;
            let only_conv: Vec<FeatureId> = all
                .iter()
                .copied()
                .filter(|f| matches!(net.layers[f.layer].kind, LayerKind::Conv(_)))
                .collect();
            let pool: Vec<FeatureId> = layout
                .segments
                .iter()
                .flat_map(|&(layer, count)| (0..count).map(move |filter| FeatureId { layer, filter }))
                .collect();

            let mut rows = Vec::new();
            let schedule_all = spread_schedule(all.len());
            let curve_all = ablation_curve(&net, &all, &test_ds, &schedule_all, "All")?;
            let schedule_conv = spread_schedule(only_conv.len());
            let curve_conv = ablation_curve(&net, &only_conv, &test_ds, &schedule_conv, "OnlyConv")?;
            let seeds: Vec<u64> = (0..*random_seeds)
                .map(|i| substream(cli.seed, &format!("ablate{i}")))
                .collect();
            let curve_rand = random_ablation_curve(&net, &pool, &test_ds, &schedule_all, &seeds)?;
            let original = accuracy(&net, &test_ds)?;
            rows.push(vec!["Original".into(), "0".into(), format!("{original}")]);
            for curve in [&curve_all, &curve_conv, &curve_rand] {
                for (n, acc) in curve.schedule.iter().zip(&curve.accuracy) {
                    rows.push(vec![curve.condition.clone(), n.to_string(), format!("{acc}")]);
                }
            }
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("ablation_{}.tsv", data.variant));
            write_tsv(&path, &["condition", "removed", "accuracy"], &rows)?;
            write_run_json(
                &out,
                "eval-ablation",
                cli.seed,
                serde_json::json!({"variant": data.variant, "test_fold": test_fold, "random_seeds": random_seeds}),
            )?;
            println!("wrote {}", path.display());
            Ok(())
        }

        Command::EvalIou { data, model, weights, k } => {
            let (ds, _) = load_variant_dataset(data)?;
            let net = Network::load(model)?;
            let w = RelevanceMatrix::load(weights)?;
            let thresholds = default_thresholds();
            let mut rows = Vec::new();
            let mut curve_rows = Vec::new();
            for mode in [HeatmapMode::Ours, HeatmapMode::DeconvGbVanilla, HeatmapMode::UpsampledActivation] {
                let results = iou_auc_study(&net, &w, &ds, mode, &thresholds, *k)?;
                for r in &results {
                    rows.push(vec![
                        mode.label().to_string(),
                        r.fold.to_string(),
                        format!("{}", r.auc_percent),
                        r.excluded.to_string(),
                    ]);
                    for (tau, iou) in r.thresholds.iter().zip(&r.mean_iou) {
                        curve_rows.push(vec![
                            mode.label().to_string(),
                            r.fold.to_string(),
                            format!("{tau}"),
                            format!("{iou}"),
                        ]);
                    }
                }
            }
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("iou_{}_mu{}_k{}.tsv", data.variant, w.mu, k));
            write_tsv(&path, &["mode", "fold", "auc_percent", "excluded"], &rows)?;
            let curves = out.join(format!("iou_curves_{}_mu{}_k{}.tsv", data.variant, w.mu, k));
            write_tsv(&curves, &["mode", "fold", "threshold", "mean_iou"], &curve_rows)?;
            write_run_json(
                &out,
                "eval-iou",
                cli.seed,
                serde_json::json!({"variant": data.variant, "k": k, "mu": w.mu}),
            )?;
            println!("wrote {} and {}", path.display(), curves.display());
            Ok(())
        }

        Command::EvalOcclusion { data, model, weights, coverage, limit, random_seeds, test_fold } => {
            let (ds, _) = load_variant_dataset(data)?;
            let test_ds = ds.filter_folds(|f| f == *test_fold);
            let net = Network::load(model)?;
            let w = RelevanceMatrix::load(weights)?;
            let patch = default_patch_side(net.input_side);
            let mut rows = Vec::new();
            let mut guided_drops = Vec::new();
            let mut random_drops = Vec::new();
            for (i, s) in test_ds.samples.iter().take(*limit).enumerate() {
                let Some(h) = explanation_heatmap(&net, &w, &s.image, HeatmapMode::Ours, 3, None)? else {
                    continue;
                };
                let guided = occlusion_study(&net, &h, &s.image, patch, *coverage)?;
                let gdrop = guided.base_confidence - guided.confidences.last().copied().unwrap_or(guided.base_confidence);
                let mut rdrop = 0.0;
                for r in 0..*random_seeds {
                    let seed = substream(cli.seed, &format!("occl{i}_{r}"));
                    let rand = occlusion_random(&net, &s.image, patch, *coverage, seed)?;
                    rdrop += (rand.base_confidence
                        - rand.confidences.last().copied().unwrap_or(rand.base_confidence))
                        / *random_seeds as f64;
                }
                guided_drops.push(gdrop);
                random_drops.push(rdrop);
                rows.push(vec![i.to_string(), format!("{gdrop}"), format!("{rdrop}")]);
            }
            let (t, significant) = paired_t_greater(&guided_drops, &random_drops);
            let (gm, _) = mean_std(&guided_drops);
            let (rm, _) = mean_std(&random_drops);
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("occlusion_{}.tsv", data.variant));
            write_tsv(&path, &["image", "guided_drop", "random_drop"], &rows)?;
            let summary = out.join(format!("occlusion_summary_{}.tsv", data.variant));
            write_tsv(
                &summary,
                &["mean_guided_drop", "mean_random_drop", "t", "significant_95"],
                &[vec![format!("{gm}"), format!("{rm}"), format!("{t}"), significant.to_string()]],
            )?;
            write_run_json(
                &out,
                "eval-occlusion",
                cli.seed,
                serde_json::json!({"variant": data.variant, "coverage": coverage, "limit": limit, "random_seeds": random_seeds}),
            )?;
            println!(
                "guided mean drop {gm:.4} vs random {rm:.4} (t={t:.2}, significant: {significant})"
            );
            Ok(())
        }

        Command::EvalSanity { data, model, weights, images, test_fold, k } => {
            let (ds, _) = load_variant_dataset(data)?;
            let test_ds = ds.filter_folds(|f| f == *test_fold);
            let net = Network::load(model)?;
            let w = RelevanceMatrix::load(weights)?;
            let picked: Vec<usize> = (0..test_ds.len()).take(*images).collect();
            let mut rows = Vec::new();
            let mut cross_all = Vec::new();
            let mut same_all = Vec::new();
            for &i in &picked {
                let sample = &test_ds.samples[i];
                // heatmap per class, forced
                let mut maps = Vec::new();
                for class in 0..w.c {
                    maps.push(explanation_heatmap(&net, &w, &sample.image, HeatmapMode::Ours, *k, Some(class))?);
                }
                let mut cross = Vec::new();
                for a in 0..maps.len() {
                    for b in a + 1..maps.len() {
                        if let (Some(ha), Some(hb)) = (&maps[a], &maps[b]) {
                            cross.push(heatmap_dissimilarity(ha, hb));
                        }
                    }
                }
                // same-class: this image vs the next test image of the same
                // label, both explained for that label
                let partner = test_ds
                    .samples
                    .iter()
                    .enumerate()
                    .find(|(j, s)| *j != i && s.label == sample.label)
                    .map(|(j, _)| j);
                let same = if let Some(j) = partner {
                    let other = &test_ds.samples[j];
                    let ha = explanation_heatmap(&net, &w, &sample.image, HeatmapMode::Ours, *k, Some(sample.label))?;
                    let hb = explanation_heatmap(&net, &w, &other.image, HeatmapMode::Ours, *k, Some(sample.label))?;
                    match (ha, hb) {
                        (Some(a), Some(b)) => Some(heatmap_dissimilarity(&a, &b)),
                        _ => None,
                    }
                } else {
                    None
                };
                let (cmean, _) = mean_std(&cross);
                if !cross.is_empty() {
                    cross_all.push(cmean);
                }
                if let Some(sv) = same {
                    same_all.push(sv);
                }
                rows.push(vec![
                    i.to_string(),
                    if cross.is_empty() { "".into() } else { format!("{cmean}") },
                    same.map(|v| format!("{v}")).unwrap_or_default(),
                ]);
            }
            let (cm, _) = mean_std(&cross_all);
            let (sm, _) = mean_std(&same_all);
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("sanity_{}.tsv", data.variant));
            write_tsv(&path, &["image", "mean_cross_class", "same_class"], &rows)?;
            write_run_json(
                &out,
                "eval-sanity",
                cli.seed,
                serde_json::json!({"variant": data.variant, "images": images, "k": k}),
            )?;
            println!("mean cross-class dissimilarity {cm:.4}, same-class {sm:.4}");
            Ok(())
        }

        Command::EvalReconstruction { matrices, weights } => {
            let mats = load_matrices(matrices)?;
            let w = RelevanceMatrix::load(weights)?;
            if w.m != mats.m {
                return Err(config_err(format!(
                    "weights have {} rows but the matrix has {}",
                    w.m, mats.m
                )));
            }
            let r = reconstruction_auc(&mats, &w);
            let mut rows: Vec<Vec<String>> = r
                .per_class
                .iter()
                .enumerate()
                .map(|(j, auc)| {
                    vec![j.to_string(), auc.map(|a| format!("{a}")).unwrap_or_else(|| "skipped".into())]
                })
                .collect();
            rows.push(vec!["mean".into(), format!("{}", r.mean_auc)]);
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("reconstruction_mu{}.tsv", w.mu));
            write_tsv(&path, &["class", "auc"], &rows)?;
            write_run_json(
                &out,
                "eval-reconstruction",
                cli.seed,
                serde_json::json!({"matrices": matrices.display().to_string(), "mu": w.mu}),
            )?;
            println!("mean reconstruction AUC {:.4}", r.mean_auc);
            Ok(())
        }

        Command::Report { dir } => {
            let dir = dir.clone().unwrap_or_else(|| out.clone());
            // full-scale reference AUC-IoU values for the two color variants
            let reference: &[(&str, &str, f64)] = &[
                ("single-6c", "ours", 22.5),
                ("single-6c", "deconv_gb_vanilla", 21.3),
                ("single-6c", "upsampled_activation", 16.8),
                ("double-12c", "ours", 23.2),
                ("double-12c", "deconv_gb_vanilla", 21.9),
                ("double-12c", "upsampled_activation", 16.1),
            ];
            let mut rows = Vec::new();
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .map(|n| n.starts_with("iou_") && !n.starts_with("iou_curves_") && n.ends_with(".tsv"))
                        .unwrap_or(false)
                })
                .collect();
            entries.sort();
            for path in &entries {
                let text = std::fs::read_to_string(path)?;
                let mut per_mode: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
                for line in text.lines().skip(1) {
                    let cols: Vec<&str> = line.split('\t').collect();
                    if cols.len() >= 3 {
                        if let Ok(auc) = cols[2].parse::<f64>() {
                            per_mode.entry(cols[0].to_string()).or_default().push(auc);
                        }
                    }
                }
                let file = path.file_name().unwrap().to_string_lossy().to_string();
                for (mode, aucs) in per_mode {
                    let (mean, std) = mean_std(&aucs);
                    let reference_auc = reference
                        .iter()
                        .find(|(v, m, _)| file.contains(v) && *m == mode)
                        .map(|(_, _, r)| format!("{r}"))
                        .unwrap_or_default();
                    rows.push(vec![
                        file.clone(),
                        mode,
                        format!("{mean:.2}"),
                        format!("{std:.2}"),
                        aucs.len().to_string(),
                        aucs.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(","),
                        reference_auc,
                    ]);
                }
            }
            if rows.is_empty() {
                return Err(CliError { code: EXIT_DATA, msg: format!("no iou_*.tsv files under {}", dir.display()) });
            }
            let path = dir.join("summary.tsv");
            write_tsv(
                &path,
                &["file", "mode", "mean_auc", "std_auc", "folds", "per_fold", "full_scale_reference"],
                &rows,
            )?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli_with(command: Command, out: &Path, seed: u64) -> Cli {
        Cli { seed, out: Some(out.to_path_buf()), threads: 1, command }
    }

    #[test]
    fn substreams_are_deterministic_and_distinct() {
        assert_eq!(substream(7, "train"), substream(7, "train"));
        assert_ne!(substream(7, "train"), substream(7, "folds"));
        assert_ne!(substream(7, "train"), substream(8, "train"));
    }

    #[test]
    fn unknown_variant_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cli = cli_with(
            Command::GenDataset { variant: "wide-9c".into(), profile: "mini".into(), frames: None },
            dir.path(),
            1,
        );
        assert_eq!(run(cli), EXIT_CONFIG);
    }

    #[test]
    fn missing_dataset_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let cli = cli_with(
            Command::Train {
                data: DataArgs { data: dir.path().join("absent"), variant: "part-2c".into() },
                model_out: None,
                epochs: 1,
                lr: 0.05,
                batch: 4,
                target_acc: None,
                test_fold: 4,
            },
            dir.path(),
            1,
        );
        assert_eq!(run(cli), EXIT_DATA);
    }

    #[test]
    fn gen_dataset_writes_tree_and_run_json() {
        let dir = tempfile::tempdir().unwrap();
        let cli = cli_with(
            Command::GenDataset { variant: "part-2c".into(), profile: "mini".into(), frames: Some(5) },
            dir.path(),
            3,
        );
        assert_eq!(run(cli), 0);
        assert!(dir.path().join("part-2c/manifest.json").exists());
        assert!(dir.path().join("run.json").exists());
        let (ds, _) = load_dataset(dir.path(), FlowerVariant::Part2).unwrap();
        assert_eq!(ds.len(), 10);
    }

    #[test]
    fn select_rejects_nonpositive_mu() {
        let dir = tempfile::tempdir().unwrap();
        let mats = dir.path().join("m.txt");
        std::fs::write(&mats, "2 2 1\n1 0\n0 1\n1 1\n").unwrap();
        let cli = cli_with(
            Command::Select { matrices: mats, mu: 0.0, output: None },
            dir.path(),
            1,
        );
        assert_eq!(run(cli), EXIT_CONFIG);
    }

    #[test]
    fn select_writes_weight_file() {
        let dir = tempfile::tempdir().unwrap();
        let mats = dir.path().join("m.txt");
        std::fs::write(&mats, "2 4 2\n1 0 1 0\n0 1 0 1\n1 0 1 0\n0 1 0 1\n").unwrap();
        let output = dir.path().join("w.txt");
        let cli = cli_with(
            Command::Select { matrices: mats, mu: 1.5, output: Some(output.clone()) },
            dir.path(),
            1,
        );
        assert_eq!(run(cli), 0);
        let w = RelevanceMatrix::load(&output).unwrap();
        assert_eq!((w.m, w.c), (2, 2));
        for class in 0..2 {
            let l1: f64 = w.dense_column(class).iter().map(|v| v.abs()).sum();
            assert!(l1 <= 1.5 + 1e-8);
        }
    }

    #[test]
    fn report_without_inputs_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let cli = cli_with(Command::Report { dir: None }, dir.path(), 1);
        assert_eq!(run(cli), EXIT_DATA);
    }
}
