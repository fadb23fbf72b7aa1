use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use relate3d::data_io::{self, Frame, ObjectClass, SceneSpec};
use relate3d::eval::{self, DetectionResult, EvalConfig, FrameDetections, RecallMode};
use relate3d::oracle;
use relate3d::relation::{self, AblationFlags, RelationConfig, RelationModel, TrainConfig};
use relate3d::nn::AdamConfig;
use relate3d::spatial_graph::{DegreeStats, GraphStrategy, RelationGraph};
use serde::Serialize;

use crate::args::{
    Command, EvalArgs, GraphArgs, RecallArg, RefineArgs, StrategyArg, SynthArgs, TrainArgs,
};
use crate::CliError;

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Graph(a) => cmd_graph(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Refine(a) => cmd_refine(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Check(a) => crate::check::cmd_check(&a),
    }
}

fn require_input(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file `{}` does not exist", path.display())))
    }
}

fn require_output(path: &Path) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "output directory `{}` does not exist",
            dir.display()
        )));
    }
    if path.is_dir() {
        return Err(CliError::Usage(format!("output path `{}` is a directory", path.display())));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    data_io::write_atomic(path, |w| w.write_all(text.as_bytes()))
        .map_err(|e| CliError::Data(format!("cannot write `{}`: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    data_io::write_atomic(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, item)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
    .map_err(|e| CliError::Data(format!("cannot write `{}`: {e}", path.display())))
}

fn load_frames(path: &Path) -> Result<Vec<Frame>, CliError> {
    data_io::load_frames(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("plain data serializes"));
}

fn strategy_of(kind: StrategyArg, k: usize, r: f64) -> Result<GraphStrategy, CliError> {
    let s = match kind {
        StrategyArg::Knn => GraphStrategy::Knn { k },
        StrategyArg::Radius => GraphStrategy::Radius { r },
    };
    s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(s)
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    frames: usize,
    ground_truth: usize,
    proposals: usize,
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    require_output(&a.out)?;
    let spec = SceneSpec {
        heading_noise_sd: a.heading_noise,
        center_noise_sd: a.center_noise,
        feature_dim: a.feature_dim,
        spacing: a.spacing,
        num_distractors: a.distractors,
        feature_noise_scale: a.feature_noise_scale,
        ..SceneSpec::new(a.pattern.into(), a.n, a.seed)
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let frames = data_io::generate_frames(&spec, a.frames, a.seed).map_err(CliError::data)?;
    data_io::save_frames(&frames, &a.out).map_err(CliError::data)?;
    let summary = SynthSummary {
        frames: frames.len(),
        ground_truth: frames.iter().map(|f| f.ground_truth.len()).sum(),
        proposals: frames.iter().map(|f| f.proposals.len()).sum(),
    };
    if a.pretty {
        println!(
            "wrote {} frames ({} ground-truth objects, {} proposals) to {}",
            summary.frames,
            summary.ground_truth,
            summary.proposals,
            a.out.display()
        );
    } else {
        print_json(&summary);
    }
    Ok(())
}

/// One line of a graph file.
#[derive(Debug, Serialize)]
pub struct GraphRecord {
    pub frame_id: String,
    pub strategy: GraphStrategy,
    pub brute_force: bool,
    pub num_edges: usize,
    pub degree: DegreeStats,
    pub graph: RelationGraph,
}

fn cmd_graph(a: &GraphArgs) -> Result<(), CliError> {
    require_input(&a.input)?;
    require_output(&a.out)?;
    let strategy = strategy_of(a.strategy, a.k, a.r)?;
    let frames = load_frames(&a.input)?;
    let selected: Vec<&Frame> = match &a.frame_id {
        Some(id) => {
            let f = frames
                .iter()
                .find(|f| &f.frame_id == id)
                .ok_or_else(|| CliError::Data(format!("unknown frame id `{id}`")))?;
            vec![f]
        }
        None => frames.iter().collect(),
    };
    let records: Vec<GraphRecord> = selected
        .par_iter()
        .map(|f| {
            let centers = f.proposals.centers();
            let graph = if a.brute_force {
                match strategy {
                    GraphStrategy::Knn { k } => oracle::brute_force_knn_graph(&centers, k),
                    GraphStrategy::Radius { r } => oracle::brute_force_radius_graph(&centers, r),
                }
            } else {
                strategy.build(&centers).expect("strategy validated")
            };
            GraphRecord {
                frame_id: f.frame_id.clone(),
                strategy,
                brute_force: a.brute_force,
                num_edges: graph.num_edges(),
                degree: graph.degree_stats(),
                graph,
            }
        })
        .collect();
    write_jsonl(&a.out, &records)?;
    for r in &records {
        if a.pretty {
            println!(
                "{:<12} nodes {:>4} edges {:>6} degree min {} max {} mean {:.3}",
                r.frame_id,
                r.graph.num_nodes(),
                r.num_edges,
                r.degree.min,
                r.degree.max,
                r.degree.mean
            );
        } else {
            print_json(&serde_json::json!({
                "frame_id": r.frame_id,
                "num_nodes": r.graph.num_nodes(),
                "num_edges": r.num_edges,
                "degree": r.degree,
            }));
        }
    }
    Ok(())
}

/// Resolves the model configuration: toy defaults, overlaid by the JSON
/// config file, overlaid by explicit flags.
fn resolve_config(a: &TrainArgs, feature_dim: Option<usize>) -> Result<RelationConfig, CliError> {
    let mut value = serde_json::to_value(RelationConfig::toy(
        GraphStrategy::default(),
        AblationFlags::default(),
    ))
    .expect("config serializes");
    let mut explicit_dim = false;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read `{}`: {e}", path.display())))?;
        let overlay: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let serde_json::Value::Object(fields) = overlay else {
            return Err(CliError::Data(format!("{}: expected a JSON object", path.display())));
        };
        explicit_dim = fields.contains_key("input_feature_dim");
        let base = value.as_object_mut().expect("config is an object");
        for (k, v) in fields {
            base.insert(k, v);
        }
    }
    let mut config: RelationConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Data(format!("invalid config: {e}")))?;
    if let (false, Some(d)) = (explicit_dim, feature_dim) {
        config.input_feature_dim = d;
    }
    if let Some(list) = &a.ablation {
        config.ablation = AblationFlags::parse_list(list).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(kind) = a.strategy {
        let (k, r) = match config.strategy {
            GraphStrategy::Knn { k } => (k, 6.0),
            GraphStrategy::Radius { r } => (16, r),
        };
        config.strategy = strategy_of(kind, a.k.unwrap_or(k), a.r.unwrap_or(r))?;
    } else {
        config.strategy = match config.strategy {
            GraphStrategy::Knn { k } => GraphStrategy::Knn { k: a.k.unwrap_or(k) },
            GraphStrategy::Radius { r } => GraphStrategy::Radius { r: a.r.unwrap_or(r) },
        };
    }
    if let Some(l) = a.layers {
        config.num_layers = l;
    }
    if let Some(d) = a.node_dim {
        config.node_dim = d;
        config.output_dim = d;
    }
    config.validate().map_err(CliError::data)?;
    Ok(config)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    epochs: usize,
    num_params: usize,
    train_frames: usize,
    val_frames: usize,
    final_loss: f64,
    final_heading_mae: f64,
    final_center_mae: f64,
}

fn feature_dim_of(frames: &[Frame]) -> Option<usize> {
    frames
        .iter()
        .find(|f| !f.proposals.is_empty())
        .map(|f| f.proposals.feature_dim())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    require_input(&a.input)?;
    if let Some(v) = &a.val {
        require_input(v)?;
    }
    if let Some(c) = &a.config {
        require_input(c)?;
    }
    require_output(&a.checkpoint_out)?;
    require_output(&a.metrics_out)?;
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(CliError::Usage("--lr must be positive".into()));
    }
    if a.batch_frames == 0 {
        return Err(CliError::Usage("--batch-frames must be >= 1".into()));
    }
    let frames = load_frames(&a.input)?;
    let (train, val) = match &a.val {
        Some(path) => (frames, load_frames(path)?),
        None => {
            let held = frames.len() / 5;
            if held == 0 {
                (frames.clone(), frames)
            } else {
                let mut train = frames;
                let val = train.split_off(train.len() - held);
                (train, val)
            }
        }
    };
    if train.is_empty() {
        return Err(CliError::Data("no training frames".into()));
    }
    let config = resolve_config(a, feature_dim_of(&train))?;
    let tc = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        batch_frames: a.batch_frames,
        ..TrainConfig::default()
    };
    let out = relation::toy_train(&train, &val, &config, &tc).map_err(CliError::data)?;
    let mut csv = String::from(relation::EpochMetrics::CSV_HEADER);
    csv.push('\n');
    for m in &out.history {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    }
    write_text(&a.checkpoint_out, &out.model.to_json())?;
    write_text(&a.metrics_out, &csv)?;
    let last = out.history.last().expect("history holds epoch 0");
    let summary = TrainSummary {
        epochs: a.epochs,
        num_params: out.model.num_params(),
        train_frames: train.len(),
        val_frames: val.len(),
        final_loss: last.loss,
        final_heading_mae: last.heading_mae,
        final_center_mae: last.center_mae,
    };
    if a.pretty {
        println!("{csv}");
        println!(
            "{} parameters, {} train / {} val frames",
            summary.num_params, summary.train_frames, summary.val_frames
        );
    } else {
        print_json(&summary);
    }
    Ok(())
}

/// Refines every proposal of `frame` with `model`.
pub fn refine_frame(model: &RelationModel, frame: &Frame) -> Result<FrameDetections, CliError> {
    let refined = model.refine(&frame.proposals).map_err(|e| {
        CliError::Data(format!("frame `{}`: {e}", frame.frame_id))
    })?;
    let detections = refined
        .into_iter()
        .zip(frame.proposals.classes())
        .map(|(r, &class)| DetectionResult {
            class,
            box3d: r.box3d,
            score: r.score,
        })
        .collect();
    Ok(FrameDetections {
        frame_id: frame.frame_id.clone(),
        detections,
    })
}

fn load_model(path: &Path) -> Result<RelationModel, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read `{}`: {e}", path.display())))?;
    RelationModel::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_refine(a: &RefineArgs) -> Result<(), CliError> {
    require_input(&a.input)?;
    require_input(&a.checkpoint)?;
    require_output(&a.out)?;
    let model = load_model(&a.checkpoint)?;
    let frames = load_frames(&a.input)?;
    let dets: Vec<FrameDetections> = frames
        .par_iter()
        .map(|f| refine_frame(&model, f))
        .collect::<Result<_, _>>()?;
    write_jsonl(&a.out, &dets)?;
    print_json(&serde_json::json!({
        "frames": dets.len(),
        "detections": dets.iter().map(|d| d.detections.len()).sum::<usize>(),
    }));
    Ok(())
}

/// Reads a detection file: one [`FrameDetections`] object per line.
pub fn load_detections(path: &Path) -> Result<Vec<FrameDetections>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Data(format!("cannot read `{}`: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: FrameDetections = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(d);
    }
    Ok(out)
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    require_input(&a.gt)?;
    require_input(&a.det)?;
    require_output(&a.out)?;
    if let Some(p) = &a.pr_out {
        require_output(p)?;
    }
    for t in [a.iou_3d, a.iou_bev].into_iter().flatten() {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Usage(format!("IoU threshold {t} outside [0, 1]")));
        }
    }
    let classes = a
        .classes
        .iter()
        .map(|c| c.trim().parse::<ObjectClass>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let config = EvalConfig {
        classes,
        iou_3d: a.iou_3d,
        iou_bev: a.iou_bev,
        recall_mode: match a.recall_mode {
            RecallArg::R11 => RecallMode::R11,
            RecallArg::R40 => RecallMode::R40,
        },
    };
    let gt = load_frames(&a.gt)?;
    let det = load_detections(&a.det)?;
    let report = eval::evaluate(&gt, &det, &config).map_err(CliError::data)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&a.out, &(json + "\n"))?;
    let table = report.to_table();
    write_text(&a.out.with_extension("txt"), &table)?;
    if let Some(p) = &a.pr_out {
        write_text(p, &report.to_pr_csv())?;
    }
    if a.pretty {
        print!("{table}");
    } else {
        let summary: Vec<_> = report
            .entries
            .iter()
            .map(|e| {
                serde_json::json!({
                    "class": e.class,
                    "difficulty": e.difficulty,
                    "metric": e.metric,
                    "ap": e.ap,
                })
            })
            .collect();
        print_json(&summary);
    }
    Ok(())
}
