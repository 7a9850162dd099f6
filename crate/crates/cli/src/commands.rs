use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use openpan_core::io::{self, ClassEntry, DatasetManifest, IoError, ManifestImage, MaskData};
use openpan_core::metrics::{
    AnomalyAccumulator, MetricReport, OsPanopticAccumulator, OwPanopticAccumulator,
    OwSemanticAccumulator,
};
use openpan_core::model::{BinaryMask, FeatureMap, OffsetField};
use openpan_core::postprocess::{run_pipeline, ClusterParams, DiscoveryState, PipelineParams};
use openpan_core::stats::DescriptorBank;
use openpan_core::synth::{generate, Scene, SceneSpec};

use crate::{BankBuildArgs, CliError, EvalArgs, PostprocessArgs, SynthArgs, TaskArg};

const SYNTH_IGNORE_ID: u32 = 255;

fn validation(err: impl std::fmt::Display) -> CliError {
    CliError::validation(err)
}

/// Splits a raw label raster into (region == 1, region == ignore).
fn split_anomaly_mask(data: &MaskData, ignore_id: u32) -> (BinaryMask, BinaryMask) {
    let anomaly = BinaryMask::new(
        data.height,
        data.width,
        data.labels.iter().map(|&l| l == 1).collect(),
    )
    .expect("sized by construction");
    let ignore = BinaryMask::new(
        data.height,
        data.width,
        data.labels.iter().map(|&l| l == ignore_id).collect(),
    )
    .expect("sized by construction");
    (anomaly, ignore)
}

fn read_binary_pred(path: &Path) -> Result<BinaryMask, CliError> {
    let data = io::read_mask(path).map_err(validation)?;
    Ok(BinaryMask::new(
        data.height,
        data.width,
        data.labels.iter().map(|&l| l != 0).collect(),
    )
    .expect("sized by construction"))
}

struct PredPaths {
    mask: Option<PathBuf>,
    scores: Option<PathBuf>,
    semantic: Option<PathBuf>,
    instances: Option<PathBuf>,
}

fn pred_paths(task: TaskArg, pred_dir: &Path, id: &str) -> PredPaths {
    let p = |suffix: &str| pred_dir.join(format!("{id}{suffix}"));
    match task {
        TaskArg::Anomaly => PredPaths {
            mask: Some(p("_anomaly.png")),
            scores: Some(p("_scores.owfm")),
            semantic: None,
            instances: None,
        },
        TaskArg::OwSemantic => PredPaths {
            mask: None,
            scores: None,
            semantic: Some(p("_semantic.png")),
            instances: None,
        },
        TaskArg::OsPanoptic => PredPaths {
            mask: Some(p("_anomaly.png")),
            scores: None,
            semantic: None,
            instances: Some(p("_instances.png")),
        },
        TaskArg::OwPanoptic => PredPaths {
            mask: None,
            scores: None,
            semantic: Some(p("_semantic.png")),
            instances: Some(p("_instances.png")),
        },
    }
}

fn require_gt<'a>(
    field: &'a Option<String>,
    what: &str,
    image: &ManifestImage,
) -> Result<&'a str, CliError> {
    field.as_deref().ok_or_else(|| {
        CliError::Validation(format!("image '{}' lacks {what} in the manifest", image.id))
    })
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let (manifest, base) = io::load_manifest(&args.gt).map_err(validation)?;
    let ignore_id = manifest.ignore_id();

    // Fail fast: every prediction file must exist before any computation.
    for image in &manifest.images {
        let paths = pred_paths(args.task, &args.pred, &image.id);
        for path in [
            &paths.mask,
            &paths.scores,
            &paths.semantic,
            &paths.instances,
        ]
        .into_iter()
        .flatten()
        {
            if !path.is_file() {
                return Err(validation(IoError::MissingPrediction {
                    image: image.id.clone(),
                    path: path.clone(),
                }));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .map_err(CliError::internal)?;

    let report = pool.install(|| evaluate_task(args, &manifest, &base, ignore_id))?;
    io::write_report(&args.out, &report).map_err(CliError::internal)?;
    Ok(())
}

fn evaluate_task(
    args: &EvalArgs,
    manifest: &DatasetManifest,
    base: &Path,
    ignore_id: u32,
) -> Result<MetricReport, CliError> {
    let gt_classes = manifest.num_gt_classes();
    match args.task {
        TaskArg::Anomaly => {
            let parts: Vec<AnomalyAccumulator> = manifest
                .images
                .par_iter()
                .map(|image| {
                    let gt_path = require_gt(&image.gt_anomaly, "gt_anomaly", image)?;
                    let gt = io::read_mask(&base.join(gt_path)).map_err(validation)?;
                    let (gt_anomaly, ignore) = split_anomaly_mask(&gt, ignore_id);
                    let paths = pred_paths(args.task, &args.pred, &image.id);
                    let pred_mask = read_binary_pred(&paths.mask.unwrap())?;
                    let scores: FeatureMap<f64> =
                        io::read_feature_map(&paths.scores.unwrap()).map_err(validation)?;
                    let mut acc = AnomalyAccumulator::new();
                    acc.add_image(&scores, &pred_mask, &gt_anomaly, Some(&ignore))
                        .map_err(|e| CliError::Validation(format!("image '{}': {e}", image.id)))?;
                    Ok(acc)
                })
                .collect::<Result<_, CliError>>()?;
            let mut total = AnomalyAccumulator::new();
            for part in &parts {
                total.merge(part);
            }
            total.finalize().map_err(validation)
        }
        TaskArg::OwSemantic => {
            let parts: Vec<OwSemanticAccumulator> = manifest
                .images
                .par_iter()
                .map(|image| {
                    let gt_path = require_gt(&image.gt_semantic, "gt_semantic", image)?;
                    let gt = io::read_semantic_mask(&base.join(gt_path)).map_err(validation)?;
                    let paths = pred_paths(args.task, &args.pred, &image.id);
                    let pred =
                        io::read_semantic_mask(&paths.semantic.unwrap()).map_err(validation)?;
                    let mut acc = OwSemanticAccumulator::new(gt_classes, Some(ignore_id));
                    acc.add_image(&pred, &gt)
                        .map_err(|e| CliError::Validation(format!("image '{}': {e}", image.id)))?;
                    Ok(acc)
                })
                .collect::<Result<_, CliError>>()?;
            let mut total = OwSemanticAccumulator::new(gt_classes, Some(ignore_id));
            for part in &parts {
                total.merge(part).map_err(validation)?;
            }
            Ok(total.finalize())
        }
        TaskArg::OsPanoptic => {
            let parts: Vec<OsPanopticAccumulator> = manifest
                .images
                .par_iter()
                .map(|image| {
                    let gt_anom_path = require_gt(&image.gt_anomaly, "gt_anomaly", image)?;
                    let gt_inst_path = require_gt(&image.gt_instance, "gt_instance", image)?;
                    let gt = io::read_mask(&base.join(gt_anom_path)).map_err(validation)?;
                    let (gt_anomaly, ignore) = split_anomaly_mask(&gt, ignore_id);
                    let gt_inst =
                        io::read_instance_mask(&base.join(gt_inst_path)).map_err(validation)?;
                    let paths = pred_paths(args.task, &args.pred, &image.id);
                    let pred_anomaly = read_binary_pred(&paths.mask.unwrap())?;
                    let pred_inst =
                        io::read_instance_mask(&paths.instances.unwrap()).map_err(validation)?;
                    let mut acc = OsPanopticAccumulator::new();
                    acc.add_image(
                        &pred_anomaly,
                        &pred_inst,
                        &gt_anomaly,
                        &gt_inst,
                        Some(&ignore),
                    )
                    .map_err(|e| CliError::Validation(format!("image '{}': {e}", image.id)))?;
                    Ok(acc)
                })
                .collect::<Result<_, CliError>>()?;
            let mut total = OsPanopticAccumulator::new();
            for part in &parts {
                total.merge(part);
            }
            Ok(total.finalize())
        }
        TaskArg::OwPanoptic => {
            let things = manifest.thing_ids();
            let parts: Vec<OwPanopticAccumulator> = manifest
                .images
                .par_iter()
                .map(|image| {
                    let gt_sem_path = require_gt(&image.gt_semantic, "gt_semantic", image)?;
                    let gt_inst_path = require_gt(&image.gt_instance, "gt_instance", image)?;
                    let gt_sem =
                        io::read_semantic_mask(&base.join(gt_sem_path)).map_err(validation)?;
                    let gt_inst =
                        io::read_instance_mask(&base.join(gt_inst_path)).map_err(validation)?;
                    let paths = pred_paths(args.task, &args.pred, &image.id);
                    let pred_sem =
                        io::read_semantic_mask(&paths.semantic.unwrap()).map_err(validation)?;
                    let pred_inst =
                        io::read_instance_mask(&paths.instances.unwrap()).map_err(validation)?;
                    let mut acc =
                        OwPanopticAccumulator::new(gt_classes, things.clone(), Some(ignore_id));
                    acc.add_image(&pred_sem, &pred_inst, &gt_sem, &gt_inst)
                        .map_err(|e| CliError::Validation(format!("image '{}': {e}", image.id)))?;
                    Ok(acc)
                })
                .collect::<Result<_, CliError>>()?;
            let mut total = OwPanopticAccumulator::new(gt_classes, things, Some(ignore_id));
            for part in &parts {
                total.merge(part).map_err(validation)?;
            }
            total.finalize().map_err(validation)
        }
    }
}

pub fn postprocess(args: &PostprocessArgs) -> Result<(), CliError> {
    if args.min_cluster_size < 2 {
        return Err(CliError::Validation(
            "--min-cluster-size must be at least 2".into(),
        ));
    }
    if !(args.eta.is_finite() && args.eta > 0.0) {
        return Err(CliError::Validation("--eta must be positive".into()));
    }
    let sem: FeatureMap<f64> = io::read_feature_map(&args.sem).map_err(validation)?;
    let con: FeatureMap<f64> = io::read_feature_map(&args.con).map_err(validation)?;
    let offsets: OffsetField<f64> = io::read_offset_field(&args.offsets).map_err(validation)?;

    let mut state = match &args.state {
        Some(path) if path.is_file() => io::read_state(path).map_err(validation)?,
        _ => {
            let bank: DescriptorBank<f64> = io::read_bank(&args.bank).map_err(validation)?;
            DiscoveryState::new(bank)
        }
    };

    let params = PipelineParams {
        thing_classes: args.things.iter().copied().collect::<BTreeSet<u32>>(),
        cluster: ClusterParams {
            min_cluster_size: args.min_cluster_size,
            eta: args.eta,
        },
    };
    let out = run_pipeline(&sem, &con, &offsets, &mut state, &params).map_err(validation)?;

    std::fs::create_dir_all(&args.out).map_err(CliError::internal)?;
    io::write_semantic_mask(&args.out.join("semantic.png"), &out.semantic)
        .map_err(CliError::internal)?;
    io::write_semantic_mask(&args.out.join("semantic_ow.png"), &out.open_world_semantic)
        .map_err(CliError::internal)?;
    io::write_instance_mask(&args.out.join("instances.png"), &out.instances)
        .map_err(CliError::internal)?;
    io::write_instance_mask(
        &args.out.join("instances_ow.png"),
        &out.open_world_instances(),
    )
    .map_err(CliError::internal)?;
    io::write_binary_mask(&args.out.join("anomaly.png"), &out.anomaly)
        .map_err(CliError::internal)?;
    if let Some(path) = &args.state {
        io::write_state(path, &state).map_err(CliError::internal)?;
    }
    Ok(())
}

fn synth_manifest(task: &str, spec: &SceneSpec, gt: &[(&str, String)]) -> DatasetManifest {
    let num_unknown = spec.classes.len() - spec.num_known();
    let mut classes = vec![ClassEntry {
        id: 0,
        name: "known".into(),
        thing: false,
        ignore: false,
    }];
    for u in 0..num_unknown {
        classes.push(ClassEntry {
            id: u as u32 + 1,
            name: format!("unknown_{u}"),
            thing: true,
            ignore: false,
        });
    }
    classes.push(ClassEntry {
        id: SYNTH_IGNORE_ID,
        name: "ignore".into(),
        thing: false,
        ignore: true,
    });
    let mut image = ManifestImage {
        id: spec.name.clone(),
        gt_semantic: None,
        gt_instance: None,
        gt_anomaly: None,
    };
    for (kind, path) in gt {
        match *kind {
            "semantic" => image.gt_semantic = Some(path.clone()),
            "instance" => image.gt_instance = Some(path.clone()),
            "anomaly" => image.gt_anomaly = Some(path.clone()),
            _ => unreachable!(),
        }
    }
    DatasetManifest {
        version: 1,
        task: task.into(),
        images: vec![image],
        classes,
    }
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let spec = io::load_scene_spec(&args.spec).map_err(validation)?;
    let scene: Scene<f64> = generate(&spec).map_err(validation)?;
    let name = &spec.name;

    let out = &args.out;
    for sub in ["gt", "streams", "pred"] {
        std::fs::create_dir_all(out.join(sub)).map_err(CliError::internal)?;
    }

    // Ground truth in the task encodings.
    let gt_ow_semantic = scene.gt_open_world_semantic();
    let gt_anomaly = scene.gt_anomaly();
    let gt_instances = scene.gt_unknown_instances();
    io::write_semantic_mask(
        &out.join(format!("gt/{name}_semantic.png")),
        &gt_ow_semantic,
    )
    .map_err(CliError::internal)?;
    io::write_binary_mask(&out.join(format!("gt/{name}_anomaly.png")), &gt_anomaly)
        .map_err(CliError::internal)?;
    io::write_instance_mask(&out.join(format!("gt/{name}_instance.png")), &gt_instances)
        .map_err(CliError::internal)?;

    // Decoder output streams and the frozen bank, for `postprocess`.
    io::write_feature_map(
        &out.join(format!("streams/{name}_sem.owfm")),
        &scene.sem_features,
    )
    .map_err(CliError::internal)?;
    io::write_feature_map(
        &out.join(format!("streams/{name}_con.owfm")),
        &scene.con_features,
    )
    .map_err(CliError::internal)?;
    io::write_offset_field(
        &out.join(format!("streams/{name}_offsets.owfm")),
        &scene.offsets,
    )
    .map_err(CliError::internal)?;
    let bank: DescriptorBank<f64> = spec.known_bank().map_err(validation)?;
    io::write_bank(&out.join("bank.owbk"), &bank).map_err(CliError::internal)?;

    // Perfect predictions derived from the ground truth.
    io::write_binary_mask(&out.join(format!("pred/{name}_anomaly.png")), &gt_anomaly)
        .map_err(CliError::internal)?;
    io::write_feature_map(
        &out.join(format!("pred/{name}_scores.owfm")),
        &scene.perfect_scores(),
    )
    .map_err(CliError::internal)?;
    io::write_semantic_mask(
        &out.join(format!("pred/{name}_semantic.png")),
        &gt_ow_semantic,
    )
    .map_err(CliError::internal)?;
    io::write_instance_mask(
        &out.join(format!("pred/{name}_instances.png")),
        &gt_instances,
    )
    .map_err(CliError::internal)?;

    // One manifest per task, all pointing at the same ground truth.
    let gt_semantic_path = format!("gt/{name}_semantic.png");
    let gt_anomaly_path = format!("gt/{name}_anomaly.png");
    let gt_instance_path = format!("gt/{name}_instance.png");
    let manifests = [
        ("anomaly", vec![("anomaly", gt_anomaly_path.clone())]),
        ("ow-semantic", vec![("semantic", gt_semantic_path.clone())]),
        (
            "os-panoptic",
            vec![
                ("anomaly", gt_anomaly_path.clone()),
                ("instance", gt_instance_path.clone()),
            ],
        ),
        (
            "ow-panoptic",
            vec![
                ("semantic", gt_semantic_path.clone()),
                ("instance", gt_instance_path.clone()),
            ],
        ),
    ];
    for (task, gt) in manifests {
        let manifest = synth_manifest(task, &spec, &gt);
        let file = format!("manifest_{}.json", task.replace('-', "_"));
        io::save_manifest(&out.join(file), &manifest).map_err(CliError::internal)?;
    }
    Ok(())
}

pub fn bank_build(args: &BankBuildArgs) -> Result<(), CliError> {
    if args.classes == 0 {
        return Err(CliError::Validation("--classes must be at least 1".into()));
    }
    let mut feature_files: Vec<PathBuf> = std::fs::read_dir(&args.features)
        .map_err(validation)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "owfm"))
        .collect();
    feature_files.sort();
    if feature_files.is_empty() {
        return Err(CliError::Validation(format!(
            "no .owfm files in {}",
            args.features.display()
        )));
    }

    let mut bank: Option<DescriptorBank<f64>> = None;
    for path in &feature_files {
        let features: FeatureMap<f64> = io::read_feature_map(path).map_err(validation)?;
        let stem = path.file_stem().unwrap().to_string_lossy();
        let label_path = args.labels.join(format!("{stem}.png"));
        if !label_path.is_file() {
            return Err(CliError::Validation(format!(
                "no label mask for '{stem}': {}",
                label_path.display()
            )));
        }
        let labels = io::read_semantic_mask(&label_path).map_err(validation)?;
        if labels.shape() != features.shape() {
            return Err(CliError::Validation(format!(
                "'{stem}': label mask shape does not match features"
            )));
        }
        if let Some(dim) = args.dim {
            if features.dim() != dim {
                return Err(CliError::Validation(format!(
                    "'{stem}': feature dim {} does not match --dim {dim}",
                    features.dim()
                )));
            }
        }
        let bank = bank.get_or_insert_with(|| DescriptorBank::new(features.dim(), args.classes));
        if bank.dim() != features.dim() {
            return Err(CliError::Validation(format!(
                "'{stem}': feature dim {} differs from earlier files ({})",
                features.dim(),
                bank.dim()
            )));
        }

        // Batch the image's pixels per class; labels outside the class range
        // are void and skipped.
        let mut per_class: Vec<Vec<&[f64]>> = vec![Vec::new(); args.classes];
        for h in 0..labels.height() {
            for w in 0..labels.width() {
                let label = labels.label(h, w) as usize;
                if label < args.classes {
                    per_class[label].push(features.pixel(h, w));
                }
            }
        }
        for (class, samples) in per_class.iter().enumerate() {
            bank.update(class, samples).map_err(validation)?;
        }
    }

    let mut bank = bank.expect("at least one feature file");
    bank.freeze_all();
    io::write_bank(&args.out, &bank).map_err(CliError::internal)?;
    Ok(())
}
