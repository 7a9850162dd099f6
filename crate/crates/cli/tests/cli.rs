//! End-to-end tests of the `openpan` binary: synthetic fixture generation,
//! evaluation with byte-stable reports, the persisted-state postprocess flow,
//! and bank building.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use openpan_core::io;
use openpan_core::model::FeatureMap;
use openpan_core::synth::{ClassSpec, ObjectSpec, Region, SceneSpec};

fn openpan() -> Command {
    Command::new(env!("CARGO_BIN_EXE_openpan"))
}

fn run(args: &[&str]) -> Output {
    openpan().args(args).output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn scene_spec(name: &str, seed: u64) -> SceneSpec {
    let dim = 6;
    let gaussian = |axis: usize| {
        let mut mean = vec![0.0; dim];
        mean[axis] = 8.0;
        mean
    };
    SceneSpec {
        name: name.into(),
        seed,
        height: 40,
        width: 40,
        dim,
        classes: vec![
            ClassSpec {
                mean: vec![0.0; dim],
                var: vec![0.04; dim],
                known: true,
                thing: false,
            },
            ClassSpec {
                mean: gaussian(0),
                var: vec![0.04; dim],
                known: true,
                thing: true,
            },
            ClassSpec {
                mean: gaussian(1),
                var: vec![0.04; dim],
                known: false,
                thing: true,
            },
            ClassSpec {
                mean: gaussian(2),
                var: vec![0.04; dim],
                known: false,
                thing: true,
            },
        ],
        background_class: 0,
        objects: vec![
            ObjectSpec {
                class: 1,
                region: Region::Rect {
                    top: 2,
                    left: 2,
                    height: 8,
                    width: 8,
                },
            },
            ObjectSpec {
                class: 2,
                region: Region::Rect {
                    top: 4,
                    left: 22,
                    height: 12,
                    width: 14,
                },
            },
            ObjectSpec {
                class: 3,
                region: Region::Rect {
                    top: 24,
                    left: 4,
                    height: 12,
                    width: 14,
                },
            },
        ],
        offset_noise: 0.2,
        con_norm_noise: 0.1,
        con_unknown_sigma: 0.1,
    }
}

fn write_spec(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let spec = scene_spec(name, seed);
    let path = dir.join(format!("{name}.json"));
    io::save_scene_spec(&path, &spec).unwrap();
    path
}

#[test]
fn synth_then_eval_every_task_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = write_spec(dir.path(), "scene", 41);
    let out_dir = dir.path().join("scene");
    assert_success(&run(&[
        "synth",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));

    let pred = out_dir.join("pred");
    let cases = [
        (
            "anomaly",
            "manifest_anomaly.json",
            vec![("AUPR", 1.0), ("FPR95", 0.0), ("meanF1", 1.0)],
        ),
        (
            "ow-semantic",
            "manifest_ow_semantic.json",
            vec![("mIoU_ow", 1.0), ("Hom", 1.0), ("Com", 1.0)],
        ),
        (
            "os-panoptic",
            "manifest_os_panoptic.json",
            vec![("PQ_unk", 1.0), ("SQ_unk", 1.0), ("RQ_unk", 1.0)],
        ),
        (
            "ow-panoptic",
            "manifest_ow_panoptic.json",
            vec![("PQ", 1.0), ("mIoU_ow", 1.0)],
        ),
    ];
    for (task, manifest, expectations) in cases {
        let report_path = dir.path().join(format!("report_{task}.json"));
        assert_success(&run(&[
            "eval",
            task,
            "--pred",
            pred.to_str().unwrap(),
            "--gt",
            out_dir.join(manifest).to_str().unwrap(),
            "--out",
            report_path.to_str().unwrap(),
        ]));
        let text = std::fs::read_to_string(&report_path).unwrap();
        for (key, value) in expectations {
            assert!(
                text.contains(&format!("\"{key}\": {value:.6}")),
                "{task}: expected {key} = {value} in\n{text}"
            );
        }
    }
}

#[test]
fn eval_reports_are_byte_stable_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = write_spec(dir.path(), "scene", 43);
    let out_dir = dir.path().join("scene");
    assert_success(&run(&[
        "synth",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let report_a = dir.path().join("a.json");
    let report_b = dir.path().join("b.json");
    for (report, jobs) in [(&report_a, "1"), (&report_b, "4")] {
        assert_success(&run(&[
            "eval",
            "anomaly",
            "--pred",
            out_dir.join("pred").to_str().unwrap(),
            "--gt",
            out_dir.join("manifest_anomaly.json").to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
            "--jobs",
            jobs,
        ]));
    }
    assert_eq!(
        std::fs::read(&report_a).unwrap(),
        std::fs::read(&report_b).unwrap()
    );
}

#[test]
fn missing_required_flag_exits_with_usage_error() {
    let out = run(&["eval", "anomaly", "--pred", "/nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--gt"), "stderr: {stderr}");
}

#[test]
fn missing_prediction_names_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = write_spec(dir.path(), "scene", 47);
    let out_dir = dir.path().join("scene");
    assert_success(&run(&[
        "synth",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = run(&[
        "eval",
        "anomaly",
        "--pred",
        empty.to_str().unwrap(),
        "--gt",
        out_dir.join("manifest_anomaly.json").to_str().unwrap(),
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("scene"), "stderr: {stderr}");
}

#[test]
fn postprocess_keeps_class_ids_consistent_across_a_stream() {
    let dir = tempfile::tempdir().unwrap();
    // Two frames drawn from the same class set, different layouts/noise.
    let spec_a = scene_spec("frame0", 51);
    let mut spec_b = scene_spec("frame1", 52);
    spec_b.objects[0].region = Region::Rect {
        top: 30,
        left: 28,
        height: 8,
        width: 8,
    };
    spec_b.objects[1].region = Region::Rect {
        top: 20,
        left: 2,
        height: 12,
        width: 14,
    };
    spec_b.objects[2].region = Region::Rect {
        top: 2,
        left: 2,
        height: 12,
        width: 14,
    };
    for (name, spec) in [("frame0", &spec_a), ("frame1", &spec_b)] {
        let path = dir.path().join(format!("{name}.json"));
        io::save_scene_spec(&path, spec).unwrap();
        assert_success(&run(&[
            "synth",
            "--spec",
            path.to_str().unwrap(),
            "--out",
            dir.path().join(name).to_str().unwrap(),
        ]));
    }

    let state = dir.path().join("state.owbk");
    for name in ["frame0", "frame1"] {
        let scene_dir = dir.path().join(name);
        assert_success(&run(&[
            "postprocess",
            "--sem",
            scene_dir
                .join(format!("streams/{name}_sem.owfm"))
                .to_str()
                .unwrap(),
            "--con",
            scene_dir
                .join(format!("streams/{name}_con.owfm"))
                .to_str()
                .unwrap(),
            "--offsets",
            scene_dir
                .join(format!("streams/{name}_offsets.owfm"))
                .to_str()
                .unwrap(),
            "--bank",
            scene_dir.join("bank.owbk").to_str().unwrap(),
            "--out",
            dir.path().join(format!("out_{name}")).to_str().unwrap(),
            "--state",
            state.to_str().unwrap(),
            "--things",
            "1",
            "--min-cluster-size",
            "16",
        ]));
    }

    // The same unknown class must get the same open-world id in both frames,
    // even though its position (and discovery order) changed.
    let ow_a = io::read_semantic_mask(&dir.path().join("out_frame0/semantic_ow.png")).unwrap();
    let ow_b = io::read_semantic_mask(&dir.path().join("out_frame1/semantic_ow.png")).unwrap();
    // Frame 0: class 2 occupies (4..16, 22..36); frame 1 moved it to
    // (20..32, 2..16) per the spec edit above.
    let id_a = ow_a.label(10, 28);
    let id_b = ow_b.label(26, 8);
    assert!(id_a >= 1);
    assert_eq!(id_a, id_b, "class ids must persist across the stream");
    // And the other unknown class keeps its own id as well.
    let other_a = ow_a.label(30, 10);
    let other_b = ow_b.label(8, 8);
    assert_eq!(other_a, other_b);
    assert_ne!(id_a, other_a);
}

#[test]
fn postprocessed_outputs_evaluate_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = write_spec(dir.path(), "scene", 61);
    let scene_dir = dir.path().join("scene");
    assert_success(&run(&[
        "synth",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        scene_dir.to_str().unwrap(),
    ]));
    let out_dir = dir.path().join("out");
    assert_success(&run(&[
        "postprocess",
        "--sem",
        scene_dir.join("streams/scene_sem.owfm").to_str().unwrap(),
        "--con",
        scene_dir.join("streams/scene_con.owfm").to_str().unwrap(),
        "--offsets",
        scene_dir
            .join("streams/scene_offsets.owfm")
            .to_str()
            .unwrap(),
        "--bank",
        scene_dir.join("bank.owbk").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--things",
        "1",
        "--min-cluster-size",
        "16",
    ]));

    // Wire the pipeline outputs up as predictions for the panoptic tasks.
    let pred = dir.path().join("pipeline_pred");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::copy(out_dir.join("anomaly.png"), pred.join("scene_anomaly.png")).unwrap();
    std::fs::copy(
        out_dir.join("instances_ow.png"),
        pred.join("scene_instances.png"),
    )
    .unwrap();
    std::fs::copy(
        out_dir.join("semantic_ow.png"),
        pred.join("scene_semantic.png"),
    )
    .unwrap();

    for (task, manifest, key) in [
        ("os-panoptic", "manifest_os_panoptic.json", "PQ_unk"),
        ("ow-panoptic", "manifest_ow_panoptic.json", "PQ"),
    ] {
        let report_path = dir.path().join(format!("pipeline_{task}.json"));
        assert_success(&run(&[
            "eval",
            task,
            "--pred",
            pred.to_str().unwrap(),
            "--gt",
            scene_dir.join(manifest).to_str().unwrap(),
            "--out",
            report_path.to_str().unwrap(),
        ]));
        let text = std::fs::read_to_string(&report_path).unwrap();
        assert!(
            text.contains(&format!("\"{key}\": ")) && !text.contains(&format!("\"{key}\": null")),
            "{task}: {key} must be defined in\n{text}"
        );
    }
}

#[test]
fn bank_build_recovers_class_moments() {
    let dir = tempfile::tempdir().unwrap();
    let features_dir = dir.path().join("features");
    let labels_dir = dir.path().join("labels");
    std::fs::create_dir_all(&features_dir).unwrap();
    std::fs::create_dir_all(&labels_dir).unwrap();

    // Two images of constant-ish features per class.
    use openpan_core::synth::rng::SplitMix64;
    let mut rng = SplitMix64::new(3);
    for image in 0..2 {
        let labels =
            openpan_core::model::SemanticMask::from_fn(8, 8, |h, _| if h < 4 { 0 } else { 1 });
        let features = FeatureMap::<f64>::from_fn(8, 8, 2, |h, _, d| {
            let base = if h < 4 { 1.0 } else { 5.0 };
            // Keep the payload exactly representable in f32.
            base + (rng.next_below(100) as f64 / 128.0) * d as f64
        });
        io::write_feature_map(&features_dir.join(format!("img{image}.owfm")), &features).unwrap();
        io::write_semantic_mask(&labels_dir.join(format!("img{image}.png")), &labels).unwrap();
    }

    let bank_path = dir.path().join("bank.owbk");
    assert_success(&run(&[
        "bank",
        "build",
        "--features",
        features_dir.to_str().unwrap(),
        "--labels",
        labels_dir.to_str().unwrap(),
        "--classes",
        "2",
        "--dim",
        "2",
        "--out",
        bank_path.to_str().unwrap(),
    ]));
    let bank: openpan_core::stats::DescriptorBank<f64> = io::read_bank(&bank_path).unwrap();
    assert_eq!(bank.num_classes(), 2);
    assert_eq!(bank.count(0), 64);
    assert_eq!(bank.count(1), 64);
    assert!(bank.is_frozen(0) && bank.is_frozen(1));
    assert!((bank.mean(0).unwrap()[0] - 1.0).abs() < 1.0);
    assert!((bank.mean(1).unwrap()[0] - 5.0).abs() < 1.0);
}
