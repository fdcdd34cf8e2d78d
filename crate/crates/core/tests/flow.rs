//! Dataset on disk, prior training, inversion, result tree and evaluation,
//! at toy sizes.

use spi_core::eval::{result_dir, run_eval, CHECKPOINT_FILE};
use spi_core::field::{FieldShape, RenderSettings};
use spi_core::geometry::Intrinsics;
use spi_core::pipeline::{
    pretrain_prior, run_ablation, spi_invert, write_outputs, AblationFlags, InversionConfig, InversionInput,
    InversionResult, PretrainConfig, Prior, TURNTABLE_YAWS_DEG,
};
use spi_core::synthhead::{export_dataset, generate_scene, load_dataset, SceneRecord};

const SIDE: usize = 32;

fn views() -> Vec<(f64, f64)> {
    [-60.0f64, 0.0, 60.0].iter().map(|d| (d.to_radians(), 0.0)).collect()
}

fn records() -> Vec<SceneRecord> {
    let k = Intrinsics::for_resolution(SIDE);
    let s = RenderSettings { samples: 16, ..Default::default() };
    (0..2)
        .map(|i| SceneRecord::render(generate_scene(40 + i, 0.25 * i as f64).unwrap(), &views(), &k, &s).unwrap())
        .collect()
}

fn prior(recs: &[SceneRecord]) -> Prior {
    let cfg = PretrainConfig {
        shape: FieldShape {
            levels: vec![(6, 3), (10, 3)],
            channels: 4,
        },
        steps: 6,
        resolution: SIDE,
        samples: 16,
        ..Default::default()
    };
    let (p, curve) = pretrain_prior(recs, &cfg).unwrap();
    assert_eq!(curve.len(), 6);
    assert_eq!(p.latents.len(), recs.len());
    p
}

fn tiny_config() -> InversionConfig {
    InversionConfig {
        stage1_steps: 4,
        stage2_steps: 3,
        resolution: SIDE,
        samples: 16,
        bank_size: 2,
        log_every: 0,
        depth_batch: 2,
        ..Default::default()
    }
}

#[test]
fn dataset_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let recs = records();
    export_dataset(&recs, &data).unwrap();
    let loaded = load_dataset(&data).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded[1].spec, recs[1].spec);

    let prior = prior(&loaded);
    let prior_path = dir.path().join("prior.spi");
    prior.save(&prior_path).unwrap();
    let prior = Prior::load(&prior_path).unwrap();

    let results = dir.path().join("results");
    let cfg = tiny_config();
    for (si, rec) in loaded.iter().enumerate() {
        let input = InversionInput::from_record(rec, 2, SIDE).unwrap();
        let r = spi_invert(&prior, &input, &cfg).unwrap();
        let out = result_dir(&results, "full", si, 2);
        write_outputs(&out, &r, &cfg).unwrap();
        assert!(out.join(CHECKPOINT_FILE).exists());
        assert!(out.join("losses.csv").exists());
        for y in TURNTABLE_YAWS_DEG {
            assert!(out.join(format!("turntable_{:+03}.png", y as i64)).exists(), "turntable {y}");
        }
        let (model, w, noise) = InversionResult::load_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!((model, w, noise), (r.model.clone(), r.latent.clone(), r.noise.clone()));
    }

    let report = run_eval(&results, &data, &[2, 1], None, 3).unwrap();
    // View 1 was never inverted.
    assert_eq!(report.skipped.len(), 2);
    assert_eq!(report.summaries.len(), 2);
    assert_eq!(report.rows.len(), 2 * views().len());
    assert!(report.rows.iter().all(|r| r.msgp.is_finite() && r.depth_error.is_finite()));
    assert!(result_dir(&results, "full", 0, 2).join("contact_sheet.png").exists());
    let again = run_eval(&results, &data, &[2, 1], None, 3).unwrap();
    assert_eq!(again, report);
}

#[test]
fn ablation_rows_follow_the_chain() {
    let recs = records();
    let prior = prior(&recs);
    let input = InversionInput::from_record(&recs[0], 2, SIDE).unwrap();
    let runs = run_ablation(&prior, &input, &tiny_config()).unwrap();
    let names: Vec<&str> = runs.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["stage1", "symmetry", "joint", "depth_reg", "full", "pti"]);
    // The two latent-only rows leave the generator untouched.
    assert_eq!(runs[0].result.model, prior.model);
    assert_eq!(runs[1].result.model, prior.model);
    assert_eq!(runs[0].result.lambda_m, 0.0);
    assert!(runs[1].result.lambda_m > 0.0);
    // Rows sharing a latent stage start from the same pivot.
    assert_eq!(runs[1].result.latent, runs[4].result.latent);
    assert_eq!(runs[0].result.latent, runs[5].result.latent);
    assert_eq!(runs[5].config.flags, AblationFlags::pivotal_tuning_baseline());
}
