//! End-to-end run on a drift-corrupted phantom, printing metrics per stage.
//!
//! ```text
//! cargo run --release --example phantom_pipeline -- drift=0.35 epochs2=50 epochs3=50 seed=0
//! ```

use std::collections::HashMap;
use std::time::Instant;

use tomoseg::evalkit::evaluate_volumes;
use tomoseg::phantom::{generate_phantom, Drift, DriftKind, PhantomSpec};
use tomoseg::pseudolabel::{generate_pseudolabels, PseudoLabelConfig};
use tomoseg::segnet::{build_model, segment_volume, ModelConfig};
use tomoseg::selftrain::{train_stage2, train_stage3, StageSetup, TrainConfig};
use tomoseg::volume::{normalize, NormalizeMode};

fn main() -> tomoseg::Result<()> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().expect(k));
    let seed = get("seed", 0.0) as u64;
    let k = get("k", 3.0) as usize;

    let mut spec = PhantomSpec::three_phase([get("depth", 64.0) as usize, 128, 128], seed);
    spec.noise_sigma = get("noise", 0.04);
    spec.drift = Drift {
        kind: DriftKind::Linear,
        amplitude: get("drift", 0.35),
        angle_deg: get("angle", 30.0),
    };
    let phantom = generate_phantom(&spec)?;
    let volume = normalize(&phantom.volume, NormalizeMode::Percentile { p_lo: 0.5, p_hi: 99.5 })?;
    let (pseudo, _) = generate_pseudolabels(
        &volume,
        &PseudoLabelConfig {
            k,
            seed,
            ..Default::default()
        },
    )?;
    let base = evaluate_volumes(&pseudo, &phantom.ground_truth, &[0])?;
    println!("pseudo: miou {:.4} acc {:.4}", base.miou, base.pixel_accuracy);

    let model_cfg = ModelConfig {
        in_channels: 7,
        num_classes: k,
        depth: get("net_depth", 3.0) as usize,
        base_width: get("width", 12.0) as usize,
        skip_connections: true,
        dropout_rate: 0.1,
        norm_groups: 4,
        input_size: 64,
    };
    let model = build_model(&model_cfg, seed)?;
    println!("params: {}", model.params.len());
    let train = TrainConfig {
        epochs_stage2: get("epochs2", 50.0) as usize,
        epochs_stage3: get("epochs3", 50.0) as usize,
        crop_size: 64,
        seed,
        eval_every: get("eval_every", 10.0) as usize,
        stage3_keep_optimizer: get("keep_opt", 1.0) != 0.0,
        ..TrainConfig::default()
    };
    let mut setup = StageSetup::new(train);
    let strong = &mut setup.augment.strong;
    strong.enabled = get("strong", 1.0) != 0.0;
    strong.gamma.low = get("gamma_lo", strong.gamma.low);
    strong.gamma.high = get("gamma_hi", strong.gamma.high);
    let b = get("bright", strong.brightness.high);
    (strong.brightness.low, strong.brightness.high) = (-b, b);
    let c = get("contrast", strong.contrast.high);
    (strong.contrast.low, strong.contrast.high) = (-c, c);
    strong.clahe.probability = get("clahe_p", strong.clahe.probability);
    strong.clahe.clip_low = get("clip_lo", strong.clahe.clip_low);
    strong.clahe.clip_high = get("clip_hi", strong.clahe.clip_high);
    setup.ground_truth = Some(&phantom.ground_truth);

    let t = Instant::now();
    let s2 = train_stage2(model, &volume, &pseudo, &setup, None)?;
    for r in &s2.history {
        if let Some(m) = r.student_miou {
            println!(
                "stage2 epoch {:3} loss {:.4} conf {:.3} miou {m:.4}",
                r.epoch,
                r.loss.unwrap_or(f64::NAN),
                r.mean_confidence
            );
        }
    }
    println!("stage2 took {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let s3 = train_stage3(&s2.checkpoint, &volume, &setup)?;
    for r in &s3.history {
        if let Some(m) = r.teacher_miou {
            println!(
                "stage3 epoch {:3} loss {:.4} mask {:.3} conf {:.3} teacher {m:.4} student {:.4}",
                r.epoch,
                r.loss.unwrap_or(f64::NAN),
                r.mask_fraction,
                r.mean_confidence,
                r.student_miou.unwrap_or(f64::NAN)
            );
        }
    }
    println!("stage3 took {:.1}s", t.elapsed().as_secs_f64());
    let final_labels = segment_volume(&s3.checkpoint.deployed()?, &volume)?;
    let fin = evaluate_volumes(&final_labels, &phantom.ground_truth, &[0])?;
    for c in &fin.per_class {
        println!("  class {} iou {:.4}", c.class, c.iou);
    }
    for c in &base.per_class {
        println!("  pseudo class {} iou {:.4}", c.class, c.iou);
    }
    println!(
        "final teacher: miou {:.4} (pseudo {:.4}, delta {:+.4})",
        fin.miou,
        base.miou,
        fin.miou - base.miou
    );
    Ok(())
}
