//! Trains every variant on a synthetic suite and prints test scores.
//!
//! Usage: `synthetic_recovery [config.json]` where the optional JSON holds
//! `{"synth": SynthConfig, "train": TrainConfig, "variants": [...]}`.

use std::time::Instant;

use eyear::data::split_dataset;
use eyear::encoder::semantic_points;
use eyear::synthetic::{generate, SynthConfig};
use eyear::train::{evaluate, evaluate_baseline, human_pds, Baseline, EvalConfig, TrainConfig, TrainData, Trainer};
use eyear::Variant;
use serde::Deserialize;

#[derive(Deserialize, Default)]
#[serde(default)]
struct Setup {
    synth: Option<SynthConfig>,
    train: Option<TrainConfig>,
    variants: Option<Vec<Variant>>,
}

fn main() -> eyear::Result<()> {
    let setup: Setup = match std::env::args().nth(1) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => Setup::default(),
    };
    let synth = setup.synth.unwrap_or(SynthConfig {
        n_scenes: 250,
        seed: 2024,
        ..Default::default()
    });
    let base = setup.train.unwrap_or_default();
    let variants = setup.variants.unwrap_or_else(|| Variant::ALL.to_vec());

    let scenes = generate(&synth)?;
    let truth: std::collections::HashMap<_, _> = scenes.iter().map(|s| (s.bundle.scene_id.clone(), s.clone())).collect();
    let ds = split_dataset(scenes.iter().map(|s| s.bundle.clone()).collect(), synth.seed)?;
    let test = ds.test();
    let eval = EvalConfig::default();
    for b in Baseline::ALL {
        let r = evaluate_baseline(b, &test, &eval)?;
        println!("baseline {:<15} pds {:.4} ed {:.1}", b.name(), r.aggregate.pds, r.aggregate.ed);
    }
    println!("human loo pds {:.4}", human_pds(&test, &eval)?);
    let noiseless = eyear::train::evaluate_with(&test, "noiseless", &eval, |s, _| Ok(truth[&s.scene_id].noiseless.clone()))?;
    println!("noiseless process pds {:.4} ed {:.1}", noiseless.aggregate.pds, noiseless.aggregate.ed);

    for v in variants {
        let mut cfg = base.clone();
        cfg.model.variant = v;
        cfg.model.embed_dim = synth.embed_dim;
        let t0 = Instant::now();
        let trainer = Trainer::new(TrainData::from_dataset(&ds), &cfg)?;
        let mut ck = trainer.start(&cfg)?;
        trainer.run(&mut ck, None)?;
        if std::env::var("SHOW_LOG").is_ok() {
            for e in &ck.history {
                println!("  {} {} train {:.6} val {:.6}", e.stage, e.epoch, e.train_loss, e.val_loss);
            }
        }
        let r = evaluate(ck.model(), &test, &eval)?;
        let s1 = ck.stage1_best.as_ref().map(|p| evaluate(p, &test, &eval)).transpose()?;
        let (mut hit, mut total, mut uhit, mut utotal) = (0, 0, 0, 0);
        for s in &test {
            let t = &truth[&s.scene_id];
            let sem = semantic_points(s, ck.model())?;
            let cell = 1.0 / s.grid_n as f64;
            for (i, p) in sem.iter().enumerate() {
                let dx = (p.x - t.targets[i].x) / cell;
                let dy = (p.y - t.targets[i].y) / cell;
                let ok = dx.hypot(dy) <= 1.5;
                if t.groundable[i] {
                    total += 1;
                    hit += ok as usize;
                } else {
                    utotal += 1;
                    uhit += ok as usize;
                }
            }
        }
        for (name, set) in [("train", ds.train()), ("test", ds.test())] {
            let (mut g, mut gn, mut u, mut un) = (0.0, 0, 0.0, 0);
            for s in set.iter().take(25) {
                let t = &truth[&s.scene_id];
                for (i, p) in semantic_points(s, ck.model())?.iter().enumerate() {
                    let e = p.dist(t.targets[i]);
                    if t.groundable[i] { g += e; gn += 1 } else { u += e; un += 1 }
                }
            }
            println!("  {name}: mean semantic error groundable {:.4} ungroundable {:.4}", g / gn as f64, u / un as f64);
        }
        let epochs: Vec<_> = ["mse", "pd"]
            .iter()
            .map(|st| ck.history.iter().filter(|e| e.stage.to_string() == *st).count())
            .collect();
        println!(
            "{:<12} pds {:.4} (stage1 {}) ed {:.1} dtw {:.1} sm {:.3} sem-hit {:.3} ungroundable-hit {:.3} alpha {:?} epochs {:?} {:.0}s",
            v.name(),
            r.aggregate.pds,
            s1.map(|r| format!("{:.4}", r.aggregate.pds)).unwrap_or_else(|| "-".into()),
            r.aggregate.ed,
            r.aggregate.dtw,
            r.aggregate.scanmatch,
            hit as f64 / total as f64,
            uhit as f64 / utotal.max(1) as f64,
            ck.model().alpha(),
            epochs,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
