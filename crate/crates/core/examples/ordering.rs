//! Trains loss/mining variants on the fixture world over a few seeds and
//! prints accuracy on the held-out loop per condition.
//!
//! cargo run --release -p voloc-core --example ordering -- \
//!     [--epochs N] [--seeds K] [--r R] [--lr LR] [variant ...]
//!
//! A variant is a loss name optionally followed by `+hp` and/or `+pn`, e.g.
//! `triplet`, `triplet+hp`, `volume+hp+pn`; `+hd` selects the Hausdorff
//! positive distance.

use voloc_core::evaluate::{accuracy, evaluate_queries};
use voloc_core::losses::LossKind;
use voloc_core::presets::{fixture_conditions, fixture_splits, fixture_train_config, FIXTURE_THRESHOLD};
use voloc_core::retrieval::ReferenceMap;
use voloc_core::trainer::{train, Ablations, NoObserver};

fn parse_variant(v: &str) -> Option<(LossKind, Ablations, bool)> {
    let mut parts = v.split('+');
    let name = parts.next()?;
    let kind = LossKind::ALL.into_iter().find(|k| k.name() == name)?;
    let mut hausdorff = false;
    let mut ab = Ablations {
        hp_on: false,
        pn_on: false,
    };
    for p in parts {
        match p {
            "hp" => ab.hp_on = true,
            "pn" => ab.pn_on = true,
            "hd" => hausdorff = true,
            _ => return None,
        }
    }
    Some((kind, ab, hausdorff))
}

fn main() -> voloc_core::Result<()> {
    let mut epochs = 10;
    let mut seeds = 3;
    let mut r = None;
    let mut lr = None;
    let mut s_dim = None;
    let mut hidden = None;
    let mut r2 = None;
    let mut pca = false;
    let mut variants = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        let mut val = || args.next().expect("flag needs a value");
        match a.as_str() {
            "--epochs" => epochs = val().parse().expect("epochs"),
            "--seeds" => seeds = val().parse().expect("seeds"),
            "--r" => r = Some(val().parse().expect("r")),
            "--lr" => lr = Some(val().parse().expect("lr")),
            "--s" => s_dim = Some(val().parse().expect("s")),
            "--mlp" => hidden = Some(val().parse().expect("hidden")),
            "--r2" => r2 = Some(val().parse().expect("r2")),
            "--pca" => pca = true,
            v => variants.push(v.to_string()),
        }
    }
    if variants.is_empty() {
        variants = vec!["triplet".into(), "triplet+hp".into(), "volume+hp+pn".into()];
    }
    let conditions: Vec<String> = fixture_conditions().into_iter().map(|c| c.name).collect();
    for v in &variants {
        let Some((kind, ablations, hausdorff)) = parse_variant(v) else {
            eprintln!("unknown variant {v}");
            continue;
        };
        let mut sums = vec![0.0; conditions.len()];
        for seed in 1..=seeds {
            let world = fixture_splits(seed)?;
            let mut cfg = fixture_train_config(kind, ablations, seed);
            cfg.train.epochs = epochs;
            cfg.loss.use_hausdorff_positive = hausdorff;
            if r.is_some() {
                cfg.loss.r = r;
            }
            if let Some(s) = s_dim {
                cfg.embedder.s = s;
            }
            if let Some(h) = hidden {
                cfg.embedder.architecture = voloc_core::embedder::Architecture::Mlp { hidden: h };
            }
            if let Some(r2) = r2 {
                cfg.mining.r2 = r2;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            let out = train(&world.train, &cfg, 0, &mut NoObserver)?;
            let map = ReferenceMap::build(
                &world.references,
                &out.embedder,
                pca.then_some(256),
                0.0,
                0,
            )?;
            let outcomes = evaluate_queries(&map, &world.queries, &out.embedder, 0)?;
            let mut line = format!("{v:16} seed {seed}");
            for (k, cond) in conditions.iter().enumerate() {
                let group: Vec<_> = outcomes.iter().filter(|o| &o.condition == cond).cloned().collect();
                let acc = accuracy(&group, FIXTURE_THRESHOLD)?;
                sums[k] += acc;
                line += &format!("  {cond} {acc:.3}");
            }
            let last = out.epochs.last().map_or(0.0, |e| e.mean_loss);
            line += &format!("  loss {last:.4}");
            println!("{line}");
        }
        let means: Vec<String> = conditions
            .iter()
            .zip(&sums)
            .map(|(c, s)| format!("{c} {:.3}", s / seeds as f64))
            .collect();
        println!("{v:16} mean    {}", means.join("  "));
    }
    Ok(())
}
