use ecg_abduction::gbt::{
    leaf_weight, predict_gbt, split_gain, train_gbt, train_gbt_with_history, GbtHyperparams,
    GbtModel, Node,
};
use ecg_abduction::NUM_CLASSES;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn stump_hp() -> GbtHyperparams {
    GbtHyperparams {
        max_depth: 1,
        eta: 0.2,
        gamma: 0.0,
        colsample_bytree: 1.0,
        min_child_weight: 0.0,
        subsample: 1.0,
        rounds: 1,
        lambda: 1.0,
    }
}

/// (gain, feature, threshold, left weight, right weight) by brute force over
/// every feature and every cut between distinct sorted values.
fn brute_force_stump(x: &[Vec<f64>], g: &[f64], h: &[f64], lambda: f64) -> Option<(f64, usize, f64)> {
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..x[0].len() {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = (w[0] + w[1]) / 2.0;
            let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..x.len() {
                if x[i][f] < thr {
                    gl += g[i];
                    hl += h[i];
                } else {
                    gr += g[i];
                    hr += h[i];
                }
            }
            let gain = 0.5
                * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda)
                    - (gl + gr).powi(2) / (hl + hr + lambda));
            if gain > 0.0 && best.map_or(true, |b| gain > b.0 + 1e-12) {
                best = Some((gain, f, thr));
            }
        }
    }
    best
}

#[test]
fn stump_matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..40 {
        let x: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.gen_range(0..6) as f64).collect())
            .collect();
        let y: Vec<usize> = (0..8).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
        let hp = stump_hp();
        let m = train_gbt(&x, &y, &hp, case).unwrap();
        assert_eq!(m.trees.len(), 1);
        for c in 0..NUM_CLASSES {
            // First round: p = 1/4 everywhere.
            let g: Vec<f64> = y.iter().map(|&k| 0.25 - (k == c) as u8 as f64).collect();
            let h = vec![0.25 * 0.75; 8];
            let tree = &m.trees[0][c];
            match brute_force_stump(&x, &g, &h, hp.lambda) {
                None => {
                    assert_eq!(tree.nodes.len(), 1, "case {case} class {c}");
                    let w = hp.eta * leaf_weight(g.iter().sum(), h.iter().sum(), hp.lambda);
                    match tree.nodes[0] {
                        Node::Leaf { leaf, .. } => assert!((leaf - w).abs() < 1e-12),
                        _ => panic!("expected a leaf"),
                    }
                }
                Some((gain, f, thr)) => {
                    let Node::Split { feature, threshold, gain: got, left, right, .. } = tree.nodes[0]
                    else {
                        panic!("case {case} class {c}: expected a split")
                    };
                    assert!((got - gain).abs() < 1e-9, "case {case} class {c}");
                    assert_eq!((feature, threshold), (f, thr), "case {case} class {c}");
                    let side = |left_side: bool| {
                        let (mut gs, mut hs) = (0.0, 0.0);
                        for i in 0..8 {
                            if (x[i][f] < thr) == left_side {
                                gs += g[i];
                                hs += h[i];
                            }
                        }
                        hp.eta * -gs / (hs + hp.lambda)
                    };
                    for (k, want) in [(left, side(true)), (right, side(false))] {
                        match tree.nodes[k] {
                            Node::Leaf { leaf, .. } => assert!((leaf - want).abs() < 1e-12),
                            _ => panic!("depth exceeded"),
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn split_gain_reference_values() {
    assert!((split_gain(-2.0, 3.0, 2.0, 3.0, 1.0, 0.0) - 1.0).abs() < 1e-12);
    assert_eq!(split_gain(1.0, 2.0, 1.0, 2.0, 1.0, 0.0) - 1.0, split_gain(1.0, 2.0, 1.0, 2.0, 1.0, 1.0));
    assert_eq!(leaf_weight(4.0, 7.0, 1.0), -0.5);
}

fn toy(n_per_class: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..NUM_CLASSES {
        for _ in 0..n_per_class {
            let mut row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            row[0] = 10.0 * c as f64 + rng.gen_range(-2.0..2.0);
            x.push(row);
            y.push(c);
        }
    }
    (x, y)
}

fn argmax(p: &[f64; NUM_CLASSES]) -> usize {
    (0..NUM_CLASSES).fold(0, |b, i| if p[i] > p[b] { i } else { b })
}

#[test]
fn separable_toy_is_learned_perfectly() {
    let (x, y) = toy(120, 70, 1);
    let m = train_gbt(&x, &y, &GbtHyperparams::default(), 7).unwrap();
    assert_eq!(m.trees.len(), 60);
    for (row, &c) in x.iter().zip(&y) {
        let p = predict_gbt(&m, row).unwrap();
        assert_eq!(argmax(&p.0), c);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let (x, y) = toy(60, 10, 2);
    let hp = GbtHyperparams {
        rounds: 15,
        ..Default::default()
    };
    let a = train_gbt(&x, &y, &hp, 3).unwrap().to_json().unwrap();
    let b = train_gbt(&x, &y, &hp, 3).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    let back = GbtModel::from_json(&a).unwrap();
    assert_eq!(back.to_json().unwrap(), a);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["classes"], 4);
    assert_eq!(v["version"], 1);
    assert!(v["hp"]["eta"].is_number());
}

#[test]
fn full_sample_loss_never_increases() {
    let (mut x, y) = toy(80, 8, 3);
    // Overlapping classes so the loss keeps moving for many rounds.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for row in &mut x {
        row[0] += rng.gen_range(-12.0..12.0);
    }
    let hp = GbtHyperparams {
        subsample: 1.0,
        colsample_bytree: 1.0,
        ..Default::default()
    };
    let (_, hist) = train_gbt_with_history(&x, &y, &hp, 0).unwrap();
    assert!(hist[0] < (NUM_CLASSES as f64).ln());
    for w in hist.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{hist:?}");
    }
}

#[test]
fn trees_respect_depth_and_leaf_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 600;
    let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
    let x: Vec<Vec<f64>> = y
        .iter()
        .map(|&c| {
            (0..70)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + if j % 7 == c { 1.0 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let hp = GbtHyperparams::default();
    let m = train_gbt(&x, &y, &hp, 11).unwrap();
    let mut splits = 0;
    for round in &m.trees {
        assert_eq!(round.len(), NUM_CLASSES);
        for t in round {
            assert!(t.depth() <= hp.max_depth);
            splits += t.nodes.len() / 2;
            for (cover, root) in t.leaves() {
                assert!(root || cover >= hp.min_child_weight, "{cover}");
            }
        }
    }
    assert!(splits > 0);
    for row in x.iter().take(50) {
        let p = predict_gbt(&m, row).unwrap().0;
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut holed = row.clone();
        holed[3] = f64::NAN;
        assert!(predict_gbt(&m, &holed).unwrap().0.iter().all(|v| v.is_finite()));
    }
}
