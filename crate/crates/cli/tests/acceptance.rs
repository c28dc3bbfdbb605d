//! Acceptance gate for the training system: one test per criterion, each
//! printing a `criterion N: PASS` line (run with `--nocapture` to see the
//! lines; the harness itself reports one ok/FAILED row per criterion).
//!
//! Deterministic criteria (1-5, 10) check oracles, gradients, spot values,
//! degeneration to a plain mean-teacher step, and the moving-average
//! closed form. Empirical criteria (6-9, 11) train real models on
//! synthetic data; their runs are shared across tests through `OnceLock`.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use protoseg::commands::{cmd_train, TrainArgs};
use protoseg_core::augment::{
    align_teacher_prediction, extract_weak, extract_weak_mask, sample_geom, AugConfig, GeomView,
};
use protoseg_core::cps::{
    anchor_indices_labelled, anchor_indices_unlabelled, negative_indices_labelled,
    negative_indices_unlabelled, support_indices_unlabelled, Cps, CpsConfig,
};
use protoseg_core::crln::{Crln, RectifyVariant};
use protoseg_core::dim::{Dim, DimConfig};
use protoseg_core::gradcheck::check_gradients;
use protoseg_core::metrics::{argmax_classes, dice_binary, evaluate_binary, sliding_window_predict};
use protoseg_core::params::{ParamId, ParamStore};
use protoseg_core::rng::{init_rng, iter_rng};
use protoseg_core::sgd::{poly_lr, Sgd, SgdConfig};
use protoseg_core::tensor::{Dims3, Tensor};
use protoseg_core::trainer::{ema_update, shared_by_copy, Model, TrainConfig, Trainer};
use protoseg_core::volume::{generate_synthetic_dataset_with_truth, DatasetSplit, SynthConfig};

// ===================================================================
// criterion 1: overlap and surface metrics against a brute-force oracle
// ===================================================================

struct BruteMetrics {
    dice: f64,
    jaccard: f64,
    asd: f64,
    hd95: f64,
}

/// Independent re-computation of all four segmentation metrics with plain
/// loops: set counts for the overlaps, exhaustive pair scans for the
/// surface distances, and a re-derived linear-interpolation percentile.
fn brute_metrics(pred: &[bool], truth: &[bool], dims: Dims3, spacing: [f64; 3]) -> BruteMetrics {
    let mut inter = 0usize;
    let mut pa = 0usize;
    let mut ta = 0usize;
    let mut union = 0usize;
    for i in 0..pred.len() {
        if pred[i] && truth[i] {
            inter += 1;
        }
        if pred[i] {
            pa += 1;
        }
        if truth[i] {
            ta += 1;
        }
        if pred[i] || truth[i] {
            union += 1;
        }
    }
    let dice = if pa + ta == 0 { 1.0 } else { 2.0 * inter as f64 / (pa + ta) as f64 };
    let jaccard = if union == 0 { 1.0 } else { inter as f64 / union as f64 };

    let (asd, hd95) = if pa == 0 && ta == 0 {
        (0.0, 0.0)
    } else if pa == 0 || ta == 0 {
        let d = dims.to_array();
        let diag = ((d[0] - 1) as f64 * spacing[0]).powi(2)
            + ((d[1] - 1) as f64 * spacing[1]).powi(2)
            + ((d[2] - 1) as f64 * spacing[2]).powi(2);
        (diag.sqrt(), diag.sqrt())
    } else {
        let sp = brute_surface(pred, dims);
        let st = brute_surface(truth, dims);
        let mut pooled: Vec<f64> = Vec::new();
        for &a in &sp {
            pooled.push(brute_min_dist(a, &st, dims, spacing));
        }
        for &b in &st {
            pooled.push(brute_min_dist(b, &sp, dims, spacing));
        }
        let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = 0.95 * (pooled.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        let hd = pooled[lo] + (rank - lo as f64) * (pooled[hi] - pooled[lo]);
        (asd, hd)
    };
    BruteMetrics { dice, jaccard, asd, hd95 }
}

/// Face-connected boundary: a foreground voxel that touches the volume
/// border or a background voxel across one of its six faces.
fn brute_surface(mask: &[bool], dims: Dims3) -> Vec<usize> {
    let d = dims.to_array();
    let mut out = Vec::new();
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        let x = i % d[2];
        let y = (i / d[2]) % d[1];
        let z = i / (d[1] * d[2]);
        let at = |z: usize, y: usize, x: usize| mask[(z * d[1] + y) * d[2] + x];
        let exposed = z == 0
            || z + 1 == d[0]
            || y == 0
            || y + 1 == d[1]
            || x == 0
            || x + 1 == d[2]
            || !at(z - 1, y, x)
            || !at(z + 1, y, x)
            || !at(z, y - 1, x)
            || !at(z, y + 1, x)
            || !at(z, y, x - 1)
            || !at(z, y, x + 1);
        if exposed {
            out.push(i);
        }
    }
    out
}

fn brute_min_dist(from: usize, to: &[usize], dims: Dims3, spacing: [f64; 3]) -> f64 {
    let d = dims.to_array();
    let pos = |i: usize| -> [f64; 3] {
        [
            (i / (d[1] * d[2])) as f64 * spacing[0],
            ((i / d[2]) % d[1]) as f64 * spacing[1],
            (i % d[2]) as f64 * spacing[2],
        ]
    };
    let p = pos(from);
    let mut best = f64::INFINITY;
    for &j in to {
        let q = pos(j);
        let dist =
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        if dist < best {
            best = dist;
        }
    }
    best
}

#[test]
fn criterion_01_overlap_and_surface_metrics_match_brute_force() {
    let mut rng: ChaCha8Rng = init_rng(101);
    let started = std::time::Instant::now();
    for trial in 0..200u32 {
        let dims = Dims3(
            rng.gen_range(1..=12usize),
            rng.gen_range(1..=12usize),
            rng.gen_range(1..=12usize),
        );
        let n = dims.count();
        let spacing = [
            rng.gen_range(0.4..2.5),
            rng.gen_range(0.4..2.5),
            rng.gen_range(0.4..2.5),
        ];
        let fill = |rng: &mut ChaCha8Rng, force: u32| -> Vec<bool> {
            match force {
                1 => vec![false; n],
                2 => vec![true; n],
                _ => {
                    let p = rng.gen_range(0.05..0.95);
                    (0..n).map(|_| rng.gen_bool(p)).collect()
                }
            }
        };
        let pred = fill(&mut rng, if trial % 13 == 0 { 1 } else { 0 });
        let truth = fill(&mut rng, if trial % 17 == 0 { 1 } else if trial % 19 == 0 { 2 } else { 0 });

        let got = evaluate_binary(&pred, &truth, dims, spacing);
        let want = brute_metrics(&pred, &truth, dims, spacing);
        assert_eq!(got.dice, want.dice, "dice, trial {trial} dims {dims:?}");
        assert_eq!(got.jaccard, want.jaccard, "jaccard, trial {trial} dims {dims:?}");
        assert!(
            (got.asd - want.asd).abs() <= 1e-9,
            "asd, trial {trial}: {} vs {}",
            got.asd,
            want.asd
        );
        assert!(
            (got.hd95 - want.hd95).abs() <= 1e-9,
            "hd95, trial {trial}: {} vs {}",
            got.hd95,
            want.hd95
        );
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "oracle comparison took {secs:.1}s");
    println!("criterion 1: PASS — 200 random mask pairs match the brute-force oracle ({secs:.1}s)");
}

// ===================================================================
// criterion 2: analytic gradients vs central finite differences
// ===================================================================

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Voxel-normalised positive probability field of shape `[2, 2, 2, 2]`.
fn prob_pair_tensor(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data = vec![0.0f64; 16];
    for i in 0..8 {
        let a = rng.gen_range(0.15..0.85);
        data[i] = a;
        data[8 + i] = 1.0 - a;
    }
    Tensor::from_vec(&[2, 2, 2, 2], data).unwrap()
}

#[test]
fn criterion_02_analytic_gradients_match_finite_differences() {
    let started = std::time::Instant::now();
    let mut rng = init_rng(202);
    let mut worst: Vec<(&str, f64)> = Vec::new();

    // Shared tiny prototype-interaction module: 2 classes, 2 prototypes,
    // bottleneck width 3, mid width 2, learned aggregation.
    let dim_cfg = DimConfig {
        num_classes: 2,
        prototypes_per_class: 2,
        feat_bottleneck: 3,
        feat_mid: 2,
        learned_aggregation: true,
    };
    let mut dim_store: ParamStore<f64> = ParamStore::new();
    let dim = Dim::new(&mut dim_store, &mut rng, "dim", dim_cfg).unwrap();

    // (a) prototype refresh (cross-attention update against bottleneck
    // features), differentiated through the bank, the features, and the
    // query projection.
    {
        let protos = dim_store.value(dim.prototypes_id()).clone();
        let f2 = rand_tensor(&mut rng, &[3, 2, 2, 2], -0.8, 0.8);
        let q1w = dim_store.value(dim_store.find("dim.refresh.q.w").unwrap()).clone();
        let w = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let store = dim_store.clone();
        let report = check_gradients(
            |tape, inputs| {
                let mut vars = store.register_frozen(tape);
                vars[dim.prototypes_id().0] = inputs[0];
                vars[store.find("dim.refresh.q.w").unwrap().0] = inputs[2];
                let r = dim.refresh_prototypes(tape, &vars, inputs[1], 1);
                let wc = tape.constant(w.clone());
                let p = tape.mul(r, wc);
                tape.mean_all(p)
            },
            &[protos, f2, q1w],
            1e-5,
            1e-10,
        );
        assert!(report.within(1e-4), "prototype refresh: {report:?}");
        worst.push(("refresh", report.max_rel_err));
    }

    // (b) proximity scoring of refreshed prototypes against mid features.
    {
        let refreshed = rand_tensor(&mut rng, &[2, 3], -0.8, 0.8);
        let f3 = rand_tensor(&mut rng, &[2, 4, 4, 4], -0.8, 0.8);
        let q2w = dim_store.value(dim_store.find("dim.proximity.q.w").unwrap()).clone();
        let w = rand_tensor(&mut rng, &[2, 64], -1.0, 1.0);
        let store = dim_store.clone();
        let report = check_gradients(
            |tape, inputs| {
                let mut vars = store.register_frozen(tape);
                vars[store.find("dim.proximity.q.w").unwrap().0] = inputs[2];
                let s = dim.proximity_scores(tape, &vars, inputs[0], inputs[1]);
                let wc = tape.constant(w.clone());
                let p = tape.mul(s, wc);
                tape.mean_all(p)
            },
            &[refreshed, f3, q2w],
            1e-5,
            1e-10,
        );
        assert!(report.within(1e-4), "proximity: {report:?}");
        worst.push(("proximity", report.max_rel_err));
    }

    // (c) score-field aggregation (local 3x3x3 fusion + per-class mix),
    // driven through the full per-class interaction and differentiated
    // through both aggregation convolutions plus all upstream inputs.
    {
        let protos = dim_store.value(dim.prototypes_id()).clone();
        let f2 = rand_tensor(&mut rng, &[3, 2, 2, 2], -0.8, 0.8);
        let f3 = rand_tensor(&mut rng, &[2, 4, 4, 4], -0.8, 0.8);
        let aggw = dim_store.value(dim_store.find("dim.agg.conv.w").unwrap()).clone();
        let pointw = dim_store.value(dim_store.find("dim.agg.point.w").unwrap()).clone();
        let w = rand_tensor(&mut rng, &[2, 8, 8, 8], -1.0, 1.0);
        let store = dim_store.clone();
        let report = check_gradients(
            |tape, inputs| {
                let mut vars = store.register_frozen(tape);
                vars[dim.prototypes_id().0] = inputs[0];
                vars[store.find("dim.agg.conv.w").unwrap().0] = inputs[3];
                vars[store.find("dim.agg.point.w").unwrap().0] = inputs[4];
                let m = dim.relationship_map(tape, &vars, inputs[1], inputs[2]);
                let wc = tape.constant(w.clone());
                let p = tape.mul(m, wc);
                tape.mean_all(p)
            },
            &[protos, f2, f3, aggw, pointw],
            1e-5,
            1e-10,
        );
        assert!(report.within(1e-4), "aggregation: {report:?}");
        worst.push(("aggregate", report.max_rel_err));
    }

    // Rectification gate over a tiny field.
    let mut crln_store: ParamStore<f64> = ParamStore::new();
    let crln =
        Crln::new(&mut crln_store, &mut rng, "crln", 2, RectifyVariant::Additive).unwrap();

    // (d) additive rectification + renormalisation, differentiated through
    // the gate, the prediction, and the map (kept away from the clamp).
    {
        let pred = prob_pair_tensor(&mut rng);
        let map = rand_tensor(&mut rng, &[2, 2, 2, 2], 0.3, 0.9);
        let w = rand_tensor(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
        let store = crln_store.clone();
        let report = check_gradients(
            |tape, inputs| {
                let mut vars = store.register_frozen(tape);
                vars[crln.mu_raw_id().0] = inputs[0];
                let r = crln.rectify_tape(tape, &vars, inputs[1], inputs[2], 0.9);
                let wc = tape.constant(w.clone());
                let p = tape.mul(r, wc);
                tape.mean_all(p)
            },
            &[Tensor::scalar(0.2), pred, map],
            1e-5,
            1e-10,
        );
        assert!(report.within(1e-4), "rectify+renormalise: {report:?}");
        worst.push(("rectify", report.max_rel_err));
    }

    // (e) contrastive loss over cosine similarities.
    {
        let cps_cfg = CpsConfig { feat_in: 2, feat_proj: 3, proto_dim: 3, ..CpsConfig::default() };
        let mut cps_store: ParamStore<f64> = ParamStore::new();
        let cps = Cps::new(&mut cps_store, &mut rng, "cps", cps_cfg).unwrap();
        let anchors = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        let negatives = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let centre = rand_tensor(&mut rng, &[1, 3], -1.0, 1.0);
        let report = check_gradients(
            |tape, inputs| {
                let c = tape.constant(centre.clone());
                cps.cps_loss(tape, inputs[0], c, inputs[1])
            },
            &[anchors, negatives],
            1e-6,
            1e-12,
        );
        assert!(report.within(1e-4), "contrastive loss: {report:?}");
        worst.push(("contrastive", report.max_rel_err));
    }

    // (f) supervised loss (equal-weight soft Dice + cross-entropy) through
    // a softmax head.
    {
        let logits = rand_tensor(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
        let target = {
            let mut t = Tensor::zeros(&[2, 2, 2, 2]);
            for i in 0..8 {
                t.data_mut()[usize::from(i % 3 == 0) * 8 + i] = 1.0;
            }
            t
        };
        let report = check_gradients(
            |tape, inputs| {
                let probs = tape.softmax_axis0(inputs[0]);
                let t = tape.constant(target.clone());
                tape.dice_ce(probs, t, 1.0)
            },
            &[logits],
            1e-5,
            1e-10,
        );
        assert!(report.within(1e-4), "supervised loss: {report:?}");
        worst.push(("supervised", report.max_rel_err));
    }

    // (g) gate loss: supervised loss of the rectified prediction with the
    // prediction and map held constant, differentiated through the gate.
    {
        let pred = prob_pair_tensor(&mut rng);
        let map = rand_tensor(&mut rng, &[2, 2, 2, 2], 0.3, 0.9);
        let target = {
            let mut t = Tensor::zeros(&[2, 2, 2, 2]);
            for i in 0..8 {
                t.data_mut()[(i % 2) * 8 + i] = 1.0;
            }
            t
        };
        let store = crln_store.clone();
        let report = check_gradients(
            |tape, inputs| {
                let mut vars = store.register_frozen(tape);
                vars[crln.mu_raw_id().0] = inputs[0];
                let p = tape.constant(pred.clone());
                let m = tape.constant(map.clone());
                let r = crln.rectify_tape(tape, &vars, p, m, 0.9);
                let t = tape.constant(target.clone());
                crln.mu_loss(tape, r, t, 1.0)
            },
            &[Tensor::scalar(0.3)],
            1e-5,
            1e-10,
        );
        assert!(report.within(1e-4), "gate loss: {report:?}");
        worst.push(("gate", report.max_rel_err));
    }

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient checks took {secs:.1}s");
    let detail: Vec<String> =
        worst.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    println!(
        "criterion 2: PASS — finite differences within 1e-4 ({}) in {secs:.1}s",
        detail.join(", ")
    );
}

// ===================================================================
// criterion 3: contrastive spot values
// ===================================================================

#[test]
fn criterion_03_contrastive_loss_hits_known_spot_values() {
    let mut rng = init_rng(303);
    let cfg = CpsConfig {
        feat_in: 2,
        feat_proj: 2,
        proto_dim: 2,
        temperature: 0.5,
        ..CpsConfig::default()
    };
    let mut store: ParamStore<f64> = ParamStore::new();
    let cps = Cps::new(&mut store, &mut rng, "cps", cfg).unwrap();

    let eval = |anchor: [f64; 2], centre: [f64; 2], negative: [f64; 2]| -> f64 {
        let mut tape = protoseg_core::autodiff::Tape::new();
        let a = tape.constant(Tensor::from_vec(&[1, 2], anchor.to_vec()).unwrap());
        let c = tape.constant(Tensor::from_vec(&[1, 2], centre.to_vec()).unwrap());
        let n = tape.constant(Tensor::from_vec(&[1, 2], negative.to_vec()).unwrap());
        let loss = cps.cps_loss(&mut tape, a, c, n);
        tape.value(loss).item()
    };

    let e2 = (2.0f64).exp();
    // Anchor aligned with the positive, orthogonal to the negative.
    let aligned = eval([1.0, 0.0], [1.0, 0.0], [0.0, 1.0]);
    let want_aligned = -(e2 / (e2 + 1.0)).ln();
    assert!(
        (aligned - want_aligned).abs() < 1e-12,
        "aligned case: {aligned} vs {want_aligned}"
    );
    assert!((aligned - 0.12693).abs() < 1e-5, "aligned case vs quoted value: {aligned}");

    // Anchor orthogonal to the positive, aligned with the negative.
    let opposed = eval([1.0, 0.0], [0.0, 1.0], [1.0, 0.0]);
    let want_opposed = -(1.0 / (1.0 + e2)).ln();
    assert!(
        (opposed - want_opposed).abs() < 1e-12,
        "opposed case: {opposed} vs {want_opposed}"
    );
    assert!((opposed - 2.12693).abs() < 1e-5, "opposed case vs quoted value: {opposed}");

    println!(
        "criterion 3: PASS — single-anchor losses {aligned:.6} and {opposed:.6} at temperature 0.5"
    );
}

// ===================================================================
// criterion 4: degeneration to a plain mean-teacher step
// ===================================================================

/// A straight-line mean-teacher iteration written independently of the
/// trainer: sample cases, crop, pseudo-label on the weak view, one
/// supervised + one confidence-gated consistency loss, SGD, moving
/// average. Returns the updated models and optimizer.
fn plain_mean_teacher_step(
    cfg: &TrainConfig,
    split: &DatasetSplit,
) -> (Model<f64>, Model<f64>, Sgd<f64>) {
    let mut seed_rng = init_rng(cfg.seed);
    let mut student = Model::<f64>::new(cfg, &mut seed_rng).unwrap();
    let mut teacher = student.clone();
    let mut opt = Sgd::new(
        &student.store,
        SgdConfig { momentum: cfg.momentum, weight_decay: cfg.weight_decay },
    );

    let lr = poly_lr(cfg.lr0, 0, cfg.max_iters, cfg.poly_power);
    let mut rng = iter_rng(cfg.seed, 0);
    let crop = cfg.aug.crop;
    let n = crop[0] * crop[1] * crop[2];
    let c = cfg.num_classes;
    let l_pb = cfg.labelled_per_batch;
    let u_pb = cfg.unlabelled_per_batch;

    let l_idx: Vec<usize> = (0..l_pb).map(|_| rng.gen_range(0..split.labelled.len())).collect();
    let u_idx: Vec<usize> = (0..u_pb).map(|_| rng.gen_range(0..split.unlabelled.len())).collect();
    let l_geom: Vec<GeomView> = l_idx
        .iter()
        .map(|&i| sample_geom(&mut rng, split.labelled[i].volume.dims(), &cfg.aug))
        .collect();
    let u_geom: Vec<GeomView> = u_idx
        .iter()
        .map(|&i| sample_geom(&mut rng, split.unlabelled[i].dims(), &cfg.aug))
        .collect();

    let to_tensor = |data: &[f32]| -> Tensor<f64> {
        Tensor::from_vec(&[1, crop[0], crop[1], crop[2]], data.iter().map(|&v| v as f64).collect())
            .unwrap()
    };

    // Teacher pseudo-labels on the weak views.
    let mut targets: Vec<Tensor<f64>> = Vec::with_capacity(u_pb);
    for k in 0..u_pb {
        let vol = split.unlabelled[u_idx[k]].normalized();
        let weak = extract_weak(vol.data(), vol.dims(), &u_geom[k], crop);
        let mut tape = protoseg_core::autodiff::Tape::new();
        let tvars = teacher.store.register_frozen(&mut tape);
        let x = tape.constant(to_tensor(&weak));
        let pyr = teacher.backbone.forward(&mut tape, &tvars, x);
        let probs = teacher.backbone.probabilities(&mut tape, &pyr);
        targets.push(align_teacher_prediction(tape.value(probs), None));
    }

    // Student: supervised term on labelled crops, gated consistency on the
    // (unmixed, weak) unlabelled crops.
    let mut tape = protoseg_core::autodiff::Tape::new();
    let vars = student.store.register(&mut tape);
    let mut sup = Vec::with_capacity(l_pb);
    for k in 0..l_pb {
        let case = &split.labelled[l_idx[k]];
        let vol = case.volume.normalized();
        let data = extract_weak(vol.data(), vol.dims(), &l_geom[k], crop);
        let classes = extract_weak_mask(case.mask.classes(), vol.dims(), &l_geom[k], crop);
        let mut onehot = vec![0.0f64; c * n];
        for (i, &cls) in classes.iter().enumerate() {
            onehot[cls as usize * n + i] = 1.0;
        }
        let x = tape.constant(to_tensor(&data));
        let pyr = student.backbone.forward(&mut tape, &vars, x);
        let probs = student.backbone.probabilities(&mut tape, &pyr);
        let t = tape
            .constant(Tensor::from_vec(&[c, crop[0], crop[1], crop[2]], onehot).unwrap());
        sup.push(tape.dice_ce(probs, t, 1.0));
    }
    let mut unsup = Vec::with_capacity(u_pb);
    for k in 0..u_pb {
        let vol = split.unlabelled[u_idx[k]].normalized();
        let weak = extract_weak(vol.data(), vol.dims(), &u_geom[k], crop);
        let x = tape.constant(to_tensor(&weak));
        let pyr = student.backbone.forward(&mut tape, &vars, x);
        let probs = student.backbone.probabilities(&mut tape, &pyr);
        let d = targets[k].data();
        let mut classes = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for i in 0..n {
            let mut best = d[i];
            let mut arg = 0usize;
            for ch in 1..c {
                if d[ch * n + i] > best {
                    best = d[ch * n + i];
                    arg = ch;
                }
            }
            classes.push(arg);
            mask.push(best >= cfg.tau);
        }
        unsup.push(tape.masked_nll(probs, &classes, &mask));
    }
    let sup_sum = tape.add_many(&sup);
    let sup_avg = tape.scale(sup_sum, 1.0 / l_pb as f64);
    let unsup_sum = tape.add_many(&unsup);
    let unsup_avg = tape.scale(unsup_sum, 1.0 / u_pb as f64);
    let total = tape.add_many(&[sup_avg, unsup_avg]);
    tape.backward(total);
    let grads: Vec<Option<Tensor<f64>>> =
        (0..student.store.len()).map(|i| tape.grad(vars[i]).cloned()).collect();
    drop(tape);
    opt.step(&mut student.store, &grads, lr);

    // Teacher follows by exponential moving average; the rectification
    // gate and the contrastive head are copied verbatim.
    let a = cfg.ema_decay;
    for i in 0..student.store.len() {
        let id = ParamId(i);
        if shared_by_copy(student.store.name(id)) {
            teacher
                .store
                .value_mut(id)
                .data_mut()
                .copy_from_slice(student.store.value(id).data());
        } else {
            let sv = student.store.value(id).data().to_vec();
            for (t, s) in teacher.store.value_mut(id).data_mut().iter_mut().zip(sv) {
                *t = a * *t + (1.0 - a) * s;
            }
        }
    }
    (student, teacher, opt)
}

#[test]
fn criterion_04_disabled_additions_degenerate_to_plain_mean_teacher() {
    // Everything beyond the mean-teacher core switched off: no
    // rectification (and an activation horizon that never arrives), no
    // contrastive term, strong augmentation reduced to crop+flip.
    let cfg = TrainConfig {
        seed: 11,
        base_channels: 4,
        max_iters: 50,
        rectify_after: u64::MAX,
        use_crln: false,
        use_cps: false,
        use_strong_aug: false,
        aug: AugConfig { crop: [8, 8, 8], ..AugConfig::default() },
        ..TrainConfig::default()
    };
    let synth = SynthConfig {
        seed: 21,
        num_labelled: 3,
        num_unlabelled: 4,
        num_val: 1,
        dims: [16, 16, 16],
        num_classes: 2,
        ..SynthConfig::default()
    };
    let (split, _) = generate_synthetic_dataset_with_truth(&synth).unwrap();

    let mut trainer: Trainer<f64> = Trainer::new(cfg.clone()).unwrap();
    trainer.train_step(&split, None).unwrap();

    let (ref_student, ref_teacher, ref_opt) = plain_mean_teacher_step(&cfg, &split);

    for i in 0..ref_student.store.len() {
        let id = ParamId(i);
        let name = ref_student.store.name(id);
        assert_eq!(
            trainer.student().store.value(id).data(),
            ref_student.store.value(id).data(),
            "student parameter {name} diverged from the plain step"
        );
        assert_eq!(
            trainer.teacher().store.value(id).data(),
            ref_teacher.store.value(id).data(),
            "teacher parameter {name} diverged from the plain step"
        );
    }
    for (got, want) in trainer.optimizer().state().iter().zip(ref_opt.state()) {
        assert_eq!(got.data(), want.data(), "optimizer velocity diverged");
    }
    println!(
        "criterion 4: PASS — one step with all additions disabled is bit-identical to a plain mean-teacher step ({} parameters)",
        ref_student.store.len()
    );
}

// ===================================================================
// criterion 5: moving-average closed form
// ===================================================================

#[test]
fn criterion_05_ema_matches_closed_form_after_fifty_updates() {
    let cfg = TrainConfig {
        base_channels: 4,
        aug: AugConfig { crop: [8, 8, 8], ..AugConfig::default() },
        ..TrainConfig::default()
    };
    let mut r1 = init_rng(7);
    let student = Model::<f64>::new(&cfg, &mut r1).unwrap();
    let mut r2 = init_rng(8);
    let mut teacher = Model::<f64>::new(&cfg, &mut r2).unwrap();
    let t0 = teacher.store.clone();

    let alpha = 0.99f64;
    let k = 50u32;
    for _ in 0..k {
        ema_update(&mut teacher.store, &student.store, alpha, shared_by_copy);
    }

    let decay = alpha.powi(k as i32);
    let mut max_err = 0.0f64;
    for i in 0..student.store.len() {
        let id = ParamId(i);
        let name = student.store.name(id);
        let got = teacher.store.value(id).data();
        if shared_by_copy(name) {
            assert_eq!(got, student.store.value(id).data(), "{name} must be copied verbatim");
            continue;
        }
        let init = t0.value(id).data();
        let s = student.store.value(id).data();
        for j in 0..got.len() {
            let want = decay * init[j] + (1.0 - decay) * s[j];
            let err = (got[j] - want).abs();
            if err > max_err {
                max_err = err;
            }
            assert!(err <= 1e-10, "{name}[{j}]: {} vs {want}", got[j]);
        }
    }
    println!(
        "criterion 5: PASS — 50 moving-average updates match the closed form (max abs err {max_err:.2e})"
    );
}

// ===================================================================
// criterion 10: anchor/negative predicates vs exhaustive enumeration
// ===================================================================

#[test]
fn criterion_10_anchor_and_negative_sets_match_exhaustive_enumeration() {
    let mut rng = init_rng(1010);
    let tau = 0.75f64;
    let tau_w = 0.5f64;
    for trial in 0..1000u32 {
        let c = rng.gen_range(2..=4usize);
        let n = 8usize; // 2 x 2 x 2 lattice
        // Every fourth trial draws from a coarse grid so exact ties and
        // exact threshold hits are exercised.
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if trial % 4 == 0 {
                [0.0, 0.25, 0.5, 0.75, 1.0][rng.gen_range(0..5usize)]
            } else {
                rng.gen_range(0.0..1.0)
            }
        };
        let student =
            Tensor::from_vec(&[c, 2, 2, 2], (0..c * n).map(|_| draw(&mut rng)).collect())
                .unwrap();
        let rectified =
            Tensor::from_vec(&[c, 2, 2, 2], (0..c * n).map(|_| draw(&mut rng)).collect())
                .unwrap();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();

        // First-maximum-wins scan, written out plainly.
        let peak = |field: &Tensor<f64>, i: usize| -> (f64, usize) {
            let d = field.data();
            let mut best = d[i];
            let mut arg = 0usize;
            for ch in 1..c {
                if d[ch * n + i] > best {
                    best = d[ch * n + i];
                    arg = ch;
                }
            }
            (best, arg)
        };

        for class in 0..c {
            let sd = student.data();
            let want_al: Vec<usize> = (0..n)
                .filter(|&i| labels[i] as usize == class && sd[class * n + i] < tau)
                .collect();
            assert_eq!(
                anchor_indices_labelled(&labels, &student, class, tau),
                want_al,
                "labelled anchors, trial {trial} class {class}"
            );

            let want_au: Vec<usize> = (0..n)
                .filter(|&i| {
                    let (m, arg) = peak(&rectified, i);
                    sd[class * n + i] < tau && m > tau_w && arg == class
                })
                .collect();
            assert_eq!(
                anchor_indices_unlabelled(&student, &rectified, class, tau, tau_w),
                want_au,
                "unlabelled anchors, trial {trial} class {class}"
            );

            let want_nl: Vec<usize> =
                (0..n).filter(|&i| labels[i] as usize != class).collect();
            assert_eq!(
                negative_indices_labelled(&labels, class),
                want_nl,
                "labelled negatives, trial {trial} class {class}"
            );

            let want_nu: Vec<usize> = (0..n)
                .filter(|&i| {
                    let (m, arg) = peak(&rectified, i);
                    m > tau_w && arg != class
                })
                .collect();
            assert_eq!(
                negative_indices_unlabelled(&rectified, class, tau_w),
                want_nu,
                "unlabelled negatives, trial {trial} class {class}"
            );

            let want_su: Vec<usize> = (0..n)
                .filter(|&i| {
                    let (m, arg) = peak(&rectified, i);
                    m > tau_w && arg == class
                })
                .collect();
            assert_eq!(
                support_indices_unlabelled(&rectified, class, tau_w),
                want_su,
                "support set, trial {trial} class {class}"
            );
        }
    }
    println!(
        "criterion 10: PASS — anchor/negative/support sets equal exhaustive enumeration over 1000 randomized 2x2x2 trials"
    );
}

// ===================================================================
// shared artifacts for the empirical criteria (6, 7, 8, 9, 11)
// ===================================================================

/// Long-run configuration: seed-0 synthetic split, 8 labelled + 72
/// unlabelled volumes of 32^3, two classes, 2000 iterations with the
/// rectification horizon at 800 and checkpoints every 250.
const LONG_RUN_CONFIG: &str = r#"
[dataset]
seed = 0
num_labelled = 8
num_unlabelled = 72
num_val = 4
dims = [32, 32, 32]
num_classes = 2
shapes_per_volume = [1, 2]
tube_prob = 0.0
noise_sigma = 0.15
boundary_band = 0.06
fg_fraction_range = [0.08, 0.35]

[train]
seed = 0
max_iters = 2000
rectify_after = 800
base_channels = 6
checkpoint_interval = 250
max_anchors = 64
max_negatives = 128

[augment]
crop = [16, 16, 16]
"#;

struct LongRun {
    metrics: Vec<serde_json::Value>,
    rectify: Vec<serde_json::Value>,
    metrics_bytes: Vec<u8>,
    rectify_after: u64,
}

fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    let f = fs::File::open(path).unwrap();
    std::io::BufReader::new(f)
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect()
}

fn run_long(dir: &Path) -> LongRun {
    let cfg_path = dir.join("run.toml");
    fs::write(&cfg_path, LONG_RUN_CONFIG).unwrap();
    let out = dir.join("out");
    let args = TrainArgs {
        config: cfg_path,
        out: out.clone(),
        seed: None,
        ablate: vec![],
        r: None,
        xi: None,
        s_iters: None,
        tau: None,
        tau_w: None,
        resume: None,
    };
    cmd_train(&args).unwrap();
    LongRun {
        metrics: read_jsonl(&out.join("metrics.jsonl")),
        rectify: read_jsonl(&out.join("rectify.jsonl")),
        metrics_bytes: fs::read(out.join("metrics.jsonl")).unwrap(),
        rectify_after: 800,
    }
}

fn long_run() -> &'static LongRun {
    static RUN: OnceLock<LongRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        run_long(dir.path())
    })
}

#[test]
fn criterion_06_rectification_improves_pseudo_labels_after_activation() {
    let run = long_run();
    let rows: Vec<&serde_json::Value> = run
        .rectify
        .iter()
        .filter(|r| r["iteration"].as_u64().unwrap() > run.rectify_after)
        .collect();
    assert!(rows.len() >= 4, "expected several checkpoints after activation, got {}", rows.len());

    let mut rel_margins = Vec::new();
    let mut dice_margins = Vec::new();
    for r in &rows {
        let it = r["iteration"].as_u64().unwrap();
        let rel_b = r["reliable_before"].as_f64().unwrap();
        let rel_a = r["reliable_after"].as_f64().unwrap();
        let dice_b = r["dice_before"].as_f64().unwrap();
        let dice_a = r["dice_after"].as_f64().unwrap();
        assert!(
            rel_a >= rel_b,
            "iteration {it}: reliable fraction fell after rectification ({rel_b:.4} -> {rel_a:.4})"
        );
        assert!(
            dice_a >= dice_b,
            "iteration {it}: pseudo-label Dice fell after rectification ({dice_b:.4} -> {dice_a:.4})"
        );
        rel_margins.push(rel_a - rel_b);
        dice_margins.push(dice_a - dice_b);
    }
    let rel_mean = rel_margins.iter().sum::<f64>() / rel_margins.len() as f64;
    let dice_mean = dice_margins.iter().sum::<f64>() / dice_margins.len() as f64;
    assert!(rel_mean > 0.0, "mean reliable-fraction margin not positive: {rel_mean}");
    assert!(dice_mean > 0.0, "mean pseudo-label Dice margin not positive: {dice_mean}");
    println!(
        "criterion 6: PASS — rectification margins over {} checkpoints: reliable +{rel_mean:.4}, Dice +{dice_mean:.4}",
        rows.len()
    );
}

#[test]
fn criterion_09_correction_gate_rises_during_training() {
    let run = long_run();
    let mu_at = |iteration: u64| -> f64 {
        run.metrics
            .iter()
            .find(|r| r["iteration"].as_u64().unwrap() == iteration)
            .unwrap_or_else(|| panic!("no metrics row for iteration {iteration}"))["mu"]
            .as_f64()
            .unwrap()
    };
    let early = mu_at(200);
    let last = run.metrics.last().unwrap();
    let late = last["mu"].as_f64().unwrap();
    let final_it = last["iteration"].as_u64().unwrap();
    assert!(
        early < late,
        "correction gate did not rise: mu({}) = {early:.6} vs mu({final_it}) = {late:.6}",
        200
    );
    println!("criterion 9: PASS — mu rose from {early:.4} at iteration 200 to {late:.4} at iteration {final_it}");
}

#[test]
fn criterion_11_training_metrics_log_is_bit_reproducible() {
    let first = long_run();
    let dir = tempfile::tempdir().unwrap();
    let second = run_long(dir.path());
    assert_eq!(
        first.metrics_bytes, second.metrics_bytes,
        "metrics logs of two identically-seeded runs differ"
    );
    println!(
        "criterion 11: PASS — re-running the long configuration reproduces metrics.jsonl byte-for-byte ({} bytes)",
        first.metrics_bytes.len()
    );
}

// ===================================================================
// criteria 7 and 8: ablation directions over three seeds
// ===================================================================

const MATRIX_SEEDS: [u64; 3] = [1, 2, 3];
const MATRIX_ITERS: usize = 300;
const MATRIX_RECTIFY_AFTER: u64 = 120;

fn matrix_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        num_labelled: 4,
        num_unlabelled: 16,
        num_val: 6,
        dims: [16, 16, 16],
        num_classes: 2,
        shapes_per_volume: [1, 2],
        tube_prob: 0.0,
        noise_sigma: 0.15,
        boundary_band: 0.06,
        fg_fraction_range: [0.08, 0.35],
        ..SynthConfig::default()
    }
}

fn matrix_train(seed: u64, prototypes: usize, crln: bool, cps: bool, strong: bool) -> TrainConfig {
    TrainConfig {
        seed,
        base_channels: 4,
        max_iters: MATRIX_ITERS,
        rectify_after: MATRIX_RECTIFY_AFTER,
        prototypes_per_class: prototypes,
        max_anchors: 32,
        max_negatives: 64,
        use_crln: crln,
        use_cps: cps,
        use_strong_aug: strong,
        aug: AugConfig { crop: [16, 16, 16], ..AugConfig::default() },
        ..TrainConfig::default()
    }
}

/// Mean foreground Dice of the teacher over the validation cases.
fn val_dice(trainer: &Trainer<f64>, split: &DatasetSplit) -> f64 {
    let cfg = trainer.config();
    let mut acc = 0.0;
    for case in &split.val {
        let probs = sliding_window_predict::<f64, _>(
            &case.volume.normalized(),
            cfg.num_classes,
            [16, 16, 16],
            [8, 8, 8],
            |patch| {
                Ok(protoseg_core::trainer::predict_probabilities(trainer.teacher(), patch))
            },
        )
        .unwrap();
        let pred = argmax_classes(&probs);
        let mut case_acc = 0.0;
        for class in 1..cfg.num_classes as u8 {
            let p: Vec<bool> = pred.iter().map(|&v| v == class).collect();
            let t: Vec<bool> = case.mask.classes().iter().map(|&v| v == class).collect();
            case_acc += dice_binary(&p, &t);
        }
        acc += case_acc / (cfg.num_classes - 1) as f64;
    }
    acc / split.val.len() as f64
}

fn train_variant(cfg: TrainConfig, split: &DatasetSplit) -> f64 {
    let mut tr: Trainer<f64> = Trainer::new(cfg).unwrap();
    for _ in 0..MATRIX_ITERS {
        tr.train_step(split, None).unwrap();
    }
    val_dice(&tr, split)
}

struct Matrix {
    /// Mean validation Dice per variant, averaged over seeds.
    mean: BTreeMap<&'static str, f64>,
    per_seed: BTreeMap<&'static str, Vec<f64>>,
}

fn matrix() -> &'static Matrix {
    static M: OnceLock<Matrix> = OnceLock::new();
    M.get_or_init(|| {
        let variants: [(&'static str, usize, bool, bool, bool); 5] = [
            ("baseline", 4, false, false, false),
            ("strongaug", 4, false, false, true),
            ("crln", 4, true, false, true),
            ("cps", 4, true, true, true),
            ("cps_r1", 1, true, true, true),
        ];
        let mut per_seed: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
        for &seed in &MATRIX_SEEDS {
            let (split, _truth) =
                generate_synthetic_dataset_with_truth(&matrix_synth(seed)).unwrap();
            for (name, r, crln, cps, strong) in variants {
                let dice = train_variant(matrix_train(seed, r, crln, cps, strong), &split);
                per_seed.entry(name).or_default().push(dice);
            }
        }
        let mean = per_seed
            .iter()
            .map(|(&k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        Matrix { mean, per_seed }
    })
}

#[test]
fn criterion_07_ablation_dice_ordering_holds_across_seeds() {
    let m = matrix();
    let base = m.mean["baseline"];
    let strong = m.mean["strongaug"];
    let crln = m.mean["crln"];
    let cps = m.mean["cps"];
    println!(
        "criterion 7 detail: per-seed {:?}",
        m.per_seed
    );
    assert!(
        base < strong,
        "strong augmentation did not help: baseline {base:.4} vs +strongaug {strong:.4}"
    );
    assert!(
        strong < crln,
        "rectification did not help: +strongaug {strong:.4} vs +rectification {crln:.4}"
    );
    assert!(
        crln <= cps,
        "contrastive term hurt: +rectification {crln:.4} vs +contrastive {cps:.4}"
    );
    println!(
        "criterion 7: PASS — mean validation Dice ordering {base:.4} < {strong:.4} < {crln:.4} <= {cps:.4} over {} seeds",
        MATRIX_SEEDS.len()
    );
}

#[test]
fn criterion_08_more_prototypes_beat_one() {
    let m = matrix();
    let r4 = m.mean["cps"];
    let r1 = m.mean["cps_r1"];
    assert!(
        r4 > r1,
        "four prototypes per class did not beat one: R=4 {r4:.4} vs R=1 {r1:.4}"
    );
    println!(
        "criterion 8: PASS — mean validation Dice {r4:.4} with four prototypes per class vs {r1:.4} with one"
    );
}
