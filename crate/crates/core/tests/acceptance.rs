//! Acceptance checks, one `PASS`/`FAIL` line per criterion. Runs without the
//! libtest harness so the lines always reach stdout; exits non-zero if any
//! criterion fails.

use std::path::Path;
use std::time::Instant;

use cbmkit::activation::{concept_activations, NormMode, DEFAULT_EPSILON};
use cbmkit::cbm::{
    classifier_objective, concept_sensitivity_test, distillation_comparison, linearity_audit, train_classifier,
    train_concept_encoder, train_teacher, Nonlinearity, TrainConfig,
};
use cbmkit::goodness::{
    entropy, goodness, refine_entropy_guided, refine_random_baseline, row_entropy, softmax, CutoffMode,
};
use cbmkit::nn::{ce_loss, grad_check, kd_loss, mse_loss, relu, relu_backward, DenseParams, GradCheck};
use cbmkit::store::{make_synthetic_bundle, read_bundle, write_bundle, EmbeddingBundle, Split, SyntheticSpec};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = (bool, String);
type Criterion = (&'static str, fn() -> Check);

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

/// Weights bounded away from zero so no probe straddles an ℓ1 kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = rng.random_range(-1.0..1.0);
        v.signum() * (v.abs() + 0.05)
    })
}

fn gradient_fidelity() -> Check {
    let check = |seed| GradCheck { probes: 50, seed, ..GradCheck::default() };
    let (mut mse, mut ce, mut kd, mut full) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Squared error through a two-layer ReLU encoder, all parameters.
        let (b, d, h, k) = (8, 5, 6, 4);
        let x = uniform(&mut rng, (b, d), -2.0, 2.0);
        let target = uniform(&mut rng, (b, k), -1.0, 1.0);
        let l1 = DenseParams::init_uniform(h, d, &mut rng);
        let l2 = DenseParams::init_uniform(k, h, &mut rng);
        let unpack = |p: &[f64]| {
            let mut at = 0;
            let mut take = |n: usize| {
                at += n;
                p[at - n..at].to_vec()
            };
            let w1 = Array2::from_shape_vec((h, d), take(h * d)).unwrap();
            let b1 = Array1::from(take(h));
            let w2 = Array2::from_shape_vec((k, h), take(k * h)).unwrap();
            let b2 = Array1::from(take(k));
            (DenseParams::new(w1, b1).unwrap(), DenseParams::new(w2, b2).unwrap())
        };
        let pack = |parts: [&[f64]; 4]| parts.concat();
        let enc_loss = |p: &[f64]| {
            let (a, c) = unpack(p);
            let out = c.forward(relu(a.forward(x.view()).unwrap().view()).view()).unwrap();
            mse_loss(out.view(), target.view()).unwrap().0
        };
        let pre = l1.forward(x.view()).unwrap();
        let hid = relu(pre.view());
        let out = l2.forward(hid.view()).unwrap();
        let (_, g_out) = mse_loss(out.view(), target.view()).unwrap();
        let g2 = l2.backward(hid.view(), g_out.view());
        let g1 = l1.backward(x.view(), relu_backward(pre.view(), g2.input.view()).view());
        let params = pack([l1.weight.as_slice().unwrap(), l1.bias.as_slice().unwrap(), l2.weight.as_slice().unwrap(), l2.bias.as_slice().unwrap()]);
        let grads = pack([g1.weight.as_slice().unwrap(), g1.bias.as_slice().unwrap(), g2.weight.as_slice().unwrap(), g2.bias.as_slice().unwrap()]);
        mse = mse.max(grad_check(enc_loss, &grads, &params, &check(seed)).unwrap());

        // Cross-entropy and distillation with respect to the logits.
        let (b, s) = (10, 6);
        let logits = uniform(&mut rng, (b, s), -3.0, 3.0);
        let teacher = uniform(&mut rng, (b, s), -3.0, 3.0);
        let labels: Vec<u32> = (0..b).map(|_| rng.random_range(0..s as u32)).collect();
        let temp = rng.random_range(0.5..4.0);
        let as_logits = |p: &[f64]| Array2::from_shape_vec((b, s), p.to_vec()).unwrap();
        let (_, g) = ce_loss(logits.view(), &labels).unwrap();
        let f = |p: &[f64]| ce_loss(as_logits(p).view(), &labels).unwrap().0;
        ce = ce.max(grad_check(f, g.as_slice().unwrap(), logits.as_slice().unwrap(), &check(seed)).unwrap());
        let (_, g) = kd_loss(logits.view(), teacher.view(), temp).unwrap();
        let f = |p: &[f64]| kd_loss(as_logits(p).view(), teacher.view(), temp).unwrap().0;
        kd = kd.max(grad_check(f, g.as_slice().unwrap(), logits.as_slice().unwrap(), &check(seed)).unwrap());

        // Full classifier objective: CE, scaled elastic net and KD, over
        // weights and bias.
        let (b, k, s) = (8, 12, 5);
        let c = uniform(&mut rng, (b, k), -2.0, 2.0);
        let t = uniform(&mut rng, (b, s), -3.0, 3.0);
        let y: Vec<u32> = (0..b).map(|_| rng.random_range(0..s as u32)).collect();
        let w = off_zero(&mut rng, (s, k));
        let bias = Array1::from_shape_simple_fn(s, || rng.random_range(-1.0..1.0));
        let cfg = TrainConfig {
            alpha: rng.random_range(0.1..2.0),
            beta: rng.random_range(0.1..2.0),
            temperature: rng.random_range(0.5..4.0),
            lambda: rng.random_range(0.0..1.0),
            ..TrainConfig::default()
        };
        let scale = 0.3;
        let layer = DenseParams::new(w, bias).unwrap();
        let loss = classifier_objective(&layer, c.view(), &y, Some(t.view()), &cfg, scale).unwrap();
        let split = |p: &[f64]| {
            let w = Array2::from_shape_vec((s, k), p[..s * k].to_vec()).unwrap();
            DenseParams::new(w, Array1::from(p[s * k..].to_vec())).unwrap()
        };
        let f = |p: &[f64]| classifier_objective(&split(p), c.view(), &y, Some(t.view()), &cfg, scale).unwrap().total;
        let params: Vec<f64> = layer.weight.iter().chain(layer.bias.iter()).copied().collect();
        let grads: Vec<f64> = loss.grad_weight.iter().chain(loss.grad_bias.iter()).copied().collect();
        let guarded = GradCheck { avoid_kinks: true, ..check(seed) };
        full = full.max(grad_check(f, &grads, &params, &guarded).unwrap());
    }
    let worst = mse.max(ce).max(kd).max(full);
    (worst < 1e-5, format!("max rel err mse {mse:.1e} ce {ce:.1e} kd {kd:.1e} full {full:.1e}"))
}

fn linear_collapse() -> Check {
    let bundle = make_synthetic_bundle(&SyntheticSpec { n: 300, k: 40, ..SyntheticSpec::standard(1) }).unwrap();
    let cfg = TrainConfig {
        nonlinearity: Nonlinearity::None,
        encoder_epochs: 5,
        teacher_epochs: 5,
        classifier_epochs: 5,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let acts = concept_activations(&bundle, cfg.norm_mode, cfg.epsilon).unwrap();
    let (enc, _) = train_concept_encoder(&bundle, &acts, &cfg).unwrap();
    let (teacher, _) = train_teacher(&bundle, &cfg).unwrap();
    let (clf, _) = train_classifier(&enc, &teacher, &bundle, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let probes = uniform(&mut rng, (1000, bundle.feature_dim()), -3.0, 3.0);
    let r = linearity_audit(&enc, &clf, probes.view()).unwrap();
    (
        r.max_deviation < 1e-9 && r.agreement == 1.0,
        format!("max deviation {:.1e}, agreement {:.3} on {} probes", r.max_deviation, r.agreement, r.probes),
    )
}

fn entropy_calibration() -> Check {
    let mut worst = 0.0f64;
    for k_cut in [10usize, 100, 250] {
        let p = softmax(&vec![0.3; k_cut]).unwrap();
        worst = worst.max((entropy(&p) - (k_cut as f64).ln()).abs());
        // A constant activation row gives the uniform distribution over the
        // selected subset.
        let row = Array1::from_elem(400, -0.7);
        let h = row_entropy(row.view(), k_cut, CutoffMode::SubsetSoftmax).unwrap();
        worst = worst.max((h - (k_cut as f64).ln()).abs());
    }
    (worst < 1e-9, format!("max |H - ln K| {worst:.1e} for K in 10/100/250"))
}

fn goodness_separation() -> Check {
    let cutoffs = [10usize, 100, 250];
    let mut ordered_seeds = 0;
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let spec = SyntheticSpec::standard(seed);
        let bundle = make_synthetic_bundle(&spec).unwrap();
        let acts = concept_activations(&bundle, NormMode::PerConcept, DEFAULT_EPSILON).unwrap();
        let n_rel = spec.num_relevant();
        let rel = acts.select_concepts(&(0..n_rel).collect::<Vec<_>>()).unwrap();
        let rnd = acts.select_concepts(&(n_rel..spec.k).collect::<Vec<_>>()).unwrap();
        let mut ok = true;
        for &k_cut in &cutoffs {
            for labels in [None, Some(bundle.labels.as_slice())] {
                let a = goodness(&rel, labels, k_cut, CutoffMode::SubsetSoftmax).unwrap().mean_entropy;
                let b = goodness(&rnd, labels, k_cut, CutoffMode::SubsetSoftmax).unwrap().mean_entropy;
                if a >= b {
                    ok = false;
                    failures.push(format!("seed {seed} K={k_cut} {}", if labels.is_some() { "ts" } else { "ta" }));
                }
            }
        }
        ordered_seeds += ok as usize;
    }
    let frac = ordered_seeds as f64 / 20.0;
    let mut detail = format!("{ordered_seeds}/20 seeds ordered at every cutoff in both modes");
    if !failures.is_empty() {
        detail.push_str(&format!("; misses: {}", failures.join(", ")));
    }
    (frac >= 0.95, detail)
}

fn refinement_dominance() -> Check {
    let spec = SyntheticSpec::mixed(0);
    let bundle = make_synthetic_bundle(&spec).unwrap();
    let acts = concept_activations(&bundle, NormMode::PerConcept, DEFAULT_EPSILON).unwrap();
    let (k_cut, steps) = (100, 70);
    let guided = refine_entropy_guided(&acts, None, k_cut, steps).unwrap();
    let random = refine_random_baseline(&acts, None, k_cut, steps, 10, 0).unwrap();
    let dominated = guided
        .steps
        .iter()
        .zip(&random.steps)
        .filter(|(g, r)| g.entropy <= r.entropy)
        .count();
    let is_random = |j: usize| j >= spec.num_relevant();
    let (fg, fr) = (guided.removed_fraction(steps, is_random), random.removed_fraction(steps, is_random));
    (
        dominated == steps && fg > fr,
        format!("guided <= random at {dominated}/{steps} steps; random concepts removed {:.1}% vs {:.1}%", 100.0 * fg, 100.0 * fr),
    )
}

fn sensitivity_pattern() -> Check {
    // Independent random directions: a shared axis would leave the linear
    // encoder badly conditioned along the class directions.
    let base = SyntheticSpec { k: 100, n: 1500, separation: 4.0, noise: 0.6, random_axis: 0.0, ..SyntheticSpec::standard(0) };
    let rel = make_synthetic_bundle(&SyntheticSpec { relevant_fraction: 1.0, ..base.clone() }).unwrap();
    let irr = make_synthetic_bundle(&SyntheticSpec { relevant_fraction: 0.0, ..base }).unwrap();
    let cfg = sensitivity_config();
    let r = concept_sensitivity_test(&rel, &irr, &cfg, 10).unwrap();
    let pass = r.nonlinear_drop > 0.10 && r.linear_drop < 0.02 && r.nonlinear_irrelevant.std > r.nonlinear_relevant.std;
    (
        pass,
        format!(
            "non-linear {:.3} -> {:.3} (drop {:.3}), linear {:.3} -> {:.3} (drop {:.3}), non-linear std {:.3} vs {:.3}",
            r.nonlinear_relevant.mean,
            r.nonlinear_irrelevant.mean,
            r.nonlinear_drop,
            r.linear_relevant.mean,
            r.linear_irrelevant.mean,
            r.linear_drop,
            r.nonlinear_irrelevant.std,
            r.nonlinear_relevant.std
        ),
    )
}

fn sensitivity_config() -> TrainConfig {
    TrainConfig {
        encoder_epochs: 300,
        teacher_epochs: 100,
        classifier_epochs: 1000,
        batch_size: 32,
        classifier_lr: 1e-2,
        teacher_lr: 1e-2,
        elastic_scale: Some(0.0),
        ..TrainConfig::default()
    }
}

/// Four well separated classes seen through a four-concept bottleneck, with
/// one row in forty used for training.
fn distillation_fixture(seed: u64) -> EmbeddingBundle {
    let spec = SyntheticSpec { k: 4, relevant_fraction: 1.0, n: 2000, noise: 0.75, separation: 3.0, ..SyntheticSpec::standard(seed) };
    let mut b = make_synthetic_bundle(&spec).unwrap();
    for (i, s) in b.splits.iter_mut().enumerate() {
        *s = match i % 40 {
            0 => Split::Train,
            1 => Split::Val,
            _ => Split::Test,
        };
    }
    b
}

fn distillation_config() -> TrainConfig {
    TrainConfig {
        encoder_epochs: 100,
        teacher_epochs: 100,
        classifier_epochs: 500,
        batch_size: 32,
        classifier_lr: 1e-2,
        teacher_lr: 1e-2,
        ..TrainConfig::default()
    }
}

fn distillation_gap() -> Check {
    let cfg = distillation_config();
    let r = distillation_comparison(&distillation_fixture(0), &cfg, 10).unwrap();
    let pass = r.oracle.mean >= r.distilled.mean && r.distilled.mean >= r.vanilla.mean && r.test.significant;
    // The same protocol on other fixture draws, reported for context.
    let others = (1..20u64)
        .filter(|&s| {
            let r = distillation_comparison(&distillation_fixture(s), &cfg, 10).unwrap();
            r.oracle.mean >= r.distilled.mean && r.distilled.mean >= r.vanilla.mean && r.test.significant
        })
        .count();
    (
        pass,
        format!(
            "oracle {:.3} distilled {:.3} vanilla {:.3}, paired t {:.2} vs {:.2}; holds on {others}/19 other fixture draws",
            r.oracle.mean, r.distilled.mean, r.vanilla.mean, r.test.t, r.test.critical
        ),
    )
}

fn cli_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"encoder_epochs": 3, "teacher_epochs": 3, "classifier_epochs": 3, "batch_size": 32, "steps": 4, "trials": 3, "runs": 2}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("irr.json"),
        r#"{"synthetic": {"n": 120, "k": 30, "s": 3, "d_b": 8, "d_v": 16, "separation": 4.0, "relevant_fraction": 0.0, "noise": 0.5, "seed": 0}}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("rel.json"),
        r#"{"synthetic": {"n": 120, "k": 30, "s": 3, "d_b": 8, "d_v": 16, "separation": 4.0, "relevant_fraction": 1.0, "noise": 0.5, "seed": 0}}"#,
    )
    .unwrap();
    let cfg = p("cfg.json");
    let runs: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--config".into(), p("rel.json"), "--out".into(), p("rel.cbmb")],
        vec!["synth".into(), "--config".into(), p("irr.json"), "--out".into(), p("irr.cbmb")],
        vec!["synth".into(), "--mode".into(), "mixed".into(), "--seed".into(), "3".into(), "--out".into(), p("mixed.cbmb")],
        vec!["goodness".into(), "--bundle".into(), p("rel.cbmb"), "--cutoff".into(), "10".into(), "--mode".into(), "task-specific".into(), "--out".into(), p("g.json")],
        vec!["histogram".into(), "--bundle".into(), p("rel.cbmb"), "--bin-width".into(), "0.5".into(), "--range".into(), "-3,3".into(), "--out".into(), p("h.json")],
        vec!["refine".into(), "--bundle".into(), p("mixed.cbmb"), "--config".into(), cfg.clone(), "--cutoff".into(), "20".into(), "--out".into(), p("r.json")],
        vec!["train-encoder".into(), "--bundle".into(), p("rel.cbmb"), "--config".into(), cfg.clone(), "--out".into(), p("e.cbmb")],
        vec!["train-teacher".into(), "--bundle".into(), p("rel.cbmb"), "--config".into(), cfg.clone(), "--out".into(), p("t.cbmb")],
        vec!["train-classifier".into(), "--bundle".into(), p("rel.cbmb"), "--config".into(), cfg.clone(), "--encoder".into(), p("e.cbmb"), "--teacher".into(), p("t.cbmb"), "--out".into(), p("c.cbmb")],
        vec!["evaluate".into(), "--bundle".into(), p("rel.cbmb"), "--encoder".into(), p("e.cbmb"), "--classifier".into(), p("c.cbmb"), "--teacher".into(), p("t.cbmb"), "--out".into(), p("ev.json")],
        vec!["explain".into(), "--bundle".into(), p("rel.cbmb"), "--encoder".into(), p("e.cbmb"), "--classifier".into(), p("c.cbmb"), "--k".into(), "3".into(), "--out".into(), p("x.json")],
        vec!["audit".into(), "--bundle".into(), p("rel.cbmb"), "--encoder".into(), p("e.cbmb"), "--classifier".into(), p("c.cbmb"), "--out".into(), p("a.json")],
        vec!["sensitivity".into(), "--relevant".into(), p("rel.cbmb"), "--irrelevant".into(), p("irr.cbmb"), "--config".into(), cfg, "--out".into(), p("s.json")],
    ];
    for args in &runs {
        let code = cbmkit::cli::run(std::iter::once("cbmkit".to_string()).chain(args.iter().cloned()));
        assert_eq!(code, 0, "{args:?}");
    }
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|path| (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism_and_round_trip() -> Check {
    let bundle = make_synthetic_bundle(&SyntheticSpec::standard(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.cbmb");
    write_bundle(&bundle, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = read_bundle(&path).unwrap();
    write_bundle(&back, dir.path().join("b2.cbmb")).unwrap();
    let round_trip = back == bundle && std::fs::read(dir.path().join("b2.cbmb")).unwrap() == bytes;

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cli_outputs(a.path());
    let second = cli_outputs(b.path());
    // Paths differ between the two directories; nothing path-dependent is
    // written, so the bytes must match exactly.
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same_names = first.iter().map(|f| &f.0).eq(second.iter().map(|f| &f.0));
    (
        round_trip && same_names && differing.is_empty(),
        format!(
            "bundle round trip {}; {} CLI output files, {} differ{}",
            if round_trip { "bit-exact" } else { "MISMATCH" },
            first.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("linear collapse", linear_collapse),
        ("entropy calibration", entropy_calibration),
        ("goodness separation", goodness_separation),
        ("refinement dominance", refinement_dominance),
        ("sensitivity pattern", sensitivity_pattern),
        ("distillation gap", distillation_gap),
        ("determinism and round trip", determinism_and_round_trip),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let (pass, detail) = check();
        failed += !pass as usize;
        println!("{} {name}: {detail} ({:.1}s)", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
