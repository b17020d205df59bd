//! Acceptance suite: one test per criterion, each checked at its stated
//! tolerance and runtime budget, printing one pass line.
//!
//! Criteria (tolerances pinned in code):
//!  1. scheme arithmetic exactness (1e-7 vs scalar oracle, < 1 s)
//!  2. unit-weight equivalence to plain task arithmetic (bit-identical, < 1 s)
//!  3. planted-structure recovery at sigma 0.95 (1e-6 relative, < 5 s)
//!  4. forgetting inverse across schemes and lambdas (1e-6 relative, < 10 s)
//!  5. trim sparsity exactness and sign-election oracle (< 5 s)
//!  6. drop statistics: survivor count and unbiased expectation (< 60 s)
//!  7. 10% retention analogue on a 40-layer fixture (< 5 s)
//!  8. container round-trip over 1000 randomized checkpoints (< 60 s)
//!  9. bit-identical outputs across --threads 1 and 8 (< 30 s)
//! 10. cosine vs double-precision oracle and scale invariance (< 10 s)

use std::time::Instant;

use lata_core::fixture::{Magnitudes, TensorTemplate};
use lata_core::rng::ElementRng;
use lata_core::{
    apply_layer_weights, checkpoint_to_bytes, combine, dare_drop, diff, execute_recipe, forget,
    generate_fixture, partition, read_checkpoint, similarity_profile, ties_sign_merge, ties_trim,
    write_checkpoint, write_fixture, Checkpoint, DeltaSource, DeltaTensor, DeltaVector, Dtype,
    FixtureSpec, FsResolver, LayerPattern, MergeMode, MergeRecipe, Provenance, RecipeTerm,
    SchemeKind, SimilarityProfile, TensorData, Transform, WeightScheme,
};

fn pass(criterion: u32, name: &str, start: Instant, budget_secs: f64) {
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < budget_secs,
        "criterion {criterion} exceeded its {budget_secs}s budget ({elapsed:.2}s)"
    );
    println!("[acceptance] criterion {criterion} ({name}): PASS ({elapsed:.2}s < {budget_secs}s)");
}

fn four_layer_profile() -> SimilarityProfile {
    let names: Vec<String> = (0..4).map(|i| format!("h.{i}.w")).collect();
    let part = partition(names.iter().map(String::as_str), &LayerPattern::default()).unwrap();
    SimilarityProfile::from_cosines(
        part,
        "fam",
        [(0.9f32, false), (0.8, false), (0.7, false), (0.6, false)],
    )
    .unwrap()
}

fn spec(layers: usize, a: Vec<usize>, b: Vec<usize>, mags: Magnitudes, seed: u64) -> FixtureSpec {
    FixtureSpec {
        layers,
        layer_tensors: vec![
            TensorTemplate {
                name: "attn.w".to_string(),
                shape: vec![32, 32],
            },
            TensorTemplate {
                name: "mlp.w".to_string(),
                shape: vec![128],
            },
        ],
        residual_tensors: vec![TensorTemplate {
            name: "embed.w".to_string(),
            shape: vec![64],
        }],
        dtype: Dtype::F32,
        instruction_layers: a,
        task_layers: b,
        disjoint: false,
        magnitudes: mags,
        seed,
    }
}

fn max_abs(c: &Checkpoint, name: &str) -> f64 {
    c.get(name)
        .unwrap()
        .to_f32()
        .iter()
        .fold(0.0f64, |m, v| m.max(f64::from(v.abs())))
}

#[test]
fn criterion_01_scheme_arithmetic_exactness() {
    let start = Instant::now();
    let profile = four_layer_profile();

    let linear = lata_core::weights_linear(&profile);
    assert_eq!(linear, vec![0.25, 0.5, 0.75, 1.0]);
    for (layer, w) in profile.layers().iter().zip(&linear) {
        // Scalar oracle: rank divided by layer count, in double precision.
        let oracle = f64::from(layer.instruction_rank) / 4.0;
        assert!((f64::from(*w) - oracle).abs() <= 1e-7);
    }

    let log = lata_core::weights_log(&profile).unwrap();
    assert_eq!(log[0], 0.0);
    assert_eq!(log[3], 1.0);
    for (layer, w) in profile.layers().iter().zip(&log) {
        // Scalar oracle: log base L of the rank.
        let oracle = f64::from(layer.instruction_rank).ln() / 4.0f64.ln();
        assert!((f64::from(*w) - oracle).abs() <= 1e-7);
    }
    assert!((f64::from(log[1]) - 0.5).abs() <= 1e-7);
    assert!((f64::from(log[2]) - 3.0f64.ln() / 4.0f64.ln()).abs() <= 1e-7);

    pass(1, "scheme arithmetic exactness", start, 1.0);
}

#[test]
fn criterion_02_unit_weights_equal_plain_task_arithmetic() {
    let start = Instant::now();
    let set = generate_fixture(&spec(
        4,
        vec![0, 1],
        vec![2, 3],
        Magnitudes::default(),
        2024,
    ))
    .unwrap();
    let tau = diff(&set.finetuned, &set.pretrained).unwrap();
    let part = partition(tau.names(), &LayerPattern::default()).unwrap();
    let pure = apply_layer_weights(&tau, &part, &[1.0; 4], 1.0).unwrap();
    for lambda in [0.5f32, 1.0] {
        let lata = combine(&set.target, &[(lambda, &pure)]).unwrap();
        let ta = combine(&set.target, &[(lambda, &tau)]).unwrap();
        assert_eq!(
            checkpoint_to_bytes(&lata).unwrap(),
            checkpoint_to_bytes(&ta).unwrap(),
            "unit-weight merge must be bit-identical to plain task arithmetic"
        );
    }
    pass(2, "unit weights reduce to plain task arithmetic", start, 1.0);
}

#[test]
fn criterion_03_planted_structure_recovery() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec(4, vec![0, 1], vec![2, 3], Magnitudes::default(), 33);
    s.disjoint = true;
    let set = generate_fixture(&s).unwrap();
    let paths = write_fixture(&set, dir.path()).unwrap();

    // Structure check: instruction layers nearly parallel, task layers far.
    let instr = diff(&set.pretrained, &set.base).unwrap();
    let comp = diff(&set.finetuned, &set.base).unwrap();
    let part = partition(comp.names(), &LayerPattern::default()).unwrap();
    let profile = similarity_profile(&comp, &instr, &part).unwrap();
    for i in [0usize, 1] {
        assert!(profile.layers()[i].cosine > 0.99, "layer {i}");
    }
    for i in [2usize, 3] {
        assert!(profile.layers()[i].cosine < 0.1, "layer {i}");
    }

    let recipe = MergeRecipe {
        target: paths[3].clone(),
        base: Some(paths[0].clone()),
        pretrained: Some(paths[1].clone()),
        terms: vec![RecipeTerm {
            source: DeltaSource::Finetuned(paths[2].clone()),
            lambda: 1.0,
            chain: vec![Transform::Lata {
                scheme: WeightScheme::new(SchemeKind::DropWithThreshold).with_sigma(0.95),
            }],
        }],
        mode: MergeMode::Learn,
        layer_pattern: None,
        seed: 0,
        simultaneous: None,
        output: dir.path().join("merged.ckpt"),
    };
    let outcome = execute_recipe(&recipe, &FsResolver).unwrap();
    let weights: Vec<f32> = match &outcome.manifest.terms[0].transforms[0] {
        lata_core::merge::TransformReport::Lata { layers, .. } => {
            layers.iter().map(|l| l.weight).collect()
        }
        other => panic!("expected lata report, got {other:?}"),
    };
    assert_eq!(weights, vec![0.0, 0.0, 1.0, 1.0], "must zero exactly layers 0 and 1");

    // Independent scalar oracle in double precision:
    // expected = target + lambda * (finetuned - pretrained) on B layers only.
    for (name, tensor) in outcome.merged.iter() {
        let target = set.target.get(name).unwrap().to_f32();
        let in_b = name.contains(".layers.2.") || name.contains(".layers.3.");
        let ft = set.finetuned.get(name).unwrap().to_f32();
        let pre = set.pretrained.get(name).unwrap().to_f32();
        let scale = max_abs(&outcome.merged, name)
            .max(max_abs(&set.target, name))
            .max(1e-3);
        for (i, got) in tensor.to_f32().iter().enumerate() {
            let expected = if in_b {
                f64::from(target[i]) + 1.0 * (f64::from(ft[i]) - f64::from(pre[i]))
            } else {
                f64::from(target[i])
            };
            assert!(
                (f64::from(*got) - expected).abs() <= 1e-6 * scale,
                "{name}[{i}]: got {got}, expected {expected}"
            );
        }
    }
    pass(3, "planted-structure recovery", start, 5.0);
}

#[test]
fn criterion_04_forgetting_inverts_learning() {
    let start = Instant::now();
    let set = generate_fixture(&spec(
        4,
        vec![0, 1],
        vec![2, 3],
        Magnitudes::default(),
        44,
    ))
    .unwrap();
    let tau = diff(&set.finetuned, &set.pretrained).unwrap();
    let instr = diff(&set.pretrained, &set.base).unwrap();
    let comp = diff(&set.finetuned, &set.base).unwrap();
    let part = partition(tau.names(), &LayerPattern::default()).unwrap();
    let profile = similarity_profile(&comp, &instr, &part).unwrap();

    for kind in [
        SchemeKind::LinearDropByRank,
        SchemeKind::LogDropByRank,
        SchemeKind::DropWithThreshold,
    ] {
        let scheme = WeightScheme::new(kind);
        let pure = lata_core::build_pure_vector(&tau, &profile, &scheme, &part).unwrap();
        for lambda in [0.5f32, 0.8, 1.0, 1.5] {
            let learned = combine(&set.target, &[(lambda, &pure.delta)]).unwrap();
            let restored = forget(&learned, lambda, &pure.delta).unwrap();
            for (name, tensor) in restored.iter() {
                let want = set.target.get(name).unwrap().to_f32();
                let scale = max_abs(&learned, name)
                    .max(max_abs(&set.target, name))
                    .max(1e-3);
                for (i, got) in tensor.to_f32().iter().enumerate() {
                    assert!(
                        (f64::from(*got) - f64::from(want[i])).abs() <= 1e-6 * scale,
                        "{kind:?} lambda {lambda}: {name}[{i}]"
                    );
                }
            }
        }
    }
    pass(4, "forgetting inverts learning", start, 10.0);
}

#[test]
fn criterion_05_ties_sparsity_and_sign_election() {
    let start = Instant::now();
    let n = 100_000usize;
    let rng = ElementRng::new(505, "w");
    let values: Vec<f32> = (0..n)
        .map(|i| ((rng.uniform(i as u64) - 0.5) * 4.0) as f32)
        .collect();
    let mut delta = DeltaVector::new(Provenance::Task);
    delta.insert("w", DeltaTensor::new(vec![n as u64], values));
    let trimmed = ties_trim(&delta, 0.7).unwrap();
    let nonzero = trimmed
        .get("w")
        .unwrap()
        .values()
        .iter()
        .filter(|v| **v != 0.0)
        .count();
    assert_eq!(nonzero, 70_000, "non-zero count must be exactly ceil(0.7 * n)");

    // Sign election against a brute-force elementwise oracle.
    let m = 1000usize;
    let mk = |salt: u64| -> Vec<f32> {
        let rng = ElementRng::new(salt, "v");
        (0..m)
            .map(|i| ((rng.uniform(i as u64) - 0.5) * 2.0) as f32)
            .collect()
    };
    let (va, vb, vc) = (mk(11), mk(22), mk(33));
    let as_delta = |v: &[f32]| {
        let mut d = DeltaVector::new(Provenance::Task);
        d.insert("v", DeltaTensor::new(vec![m as u64], v.to_vec()));
        d
    };
    let (da, db, dc) = (as_delta(&va), as_delta(&vb), as_delta(&vc));
    let merged = ties_sign_merge(&[&da, &db, &dc]).unwrap();
    for i in 0..m {
        let vals = [va[i], vb[i], vc[i]];
        let sum: f64 = vals.iter().map(|v| f64::from(*v)).sum();
        let expected = if sum == 0.0 {
            0.0f32
        } else {
            let agree: Vec<f64> = vals
                .iter()
                .map(|v| f64::from(*v))
                .filter(|v| if sum > 0.0 { *v > 0.0 } else { *v < 0.0 })
                .collect();
            (agree.iter().sum::<f64>() / agree.len() as f64) as f32
        };
        assert_eq!(merged.get("v").unwrap().values()[i], expected, "element {i}");
    }
    pass(5, "trim sparsity and sign election", start, 5.0);
}

#[test]
fn criterion_06_dare_statistics() {
    let start = Instant::now();
    // Survivor count over one million unit elements.
    let n = 1_000_000usize;
    let mut delta = DeltaVector::new(Provenance::Task);
    delta.insert("w", DeltaTensor::new(vec![n as u64], vec![1.0; n]));
    let dropped = dare_drop(&delta, 0.3, 606).unwrap();
    let survivors = dropped
        .get("w")
        .unwrap()
        .values()
        .iter()
        .filter(|v| **v != 0.0)
        .count() as f64;
    let sigma = (n as f64 * 0.3 * 0.7).sqrt();
    assert!(
        (survivors - 700_000.0).abs() <= 3.0 * sigma,
        "survivors {survivors} outside 700000 +- {:.0}",
        3.0 * sigma
    );

    // Rescaled expectation over 1000 seeds: unbiased recovery of the value.
    let m = 1000usize;
    let mut small = DeltaVector::new(Provenance::Task);
    small.insert("w", DeltaTensor::new(vec![m as u64], vec![1.0; m]));
    let mut sums = vec![0.0f64; m];
    for seed in 0..1000u64 {
        let out = dare_drop(&small, 0.3, seed).unwrap();
        for (s, v) in sums.iter_mut().zip(out.get("w").unwrap().values()) {
            *s += f64::from(*v);
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / 1000.0).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    assert!(
        (grand - 1.0).abs() <= 0.01,
        "grand mean {grand} deviates more than 1% from the original value"
    );
    for (i, mean) in means.iter().enumerate() {
        assert!(
            (mean - 1.0).abs() <= 0.10,
            "element {i} mean {mean} outside the 10% sanity band"
        );
    }
    pass(6, "drop statistics", start, 60.0);
}

#[test]
fn criterion_07_ten_percent_retention() {
    let start = Instant::now();
    // 40 layers, instruction delta everywhere, a 2x task delta on exactly
    // four layers; only those four can fall below the 0.95 threshold.
    let mags = Magnitudes {
        instruction: 1.0,
        task: 2.0,
        reinforcement: 0.05,
        noise: 0.0,
    };
    let set = generate_fixture(&spec(40, (0..40).collect(), vec![26, 27, 28, 29], mags, 77))
        .unwrap();
    let instr = diff(&set.pretrained, &set.base).unwrap();
    let comp = diff(&set.finetuned, &set.base).unwrap();
    let part = partition(comp.names(), &LayerPattern::default()).unwrap();
    let profile = similarity_profile(&comp, &instr, &part).unwrap();

    let below: Vec<usize> = profile
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.cosine < 0.95)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(below, vec![26, 27, 28, 29], "exactly the task layers sit below sigma");

    let weights =
        lata_core::weights_threshold(&profile, 0.95);
    let retained: Vec<usize> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w == 1.0)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(retained, vec![26, 27, 28, 29]);
    assert_eq!(retained.len() * 10, profile.layer_count(), "10% of layers retained");
    pass(7, "10% retention analogue", start, 5.0);
}

#[test]
fn criterion_08_io_roundtrip_1000_checkpoints() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let dtypes = [Dtype::F32, Dtype::F16, Dtype::BF16];
    for case in 0..1000u64 {
        let rng = ElementRng::new(808, &format!("case{case}"));
        let mut draw = {
            let mut i = 0u64;
            move || {
                i += 1;
                rng.uniform(i)
            }
        };
        let tensor_count = 1 + (draw() * 64.0) as usize;
        let mut ckpt = Checkpoint::new();
        for t in 0..tensor_count {
            let dtype = dtypes[(draw() * 3.0) as usize % 3];
            let dims = (draw() * 3.0) as usize;
            let shape: Vec<u64> = (0..dims).map(|_| (draw() * 4.0) as u64 + 1).collect();
            let count: u64 = shape.iter().product();
            let bytes: Vec<u8> = (0..count as usize * dtype.element_size())
                .map(|_| (draw() * 256.0) as u8)
                .collect();
            ckpt.insert(
                format!("t{t}.w"),
                TensorData::new(dtype, shape, bytes).unwrap(),
            )
            .unwrap();
        }
        let path = dir.path().join("roundtrip.ckpt");
        write_checkpoint(&ckpt, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let reread = read_checkpoint(&path).unwrap();
        assert_eq!(reread, ckpt, "case {case}: read must reconstruct the checkpoint");
        write_checkpoint(&reread, &path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second, "case {case}: rewrite must be byte-identical");
    }
    pass(8, "container round-trip x1000", start, 60.0);
}

#[test]
fn criterion_09_thread_count_never_changes_results() {
    let start = Instant::now();
    let fixture = spec(6, vec![0, 1, 2], vec![3, 4, 5], Magnitudes::default(), 909);

    let recipe_json = r#"{
      "base": "ckpts/base.ckpt",
      "pretrained": "ckpts/pretrained.ckpt",
      "target": "ckpts/target.ckpt",
      "terms": [
        {"finetuned": "ckpts/finetuned.ckpt", "lambda": 1.5,
         "chain": [{"op": "lata", "scheme": "linear"}, {"op": "dare", "p": 0.3}]},
        {"finetuned": "ckpts/finetuned.ckpt", "lambda": 0.5,
         "chain": [{"op": "ties", "k": 0.7}]},
        {"finetuned": "ckpts/finetuned.ckpt", "lambda": 0.5,
         "chain": [{"op": "ties", "k": 0.7}]}
      ],
      "seed": 99,
      "simultaneous": true,
      "output": "out.ckpt"
    }"#;

    let run = |threads: &str| -> (Vec<u8>, Vec<u8>) {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_fixture(&fixture).unwrap();
        write_fixture(&set, dir.path().join("ckpts")).unwrap();
        std::fs::write(dir.path().join("merge.json"), recipe_json).unwrap();
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_lata"))
            .current_dir(dir.path())
            .args(["merge", "--config", "merge.json", "--threads", threads])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "threads {threads}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        (
            std::fs::read(dir.path().join("out.ckpt")).unwrap(),
            std::fs::read(dir.path().join("out.ckpt.manifest.json")).unwrap(),
        )
    };
    let (out1, man1) = run("1");
    let (out8, man8) = run("8");
    assert_eq!(out1, out8, "outputs must be bit-identical across thread counts");
    assert_eq!(man1, man8, "manifests must be bit-identical across thread counts");
    pass(9, "determinism under parallelism", start, 30.0);
}

#[test]
fn criterion_10_similarity_matches_double_precision_oracle() {
    let start = Instant::now();
    let pattern = LayerPattern::default();
    for case in 0..1000u64 {
        let rng = ElementRng::new(case, "pair");
        let n = 16 + (rng.uniform(0) * 240.0) as usize;
        let a: Vec<f32> = (0..n)
            .map(|i| ((rng.uniform(2 * i as u64 + 1) - 0.5) * 4.0) as f32)
            .collect();
        let b: Vec<f32> = (0..n)
            .map(|i| ((rng.uniform(2 * i as u64 + 2) - 0.5) * 4.0) as f32)
            .collect();
        let mk = |v: &[f32]| {
            let mut d = DeltaVector::new(Provenance::Derived);
            d.insert("h.0.w", DeltaTensor::new(vec![n as u64], v.to_vec()));
            d
        };
        let (da, db) = (mk(&a), mk(&b));
        let part = partition(["h.0.w"], &pattern).unwrap();
        let sim = similarity_profile(&da, &db, &part).unwrap().layers()[0].cosine;

        // Double-precision scalar oracle.
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for i in 0..n {
            dot += f64::from(a[i]) * f64::from(b[i]);
            na += f64::from(a[i]) * f64::from(a[i]);
            nb += f64::from(b[i]) * f64::from(b[i]);
        }
        let oracle = dot / (na.sqrt() * nb.sqrt());
        assert!(
            (f64::from(sim) - oracle).abs() <= 1e-6,
            "case {case}: {sim} vs oracle {oracle}"
        );

        // Positive scaling leaves the cosine unchanged.
        for c in [1e-3f32, 3.0, 1e3] {
            let scaled: Vec<f32> = a.iter().map(|v| v * c).collect();
            let s = similarity_profile(&mk(&scaled), &db, &part).unwrap().layers()[0].cosine;
            assert!(
                (f64::from(s) - f64::from(sim)).abs() <= 1e-6,
                "case {case} scale {c}"
            );
        }
    }
    pass(10, "similarity correctness and scale invariance", start, 10.0);
}
