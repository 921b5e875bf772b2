//! Acceptance suite: end-to-end gates the crate has to clear before a
//! release. Each test prints one `criterion N PASS` line (visible under
//! `--nocapture`), so a full run doubles as a checklist. Oracles here are
//! written independently of the library code they judge: plain loops,
//! plain sorts, hand-computed closed forms.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cosalign::align::{
    class_wise_cosine_loss, cosine_matrix, multi_tap_cosine_loss, tap_threshold,
    FeatureDictionary,
};
use cosalign::checkpoint::{pack_dictionary, unpack_dictionary, TensorBag};
use cosalign::checks;
use cosalign::config::{RunConfig, Variant};
use cosalign::labelmap::LabelMap;
use cosalign::metrics::METRICS_HEADER;
use cosalign::pseudolabel::{ConfidenceCollector, THRESHOLD_CAP};
use cosalign::suite::{median, run_ablation_suite};
use cosalign::synthdata::{generate_dataset, render_scene, DatasetSpec, Domain, SceneParams,
    ShiftParams};
use cosalign::trainer::{generate_pseudo_labels, Sample, TargetSample, TrainData, Trainer};
use cosalign::{Real, Scalar, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cosalign-accept-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn apply_all(cfg: &mut RunConfig, pairs: &[(&str, &str)]) {
    for (k, v) in pairs {
        cfg.apply(k, v).unwrap();
    }
}

// ---------------------------------------------------------------------------
// 1. Cosine matrix against an independent scalar double loop.

#[test]
fn criterion_1_cosine_matrix_matches_scalar_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut pairs = 0usize;

    for case in 0..100 {
        let n = rng.gen_range(1..=256);
        let m = rng.gen_range(1..=256);
        let k = rng.gen_range(1..=64);

        let mut rows_data: Vec<Scalar> =
            (0..n * k).map(|_| rng.gen_range(-2.0..2.0) as Scalar).collect();
        let mut bank_rows: Vec<Vec<Scalar>> = (0..m)
            .map(|_| (0..k).map(|_| rng.gen_range(-2.0..2.0) as Scalar).collect())
            .collect();
        // Exercise the norm floor: an all-zero row and a vanishing row on
        // either side, in a third of the cases.
        if case % 3 == 0 {
            let i = rng.gen_range(0..n);
            rows_data[i * k..(i + 1) * k].fill(0.0 as Scalar);
            let i = rng.gen_range(0..n);
            for v in &mut rows_data[i * k..(i + 1) * k] {
                *v *= 1e-12 as Scalar;
            }
            let j = rng.gen_range(0..m);
            bank_rows[j].fill(0.0 as Scalar);
        }

        let rows = Tensor::new(&[n, k], rows_data.clone()).unwrap();
        let bank_refs: Vec<&[Scalar]> = bank_rows.iter().map(|r| r.as_slice()).collect();
        let got = cosine_matrix(&rows, &bank_refs).unwrap();
        assert_eq!(got.shape(), &[n, m]);
        let got = got.data();

        for i in 0..n {
            for j in 0..m {
                let r = &rows_data[i * k..(i + 1) * k];
                let b = &bank_rows[j];
                let mut dot = 0.0f64;
                let mut nr = 0.0f64;
                let mut nb = 0.0f64;
                for c in 0..k {
                    let (x, y) = (r[c] as f64, b[c] as f64);
                    dot += x * y;
                    nr += x * x;
                    nb += y * y;
                }
                let want = dot / (nr.sqrt().max(1e-8) * nb.sqrt().max(1e-8));
                let diff = (got[i * m + j] as f64 - want).abs();
                worst = worst.max(diff);
                pairs += 1;
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(worst <= 1e-6, "worst |Δ| {worst:.3e} exceeds 1e-6");
    assert!(secs < 10.0, "took {secs:.1}s, budget is 10s");
    println!(
        "criterion 1 PASS — cosine matrix vs scalar double loop: 100 cases, \
         {pairs} pairs, worst |Δ| {worst:.2e}, {secs:.2}s"
    );
}

// ---------------------------------------------------------------------------
// 2. Gradient checks: every primitive op, plus both full training
//    objectives (stage 1 and stage 2) on a 32x32 scene.

#[test]
fn criterion_2_gradient_checks_primitives_and_objectives() {
    let start = Instant::now();
    let mut reports = checks::primitive_gradient_reports();
    // Stride 3 samples every third parameter component of the objectives;
    // the companion test below covers every component at a looser
    // tolerance with no time budget.
    reports.extend(checks::objective_gradient_reports(1e-3, 3).unwrap());

    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for r in &reports {
        worst = worst.max(r.worst_rel_err);
        if !r.passed() {
            failed.push(format!("{r}"));
        }
    }
    assert!(failed.is_empty(), "failing gradient checks:\n{}", failed.join("\n"));

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s, budget is 60s");
    println!(
        "criterion 2 PASS — {} gradient reports (primitives + stage-1/stage-2 \
         objectives), worst rel err {worst:.2e}, {secs:.1}s",
        reports.len()
    );
}

/// Companion to criterion 2: at a mid-training state, the analytic gradient
/// of the full stage-2 objective matches finite differences on every single
/// network parameter component (tolerance 2e-3, no sampling).
#[test]
fn full_stage2_gradient_every_parameter_component() {
    let report = checks::objective_report(2, 5, 2e-3, 1).unwrap();
    assert!(report.passed(), "{report}");
    println!("stage-2 objective, every parameter component: {report}");
}

// ---------------------------------------------------------------------------
// 3. Dictionary semantics: FIFO eviction, capacity bound, detachment,
//    checkpoint round-trip; capacities 1..=8 with random schedules.

#[test]
fn criterion_3_dictionary_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut schedules = 0;

    for capacity in 1..=8usize {
        for _ in 0..25 {
            let dim = rng.gen_range(1..=6);
            let mut dict = FeatureDictionary::<Scalar>::new(capacity, dim).unwrap();
            // Reference model: one plain deque per class, same eviction rule.
            let mut model: BTreeMap<u8, VecDeque<Vec<Scalar>>> = BTreeMap::new();
            let mut stamp = 0.0f32;

            for _ in 0..rng.gen_range(1..=40) {
                let class = rng.gen_range(1..=4) as u8;
                let burst: Vec<Vec<Scalar>> = (0..rng.gen_range(1..=5))
                    .map(|_| {
                        stamp += 1.0;
                        (0..dim).map(|c| stamp + c as f32 * 0.125).collect()
                    })
                    .collect();
                dict.enqueue(class, burst.clone()).unwrap();
                let q = model.entry(class).or_default();
                for row in burst {
                    q.push_back(row);
                    if q.len() > capacity {
                        q.pop_front();
                    }
                }
            }

            for (&class, q) in &model {
                assert!(dict.len(class) <= capacity, "capacity bound violated");
                let got = dict.rows(class);
                assert_eq!(got.len(), q.len(), "bucket length diverged from model");
                for (g, w) in got.iter().zip(q) {
                    assert_eq!(*g, w.as_slice(), "FIFO order diverged from model");
                }
            }

            // Round-trip through the binary checkpoint container.
            let mut bag = TensorBag::new();
            pack_dictionary(&mut bag, "d", &dict).unwrap();
            let mut bytes = Vec::new();
            bag.write_to(&mut bytes).unwrap();
            let bag2 = TensorBag::<Scalar>::read_from(&mut bytes.as_slice()).unwrap();
            let back = unpack_dictionary::<Scalar>(&bag2, "d").unwrap();
            assert_eq!(back.capacity(), dict.capacity());
            assert_eq!(back.dim(), dict.dim());
            assert_eq!(back.classes(), dict.classes());
            for class in dict.classes() {
                let (a, b) = (dict.rows(class), back.rows(class));
                assert_eq!(a.len(), b.len(), "round-trip changed bucket length");
                for (x, y) in a.iter().zip(&b) {
                    for (u, v) in x.iter().zip(y.iter()) {
                        assert_eq!(
                            u.as_f64().to_bits(),
                            v.as_f64().to_bits(),
                            "round-trip changed stored bits"
                        );
                    }
                }
            }
            schedules += 1;
        }
    }

    // Detachment: the loss must push gradient into the live features and
    // none into the tensor whose rows were copied into the dictionary,
    // and backward must leave the stored rows bit-identical.
    let origin = Tensor::<Scalar>::parameter(
        &[2, 4],
        vec![0.9, -0.3, 0.4, 0.1, -0.2, 0.8, 0.5, -0.6],
    )
    .unwrap();
    let mut dict = FeatureDictionary::<Scalar>::new(4, 4).unwrap();
    let origin_rows: Vec<Vec<Scalar>> = {
        let d = origin.data();
        (0..2).map(|i| d[i * 4..(i + 1) * 4].to_vec()).collect()
    };
    dict.enqueue(1, origin_rows).unwrap();
    let before: Vec<u64> = dict
        .entries()
        .flat_map(|(_, _, row)| row.iter().map(|v| v.as_f64().to_bits()).collect::<Vec<_>>())
        .collect();

    let feats = Tensor::<Scalar>::parameter(
        &[4, 2, 2],
        (0..16).map(|i| 0.3 + 0.11 * i as f32).collect(),
    )
    .unwrap();
    let mut split = BTreeMap::new();
    split.insert(1u8, vec![0usize, 1, 3]);
    let (loss, outcome) = class_wise_cosine_loss(&feats, &split, &dict, -0.5, 5).unwrap();
    assert!(outcome.selected_pairs > 0, "detachment check would be vacuous");
    loss.backward().unwrap();

    let live_grad = feats.grad().expect("live features receive gradient");
    assert!(live_grad.iter().any(|v| v.as_f64() != 0.0));
    assert!(
        origin
            .grad()
            .map_or(true, |g| g.iter().all(|v| v.as_f64() == 0.0)),
        "gradient leaked into the tensor the stored rows were copied from"
    );
    let after: Vec<u64> = dict
        .entries()
        .flat_map(|(_, _, row)| row.iter().map(|v| v.as_f64().to_bits()).collect::<Vec<_>>())
        .collect();
    assert_eq!(before, after, "backward changed stored dictionary bits");

    println!(
        "criterion 3 PASS — FIFO/capacity/round-trip over capacities 1–8 \
         ({schedules} random schedules), detachment and bit-stability verified"
    );
}

// ---------------------------------------------------------------------------
// 4. Pseudo-label thresholds equal a brute-force percentile oracle exactly.

#[test]
fn criterion_4_thresholds_match_percentile_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut capped = 0usize;
    let mut empty = 0usize;

    for _ in 0..1000 {
        let classes = rng.gen_range(1..=8);
        let mut collector = ConfidenceCollector::new(classes);
        let mut dumps: Vec<Vec<f64>> = vec![Vec::new(); classes];

        for c in 0..classes {
            if rng.gen_ratio(1, 5) {
                continue; // class never observed -> cap applies
            }
            let confident = rng.gen_bool(0.4);
            for _ in 0..rng.gen_range(1..=300) {
                let v = if confident {
                    rng.gen_range(0.85..1.0)
                } else {
                    rng.gen_range(0.2..1.0)
                };
                collector.observe((c + 1) as u8, v);
                dumps[c].push(v);
            }
        }

        let got = collector.finish();
        for (c, dump) in dumps.iter().enumerate() {
            // Brute force: sort a copy descending, take the midpoint entry,
            // clamp to the cap; an unobserved class gets the cap itself.
            let want = if dump.is_empty() {
                empty += 1;
                THRESHOLD_CAP
            } else {
                let mut sorted = dump.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let median = sorted[sorted.len() / 2];
                if median > THRESHOLD_CAP {
                    capped += 1;
                }
                median.min(THRESHOLD_CAP)
            };
            let have = got.for_class((c + 1) as u8);
            assert!(
                have == want,
                "class {}: got {have}, oracle says {want}",
                c + 1
            );
        }
    }

    assert!(capped > 0, "no dump exercised the 0.9 cap");
    assert!(empty > 0, "no dump exercised the unobserved-class cap");
    println!(
        "criterion 4 PASS — thresholds equal the sort-based percentile oracle \
         exactly on 1000 dumps ({capped} capped at {THRESHOLD_CAP}, {empty} empty classes)"
    );
}

// ---------------------------------------------------------------------------
// 5. The unmatching problem: a class present only in the target domain can
//    never be matched; the dictionary's cross-iteration memory is what
//    turns "seen in source once" into "matched from then on".

/// Scene seed for the source image, found by scanning for a fixture where
/// the freshly initialized network already predicts the probe class on
/// both domains (so presence in the split does not depend on training).
const UNMATCHING_SCENE_SEED: u64 = 0;
/// Network seed paired with the scene seed above.
const UNMATCHING_NET_SEED: u64 = 1;
/// The class the fixture tracks.
const PROBE_CLASS: u8 = 3;

fn unmatching_fixture_at(scene_seed: u64, target_only: bool) -> TrainData<Scalar> {
    let params = SceneParams { classes: 5, height: 32, width: 32 };
    let shift = ShiftParams::default();
    let flag = target_only.then_some(PROBE_CLASS);
    let src = render_scene(&params, &shift, scene_seed, Domain::Source, flag).unwrap();
    let tgt = render_scene(&params, &shift, scene_seed + 500, Domain::Target, flag).unwrap();
    TrainData {
        source: vec![Sample {
            seed: 1,
            image: cosalign::imageio::rgb_to_tensor(src.width, src.height, &src.rgb),
            labels: src.labels,
        }],
        target: vec![TargetSample {
            seed: 2,
            image: cosalign::imageio::rgb_to_tensor(tgt.width, tgt.height, &tgt.rgb),
            pseudo: None,
        }],
        eval: Vec::new(),
    }
}

fn unmatching_trainer_at(net_seed: u64, variant: &str) -> Trainer<Scalar> {
    let mut cfg = RunConfig::default();
    apply_all(
        &mut cfg,
        &[
            ("stage", "1"),
            ("classes", "5"),
            ("feature_dim", "8"),
            ("variant", variant),
            ("t_cos", "-0.5"),
            ("max_iter", "50"),
            // Zero learning rate freezes the network: the prediction map,
            // and with it the class split, is identical every iteration,
            // so only the dictionary state evolves.
            ("lr", "0"),
            // Enqueue after the loss: features seen in source this
            // iteration become available to the loss next iteration.
            ("enqueue_after_loss", "true"),
            ("seed", &net_seed.to_string()),
        ],
    );
    if variant != "no_dict" {
        cfg.apply("dict_size", "8").unwrap();
    }
    Trainer::new(cfg).unwrap()
}

fn unmatching_fixture(target_only: bool) -> TrainData<Scalar> {
    unmatching_fixture_at(UNMATCHING_SCENE_SEED, target_only)
}

fn unmatching_trainer(variant: &str) -> Trainer<Scalar> {
    unmatching_trainer_at(UNMATCHING_NET_SEED, variant)
}

/// One-off helper that found the pinned fixture seeds: scans for a
/// (scene, network) pair where the frozen network's prediction contains
/// the probe class on the target scene of both fixture variants and the
/// source exposure gets the class enqueued on the first iteration.
#[test]
#[ignore]
fn scratch_unmatching_seed_search() {
    for scene_seed in 0..40u64 {
        for net_seed in 0..12u64 {
            let shared = unmatching_fixture_at(scene_seed, false);
            let mut t = unmatching_trainer_at(net_seed, "ours");
            let s0 = t.step(&shared).unwrap();
            if !s0.outcome.skipped.contains(&PROBE_CLASS) {
                continue;
            }
            let s1 = t.step(&shared).unwrap();
            if !s1.outcome.matched.contains(&PROBE_CLASS) {
                continue;
            }
            let flagged = unmatching_fixture_at(scene_seed, true);
            let mut t = unmatching_trainer_at(net_seed, "no_dict");
            let s = t.step(&flagged).unwrap();
            if s.outcome.skipped.contains(&PROBE_CLASS) {
                println!("candidate: scene_seed {scene_seed}, net_seed {net_seed}");
            }
        }
    }
}

#[test]
fn criterion_5_unmatching_regression() {
    const ITERS: usize = 12;

    // (a) Class present only in the target domain, dictionary disabled:
    // skipped on every single iteration, matched on none.
    let data = unmatching_fixture(true);
    let mut trainer = unmatching_trainer("no_dict");
    for i in 0..ITERS {
        let stats = trainer.step(&data).unwrap();
        assert!(
            stats.outcome.skipped.contains(&PROBE_CLASS),
            "iteration {i}: target-only class left the split — fixture seeds no longer hold"
        );
        assert!(!stats.outcome.matched.contains(&PROBE_CLASS));
    }

    // Still true with the dictionary enabled: no source scene ever
    // contains the class, so there is nothing to remember.
    let mut trainer = unmatching_trainer("ours");
    for _ in 0..ITERS {
        let stats = trainer.step(&data).unwrap();
        assert!(stats.outcome.skipped.contains(&PROBE_CLASS));
        assert!(!stats.outcome.matched.contains(&PROBE_CLASS));
    }

    // (b) Same scenes without the target-only restriction: the class now
    // appears in source. With the dictionary disabled it is still skipped
    // every iteration (cleared before each step, filled only after the
    // loss). With the dictionary enabled, one iteration of source
    // exposure is enough: skipped at iteration 0, matched from then on.
    let data = unmatching_fixture(false);
    let mut trainer = unmatching_trainer("no_dict");
    for _ in 0..ITERS {
        let stats = trainer.step(&data).unwrap();
        assert!(stats.outcome.skipped.contains(&PROBE_CLASS));
        assert!(!stats.outcome.matched.contains(&PROBE_CLASS));
    }

    let mut trainer = unmatching_trainer("ours");
    for i in 0..ITERS {
        let stats = trainer.step(&data).unwrap();
        if i == 0 {
            assert!(
                stats.outcome.skipped.contains(&PROBE_CLASS),
                "the dictionary should still be empty on the first iteration"
            );
        } else {
            assert!(
                stats.outcome.matched.contains(&PROBE_CLASS),
                "iteration {i}: class seen in source on iteration 0 was not matched"
            );
            assert!(!stats.outcome.skipped.contains(&PROBE_CLASS));
        }
    }

    println!(
        "criterion 5 PASS — target-only class skipped every iteration without \
         the dictionary; matched from iteration 1 on with it (class {PROBE_CLASS}, \
         {ITERS} iterations per arm)"
    );
}

// ---------------------------------------------------------------------------
// 6. Adaptation effect on the default two-domain benchmark.

// Protocol, fixed after the first full run and recorded here and in the
// README: 80 source + 80 target training scenes and 50 evaluation scenes
// per domain at the default 64x64 / 5-class / default-shift settings.
// Stage 1 trains 1000 iterations (defaults otherwise); each arm then
// harvests pseudo labels from its own stage-1 network, and stage 2
// fine-tunes 400 iterations at lr 1e-4 from the stage-1 checkpoint.
const BENCH_SCENES: usize = 80;
const BENCH_EVAL: usize = 50;
const BENCH_STAGE1_ITERS: usize = 1000;
const BENCH_STAGE2_ITERS: usize = 400;
const BENCH_STAGE2_LR: &str = "1e-4";
const BENCH_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn bench_cfg(data: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    apply_all(
        &mut cfg,
        &[
            ("classes", "5"),
            ("seed", &seed.to_string()),
            ("max_iter", &BENCH_STAGE1_ITERS.to_string()),
            ("eval_every", &BENCH_STAGE1_ITERS.to_string()),
            ("data", data.to_str().unwrap()),
        ],
    );
    cfg
}

#[test]
fn criterion_6_adaptation_margins_on_default_benchmark() {
    let start = Instant::now();
    let root = temp_dir("bench");
    generate_dataset(
        &root,
        &DatasetSpec {
            source_train: BENCH_SCENES,
            target_train: BENCH_SCENES,
            eval_per_domain: BENCH_EVAL,
            ..DatasetSpec::default()
        },
    )
    .unwrap();

    let run_stage1 = |seed: u64, variant: &str| -> (f64, PathBuf, PathBuf) {
        let mut cfg = bench_cfg(&root, seed);
        if variant != "ours" {
            cfg.apply("variant", variant).unwrap();
        }
        let data = TrainData::<Scalar>::load(&cfg).unwrap();
        let mut trainer = Trainer::new(cfg).unwrap();
        let log = trainer.run(&data).unwrap();
        let ckpt = root.join(format!("{variant}_{seed}.ckpt"));
        trainer.save_checkpoint(&ckpt).unwrap();
        let pl_dir = root.join(format!("pl_{variant}_{seed}"));
        generate_pseudo_labels(&trainer.net, 5, &root, &pl_dir).unwrap();
        (log.last_miou().unwrap(), ckpt, pl_dir)
    };

    let run_stage2 = |seed: u64, variant: &str, ckpt: &Path, pl_dir: &Path| -> f64 {
        let mut cfg = bench_cfg(&root, seed);
        apply_all(
            &mut cfg,
            &[
                ("stage", "2"),
                ("lr", BENCH_STAGE2_LR),
                ("max_iter", &BENCH_STAGE2_ITERS.to_string()),
                ("eval_every", &BENCH_STAGE2_ITERS.to_string()),
                ("pseudo_dir", pl_dir.to_str().unwrap()),
            ],
        );
        if variant != "ours" {
            cfg.apply("variant", variant).unwrap();
        }
        let data = TrainData::<Scalar>::load(&cfg).unwrap();
        let mut trainer = Trainer::new(cfg).unwrap();
        trainer.load_parameters(ckpt).unwrap();
        let log = trainer.run(&data).unwrap();
        log.last_miou().unwrap()
    };

    let (mut src1, mut ours1, mut ssl2, mut ours2) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &seed in &BENCH_SEEDS {
        // "only_ssl" at stage 1 runs without pseudo labels or alignment:
        // the plain source-only baseline.
        let (miou_src, ckpt_src, pl_src) = run_stage1(seed, "only_ssl");
        let (miou_ours, ckpt_ours, pl_ours) = run_stage1(seed, "ours");
        src1.push(miou_src);
        ours1.push(miou_ours);
        ssl2.push(run_stage2(seed, "only_ssl", &ckpt_src, &pl_src));
        ours2.push(run_stage2(seed, "ours", &ckpt_ours, &pl_ours));
    }

    let (m_src1, m_ours1) = (median(&src1), median(&ours1));
    let (m_ssl2, m_ours2) = (median(&ssl2), median(&ours2));
    let margin1 = (m_ours1 - m_src1) * 100.0;
    let secs = start.elapsed().as_secs_f64();

    let detail = format!(
        "stage-1 source-only {m_src1:.4} vs aligned {m_ours1:.4} (margin {margin1:+.1} \
         points), stage-2 only-SSL {m_ssl2:.4} vs ours {m_ours2:.4}, medians over \
         {} seeds, {:.1} min",
        BENCH_SEEDS.len(),
        secs / 60.0
    );
    assert!(
        margin1 >= 3.0,
        "stage-1 margin under 3 mIoU points: {detail}\nper seed: src {src1:?} ours {ours1:?}"
    );
    assert!(
        m_ours2 >= m_ssl2,
        "stage-2 ours fell below only-SSL: {detail}\nper seed: ssl {ssl2:?} ours {ours2:?}"
    );
    assert!(secs < 1200.0, "took {:.1} min, budget is 20 min", secs / 60.0);

    let _ = std::fs::remove_dir_all(&root);
    println!("criterion 6 PASS — {detail}");
}

// ---------------------------------------------------------------------------
// 7. Ablation scaffolding: six variants, well-formed CSVs and curves.

#[test]
fn criterion_7_ablation_structure() {
    let root = temp_dir("ablate");
    let data_root = root.join("data");
    generate_dataset(
        &data_root,
        &DatasetSpec {
            scene: SceneParams { classes: 5, height: 32, width: 32 },
            source_train: 3,
            target_train: 3,
            eval_per_domain: 2,
            ..DatasetSpec::default()
        },
    )
    .unwrap();

    // Stage 2 needs pseudo labels; an untrained network is fine for a
    // structural check.
    let net = cosalign::net::SegNet::<Scalar>::new(5, 8, 9);
    let pl_dir = root.join("pseudo");
    generate_pseudo_labels(&net, 5, &data_root, &pl_dir).unwrap();

    let mut template = RunConfig::default();
    apply_all(
        &mut template,
        &[
            ("stage", "2"),
            ("classes", "5"),
            ("feature_dim", "8"),
            ("dict_size", "16"),
            ("max_iter", "4"),
            ("eval_every", "2"),
            ("data", data_root.to_str().unwrap()),
            ("pseudo_dir", pl_dir.to_str().unwrap()),
        ],
    );

    let out = root.join("suite");
    let report = run_ablation_suite::<Scalar>(&template, &[11], &out).unwrap();

    assert_eq!(report.runs.len(), 6, "expected one run per variant");
    for variant in Variant::ALL {
        assert!(
            report.runs.iter().any(|r| r.variant == variant),
            "variant {variant:?} missing from the suite"
        );
    }

    // runs.csv: header plus one well-formed line per run.
    let runs_csv = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    let lines: Vec<&str> = runs_csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,final_miou");
    assert_eq!(lines.len(), 7);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "bad runs.csv line: {line}");
        fields[1].parse::<u64>().unwrap();
        let miou: f64 = fields[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&miou));
    }

    // table.csv: header plus one median per variant.
    let table_csv = std::fs::read_to_string(out.join("table.csv")).unwrap();
    let tlines: Vec<&str> = table_csv.lines().collect();
    assert_eq!(tlines[0], "variant,median_final_miou");
    assert_eq!(tlines.len(), 7);

    // Per-run curves: the expected number of evaluation rows, all parseable,
    // plus one JSON object per evaluation point.
    for variant in Variant::ALL {
        let stem = format!("{}_11", variant.key());
        let curve = std::fs::read_to_string(out.join("curves").join(format!("{stem}.csv"))).unwrap();
        let clines: Vec<&str> = curve.lines().collect();
        assert_eq!(clines[0], METRICS_HEADER);
        assert_eq!(clines.len(), 1 + 3, "expected eval rows at 0, 2 and 4");
        for line in &clines[1..] {
            assert_eq!(line.split(',').count(), 5);
            for field in line.split(',') {
                field.parse::<f64>().unwrap();
            }
        }
        let jsonl = std::fs::read_to_string(out.join("curves").join(format!("{stem}.jsonl"))).unwrap();
        let jlines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(jlines.len(), 3);
        for line in jlines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("iter").is_some() && v.get("iou").is_some());
        }
    }

    let _ = std::fs::remove_dir_all(&root);
    println!(
        "criterion 7 PASS — six-variant suite complete; runs.csv, table.csv \
         and 6 curve pairs well-formed"
    );
}

// ---------------------------------------------------------------------------
// 8. Multi-tap thresholds and normalization.

#[test]
fn criterion_8_multi_tap_thresholds_and_normalization() {
    // Threshold ladder: baseline b maps to b, b+0.1, b+0.2 across taps.
    assert_eq!(tap_threshold(0.5, 0), 0.5);
    assert!((tap_threshold(0.5, 1) - 0.6).abs() < 1e-12);
    assert!((tap_threshold(0.5, 2) - 0.7).abs() < 1e-12);

    // Hand-computed two-tap case, one pixel of class 1, unit-norm bank row
    // [0.6, 0.8] in both dictionaries:
    //   tap 0 features [1, 0]: cos = 0.6 > 0.5      -> |0.6 - 1| = 0.4
    //   tap 1 features [0, 2]: cos = 0.8 > 0.5+0.1  -> |0.8 - 1| = 0.2
    // With C = 3 classes each tap contributes loss/3, and the two taps are
    // averaged: (0.4/3 + 0.2/3) / 2 = 0.1 — the 1/(taps*C) normalization.
    let tap0 = Tensor::<Scalar>::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
    let tap1 = Tensor::<Scalar>::new(&[2, 1, 1], vec![0.0, 2.0]).unwrap();
    let map = LabelMap::new(1, 1, vec![1]).unwrap();
    let mut dicts = Vec::new();
    for _ in 0..2 {
        let mut d = FeatureDictionary::<Scalar>::new(4, 2).unwrap();
        d.enqueue(1, vec![vec![0.6, 0.8]]).unwrap();
        dicts.push(d);
    }

    let (loss, outcome) =
        multi_tap_cosine_loss(&[tap0.clone(), tap1.clone()], &map, &dicts, 0.5, 3).unwrap();
    let got = loss.value().as_f64();
    assert!(
        (got - 0.1).abs() < 1e-6,
        "two-tap loss {got} differs from the hand-computed 0.1"
    );
    assert_eq!(outcome.selected_pairs, 2);
    assert_eq!(outcome.matched, vec![1]);

    // Raising the baseline to 0.75 pushes both taps' thresholds above
    // their similarities; nothing is selected and the loss vanishes.
    let (loss, outcome) =
        multi_tap_cosine_loss(&[tap0, tap1], &map, &dicts, 0.75, 3).unwrap();
    assert_eq!(loss.value().as_f64(), 0.0);
    assert_eq!(outcome.selected_pairs, 0);

    println!(
        "criterion 8 PASS — thresholds 0.5/0.6/0.7 from baseline 0.5; \
         hand-computed two-tap case gives 0.1 with 1/(taps·classes) scaling"
    );
}

// ---------------------------------------------------------------------------
// 9. Determinism: a (seed, config) pair reproduces metrics byte-identically.

#[test]
fn criterion_9_seed_config_reproduces_metrics_byte_identically() {
    let root = temp_dir("determinism");
    generate_dataset(
        &root,
        &DatasetSpec {
            scene: SceneParams { classes: 5, height: 32, width: 32 },
            source_train: 2,
            target_train: 2,
            eval_per_domain: 2,
            ..DatasetSpec::default()
        },
    )
    .unwrap();

    let mut checked = 0;
    for (variant, iters) in [("ours", "12"), ("with_adv", "6")] {
        let make_cfg = || {
            let mut cfg = RunConfig::default();
            apply_all(
                &mut cfg,
                &[
                    ("stage", "1"),
                    ("classes", "5"),
                    ("feature_dim", "8"),
                    ("dict_size", "16"),
                    ("lambda_cos", "0.05"),
                    ("max_iter", iters),
                    ("eval_every", "3"),
                    ("seed", "7"),
                    ("data", root.to_str().unwrap()),
                ],
            );
            if variant != "ours" {
                cfg.apply("variant", variant).unwrap();
            }
            cfg
        };

        let run_once = |tag: &str| -> (String, Vec<u8>) {
            let cfg = make_cfg();
            let data = TrainData::<Scalar>::load(&cfg).unwrap();
            let mut trainer = Trainer::new(cfg).unwrap();
            let log = trainer.run(&data).unwrap();
            let ckpt = root.join(format!("{variant}_{tag}.ckpt"));
            trainer.save_checkpoint(&ckpt).unwrap();
            (log.encode_csv(), std::fs::read(&ckpt).unwrap())
        };

        let (csv_a, ckpt_a) = run_once("a");
        let (csv_b, ckpt_b) = run_once("b");
        assert_eq!(csv_a, csv_b, "metrics CSV diverged for variant {variant}");
        let it: usize = iters.parse().unwrap();
        assert_eq!(csv_a.lines().count(), 1 + it / 3 + 1, "unexpected row count");
        assert!(ckpt_a == ckpt_b, "checkpoint bytes diverged for variant {variant}");
        checked += 1;
    }

    let _ = std::fs::remove_dir_all(&root);
    println!(
        "criterion 9 PASS — {checked} (seed, config) pairs reproduced metrics \
         CSV and checkpoint byte-identically across two runs"
    );
}
