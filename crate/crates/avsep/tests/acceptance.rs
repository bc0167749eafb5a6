//! End-to-end acceptance gate.
//!
//! Runs ten checks covering DSP fidelity, gradient correctness, mask
//! construction, the oracle ceiling, learning, ablation ordering, attention
//! discrimination, localization, metric correctness, and determinism. One
//! pass/fail line is printed per criterion; the process exits nonzero if any
//! criterion fails. Time budgets are checked against process CPU time.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use avsep::dsp::{self, AudioClip, FreqMap, SAMPLE_RATE};
use avsep::metrics::{self, score_estimate};
use avsep::separation::{
    self, attend, fuse_graph, joint_loss_graph, Model, Polarity, TrainConfig, Variant, VARIANTS,
};
use avsep::synthdata::{self, Corpus, CorpusConfig, Split};
use avsep::tensor::grad_check;

/// Process CPU time (user + system) in seconds, from /proc/self/stat.
fn cpu_seconds() -> f64 {
    let stat = fs::read_to_string("/proc/self/stat").unwrap_or_default();
    // Fields 14 and 15 (utime, stime) in clock ticks; field 2 is the comm
    // string, parenthesized, so split after the closing paren.
    let after = stat.rsplit(')').next().unwrap_or("");
    let fields: Vec<&str> = after.split_whitespace().collect();
    let utime: f64 = fields.get(11).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let stime: f64 = fields.get(12).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    (utime + stime) / 100.0
}

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn report(&mut self, n: usize, name: &str, ok: bool, detail: String) {
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("criterion {n:2} [{verdict}] {name}: {detail}");
        if !ok {
            self.failures.push(format!("criterion {n} ({name}): {detail}"));
        }
    }
}

fn scratch_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/acceptance");
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
}

// --------------------------------------------------------------------------
// Criterion 1: istft . stft relative interior L2 error < 1e-4 on 50 clips.
// --------------------------------------------------------------------------
fn criterion_1(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let samples: Vec<f64> = (0..dsp::STANDARD_SAMPLES)
            .map(|_| rng.random::<f64>() * 1.6 - 0.8)
            .collect();
        let clip = AudioClip::new(samples, SAMPLE_RATE).unwrap();
        let spec = dsp::stft(&clip).unwrap();
        let back = dsp::istft(&spec, clip.len()).unwrap();
        let lo = dsp::WINDOW_SIZE;
        let hi = clip.len() - dsp::WINDOW_SIZE;
        let (mut num, mut den) = (0.0, 0.0);
        for i in lo..hi {
            let d = back.samples()[i] - clip.samples()[i];
            num += d * d;
            den += clip.samples()[i] * clip.samples()[i];
        }
        worst = worst.max((num / den).sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    gate.report(
        1,
        "dsp round trip",
        worst < 1e-4 && secs < 30.0,
        format!("worst interior rel L2 {worst:.3e} (< 1e-4), {secs:.1} s (< 30 s)"),
    );
}

// --------------------------------------------------------------------------
// Criterion 2: analytic gradients of fuse / attend / joint loss match
// central finite differences within 1e-4 on 10 random configs each.
// --------------------------------------------------------------------------
fn criterion_2(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for trial in 0..10u64 {
        let k = 2 + (trial as usize % 3);
        let h = 3 + (trial as usize % 2);
        let w = 4;
        let e = randn(&mut rng, &[k]);
        let sound = randn(&mut rng, &[k, h, w]);
        // BCE against a random binary target scalarizes the map outputs
        // while keeping a nonzero gradient at every element.
        let target = ArrayD::from_shape_fn(IxDyn(&[h, w]), |_| f64::from(rng.random::<bool>()));

        let tf = target.clone();
        worst = worst.max(grad_check(
            move |tape, ids| {
                let soft = fuse_graph(tape, ids[0], ids[1]).unwrap();
                tape.bce_mean(soft, tf.clone())
            },
            &[e.clone(), sound.clone()],
        ));

        let ta = target.clone();
        worst = worst.max(grad_check(
            move |tape, ids| {
                let att = separation::attend_graph(tape, ids[0], ids[1]).unwrap();
                tape.bce_mean(att, ta.clone())
            },
            &[e.clone(), sound.clone()],
        ));

        // Joint loss: two sources, two attention pairs with labels 1 and 0.
        let gt1 = Array2::from_shape_fn((h, w), |_| f64::from(rng.random::<bool>()));
        let gt2 = gt1.mapv(|v| 1.0 - v);
        let e2 = randn(&mut rng, &[k]);
        let feats = randn(&mut rng, &[k, h, w]);
        worst = worst.max(grad_check(
            move |tape, ids| {
                let m1 = fuse_graph(tape, ids[0], ids[1]).unwrap();
                let m2 = fuse_graph(tape, ids[2], ids[1]).unwrap();
                let a1 = separation::attend_graph(tape, ids[0], ids[3]).unwrap();
                let a2 = separation::attend_graph(tape, ids[2], ids[3]).unwrap();
                let loss = joint_loss_graph(
                    tape,
                    &[(m1, &gt1), (m2, &gt2)],
                    &[(a1, 1.0), (a2, 0.0)],
                    1.0,
                    1.0,
                )
                .unwrap();
                loss.total
            },
            &[e, sound, e2, feats],
        ));
    }
    gate.report(
        2,
        "gradient suite",
        worst < 1e-4,
        format!("worst rel error {worst:.3e} (< 1e-4) over 10 configs x 3 graphs"),
    );
}

// --------------------------------------------------------------------------
// Criterion 3: ground-truth masks partition the grid exactly, 100 mixtures.
// --------------------------------------------------------------------------
fn criterion_3(gate: &mut Gate, corpus: &Corpus) {
    let map = FreqMap::new();
    let rows = corpus.rows_for(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut checked = 0usize;
    let mut exact = true;
    while checked < 100 {
        let a = rows[rng.random_range(0..rows.len())];
        let b = rows[rng.random_range(0..rows.len())];
        if a.category == b.category {
            continue;
        }
        let sa = load_prepared(corpus, a);
        let sb = load_prepared(corpus, b);
        let ex = synthdata::make_mixture(&sa, &sb, &map).unwrap();
        for (m0, m1) in ex.gt_masks[0].iter().zip(ex.gt_masks[1].iter()) {
            if m0 + m1 != 1.0 {
                exact = false;
            }
        }
        checked += 1;
    }
    gate.report(
        3,
        "mask partition",
        exact,
        format!("b1 + b2 == 1 elementwise on {checked} random mixtures (exact)"),
    );
}

fn load_prepared(corpus: &Corpus, row: &synthdata::ManifestRow) -> synthdata::AvSample {
    let mut s = corpus.load_sample(row).unwrap();
    s.audio = dsp::prepare_clip(&s.audio);
    s
}

// --------------------------------------------------------------------------
// Criterion 4: IBM oracle mean SDR >= 10 dB on the test split.
// --------------------------------------------------------------------------
fn criterion_4(gate: &mut Gate, corpus: &Corpus) -> f64 {
    let map = FreqMap::new();
    let mut oracle = metrics::ibm_oracle(&map);
    let report = metrics::evaluate_mixtures(
        corpus,
        Split::Test,
        None,
        serde_json::json!({"predictor": "ibm"}),
        "ibm-oracle",
        &mut oracle,
    )
    .unwrap();
    gate.report(
        4,
        "oracle upper bound",
        report.mean_sdr >= 10.0,
        format!(
            "IBM mean SDR {:.2} dB (>= 10), baseline {:.2} dB, {} examples",
            report.mean_sdr,
            report.mean_baseline_sdr,
            report.per_example.len()
        ),
    );
    report.mean_sdr
}

// --------------------------------------------------------------------------
// Criteria 5-8: training-based checks sharing one ablation sweep.
// --------------------------------------------------------------------------
struct TrainedCell {
    variant: Variant,
    seed: u64,
    model_path: PathBuf,
    best_val_sdr: f64,
    report: metrics::SeparationReport,
    train_cpu_secs: f64,
}

fn train_cell(corpus: &Corpus, variant: Variant, seed: u64, out: &Path) -> TrainedCell {
    let config = TrainConfig {
        variant,
        seed,
        ..TrainConfig::default()
    };
    let dir = out.join(format!("{}-seed{}", variant.name(), seed));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let cpu0 = cpu_seconds();
    let outcome = separation::train(corpus, &config, &dir).unwrap();
    let train_cpu_secs = cpu_seconds() - cpu0;
    let model = Model::load(&outcome.checkpoint).unwrap();
    let report = separation::evaluate_model(
        &model,
        corpus,
        Split::Test,
        None,
        serde_json::to_value(&config).unwrap(),
    )
    .unwrap();
    TrainedCell {
        variant,
        seed,
        model_path: outcome.checkpoint,
        best_val_sdr: outcome.best_val_sdr,
        report,
        train_cpu_secs,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn criteria_5_to_8(gate: &mut Gate, corpus: &Corpus, out: &Path) {
    let seeds = [1u64, 2, 3];
    let sweep_cpu0 = cpu_seconds();
    let mut cells: Vec<TrainedCell> = Vec::new();
    for variant in VARIANTS {
        for &seed in &seeds {
            eprintln!("[acceptance] training {} seed {seed}...", variant.name());
            cells.push(train_cell(corpus, variant, seed, out));
        }
    }
    let sweep_cpu = cpu_seconds() - sweep_cpu0;

    // Criterion 5: catemb beats the mixture baseline by >= 3 dB, 3/3 seeds,
    // each run within the CPU budget.
    let catemb: Vec<&TrainedCell> = cells
        .iter()
        .filter(|c| c.variant == Variant::Catemb)
        .collect();
    let mut ok5 = true;
    let mut detail5 = String::new();
    for c in &catemb {
        let margin = c.report.mean_sdr - c.report.mean_baseline_sdr;
        let within = margin >= 3.0 && c.train_cpu_secs <= 20.0 * 60.0;
        ok5 &= within;
        detail5.push_str(&format!(
            "seed {}: +{:.2} dB in {:.0} s CPU; ",
            c.seed, margin, c.train_cpu_secs
        ));
    }
    gate.report(
        5,
        "learning works",
        ok5,
        format!("{detail5}(need >= +3 dB over baseline, <= 1200 s CPU, 3/3 seeds)"),
    );

    // Criterion 6: median test SDR ordering with 0.3 dB slack per step.
    let med = |v: Variant| {
        median(
            cells
                .iter()
                .filter(|c| c.variant == v)
                .map(|c| c.report.mean_sdr)
                .collect(),
        )
    };
    let (m_plain, m_att, m_cls, m_cat) = (
        med(Variant::Plain),
        med(Variant::Attention),
        med(Variant::Classifier),
        med(Variant::Catemb),
    );
    let tol = 0.3;
    let ordered = m_plain <= m_att + tol && m_att <= m_cls + tol && m_cls <= m_cat + tol;
    let within_budget = sweep_cpu <= 3.0 * 3600.0;
    gate.report(
        6,
        "ablation ordering",
        ordered && within_budget,
        format!(
            "median SDR plain {m_plain:.2} <= attention {m_att:.2} <= classifier {m_cls:.2} \
             <= catemb {m_cat:.2} (tol {tol} dB); sweep {sweep_cpu:.0} s CPU (<= 10800)"
        ),
    );

    // Criteria 7 and 8 use the attention model with the best validation SDR.
    let best_att = cells
        .iter()
        .filter(|c| c.variant == Variant::Attention)
        .max_by(|a, b| a.best_val_sdr.partial_cmp(&b.best_val_sdr).unwrap())
        .unwrap();
    let model = Model::load(&best_att.model_path).unwrap();
    criterion_7(gate, corpus, &model);

    let loc = best_att.report.localization.as_ref();
    let (hit_rate, evaluated) = loc.map(|l| (l.hit_rate, l.evaluated)).unwrap_or((0.0, 0));
    gate.report(
        8,
        "localization",
        hit_rate >= 0.80 && evaluated > 0,
        format!(
            "attention seed {}: heatmap argmax in bbox {:.1}% of {} test images (>= 80%)",
            best_att.seed,
            100.0 * hit_rate,
            evaluated
        ),
    );
}

// --------------------------------------------------------------------------
// Criterion 7: attention pair discrimination on held-out images.
// --------------------------------------------------------------------------
fn criterion_7(gate: &mut Gate, corpus: &Corpus, model: &Model) {
    let rows = corpus.rows_for(Split::Test);
    let mut embeds = Vec::new();
    for row in &rows {
        let s = corpus.load_sample(row).unwrap();
        let (e, maps) = model.appearance_embedding(&s.image).unwrap();
        embeds.push((row.category, e, maps.unwrap()));
    }
    let (mut pos_ok, mut pos_n, mut neg_ok, mut neg_n) = (0usize, 0usize, 0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..embeds.len() {
        for j in 0..embeds.len() {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs.shuffle(&mut rng);
    for (i, j) in pairs.into_iter().take(400) {
        let (cat_i, ref e_i, _) = embeds[i];
        let (cat_j, _, ref maps_j) = embeds[j];
        let att = attend(e_i, maps_j, Polarity::Positive).unwrap();
        let p_max = att.p_hat.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if cat_i == cat_j {
            pos_n += 1;
            pos_ok += usize::from(p_max > 0.5);
        } else {
            neg_n += 1;
            neg_ok += usize::from(p_max < 0.5);
        }
    }
    let pos_rate = pos_ok as f64 / pos_n.max(1) as f64;
    let neg_rate = neg_ok as f64 / neg_n.max(1) as f64;
    gate.report(
        7,
        "attention discrimination",
        pos_rate >= 0.90 && neg_rate >= 0.90 && pos_n > 0 && neg_n > 0,
        format!(
            "positive {:.1}% of {pos_n}, negative {:.1}% of {neg_n} (both >= 90%)",
            100.0 * pos_rate,
            100.0 * neg_rate
        ),
    );
}

// --------------------------------------------------------------------------
// Criterion 9: closed-form SIR and scale invariance.
// --------------------------------------------------------------------------
fn criterion_9(gate: &mut Gate) {
    let n = 4096;
    let sr = SAMPLE_RATE as f64;
    let s1: Vec<f64> = (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * 215.33 * i as f64 / sr).sin())
        .collect();
    let s2: Vec<f64> = (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * 1722.66 * i as f64 / sr).sin())
        .collect();
    // Orthogonalize exactly against s1 so the 0.8/0.2 split is clean.
    let d12: f64 = s1.iter().zip(&s2).map(|(a, b)| a * b).sum();
    let d11: f64 = s1.iter().map(|a| a * a).sum();
    let s2: Vec<f64> = s2
        .iter()
        .zip(&s1)
        .map(|(b, a)| b - a * d12 / d11)
        .collect();
    let d22: f64 = s2.iter().map(|a| a * a).sum();
    let scale = (d11 / d22).sqrt();
    let s2: Vec<f64> = s2.iter().map(|v| v * scale).collect();

    let est: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| 0.8 * a + 0.2 * b).collect();
    let base = score_estimate(&est, &[&s1, &s2]).unwrap();
    let sir_expected = 10.0 * (0.64f64 / 0.04).log10();
    let sir_ok = (base.sir - sir_expected).abs() <= 0.01;

    let mut scale_ok = true;
    let mut worst_dev = 0.0f64;
    for alpha in [0.1, 1.0, 10.0] {
        let scaled: Vec<f64> = est.iter().map(|v| alpha * v).collect();
        let s = score_estimate(&scaled, &[&s1, &s2]).unwrap();
        for (a, b) in [(s.sdr, base.sdr), (s.sir, base.sir), (s.sar, base.sar)] {
            let dev = (a - b).abs();
            worst_dev = worst_dev.max(dev);
            scale_ok &= dev <= 1e-9;
        }
    }
    gate.report(
        9,
        "metrics correctness",
        sir_ok && scale_ok,
        format!(
            "SIR {:.3} dB vs {:.3} expected (tol 0.01); scale deviation {worst_dev:.1e} \
             (tol 1e-9) over alpha in {{0.1, 1, 10}}",
            base.sir, sir_expected
        ),
    );
}

// --------------------------------------------------------------------------
// Criterion 10: identical (config, seed) -> byte-identical artifacts.
// --------------------------------------------------------------------------
fn criterion_10(gate: &mut Gate, out: &Path) {
    let corpus_config = CorpusConfig {
        categories: 4,
        train_per_category: 10,
        val_per_category: 3,
        test_per_category: 3,
        seed: 9,
        ..CorpusConfig::default()
    };
    let train_config = TrainConfig {
        variant: Variant::Catemb,
        epochs: 1,
        mixtures_per_epoch: 8,
        val_mixtures: 3,
        seed: 9,
        ..TrainConfig::default()
    };

    let mut artifacts: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for run in 0..2 {
        let dir = out.join(format!("determinism-{run}"));
        let _ = fs::remove_dir_all(&dir);
        let data = dir.join("data");
        let corpus = synthdata::make_corpus(&corpus_config, &data, false).unwrap();
        let run_dir = dir.join("run");
        fs::create_dir_all(&run_dir).unwrap();
        separation::train(&corpus, &train_config, &run_dir).unwrap();
        let model = Model::load(&run_dir.join("model.ckpt")).unwrap();
        let report = separation::evaluate_model(
            &model,
            &corpus,
            Split::Test,
            None,
            serde_json::to_value(&train_config).unwrap(),
        )
        .unwrap();
        let report_path = run_dir.join("report.json");
        fs::write(&report_path, serde_json::to_vec_pretty(&report).unwrap()).unwrap();

        let mut files = Vec::new();
        for rel in [
            "data/manifest.jsonl",
            "data/meta.json",
            "run/train_log.jsonl",
            "run/model.ckpt",
            "run/report.json",
        ] {
            files.push((rel.to_string(), fs::read(dir.join(rel)).unwrap()));
        }
        artifacts.push(files);
    }
    let mut mismatched: Vec<&str> = Vec::new();
    for ((name, a), (_, b)) in artifacts[0].iter().zip(artifacts[1].iter()) {
        if a != b {
            mismatched.push(name);
        }
    }
    gate.report(
        10,
        "determinism",
        mismatched.is_empty(),
        if mismatched.is_empty() {
            "manifest, meta, train log, checkpoint, report byte-identical across two runs"
                .to_string()
        } else {
            format!("byte mismatch in: {}", mismatched.join(", "))
        },
    );
}

fn main() {
    let mut gate = Gate { failures: Vec::new() };
    let out = scratch_dir();

    criterion_1(&mut gate);
    criterion_2(&mut gate);

    eprintln!("[acceptance] generating corpus...");
    let corpus_config = CorpusConfig::default(); // 4 categories x 200/40/40
    let data_dir = out.join("data");
    let corpus = if data_dir.join("meta.json").exists() {
        match synthdata::load_corpus(&data_dir) {
            Ok(c) if c.meta.config == corpus_config => c,
            _ => synthdata::make_corpus(&corpus_config, &data_dir, true).unwrap(),
        }
    } else {
        synthdata::make_corpus(&corpus_config, &data_dir, true).unwrap()
    };

    criterion_3(&mut gate, &corpus);
    criterion_4(&mut gate, &corpus);
    criteria_5_to_8(&mut gate, &corpus, &out);
    criterion_9(&mut gate);
    criterion_10(&mut gate, &out);

    if gate.failures.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: {} criterion(s) failed", gate.failures.len());
        for f in &gate.failures {
            println!("  {f}");
        }
        std::process::exit(1);
    }
}
