//! Acceptance gate. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use loce::box_geometry::{generate_box, iou, BBox, JitterSample};
use loce::equilibrium_loss::{equilibrium_loss, margin, softmax_ce};
use loce::experiment::{run_experiment, ExperimentConfig, ExperimentRun, Variant};
use loce::feature_memory::{ClassDraw, FeatureMemory, MemoryEntry, SamplerConfig};
use loce::box_geometry::RegressionTarget;
use loce::metrics::MetricsReport;
use loce::score_tracker::MeanScoreVector;
use loce::synthetic_world::Group;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_case(rng: &mut ChaCha8Rng, score_range: (f64, f64)) -> (Vec<f64>, usize, MeanScoreVector) {
    let c = rng.random_range(1..=20usize);
    let z: Vec<f64> = (0..=c).map(|_| rng.random_range(-4.0..4.0)).collect();
    let y = rng.random_range(0..=c);
    let (lo, hi) = score_range;
    let log_uniform = |rng: &mut ChaCha8Rng| (rng.random_range(lo.ln()..=hi.ln())).exp();
    let scores: Vec<f64> = (0..c).map(|_| log_uniform(rng)).collect();
    let background = log_uniform(rng);
    let s = MeanScoreVector::from_scores(scores, 0.9, background).unwrap();
    (z, y, s)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (z, y, s) = random_case(&mut rng, (0.01, 1.0));
        let analytic = equilibrium_loss(&z, y, &s).unwrap().gradient;
        let numeric: Vec<f64> = (0..z.len())
            .map(|j| {
                let mut up = z.clone();
                let mut down = z.clone();
                up[j] += h;
                down[j] -= h;
                let f = |v: &[f64]| equilibrium_loss(v, y, &s).unwrap().loss;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        worst = worst.max(norm(&diff) / scale);
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-6 && elapsed < Duration::from_secs(5),
        format!("1000 cases, max relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

/// Cross-entropy of `w` at `y` summed directly over `exp(w_j - w_y)`.
fn oracle_ce(w: &[f64], y: usize) -> f64 {
    let rest: f64 = w
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| (v - w[y]).exp())
        .sum();
    rest.ln_1p()
}

fn shifted_logit_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (z, y, s) = random_case(&mut rng, (1e-3, 1.0));
        let shifted: Vec<f64> = z.iter().zip(s.log_scores()).map(|(a, b)| a + b).collect();
        let ebl = equilibrium_loss(&z, y, &s).unwrap().loss;
        let oracle = oracle_ce(&shifted, y);
        worst = worst.max((ebl - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE));
    }
    let mut identical = 0;
    for _ in 0..10_000 {
        let c = rng.random_range(1..=20usize);
        let z: Vec<f64> = (0..=c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y = rng.random_range(0..=c);
        let v = rng.random_range(1e-3..=1.0);
        let s = MeanScoreVector::from_scores(vec![v; c], 0.9, v).unwrap();
        let ebl = equilibrium_loss(&z, y, &s).unwrap();
        let ce = softmax_ce(&z, y).unwrap();
        let same = ebl.loss.to_bits() == ce.loss.to_bits()
            && ebl.gradient.iter().zip(&ce.gradient).all(|(a, b)| a.to_bits() == b.to_bits());
        identical += usize::from(same);
    }
    outcome(
        worst < 1e-12 && identical == 10_000,
        format!("10000 cases, max relative error {worst:.2e}; uniform s bit-identical to CE in {identical}/10000"),
    )
}

fn margin_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut antisymmetric = true;
    let mut worst_loss = 0.0f64;
    let mut worst_grad = 0.0f64;
    for _ in 0..2000 {
        // Scores stay inside (0, 1] after scaling by 1e3.
        let (z, y, s) = random_case(&mut rng, (1e-6, 1e-3));
        let n = s.num_classes();
        for a in 0..n {
            for b in 0..n {
                antisymmetric &= margin(&s, a, b).unwrap() == -margin(&s, b, a).unwrap();
            }
        }
        let base = equilibrium_loss(&z, y, &s).unwrap();
        for c in [1e-3, 1.0, 1e3] {
            let scaled = MeanScoreVector::from_scores(
                s.foreground().iter().map(|v| v * c).collect(),
                s.alpha(),
                s.background_substitute() * c,
            )
            .unwrap();
            let r = equilibrium_loss(&z, y, &scaled).unwrap();
            worst_loss = worst_loss.max((r.loss - base.loss).abs() / base.loss.abs().max(1.0));
            for (g, h) in r.gradient.iter().zip(&base.gradient) {
                worst_grad = worst_grad.max((g - h).abs());
            }
        }
    }
    outcome(
        antisymmetric && worst_loss < 1e-10 && worst_grad < 1e-10,
        format!(
            "antisymmetry exact: {antisymmetric}; scaling by 1e-3/1/1e3 max loss error {worst_loss:.2e}, max gradient error {worst_grad:.2e}"
        ),
    )
}

fn entry(class: usize) -> MemoryEntry {
    MemoryEntry {
        feature: vec![class as f64],
        target: RegressionTarget::from_array([0.0; 4]),
        class,
    }
}

fn sampler_distribution() -> Outcome {
    let start = Instant::now();
    let s = MeanScoreVector::from_scores(vec![0.1, 0.2, 0.4], 0.9, 0.01).unwrap();
    let mut memory = FeatureMemory::new(3, 1, 1).unwrap();
    memory.enqueue((0..3).map(entry).collect()).unwrap();
    let cfg = SamplerConfig {
        k: 10,
        m: 1,
        class_draw: ClassDraw::WithReplacement,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut counts = [0u64; 3];
    let draws = 1_000_000u64;
    for _ in 0..draws / cfg.k as u64 {
        for e in memory.sample(&s, &cfg, &mut rng).unwrap() {
            counts[e.class] += 1;
        }
    }
    let expected = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
    let n = counts.iter().sum::<u64>() as f64;
    let linf = counts
        .iter()
        .zip(expected)
        .map(|(&k, p)| (k as f64 / n - p).abs())
        .fold(0.0, f64::max);
    let chi2: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&k, p)| (k as f64 - n * p).powi(2) / (n * p))
        .sum();
    let p_value = ChiSquared::new(2.0).unwrap().sf(chi2);
    let elapsed = start.elapsed();
    outcome(
        n == draws as f64 && linf < 0.005 && p_value > 0.001 && elapsed < Duration::from_secs(10),
        format!(
            "{draws} draws {counts:?}, L-inf {linf:.5}, chi-square {chi2:.3} p {p_value:.3}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn fifo_memory() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let classes = 4;
    let mut mismatches = 0;
    let mut sequences = 0;
    for capacity in [1, 3, 80] {
        for _ in 0..10_000 {
            let mut memory = FeatureMemory::new(classes, capacity, 1).unwrap();
            let mut oracle: Vec<Vec<f64>> = vec![Vec::new(); classes];
            let mut next = 0.0;
            for _ in 0..rng.random_range(0..12) {
                let batch: Vec<MemoryEntry> = (0..rng.random_range(0..40))
                    .map(|_| {
                        next += 1.0;
                        MemoryEntry {
                            feature: vec![next],
                            target: RegressionTarget::from_array([next; 4]),
                            class: rng.random_range(0..classes),
                        }
                    })
                    .collect();
                for e in &batch {
                    oracle[e.class].push(e.feature[0]);
                }
                memory.enqueue(batch).unwrap();
            }
            let equal = (0..classes).all(|c| {
                let all = &oracle[c];
                let kept = &all[all.len().saturating_sub(capacity)..];
                let queue: Vec<f64> = memory.queue(c).unwrap().iter().map(|e| e.feature[0]).collect();
                queue == kept
            });
            mismatches += usize::from(!equal);
            sequences += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{sequences} sequences over capacities 1, 3, 80; {mismatches} mismatches"),
    )
}

fn box_geometry() -> Outcome {
    let gt = BBox::new(10.0, 20.0, 70.0, 50.0).unwrap();
    let mut corner_min = f64::INFINITY;
    let mut corner_max = f64::NEG_INFINITY;
    for mask in 0..256u32 {
        let eta: [f64; 4] = std::array::from_fn(|i| f64::from((mask >> i) & 1));
        let signs: [i8; 4] = std::array::from_fn(|i| if (mask >> (4 + i)) & 1 == 1 { 1 } else { -1 });
        let b = generate_box(&gt, &JitterSample::new(eta, signs).unwrap()).unwrap();
        let v = iou(&b, &gt);
        corner_min = corner_min.min(v);
        corner_max = corner_max.max(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut mc_min = f64::INFINITY;
    let mut mc_max = f64::NEG_INFINITY;
    let mut below_half = 0usize;
    for _ in 0..1_000_000 {
        let b = generate_box(&gt, &JitterSample::random(&mut rng)).unwrap();
        let v = iou(&b, &gt);
        mc_min = mc_min.min(v);
        mc_max = mc_max.max(v);
        below_half += usize::from(v <= 0.5);
    }
    // Uniform inward jitter traces IoU continuously from 1 down to 4/9.
    let inward = |e: f64| iou(&generate_box(&gt, &JitterSample::inward([e; 4]).unwrap()).unwrap(), &gt);
    let targets: Vec<f64> = (1..=100).map(|i| 4.0 / 9.0 + (5.0 / 9.0) * i as f64 / 100.0).collect();
    let mut worst_miss = 0.0f64;
    for &t in &targets {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if inward(mid) > t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        worst_miss = worst_miss.max((inward(0.5 * (lo + hi)) - t).abs());
    }
    let four_ninths = 4.0 / 9.0;
    let pass = (corner_min - four_ninths).abs() <= 1e-9
        && (corner_max - 1.0).abs() <= 1e-9
        && mc_min >= four_ninths - 1e-9
        && mc_max <= 1.0
        && worst_miss <= 0.01;
    outcome(
        pass,
        format!(
            "corners IoU [{corner_min:.12}, {corner_max}], 1e6 jitters [{mc_min:.6}, {mc_max:.6}] with {:.2}% at or below 0.5; {} targets in (4/9, 1] reached within {worst_miss:.1e}",
            100.0 * below_half as f64 / 1e6,
            targets.len()
        ),
    )
}

struct SeedRun {
    seed: u64,
    stage1_time: Duration,
    total_time: Duration,
    run: ExperimentRun,
}

impl SeedRun {
    fn report(&self, name: &str) -> &MetricsReport {
        &self
            .run
            .variants
            .iter()
            .find(|v| v.variant.name == name)
            .unwrap_or_else(|| panic!("variant {name} missing"))
            .report
    }
}

fn default_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig::default()
        .with_seed(seed)
        .with_presets(&Variant::PRESETS)
        .unwrap()
}

fn run_seed(seed: u64) -> SeedRun {
    let start = Instant::now();
    let mut stage1_time = None;
    let run = run_experiment(&default_config(seed), |_| {
        stage1_time.get_or_insert(start.elapsed());
    })
    .unwrap();
    SeedRun {
        seed,
        stage1_time: stage1_time.unwrap(),
        total_time: start.elapsed(),
        run,
    }
}

fn count<F: Fn(&SeedRun) -> bool>(runs: &[SeedRun], f: F) -> usize {
    runs.iter().filter(|r| f(r)).count()
}

fn per_seed<F: Fn(&SeedRun) -> f64>(runs: &[SeedRun], f: F) -> String {
    runs.iter()
        .map(|r| format!("{:.3}", f(r)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn score_accuracy_correlation(runs: &[SeedRun]) -> Outcome {
    let spearman = |r: &SeedRun| r.run.stage1_report.spearman.unwrap_or(f64::NAN);
    let ratio = |r: &SeedRun| {
        let rep = &r.run.stage1_report;
        rep.group_mean_score(Group::Rare) / rep.group_mean_score(Group::Frequent)
    };
    let ok = count(runs, |r| spearman(r) > 0.5 && ratio(r) < 0.5);
    let time: Duration = runs.iter().map(|r| r.stage1_time).sum();
    outcome(
        ok >= 4 && time < Duration::from_secs(300),
        format!(
            "{ok}/5 seeds; spearman [{}], rare/frequent score ratio [{}]; stage 1 {:.0}s",
            per_seed(runs, spearman),
            per_seed(runs, ratio),
            time.as_secs_f64()
        ),
    )
}

fn component_ablation(runs: &[SeedRun]) -> Vec<(&'static str, Outcome)> {
    let rare = |r: &SeedRun, v: &str| r.report(v).group_accuracy(Group::Rare);
    let frequent = |r: &SeedRun, v: &str| r.report(v).group_accuracy(Group::Frequent);
    let balanced = |r: &SeedRun, v: &str| r.report(v).balanced_accuracy;
    let dispersion = |r: &SeedRun, v: &str| r.report(v).score_dispersion;
    let time: Duration = runs.iter().map(|r| r.total_time).sum();
    let in_time = time < Duration::from_secs(1800);

    let a = count(runs, |r| rare(r, "ebl") > rare(r, "ce"));
    let b = count(runs, |r| rare(r, "mfs") > rare(r, "ce"));
    let c = count(runs, |r| {
        balanced(r, "loce") >= balanced(r, "ebl") && balanced(r, "loce") >= balanced(r, "mfs")
    });
    let d = count(runs, |r| (frequent(r, "loce") - frequent(r, "ce")).abs() <= 0.02);
    let e = count(runs, |r| dispersion(r, "loce") < dispersion(r, "ce"));
    vec![
        (
            "8a ebl beats ce on rare accuracy",
            outcome(
                a == 5 && in_time,
                format!(
                    "{a}/5 seeds; rare gain [{}]",
                    per_seed(runs, |r| rare(r, "ebl") - rare(r, "ce"))
                ),
            ),
        ),
        (
            "8b mfs beats ce on rare accuracy",
            outcome(
                b == 5 && in_time,
                format!(
                    "{b}/5 seeds; rare gain [{}]",
                    per_seed(runs, |r| rare(r, "mfs") - rare(r, "ce"))
                ),
            ),
        ),
        (
            "8c loce at least each component on balanced accuracy",
            outcome(
                c >= 4 && in_time,
                format!(
                    "{c}/5 seeds; loce-ebl [{}], loce-mfs [{}]",
                    per_seed(runs, |r| balanced(r, "loce") - balanced(r, "ebl")),
                    per_seed(runs, |r| balanced(r, "loce") - balanced(r, "mfs"))
                ),
            ),
        ),
        (
            "8d loce frequent accuracy within 0.02 of ce",
            outcome(
                d == 5 && in_time,
                format!(
                    "{d}/5 seeds; loce-ce [{}]",
                    per_seed(runs, |r| frequent(r, "loce") - frequent(r, "ce"))
                ),
            ),
        ),
        (
            "8e loce score dispersion below ce",
            outcome(
                e == 5 && in_time,
                format!(
                    "{e}/5 seeds; loce [{}], ce [{}]; all seeds and variants {:.0}s",
                    per_seed(runs, |r| dispersion(r, "loce")),
                    per_seed(runs, |r| dispersion(r, "ce")),
                    time.as_secs_f64()
                ),
            ),
        ),
    ]
}

fn indicator_ablation(runs: &[SeedRun]) -> Outcome {
    let frequent = |r: &SeedRun, v: &str| r.report(v).group_accuracy(Group::Frequent);
    let ok = count(runs, |r| frequent(r, "prior") < frequent(r, "loce"));
    outcome(
        ok >= 4,
        format!(
            "{ok}/5 seeds; prior-loce frequent accuracy [{}]",
            per_seed(runs, |r| frequent(r, "prior") - frequent(r, "loce"))
        ),
    )
}

fn determinism(first: &SeedRun) -> Outcome {
    let again = run_seed(first.seed);
    let pairs = std::iter::once((&first.run.stage1_report, &again.run.stage1_report)).chain(
        first
            .run
            .variants
            .iter()
            .zip(&again.run.variants)
            .map(|(a, b)| (&a.report, &b.report)),
    );
    let mut total = 0;
    let mut identical = 0;
    for (a, b) in pairs {
        total += 1;
        identical += usize::from(a.to_json().as_bytes() == b.to_json().as_bytes());
    }
    outcome(
        identical == total,
        format!("seed {}: {identical}/{total} report files byte-identical", first.seed),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut emit = |name: &str, o: Outcome| {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name.to_string(), o));
    };
    emit("1 equilibrium loss gradient check", gradient_check());
    emit("2 shifted-logit identity", shifted_logit_identity());
    emit("3 margin antisymmetry and scale invariance", margin_algebra());
    emit("4 inverse-score sampler distribution", sampler_distribution());
    emit("5 FIFO memory against slicing oracle", fifo_memory());
    emit("6 jittered box IoU range", box_geometry());

    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    emit("7 stage-1 score tracks accuracy", score_accuracy_correlation(&runs));
    for (name, o) in component_ablation(&runs) {
        emit(name, o);
    }
    emit("9 frequency indicator costs frequent accuracy", indicator_ablation(&runs));
    emit("10 determinism", determinism(&runs[0]));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| n.as_str()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} checks passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} failed: {}", failed.len(), failed.join("; "));
        ExitCode::FAILURE
    }
}
