//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use privcase::cli::{cmd_pipeline, Layout, RunConfig};
use privcase::dataset::{split, synthesize, Dataset, Split, SplitRatios, SynthSpec};
use privcase::diffcore::{grad_check, Probe, Tensor};
use privcase::evaluate::{
    accuracy_of, deep_taylor, evaluate_original, evaluate_privatized, f1, parse_report, train_classifier,
    ClassifierConfig, ClassifierState, EvaluationRow, Target,
};
use privcase::pprlvgan::{
    averaged_privatize_set, discriminator_objective, generator_loss, generator_pass, kl_divergence, privatize_set,
    train_gan, DiscriminatorState, GanArchitecture, GanBatch, GeneratorState, LatentCode, ReplacementPolicy,
    TrainingHyperparams,
};
use privcase::privatize::{blur_set, k_same_select, verify_k_anonymity, BlurConfig, KSameConfig, Sigma};
use privcase::rng::stream_rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- fixtures

fn acceptance_split() -> Split {
    let data = synthesize(&SynthSpec::default(), 42).unwrap();
    split(&data, SplitRatios::default(), 42).unwrap()
}

/// Enough identities per pathology class for k = 12.
fn feasible_spec() -> SynthSpec {
    SynthSpec {
        n_identities: 24,
        images_per_identity: 8,
        resolution: 32,
        pathology_fraction: 0.5,
        ..SynthSpec::default()
    }
}

struct Models {
    identity: ClassifierState,
    task: ClassifierState,
    baseline: EvaluationRow,
}

fn train_models(s: &Split) -> Models {
    let cfg = ClassifierConfig::default();
    let identity = train_classifier(&s.train, &s.val, Target::Identity, &cfg, 1).unwrap();
    let task = train_classifier(&s.train, &s.val, Target::Pathology, &cfg, 2).unwrap();
    let baseline = evaluate_original(&identity, &task, "Baseline", "Original test set", &s.test).unwrap();
    Models {
        identity,
        task,
        baseline,
    }
}

// -------------------------------------------------------------- criteria

fn mini_batch(data: &Dataset, identities: &[u32]) -> GanBatch<f64> {
    let samples = &data.samples()[..4];
    let pixels: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.pixels.data().iter().map(|&v| v as f64))
        .collect();
    let index = |id: u32| identities.iter().position(|&x| x == id).unwrap();
    let mut rng = stream_rng(11, 0);
    let noise: Vec<f64> = (0..4 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
    GanBatch {
        images: Tensor::from_f64_slice(vec![4, 1, 8, 8], &pixels).unwrap(),
        identities: samples.iter().map(|s| index(s.identity)).collect(),
        tasks: samples.iter().map(|s| s.pathology as usize).collect(),
        replacements: (0..4).map(|_| rng.random_range(0..identities.len())).collect(),
        noise: Tensor::from_f64_slice(vec![4, 4], &noise).unwrap(),
    }
}

fn criterion_1() -> Outcome {
    let data = synthesize(
        &SynthSpec {
            n_identities: 3,
            images_per_identity: 2,
            resolution: 8,
            pathology_fraction: 0.34,
            ..SynthSpec::default()
        },
        3,
    )
    .unwrap();
    let arch = GanArchitecture {
        resolution: 8,
        base_channels: 2,
        latent_dim: 4,
        n_identities: 3,
    };
    let ids = data.identities();
    let g = GeneratorState::<f64>::init(arch.clone(), ids.clone(), 5).unwrap();
    let d = DiscriminatorState::<f64>::init(arch.clone(), 6).unwrap();
    let batch = mini_batch(&data, &ids);
    let hp = TrainingHyperparams {
        latent_dim: 4,
        base_channels: 2,
        ..TrainingHyperparams::default()
    };

    let fake = generator_pass(&g, &batch).unwrap().fake().clone();
    let d_grads = discriminator_objective(&d, &batch, &fake, &hp).unwrap().grads;
    let d_report = grad_check(&d.params, &d_grads, 1e-3, |p| {
        let probe = DiscriminatorState::from_params(arch.clone(), p.clone())?;
        let out = discriminator_objective(&probe, &batch, &fake, &hp)?;
        Ok(Probe {
            loss: out.value,
            signature: out.signature,
        })
    })
    .unwrap();

    let g_grads = generator_loss(&d, &g, &batch, &hp).unwrap().grads;
    let g_report = grad_check(&g.params, &g_grads, 1e-3, |p| {
        let probe = GeneratorState::from_params(arch.clone(), ids.clone(), p.clone())?;
        let out = generator_loss(&d, &probe, &batch, &hp)?;
        Ok(Probe {
            loss: out.value,
            signature: out.signature,
        })
    })
    .unwrap();

    let worst = d_report.max_rel_error.max(g_report.max_rel_error);
    outcome(
        worst <= 1e-3,
        format!(
            "grad check max rel error D {:.2e} ({} coords), G {:.2e} ({} coords), limit 1e-3",
            d_report.max_rel_error, d_report.checked, g_report.max_rel_error, g_report.checked
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = stream_rng(2024, 0);
    let dim = 4;
    let mut worst = 0.0f64;
    for code_i in 0..10 {
        let mu: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let logvar: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.5..1.0)).collect();
        let code = LatentCode {
            mu: mu.clone(),
            logvar: logvar.clone(),
            z: None,
        };
        let closed = kl_divergence(&code).unwrap();
        // E_q[log q(z) - log p(z)] with z = mu + sigma * eps.
        let mut mc_rng = stream_rng(77, code_i);
        let n = 1_000_000;
        let mut sum = 0.0f64;
        for _ in 0..n {
            let mut log_ratio = 0.0;
            for j in 0..dim {
                let eps: f64 = StandardNormal.sample(&mut mc_rng);
                let lv = logvar[j] as f64;
                let z = mu[j] as f64 + (0.5 * lv).exp() * eps;
                log_ratio += -0.5 * lv - 0.5 * eps * eps + 0.5 * z * z;
            }
            sum += log_ratio;
        }
        let mc = sum / n as f64;
        worst = worst.max((closed - mc).abs() / mc.abs());
    }
    let zero = kl_divergence(&LatentCode {
        mu: vec![0.0; 8],
        logvar: vec![0.0; 8],
        z: None,
    })
    .unwrap();
    outcome(
        worst <= 0.01 && zero == 0.0,
        format!("KL vs 1e6-sample Monte Carlo worst rel error {worst:.2e} (limit 1e-2), KL at origin {zero}"),
    )
}

fn criterion_3() -> Outcome {
    let data = synthesize(&feasible_spec(), 42).unwrap();
    let s = split(&data, SplitRatios::default(), 42).unwrap();
    let arch = GanArchitecture {
        resolution: 32,
        base_channels: 4,
        latent_dim: 8,
        n_identities: s.train.n_identities(),
    };
    let g = GeneratorState::init(arch, s.train.identities(), 9).unwrap();
    let mut failures = Vec::new();
    for k in [3usize, 6, 9, 12] {
        let ks = k_same_select(&s.test, &KSameConfig::new(k), 100 + k as u64).unwrap();
        if !verify_k_anonymity(&ks, k).unwrap().pass {
            failures.push(format!("k-same k={k}"));
        }
        let avg = averaged_privatize_set(&g, &s.test, &s.train, k, &ReplacementPolicy::Random, 200 + k as u64).unwrap();
        if !verify_k_anonymity(&avg, k).unwrap().pass {
            failures.push(format!("averaged n={k}"));
        }
        for mut item in [ks[0].clone(), avg[0].clone()] {
            let kept: BTreeSet<u32> = item.source_identities.iter().copied().take(k - 1).collect();
            item.source_identities = kept.into_iter().collect();
            if verify_k_anonymity(&[item], k).unwrap().pass {
                failures.push(format!("mutated k-1 provenance accepted at k={k}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "k-anonymity holds for K-Same-Select and averaged sets at k in {3,6,9,12}; k-1 mutations rejected \
             (24-identity synth, 12 per class)"
                .into()
        } else {
            format!("violations: {}", failures.join(", "))
        },
    )
}

fn criterion_4(s: &Split, m: &Models) -> Outcome {
    let mut accs = Vec::new();
    for k in [1usize, 3, 9, 15, 21] {
        let out = blur_set(
            &s.test,
            &BlurConfig {
                kernel_size: k,
                sigma: Sigma::AUTO,
            },
        )
        .unwrap();
        let row = evaluate_privatized(&m.identity, &m.task, "Blurring", "", &out).unwrap();
        accs.push(row.identity_acc);
    }
    let exact = accs[0] == m.baseline.identity_acc;
    let monotone = accs.windows(2).all(|w| w[1] <= w[0] + 0.02);
    outcome(
        exact && monotone,
        format!(
            "identity accuracy baseline {:.4}, kernels 1/3/9/15/21: {}",
            m.baseline.identity_acc,
            accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" / ")
        ),
    )
}

struct GanRows {
    random: EvaluationRow,
    same: EvaluationRow,
    different: EvaluationRow,
    averaged: EvaluationRow,
    averaged_k6: bool,
    epochs: usize,
}

fn gan_rows(s: &Split, m: &Models) -> GanRows {
    let hp = TrainingHyperparams {
        non_saturating: true,
        seed: 42,
        ..TrainingHyperparams::default()
    };
    let g = train_gan(&s.train, &s.val, &hp).unwrap().generator;
    let eval = |policy: ReplacementPolicy| {
        let out = privatize_set(&g, &s.test, &s.train, &policy, 7).unwrap();
        evaluate_privatized(&m.identity, &m.task, "PPRL-VGAN", &policy.name(), &out).unwrap()
    };
    let avg = averaged_privatize_set(&g, &s.test, &s.train, 6, &ReplacementPolicy::Random, 7).unwrap();
    GanRows {
        random: eval(ReplacementPolicy::Random),
        same: eval(ReplacementPolicy::SamePathology),
        different: eval(ReplacementPolicy::DifferentPathology),
        averaged: evaluate_privatized(&m.identity, &m.task, "PPRL-VGAN", "averaged", &avg).unwrap(),
        averaged_k6: verify_k_anonymity(&avg, 6).unwrap().pass,
        epochs: hp.epochs,
    }
}

fn criterion_5(s: &Split, m: &Models, r: &GanRows) -> Outcome {
    let chance = 1.0 / s.train.n_identities() as f64;
    let id = r.random.identity_acc;
    let repl = r.random.replacement_acc.unwrap();
    outcome(
        r.epochs <= 40 && id <= 0.25 * m.baseline.identity_acc && repl >= 2.0 * chance,
        format!(
            "{} epochs; random policy identity accuracy {id:.4} (limit {:.4}), replacement accuracy {repl:.4} \
             (floor {:.4})",
            r.epochs,
            0.25 * m.baseline.identity_acc,
            2.0 * chance
        ),
    )
}

fn criterion_6(m: &Models, r: &GanRows) -> Outcome {
    let floor = 0.8 * m.baseline.task_acc;
    outcome(
        r.same.task_f1 > r.different.task_f1 && r.same.task_acc >= floor,
        format!(
            "task F1 same {:.4} vs different {:.4}; same-pathology task accuracy {:.4} (floor {floor:.4})",
            r.same.task_f1, r.different.task_f1, r.same.task_acc
        ),
    )
}

fn criterion_7(r: &GanRows) -> Outcome {
    let avg = r.averaged.replacement_acc.unwrap();
    let limit = 0.5 * r.random.replacement_acc.unwrap();
    outcome(
        avg <= limit && r.averaged_k6,
        format!(
            "averaged (n=6) replacement accuracy {avg:.4} (limit {limit:.4}), k=6 anonymity {}",
            if r.averaged_k6 { "holds" } else { "violated" }
        ),
    )
}

fn criterion_8(s: &Split, m: &Models) -> Outcome {
    let spec = SynthSpec::default();
    let mask = spec.lesion_region.mask(spec.resolution);
    let ratio = |label: u8| {
        let (mut inside, mut outside, mut n) = (0.0, 0.0, 0);
        for sample in s.test.samples().iter().filter(|x| x.pathology == label) {
            let map = deep_taylor(&m.task, &sample.pixels, None).unwrap();
            let (a, b) = map.region_means(&mask);
            inside += a;
            outside += b;
            n += 1;
        }
        (inside / outside, n)
    };
    let (pos, n_pos) = ratio(1);
    let (neg, n_neg) = ratio(0);

    let cfg = ClassifierConfig {
        bias: false,
        epochs: 3,
        ..ClassifierConfig::default()
    };
    let bias_free = train_classifier(&s.train, &s.val, Target::Pathology, &cfg, 3).unwrap();
    let mut worst = 0.0f64;
    for sample in s.test.samples().iter().take(10) {
        let map = deep_taylor(&bias_free, &sample.pixels, None).unwrap();
        if map.output_score > 0.0 {
            worst = worst.max((map.total() - map.output_score).abs() / map.output_score);
        }
    }
    outcome(
        n_pos >= 20 && pos >= 1.5 && neg < 1.5 && worst <= 1e-3,
        format!(
            "lesion/outside relevance ratio positive {pos:.3} over {n_pos} images (floor 1.5), negative {neg:.3} \
             over {n_neg} (must be < 1.5); bias-free conservation worst rel error {worst:.2e}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    for n in 1..=6usize {
        for pm in 0u32..(1 << n) {
            for lm in 0u32..(1 << n) {
                let p: Vec<bool> = (0..n).map(|i| pm >> i & 1 == 1).collect();
                let l: Vec<bool> = (0..n).map(|i| lm >> i & 1 == 1).collect();
                let mut cm = [[0u64; 2]; 2];
                for i in 0..n {
                    cm[p[i] as usize][l[i] as usize] += 1;
                }
                let (tp, fp, fn_, tn) = (cm[1][1], cm[1][0], cm[0][1], cm[0][0]);
                let acc = (tp + tn) as f64 / n as f64;
                // F1 = 2PR/(P+R) as an exact fraction: with P = tp/(tp+fp) and
                // R = tp/(tp+fn), numerator and denominator share (tp+fp)(tp+fn).
                let (num, den) = if tp == 0 {
                    (0, 1)
                } else {
                    let common = (tp + fp) * (tp + fn_);
                    (2 * tp * tp * common, tp * (2 * tp + fp + fn_) * common)
                };
                let g = gcd(num, den);
                let expected_f1 = (num / g) as f64 / (den / g) as f64;
                cases += 1;
                if accuracy_of(&p, &l).unwrap() != acc || f1(&p, &l).unwrap() != expected_f1 {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{cases} prediction/label combinations, {mismatches} mismatches against the confusion-matrix oracle"),
    )
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn criterion_10() -> Outcome {
    let text = r#"
[dataset.synth]
n_identities = 24
images_per_identity = 8
resolution = 32
pathology_fraction = 0.5

[pprlvgan.train]
epochs = 2
base_channels = 4
latent_dim = 8
non_saturating = true

[classifier]
epochs = 3
base_channels = 4

[saliency]
count = 2
"#;
    let base = RunConfig::from_toml(text).unwrap();
    let mut reports = Vec::new();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let cfg = RunConfig {
            out_dir: dir.path().to_path_buf(),
            ..base.clone()
        };
        let layout = Layout::new(&cfg);
        let csv = cmd_pipeline(&cfg, &layout).unwrap();
        let on_disk = std::fs::read(layout.report()).unwrap();
        assert_eq!(on_disk, csv.as_bytes());
        reports.push(on_disk);
    }
    let rows = parse_report(std::str::from_utf8(&reports[0]).unwrap()).unwrap();
    let groups: Vec<&str> = rows.iter().map(|r| r.experiment.as_str()).collect();
    let mut expected = vec!["Baseline"];
    expected.extend(["PPRL-VGAN"; 5]);
    expected.extend(["Blurring"; 4]);
    expected.extend(["K-Same-Select"; 4]);
    let identical = reports[0] == reports[1];
    outcome(
        identical && groups == expected,
        format!(
            "two pipeline runs {} ({} bytes); {} data rows in groups baseline/PPRL-VGAN x5/blur x4/K-Same x4: {}",
            if identical { "byte-identical" } else { "differ" },
            reports[0].len(),
            rows.len(),
            groups == expected
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((n, o, t.elapsed().as_secs_f64()));
    };

    run(1, &mut criterion_1);
    run(2, &mut criterion_2);
    run(3, &mut criterion_3);
    run(9, &mut criterion_9);
    let t = Instant::now();
    let s = acceptance_split();
    let models = train_models(&s);
    let model_secs = t.elapsed().as_secs_f64();
    run(4, &mut || criterion_4(&s, &models));
    run(8, &mut || criterion_8(&s, &models));
    let t = Instant::now();
    let rows = gan_rows(&s, &models);
    let gan_secs = t.elapsed().as_secs_f64();
    run(5, &mut || criterion_5(&s, &models, &rows));
    run(6, &mut || criterion_6(&models, &rows));
    run(7, &mut || criterion_7(&rows));
    run(10, &mut criterion_10);

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, o, secs) in &results {
        // Shared fixtures are charged to the first criterion that needs them.
        let secs = match n {
            4 => secs + model_secs,
            5 => secs + gan_secs,
            _ => *secs,
        };
        if !o.pass {
            failed += 1;
        }
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2}: {status} | {} | {secs:.1}s", o.detail);
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
